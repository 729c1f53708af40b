#pragma once

#include "mgrasp/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mgrasp {

inline constexpr double kIsolatedOpTolerance = 1e-5;
inline constexpr double kComposedTolerance = 1e-4;

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::string worst_param;
  Index row = 0;
  Index col = 0;

  bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool passed() const;
  /// Entry with the largest error relative to its tolerance.
  const GradCheckEntry& worst() const;
};

/// Finite-difference checks of every differentiable op, every attention
/// stream in both query modes, the grasp head, both losses, and the full model.
/// `tamper`, when set, perturbs analytic gradients before comparison.
GradCheckReport run_gradcheck_suite(std::uint64_t seed = 7, const GradTamper& tamper = {});

}  // namespace mgrasp
