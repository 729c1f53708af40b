#pragma once

#include "mgrasp/geometry.hpp"
#include "mgrasp/json_lines.hpp"
#include "mgrasp/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

namespace mgrasp {

struct GeneratorConfig {
  Index dim = 32;
  Index proposals = 8;
  Index tokens = 4;
  Index num_categories = 20;
  double noise_sigma = 0.1;
  /// Spread of an object instance around its category prototype; the
  /// instance latent is shared by appearance, segmentation and text.
  double instance_sigma = 1.0;
  bool occlusion = false;
  std::uint64_t seed = 42;

  /// round(0.7 · num_categories); categories [0, seen) are seen.
  Index seen_categories() const;
  Index unseen_categories() const { return num_categories - seen_categories(); }
  void validate() const;

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

Json to_json(const GeneratorConfig& cfg);
GeneratorConfig generator_config_from_json(const Json& j, std::size_t line);

/// Visual feature layout: [appearance | rho, pos_x, pos_y, encoded rect (5)].
inline constexpr Index kReservedCols = 8;
inline constexpr Index kRectScale = 2;

struct SceneExample {
  std::uint64_t scene_id = 0;
  Index category_id = 0;
  bool is_unseen = false;
  Index target_index = 0;
  Matrix vis;   // m×d
  Matrix seg;   // m×d
  Matrix text;  // K×d
  std::vector<std::uint8_t> labels;
  std::vector<GraspRect> gt_rects;

  friend bool operator==(const SceneExample& a, const SceneExample& b);
};

/// Seed-derived latent world shared by every scene of a configuration:
/// category prototypes and the fixed maps into each feature stream.
class SceneGenerator {
 public:
  explicit SceneGenerator(GeneratorConfig cfg);

  const GeneratorConfig& config() const { return cfg_; }
  Index semantic_dim() const { return cfg_.dim - kReservedCols; }

  /// Deterministic in (seed, category, scene_id). Training scenes draw their
  /// distractors from seen categories only.
  SceneExample generate_scene(Index category, std::uint64_t scene_id, bool training) const;

  /// Rectangle encoded in the reserved columns of a visual feature row.
  GraspRect decode_rect(const RowVector& vis_row) const;

  const Matrix& prototypes() const { return prototypes_; }  // categories × d_sem
  const Matrix& vis_map() const { return vis_map_; }        // d_sem × d_sem
  const Matrix& seg_map() const { return seg_map_; }        // d_sem × d
  const Matrix& text_map() const { return text_map_; }      // d_sem × d
  const Matrix& rect_map() const { return rect_map_; }      // 5 × 5

 private:
  GeneratorConfig cfg_;
  Matrix prototypes_;
  Matrix vis_map_;
  Matrix seg_map_;
  Matrix text_map_;
  Matrix rect_map_;
};

/// RNG stream for (seed, scene index, purpose tag).
std::mt19937_64 scene_rng(std::uint64_t seed, std::uint64_t scene_id, std::uint64_t tag);

struct SyntheticDataset {
  std::vector<SceneExample> train;        // seen categories only
  std::vector<SceneExample> eval_seen;
  std::vector<SceneExample> eval_unseen;  // categories never used for training
};

SyntheticDataset generate_dataset(const GeneratorConfig& cfg, std::size_t n_train, std::size_t n_eval_seen,
                                  std::size_t n_eval_unseen);

inline constexpr int kDatasetSchemaVersion = 1;

struct DatasetFile {
  GeneratorConfig config;
  std::vector<SceneExample> scenes;
};

Json scene_to_json(const SceneExample& s);
SceneExample scene_from_json(const Json& j, std::size_t line);

/// Header record with the configuration, then one scene per line.
void write_dataset(const std::filesystem::path& path, const GeneratorConfig& cfg,
                   std::span<const SceneExample> scenes);
DatasetFile read_dataset(const std::filesystem::path& path);

}  // namespace mgrasp
