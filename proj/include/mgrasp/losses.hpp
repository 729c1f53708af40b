#pragma once

#include "mgrasp/geometry.hpp"
#include "mgrasp/grasp_head.hpp"
#include "mgrasp/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace mgrasp {

struct LossConfig {
  double alpha = 0.1;            // triplet margin
  double beta = 1.4;             // regression weight
  double lambda_c = 0.8;         // correspondence weight
  double smooth_l1_delta = 1.0;  // smooth-L1 transition point

  void validate() const;
};

/// Inner product of the L2-normalised rows `a` and `b` (each 1×d).
double similarity(const Matrix& a, const Matrix& b);

/// Differentiable m×m matrix S(p, q) = s(z_vis_p, z_seg_q).
Tensor similarity_matrix(const Tensor& z_vis, const Tensor& z_seg);

/// Hardest negatives for every anchor index m:
///   seg_negative[m] = argmax_{i≠m} s(z_vis_m, z_seg_i)
///   vis_negative[m] = argmax_{j≠m} s(z_vis_j, z_seg_m)
/// Ties go to the lowest index.
struct HardNegatives {
  std::vector<Index> seg_negative;
  std::vector<Index> vis_negative;
};

HardNegatives mine_hard_negatives(const Matrix& z_vis, const Matrix& z_seg);
/// Same mining from a precomputed similarity matrix.
HardNegatives mine_hard_negatives(const Matrix& similarities);

/// Bidirectional triplet hinge over mined hard negatives, summed over anchors.
/// Mined indices are constants for differentiation.
Tensor correspondence_loss(const Tensor& z_vis, const Tensor& z_seg, const LossConfig& cfg);

/// −Σ_pos log p_g − Σ_neg log p_u + β Σ_pos smoothL1(G − G_gt).
/// `labels[i]` non-zero marks proposal i positive; `gt_rects[i]` is its target.
Tensor grasp_loss(const GraspHeadOutput& out, std::span<const std::uint8_t> labels,
                  std::span<const GraspRect> gt_rects, const LossConfig& cfg);

/// Ground-truth rectangle in regression units: (x, y, w, h, theta / 90°).
RowVector rect_to_target(const GraspRect& r);

Tensor total_loss(const Tensor& l_grasp, const Tensor& l_cor, const LossConfig& cfg);

}  // namespace mgrasp
