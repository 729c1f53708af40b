#pragma once

#include "mgrasp/geometry.hpp"
#include "mgrasp/tensor.hpp"

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace mgrasp {

/// Fusion MLP (linear, relu, linear) followed by a 2-logit score head and a
/// 5-parameter regression head.
struct GraspHeadParams {
  Tensor fuse1_w;    // 2d×d_hid
  Tensor fuse1_b;    // 1×d_hid
  Tensor fuse2_w;    // d_hid×d_hid
  Tensor fuse2_b;    // 1×d_hid
  Tensor score_w;    // d_hid×2  (graspable, ungraspable)
  Tensor score_b;    // 1×2
  Tensor regress_w;  // d_hid×5  (x, y, w, h, angle pre-activation)
  Tensor regress_b;  // 1×5

  Index input_dim() const { return fuse1_w.rows() / 2; }
  Index hidden_dim() const { return fuse1_w.cols(); }
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  void validate() const;
};

/// Raw differentiable head outputs for every proposal.
struct GraspHeadOutput {
  Tensor logits;       // m×2
  Tensor rect_params;  // m×5 in loss units: x, y, w, h, theta / 90°
};

struct GraspPrediction {
  std::vector<double> scores;  // graspable probability per proposal
  std::vector<GraspRect> rects;
  std::size_t best_index = 0;
};

/// Pools z_text over tokens, pairs it with each z_vis row, and runs the head.
/// The angle output is 90°·tanh(·), carried here divided by 90°.
GraspHeadOutput grasp_head_forward(const Tensor& z_text, const Tensor& z_vis, const GraspHeadParams& p);

/// Softmax probabilities and decoded rectangles. Centres are clamped into
/// [0, 1] and sizes into [1e-6, 1].
GraspPrediction decode_prediction(const GraspHeadOutput& out);

GraspPrediction fuse_and_score(const Tensor& z_text, const Tensor& z_vis, const GraspHeadParams& p);

/// Highest-probability proposal; ties go to the lowest index.
std::pair<GraspRect, std::size_t> select_best(const GraspPrediction& pred);

}  // namespace mgrasp
