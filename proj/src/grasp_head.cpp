#include "mgrasp/grasp_head.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace mgrasp {

namespace {

void check_shape(const char* name, const Tensor& t, Index rows, Index cols) {
  if (t.rows() != rows || t.cols() != cols) {
    throw ShapeError(std::string("grasp head ") + name + ": expected " + shape_string(rows, cols) + ", got " +
                     shape_string(t.rows(), t.cols()));
  }
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) { return add_row(matmul(x, w), b); }

}  // namespace

std::vector<std::pair<std::string, Tensor>> GraspHeadParams::named_tensors() const {
  return {{"head.fuse1_w", fuse1_w}, {"head.fuse1_b", fuse1_b},   {"head.fuse2_w", fuse2_w},
          {"head.fuse2_b", fuse2_b}, {"head.score_w", score_w},   {"head.score_b", score_b},
          {"head.regress_w", regress_w}, {"head.regress_b", regress_b}};
}

void GraspHeadParams::validate() const {
  const Index hid = fuse1_w.cols();
  if (fuse1_w.rows() % 2 != 0 || fuse1_w.rows() == 0) {
    throw ShapeError("grasp head fuse1_w: rows must be 2d, got " + shape_string(fuse1_w.rows(), fuse1_w.cols()));
  }
  check_shape("fuse1_b", fuse1_b, 1, hid);
  check_shape("fuse2_w", fuse2_w, hid, hid);
  check_shape("fuse2_b", fuse2_b, 1, hid);
  check_shape("score_w", score_w, hid, 2);
  check_shape("score_b", score_b, 1, 2);
  check_shape("regress_w", regress_w, hid, 5);
  check_shape("regress_b", regress_b, 1, 5);
}

GraspHeadOutput grasp_head_forward(const Tensor& z_text, const Tensor& z_vis, const GraspHeadParams& p) {
  const Index d = p.input_dim();
  if (z_text.cols() != d || z_vis.cols() != d || z_text.rows() < 1 || z_vis.rows() < 1) {
    throw ShapeError("grasp_head_forward: z_text " + shape_string(z_text.rows(), z_text.cols()) + " / z_vis " +
                     shape_string(z_vis.rows(), z_vis.cols()) + " do not match head width " + std::to_string(d));
  }
  const Index m = z_vis.rows();
  // Pooled text repeated for every proposal: ones(m×1)·pooled.
  const Tensor pooled = mean_rows(z_text);
  const Tensor text_rows = add_row(Tensor::zeros(m, d), pooled);
  const std::array<Tensor, 2> parts{text_rows, z_vis};
  const Tensor fused_in = concat_cols(parts);

  const Tensor hidden = relu(affine(fused_in, p.fuse1_w, p.fuse1_b));
  const Tensor fused = affine(hidden, p.fuse2_w, p.fuse2_b);

  Tensor logits = affine(fused, p.score_w, p.score_b);
  const Tensor raw = affine(fused, p.regress_w, p.regress_b);
  const std::array<Tensor, 2> rect_parts{slice_cols(raw, 0, 4), tanh(slice_cols(raw, 4, 1))};
  return {std::move(logits), concat_cols(rect_parts)};
}

GraspPrediction decode_prediction(const GraspHeadOutput& out) {
  const Matrix& logits = out.logits.value();
  const Matrix& params = out.rect_params.value();
  GraspPrediction pred;
  const Index m = logits.rows();
  pred.scores.reserve(static_cast<std::size_t>(m));
  pred.rects.reserve(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) {
    // Two-way softmax, written to stay exact for large logit gaps.
    pred.scores.push_back(1.0 / (1.0 + std::exp(logits(i, 1) - logits(i, 0))));
    GraspRect r;
    r.x = std::clamp(params(i, 0), 0.0, 1.0);
    r.y = std::clamp(params(i, 1), 0.0, 1.0);
    r.w = std::clamp(params(i, 2), 1e-6, 1.0);
    r.h = std::clamp(params(i, 3), 1e-6, 1.0);
    r.theta = canonical_angle(90.0 * params(i, 4));
    pred.rects.push_back(r);
  }
  if (m > 0) {
    pred.best_index = static_cast<std::size_t>(
        std::distance(pred.scores.begin(), std::max_element(pred.scores.begin(), pred.scores.end())));
  }
  return pred;
}

GraspPrediction fuse_and_score(const Tensor& z_text, const Tensor& z_vis, const GraspHeadParams& p) {
  return decode_prediction(grasp_head_forward(z_text, z_vis, p));
}

std::pair<GraspRect, std::size_t> select_best(const GraspPrediction& pred) {
  if (pred.scores.empty() || pred.scores.size() != pred.rects.size()) {
    throw ContractError("select_best: empty or inconsistent prediction");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < pred.scores.size(); ++i) {
    if (pred.scores[i] > pred.scores[best]) best = i;
  }
  return {pred.rects[best], best};
}

}  // namespace mgrasp
