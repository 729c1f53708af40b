#include "mgrasp/losses.hpp"

#include <cmath>
#include <utility>

namespace mgrasp {

namespace {

constexpr double kProbFloor = 1e-12;

}  // namespace

void LossConfig::validate() const {
  if (!(alpha > 0.0)) throw ContractError("loss config: alpha must be positive");
  if (!(beta >= 0.0)) throw ContractError("loss config: beta must be non-negative");
  if (!(lambda_c >= 0.0)) throw ContractError("loss config: lambda_c must be non-negative");
  if (!(smooth_l1_delta > 0.0)) throw ContractError("loss config: smooth_l1_delta must be positive");
}

double similarity(const Matrix& a, const Matrix& b) {
  if (a.rows() != 1 || b.rows() != 1 || a.cols() != b.cols()) {
    throw ShapeError("similarity: expected two 1xd rows, got " + shape_string(a.rows(), a.cols()) + " and " +
                     shape_string(b.rows(), b.cols()));
  }
  Tape::Suspend no_record;
  const Tensor na = l2_normalize_rows(Tensor(a));
  const Tensor nb = l2_normalize_rows(Tensor(b));
  return na.value().row(0).dot(nb.value().row(0));
}

Tensor similarity_matrix(const Tensor& z_vis, const Tensor& z_seg) {
  if (z_vis.rows() != z_seg.rows() || z_vis.cols() != z_seg.cols()) {
    throw ShapeError("similarity_matrix: " + shape_string(z_vis.rows(), z_vis.cols()) + " vs " +
                     shape_string(z_seg.rows(), z_seg.cols()));
  }
  return matmul(l2_normalize_rows(z_vis), transpose(l2_normalize_rows(z_seg)));
}

HardNegatives mine_hard_negatives(const Matrix& s) {
  const Index m = s.rows();
  if (m < 2 || s.cols() != m) throw ContractError("mine_hard_negatives: need a square similarity matrix with m >= 2");
  HardNegatives out;
  out.seg_negative.resize(static_cast<std::size_t>(m));
  out.vis_negative.resize(static_cast<std::size_t>(m));
  for (Index a = 0; a < m; ++a) {
    Index best_i = -1;
    Index best_j = -1;
    for (Index k = 0; k < m; ++k) {
      if (k == a) continue;
      if (best_i < 0 || s(a, k) > s(a, best_i)) best_i = k;
      if (best_j < 0 || s(k, a) > s(best_j, a)) best_j = k;
    }
    out.seg_negative[static_cast<std::size_t>(a)] = best_i;
    out.vis_negative[static_cast<std::size_t>(a)] = best_j;
  }
  return out;
}

HardNegatives mine_hard_negatives(const Matrix& z_vis, const Matrix& z_seg) {
  if (z_vis.rows() < 2) throw ContractError("mine_hard_negatives: need at least two proposals");
  Tape::Suspend no_record;
  return mine_hard_negatives(similarity_matrix(Tensor(z_vis), Tensor(z_seg)).value());
}

Tensor correspondence_loss(const Tensor& z_vis, const Tensor& z_seg, const LossConfig& cfg) {
  const Index m = z_vis.rows();
  if (m < 2) throw ContractError("correspondence_loss: need at least two proposals");
  const Tensor s = similarity_matrix(z_vis, z_seg);
  const HardNegatives neg = mine_hard_negatives(s.value());

  std::vector<std::pair<Index, Index>> diag, seg_neg, vis_neg;
  for (Index a = 0; a < m; ++a) {
    diag.emplace_back(a, a);
    seg_neg.emplace_back(a, neg.seg_negative[static_cast<std::size_t>(a)]);
    vis_neg.emplace_back(neg.vis_negative[static_cast<std::size_t>(a)], a);
  }
  const Tensor positive = pick(s, diag);
  const Tensor margin_gap = add_scalar(-positive, cfg.alpha);
  const Tensor hinge_seg = relu(add(margin_gap, pick(s, seg_neg)));
  const Tensor hinge_vis = relu(add(margin_gap, pick(s, vis_neg)));
  return add(sum(hinge_seg), sum(hinge_vis));
}

RowVector rect_to_target(const GraspRect& r) {
  RowVector t(5);
  t << r.x, r.y, r.w, r.h, canonical_angle(r.theta) / 90.0;
  return t;
}

Tensor grasp_loss(const GraspHeadOutput& out, std::span<const std::uint8_t> labels,
                  std::span<const GraspRect> gt_rects, const LossConfig& cfg) {
  const Index m = out.logits.rows();
  if (m < 1) throw ContractError("grasp_loss: no proposals");
  if (out.logits.cols() != 2 || out.rect_params.rows() != m || out.rect_params.cols() != 5) {
    throw ShapeError("grasp_loss: logits " + shape_string(out.logits.rows(), out.logits.cols()) + ", rects " +
                     shape_string(out.rect_params.rows(), out.rect_params.cols()));
  }
  if (static_cast<Index>(labels.size()) != m || static_cast<Index>(gt_rects.size()) != m) {
    throw ContractError("grasp_loss: labels and gt_rects must have one entry per proposal");
  }

  const Tensor log_probs = log(clamp(row_softmax(out.logits), kProbFloor, 1.0 - kProbFloor));
  std::vector<std::pair<Index, Index>> class_entries;
  std::vector<Index> positives;
  for (Index i = 0; i < m; ++i) {
    const bool pos = labels[static_cast<std::size_t>(i)] != 0;
    class_entries.emplace_back(i, pos ? 0 : 1);
    if (pos) positives.push_back(i);
  }
  Tensor loss = -sum(pick(log_probs, class_entries));
  if (positives.empty() || cfg.beta == 0.0) return loss;

  std::vector<std::pair<Index, Index>> reg_entries;
  Matrix target(static_cast<Index>(positives.size()) * 5, 1);
  Index k = 0;
  for (Index i : positives) {
    const RowVector t = rect_to_target(gt_rects[static_cast<std::size_t>(i)]);
    for (Index c = 0; c < 5; ++c) {
      reg_entries.emplace_back(i, c);
      target(k++, 0) = t(c);
    }
  }
  const Tensor residual = sub(pick(out.rect_params, reg_entries), Tensor(std::move(target)));
  return add(loss, scale(sum(smooth_l1(residual, cfg.smooth_l1_delta)), cfg.beta));
}

Tensor total_loss(const Tensor& l_grasp, const Tensor& l_cor, const LossConfig& cfg) {
  return add(l_grasp, scale(l_cor, cfg.lambda_c));
}

}  // namespace mgrasp
