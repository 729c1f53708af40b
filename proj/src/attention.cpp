#include "mgrasp/attention.hpp"

#include <cmath>

namespace mgrasp {

namespace {

constexpr double kLayerNormEps = 1e-5;

void check_square(const char* name, const Tensor& t, Index d) {
  if (t.rows() != d || t.cols() != d) {
    throw ShapeError(std::string(name) + ": expected " + shape_string(d, d) + ", got " + shape_string(t.rows(), t.cols()));
  }
}

void check_row(const char* name, const Tensor& t, Index d) {
  if (t.rows() != 1 || t.cols() != d) {
    throw ShapeError(std::string(name) + ": expected " + shape_string(1, d) + ", got " + shape_string(t.rows(), t.cols()));
  }
}

void check_features(const char* op, const Tensor& f, Index d) {
  if (f.cols() != d || f.rows() < 1) {
    throw ShapeError(std::string(op) + ": features " + shape_string(f.rows(), f.cols()) + " do not match width " +
                     std::to_string(d));
  }
}

Tensor scaled_scores(const Tensor& q, const Tensor& k, double width) {
  return scale(matmul(q, transpose(k)), 1.0 / std::sqrt(width));
}

}  // namespace

std::string_view to_string(QueryMode mode) {
  return mode == QueryMode::TextQuery ? "text-query" : "region-query";
}

QueryMode parse_query_mode(std::string_view name) {
  if (name == "text-query") return QueryMode::TextQuery;
  if (name == "region-query") return QueryMode::RegionQuery;
  throw ContractError("unknown query mode '" + std::string(name) + "'");
}

std::vector<std::pair<std::string, Tensor>> AttentionParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  const std::pair<const char*, const StreamWeights*> streams[] = {{"text", &text}, {"vis", &vis}, {"seg", &seg}};
  for (const auto& [prefix, w] : streams) {
    const std::string p = std::string("attn.") + prefix + ".";
    out.emplace_back(p + "w_q", w->query);
    out.emplace_back(p + "w_k", w->key);
    out.emplace_back(p + "w_v", w->value);
    out.emplace_back(p + "w_o", w->output);
    out.emplace_back(p + "ln_gain", w->ln_gain);
    out.emplace_back(p + "ln_bias", w->ln_bias);
  }
  return out;
}

void AttentionParams::validate() const {
  if (dim < 2) throw ContractError("attention: width must be at least 2");
  if (heads < 1 || dim % heads != 0) {
    throw ContractError("attention: width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                        " heads");
  }
  for (const StreamWeights* w : {&text, &vis, &seg}) {
    check_square("w_q", w->query, dim);
    check_square("w_k", w->key, dim);
    check_square("w_v", w->value, dim);
    check_square("w_o", w->output, dim);
    check_row("ln_gain", w->ln_gain, dim);
    check_row("ln_bias", w->ln_bias, dim);
  }
}

Attended single_head(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const StreamWeights& w) {
  if (k_in.rows() != v_in.rows()) {
    throw ShapeError("single_head: keys " + shape_string(k_in.rows(), k_in.cols()) + " and values " +
                     shape_string(v_in.rows(), v_in.cols()) + " differ in rows");
  }
  const Tensor q = matmul(q_in, w.query);
  const Tensor k = matmul(k_in, w.key);
  const Tensor v = matmul(v_in, w.value);
  Tensor weights = row_softmax(scaled_scores(q, k, static_cast<double>(w.query.cols())));
  Tensor values = matmul(weights, v);
  return {std::move(weights), std::move(values)};
}

Attended multi_head(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const StreamWeights& w,
                    Index heads) {
  const Index d = w.query.cols();
  if (heads < 1 || d % heads != 0) {
    throw ContractError("multi_head: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                        " heads");
  }
  if (k_in.rows() != v_in.rows()) {
    throw ShapeError("multi_head: keys " + shape_string(k_in.rows(), k_in.cols()) + " and values " +
                     shape_string(v_in.rows(), v_in.cols()) + " differ in rows");
  }
  const Index dh = d / heads;
  const Tensor q = matmul(q_in, w.query);
  const Tensor k = matmul(k_in, w.key);
  const Tensor v = matmul(v_in, w.value);

  std::vector<Tensor> head_out;
  head_out.reserve(static_cast<std::size_t>(heads));
  Tensor weight_sum;
  for (Index h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, dh);
    const Tensor kh = slice_cols(k, h * dh, dh);
    const Tensor vh = slice_cols(v, h * dh, dh);
    Tensor wh = row_softmax(scaled_scores(qh, kh, static_cast<double>(dh)));
    head_out.push_back(matmul(wh, vh));
    weight_sum = h == 0 ? wh : add(weight_sum, wh);
  }
  Tensor values = matmul(concat_cols(head_out), w.output);
  return {scale(weight_sum, 1.0 / static_cast<double>(heads)), std::move(values)};
}

Attended attend(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const StreamWeights& w, Index heads) {
  return heads == 1 ? single_head(q_in, k_in, v_in, w) : multi_head(q_in, k_in, v_in, w, heads);
}

StreamResult text_self_attention(const Tensor& f_text, const AttentionParams& p) {
  check_features("text_self_attention", f_text, p.dim);
  Attended a = attend(f_text, f_text, f_text, p.text, p.heads);
  Tensor z = layer_norm(add(a.values, f_text), p.text.ln_gain, p.text.ln_bias, kLayerNormEps);
  return {std::move(a.weights), std::move(z)};
}

StreamResult language_vision_cross_attention(const Tensor& f_text, const Tensor& f_vis, const AttentionParams& p,
                                             QueryMode mode) {
  check_features("language_vision_cross_attention", f_text, p.dim);
  check_features("language_vision_cross_attention", f_vis, p.dim);
  switch (mode) {
    case QueryMode::TextQuery: {
      const Tensor pooled = mean_rows(f_text);
      Attended a = attend(pooled, f_vis, f_vis, p.vis, p.heads);
      Tensor z = layer_norm(add_row(f_vis, a.values), p.vis.ln_gain, p.vis.ln_bias, kLayerNormEps);
      return {std::move(a.weights), std::move(z)};
    }
    case QueryMode::RegionQuery: {
      Attended a = attend(f_vis, f_text, f_text, p.vis, p.heads);
      Tensor z = layer_norm(add(a.values, f_vis), p.vis.ln_gain, p.vis.ln_bias, kLayerNormEps);
      return {std::move(a.weights), std::move(z)};
    }
  }
  throw ContractError("language_vision_cross_attention: unknown query mode");
}

StreamResult vision_segmentation_cross_attention(const Tensor& f_vis, const Tensor& f_seg, const AttentionParams& p) {
  check_features("vision_segmentation_cross_attention", f_vis, p.dim);
  check_features("vision_segmentation_cross_attention", f_seg, p.dim);
  if (f_vis.rows() != f_seg.rows()) {
    throw ShapeError("vision_segmentation_cross_attention: row counts differ " + shape_string(f_vis.rows(), f_vis.cols()) +
                     " vs " + shape_string(f_seg.rows(), f_seg.cols()));
  }
  Attended a = attend(f_vis, f_seg, f_seg, p.seg, p.heads);
  Tensor z = layer_norm(add(a.values, f_seg), p.seg.ln_gain, p.seg.ln_bias, kLayerNormEps);
  return {std::move(a.weights), std::move(z)};
}

AttentionOutput mask_guided_forward(const StreamFeatures& feats, const AttentionParams& p, QueryMode mode) {
  if (feats.text.rows() < 1) throw ContractError("mask_guided_forward: need at least one text token");
  if (feats.vis.rows() < 2) throw ContractError("mask_guided_forward: need at least two proposals");
  if (feats.vis.rows() != feats.seg.rows()) {
    throw ShapeError("mask_guided_forward: vis " + shape_string(feats.vis.rows(), feats.vis.cols()) + " and seg " +
                     shape_string(feats.seg.rows(), feats.seg.cols()) + " differ in rows");
  }
  StreamResult text = text_self_attention(feats.text, p);
  StreamResult vis = language_vision_cross_attention(feats.text, feats.vis, p, mode);
  StreamResult seg = vision_segmentation_cross_attention(feats.vis, feats.seg, p);
  return {std::move(text.z), std::move(vis.z), std::move(seg.z),
          std::move(text.weights), std::move(vis.weights), std::move(seg.weights)};
}

}  // namespace mgrasp
