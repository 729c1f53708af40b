#include "mgrasp/gradcheck_suite.hpp"

#include "mgrasp/attention.hpp"
#include "mgrasp/grasp_head.hpp"
#include "mgrasp/losses.hpp"
#include "mgrasp/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>

namespace mgrasp {

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.passed(); });
}

const GradCheckEntry& GradCheckReport::worst() const {
  if (entries.empty()) throw ContractError("gradcheck report is empty");
  return *std::max_element(entries.begin(), entries.end(), [](const GradCheckEntry& a, const GradCheckEntry& b) {
    return a.max_rel_error / a.tolerance < b.max_rel_error / b.tolerance;
  });
}

namespace {

// Step is 1e-5 everywhere, so inputs keep at least this distance from any kink.
constexpr double kKinkMargin = 1e-3;

Matrix uniform_matrix(Index rows, Index cols, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = u(rng);
  }
  return m;
}

// Entries with magnitude in [lo, hi] and random sign.
Matrix signed_matrix(Index rows, Index cols, double lo, double hi, std::mt19937_64& rng) {
  Matrix m = uniform_matrix(rows, cols, lo, hi, rng);
  std::bernoulli_distribution flip(0.5);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      if (flip(rng)) m(r, c) = -m(r, c);
    }
  }
  return m;
}

Tensor param(Matrix m) { return Tensor(std::move(m), true); }

// Random-weighted sum, so no output entry has an identically zero gradient.
// The weights depend only on `key` and the shape, so repeated evaluations agree.
Tensor weighted_sum(const Tensor& t, std::uint64_t key) {
  std::mt19937_64 rng(key ^ (static_cast<std::uint64_t>(t.rows()) << 32) ^ static_cast<std::uint64_t>(t.cols()));
  return sum(mul(t, Tensor(signed_matrix(t.rows(), t.cols(), 0.5, 1.5, rng))));
}

class Suite {
 public:
  Suite(std::uint64_t seed, const GradTamper& tamper) : rng_(seed), tamper_(tamper) {}

  std::mt19937_64& rng() { return rng_; }

  // `build` returns the scalar to check, given the parameter list.
  template <typename Build>
  void check(const std::string& name, double tol, std::vector<std::pair<std::string, Tensor>> params, Build build) {
    std::vector<Tensor> tensors;
    for (auto& [n, t] : params) tensors.push_back(t);
    const GradCheckResult r = grad_check([&] { return build(tensors); }, tensors, 1e-5, tamper_);
    GradCheckEntry e;
    e.name = name;
    e.max_rel_error = r.max_rel_error;
    e.tolerance = tol;
    e.worst_param = params.empty() ? "" : params[r.param].first;
    e.row = r.row;
    e.col = r.col;
    report_.entries.push_back(std::move(e));
  }

  GradCheckReport take() { return std::move(report_); }

 private:
  std::mt19937_64 rng_;
  GradTamper tamper_;
  GradCheckReport report_;
};

using Params = std::vector<std::pair<std::string, Tensor>>;

void check_ops(Suite& s) {
  auto& rng = s.rng();
  const double tol = kIsolatedOpTolerance;
  const Tensor w34 = Tensor(signed_matrix(3, 4, 0.5, 1.5, rng));

  s.check("matmul", tol, {{"a", param(uniform_matrix(3, 5, -1, 1, rng))}, {"b", param(uniform_matrix(5, 4, -1, 1, rng))}},
          [&](auto& p) { return sum(mul(matmul(p[0], p[1]), w34)); });
  s.check("transpose", tol, {{"a", param(uniform_matrix(4, 3, -1, 1, rng))}},
          [&](auto& p) { return sum(mul(transpose(p[0]), w34)); });
  s.check("add", tol, {{"a", param(uniform_matrix(3, 4, -1, 1, rng))}, {"b", param(uniform_matrix(3, 4, -1, 1, rng))}},
          [&](auto& p) { return sum(mul(add(p[0], p[1]), w34)); });
  s.check("sub", tol, {{"a", param(uniform_matrix(3, 4, -1, 1, rng))}, {"b", param(uniform_matrix(3, 4, -1, 1, rng))}},
          [&](auto& p) { return sum(mul(sub(p[0], p[1]), w34)); });
  s.check("mul", tol, {{"a", param(uniform_matrix(3, 4, -1, 1, rng))}, {"b", param(uniform_matrix(3, 4, -1, 1, rng))}},
          [&](auto& p) { return sum(mul(mul(p[0], p[1]), w34)); });
  s.check("scale", tol, {{"a", param(uniform_matrix(3, 4, -1, 1, rng))}},
          [&](auto& p) { return sum(mul(scale(p[0], -1.7), w34)); });
  s.check("add_scalar", tol, {{"a", param(uniform_matrix(3, 4, -1, 1, rng))}},
          [&](auto& p) { return sum(mul(mul(add_scalar(p[0], 0.3), p[0]), w34)); });
  s.check("add_row", tol, {{"a", param(uniform_matrix(3, 4, -1, 1, rng))}, {"row", param(uniform_matrix(1, 4, -1, 1, rng))}},
          [&](auto& p) { return sum(mul(add_row(p[0], p[1]), w34)); });
  s.check("relu", tol, {{"a", param(signed_matrix(3, 4, 0.1, 1.0, rng))}},
          [&](auto& p) { return sum(mul(relu(p[0]), w34)); });
  s.check("tanh", tol, {{"a", param(uniform_matrix(3, 4, -2, 2, rng))}},
          [&](auto& p) { return sum(mul(tanh(p[0]), w34)); });
  s.check("exp", tol, {{"a", param(uniform_matrix(3, 4, -2, 2, rng))}},
          [&](auto& p) { return sum(mul(exp(p[0]), w34)); });
  s.check("log", tol, {{"a", param(uniform_matrix(3, 4, 0.2, 3, rng))}},
          [&](auto& p) { return sum(mul(log(p[0]), w34)); });
  {
    // Values keep away from both bounds.
    Matrix a = uniform_matrix(3, 4, 0.1, 0.4, rng);
    for (Index k = 0; k < a.size(); ++k) {
      if (k % 3 == 0) a.data()[k] = -a.data()[k];
      if (k % 3 == 2) a.data()[k] += 0.7;
    }
    s.check("clamp", tol, {{"a", param(std::move(a))}},
            [&](auto& p) { return sum(mul(clamp(p[0], -0.05, 0.6), w34)); });
  }
  {
    Matrix a = signed_matrix(3, 4, 0.1, 0.8, rng);
    a.row(0) = signed_matrix(1, 4, 1.2, 2.5, rng);
    s.check("smooth_l1", tol, {{"a", param(std::move(a))}},
            [&](auto& p) { return sum(mul(smooth_l1(p[0], 1.0), w34)); });
  }
  s.check("row_softmax", tol, {{"a", param(uniform_matrix(3, 4, -2, 2, rng))}},
          [&](auto& p) { return sum(mul(row_softmax(p[0]), w34)); });
  s.check("layer_norm", tol,
          {{"a", param(uniform_matrix(3, 4, -2, 2, rng))},
           {"gain", param(uniform_matrix(1, 4, 0.5, 1.5, rng))},
           {"bias", param(uniform_matrix(1, 4, -0.5, 0.5, rng))}},
          [&](auto& p) { return sum(mul(layer_norm(p[0], p[1], p[2]), w34)); });
  s.check("l2_normalize_rows", tol, {{"a", param(uniform_matrix(3, 4, -2, 2, rng))}},
          [&](auto& p) { return sum(mul(l2_normalize_rows(p[0]), w34)); });
  s.check("concat_cols", tol, {{"a", param(uniform_matrix(3, 1, -1, 1, rng))}, {"b", param(uniform_matrix(3, 3, -1, 1, rng))}},
          [&](auto& p) {
            const std::array<Tensor, 2> parts{p[0], p[1]};
            return sum(mul(concat_cols(parts), w34));
          });
  s.check("slice_rows", tol, {{"a", param(uniform_matrix(5, 4, -1, 1, rng))}},
          [&](auto& p) { return sum(mul(slice_rows(p[0], 1, 3), w34)); });
  s.check("slice_cols", tol, {{"a", param(uniform_matrix(3, 7, -1, 1, rng))}},
          [&](auto& p) { return sum(mul(slice_cols(p[0], 2, 4), w34)); });
  {
    const Tensor w14 = Tensor(signed_matrix(1, 4, 0.5, 1.5, rng));
    s.check("mean_rows", tol, {{"a", param(uniform_matrix(3, 4, -1, 1, rng))}},
            [&](auto& p) { return sum(mul(mean_rows(p[0]), w14)); });
  }
  s.check("sum", tol, {{"a", param(uniform_matrix(3, 4, -1, 1, rng))}},
          [&](auto& p) { return mul(sum(mul(p[0], p[0])), sum(p[0])); });
  {
    const std::vector<std::pair<Index, Index>> entries{{0, 1}, {2, 3}, {1, 0}, {0, 1}};
    const Tensor w41 = Tensor(signed_matrix(4, 1, 0.5, 1.5, rng));
    s.check("pick", tol, {{"a", param(uniform_matrix(3, 4, -1, 1, rng))}},
            [&, entries](auto& p) { return sum(mul(pick(p[0], entries), w41)); });
  }
}

StreamWeights random_stream(Index d, std::mt19937_64& rng) {
  const double b = 1.0 / std::sqrt(static_cast<double>(d));
  return {param(uniform_matrix(d, d, -b, b, rng)),      param(uniform_matrix(d, d, -b, b, rng)),
          param(uniform_matrix(d, d, -b, b, rng)),      param(uniform_matrix(d, d, -b, b, rng)),
          param(uniform_matrix(1, d, 0.5, 1.5, rng)),   param(uniform_matrix(1, d, -0.2, 0.2, rng))};
}

Params stream_params(const std::string& prefix, const StreamWeights& w, bool with_output) {
  Params p{{prefix + ".w_q", w.query}, {prefix + ".w_k", w.key}, {prefix + ".w_v", w.value}};
  if (with_output) p.emplace_back(prefix + ".w_o", w.output);
  p.emplace_back(prefix + ".ln_gain", w.ln_gain);
  p.emplace_back(prefix + ".ln_bias", w.ln_bias);
  return p;
}

AttentionParams random_attention(Index d, Index heads, std::mt19937_64& rng) {
  AttentionParams a;
  a.dim = d;
  a.heads = heads;
  a.text = random_stream(d, rng);
  a.vis = random_stream(d, rng);
  a.seg = random_stream(d, rng);
  return a;
}

void check_attention(Suite& s) {
  auto& rng = s.rng();
  const double tol = kComposedTolerance;
  const Index d = 8;
  const Index K = 3;
  const Index m = 5;

  for (Index heads : {Index{1}, Index{2}}) {
    const AttentionParams a = random_attention(d, heads, rng);
    const Tensor f_text(uniform_matrix(K, d, -1, 1, rng));
    const Tensor f_vis(uniform_matrix(m, d, -1, 1, rng));
    const Tensor f_seg(uniform_matrix(m, d, -1, 1, rng));
    const std::string tag = "[H=" + std::to_string(heads) + "]";
    const std::uint64_t key = rng();
    const bool out_proj = heads > 1;

    {
      Params p{{"q_in", param(f_vis.value())}, {"k_in", param(f_seg.value())}, {"v_in", param(f_seg.value())}};
      for (auto& item : stream_params("w", a.vis, out_proj)) p.push_back(item);
      const Tensor wv(signed_matrix(m, d, 0.5, 1.5, rng));
      const Tensor ww(signed_matrix(m, m, 0.5, 1.5, rng));
      s.check(heads == 1 ? "single_head" : "multi_head" + tag, tol, p, [&, heads](auto& t) {
        const StreamWeights w{t[3], t[4], t[5], out_proj ? t[6] : a.vis.output, a.vis.ln_gain, a.vis.ln_bias};
        const Attended r = heads == 1 ? single_head(t[0], t[1], t[2], w) : multi_head(t[0], t[1], t[2], w, heads);
        return add(sum(mul(r.values, wv)), sum(mul(r.weights, ww)));
      });
    }
    {
      Params p{{"f_text", param(f_text.value())}};
      for (auto& item : stream_params("attn.text", a.text, out_proj)) p.push_back(item);
      s.check("text_self_attention" + tag, tol, p, [&](auto& t) {
        AttentionParams ap = a;
        ap.text = {t[1], t[2], t[3], out_proj ? t[4] : a.text.output, t[p.size() - 2], t[p.size() - 1]};
        const StreamResult r = text_self_attention(t[0], ap);
        return add(weighted_sum(r.z, key), weighted_sum(r.weights, key + 1));
      });
    }
    for (QueryMode mode : {QueryMode::TextQuery, QueryMode::RegionQuery}) {
      Params p{{"f_text", param(f_text.value())}, {"f_vis", param(f_vis.value())}};
      for (auto& item : stream_params("attn.vis", a.vis, out_proj)) p.push_back(item);
      s.check("language_vision_cross_attention[" + std::string(to_string(mode)) + "]" + tag, tol, p, [&, mode](auto& t) {
        AttentionParams ap = a;
        ap.vis = {t[2], t[3], t[4], out_proj ? t[5] : a.vis.output, t[p.size() - 2], t[p.size() - 1]};
        const StreamResult r = language_vision_cross_attention(t[0], t[1], ap, mode);
        return add(weighted_sum(r.z, key), weighted_sum(r.weights, key + 1));
      });
    }
    {
      Params p{{"f_vis", param(f_vis.value())}, {"f_seg", param(f_seg.value())}};
      for (auto& item : stream_params("attn.seg", a.seg, out_proj)) p.push_back(item);
      s.check("vision_segmentation_cross_attention" + tag, tol, p, [&](auto& t) {
        AttentionParams ap = a;
        ap.seg = {t[2], t[3], t[4], out_proj ? t[5] : a.seg.output, t[p.size() - 2], t[p.size() - 1]};
        const StreamResult r = vision_segmentation_cross_attention(t[0], t[1], ap);
        return add(weighted_sum(r.z, key), weighted_sum(r.weights, key + 1));
      });
    }
  }
}

// Smallest distance of a relu pre-activation from zero.
double head_margin(const Tensor& z_text, const Tensor& z_vis, const GraspHeadParams& h) {
  const Index m = z_vis.rows();
  Matrix in(m, 2 * z_vis.cols());
  in.leftCols(z_vis.cols()) = z_text.value().colwise().mean().replicate(m, 1);
  in.rightCols(z_vis.cols()) = z_vis.value();
  const Matrix pre = (in * h.fuse1_w.value()).rowwise() + h.fuse1_b.value().row(0);
  return pre.cwiseAbs().minCoeff();
}

// Smallest distance of the correspondence loss from a hinge kink or a mining tie.
double correspondence_margin(const Matrix& z_vis, const Matrix& z_seg, double alpha) {
  Matrix a = z_vis;
  Matrix b = z_seg;
  a.rowwise().normalize();
  b.rowwise().normalize();
  const Matrix sim = a * b.transpose();
  const Index m = sim.rows();
  double margin = std::numeric_limits<double>::infinity();
  auto scan = [&](auto value_at) {
    for (Index i = 0; i < m; ++i) {
      double top = -std::numeric_limits<double>::infinity();
      double second = top;
      for (Index j = 0; j < m; ++j) {
        if (j == i) continue;
        const double v = value_at(i, j);
        if (v > top) {
          second = top;
          top = v;
        } else if (v > second) {
          second = v;
        }
      }
      margin = std::min(margin, std::abs(alpha - value_at(i, i) + top));
      if (m > 2) margin = std::min(margin, top - second);
    }
  };
  scan([&](Index i, Index j) { return sim(i, j); });
  scan([&](Index i, Index j) { return sim(j, i); });
  return margin;
}

GraspHeadParams random_head(Index d, Index hid, std::mt19937_64& rng) {
  auto w = [&](Index in, Index out) {
    const double b = 1.0 / std::sqrt(static_cast<double>(in));
    return param(uniform_matrix(in, out, -b, b, rng));
  };
  auto bias = [&](Index out) { return param(uniform_matrix(1, out, -0.1, 0.1, rng)); };
  return {w(2 * d, hid), bias(hid), w(hid, hid), bias(hid), w(hid, 2), bias(2), w(hid, 5), bias(5)};
}

GraspHeadParams head_from(std::span<const Tensor> t) {
  return {t[0], t[1], t[2], t[3], t[4], t[5], t[6], t[7]};
}

void random_targets(Index m, std::mt19937_64& rng, std::vector<std::uint8_t>& labels, std::vector<GraspRect>& rects) {
  labels.assign(static_cast<std::size_t>(m), 0);
  labels[static_cast<std::size_t>(std::uniform_int_distribution<Index>(0, m - 1)(rng))] = 1;
  rects.clear();
  std::uniform_real_distribution<double> u(0.1, 0.9);
  std::uniform_real_distribution<double> angle(-80.0, 80.0);
  for (Index i = 0; i < m; ++i) rects.push_back({u(rng), u(rng), 0.5 * u(rng), 0.5 * u(rng), angle(rng)});
}

void check_head_and_losses(Suite& s) {
  auto& rng = s.rng();
  const double tol = kComposedTolerance;
  const Index d = 6;
  const Index hid = 7;
  const Index K = 3;
  const Index m = 5;
  const LossConfig cfg;

  // Grasp head: resample until no relu pre-activation sits near its kink.
  for (int attempt = 0;; ++attempt) {
    const GraspHeadParams h = random_head(d, hid, rng);
    const Tensor z_text(uniform_matrix(K, d, -1, 1, rng));
    const Tensor z_vis(uniform_matrix(m, d, -1, 1, rng));
    if (head_margin(z_text, z_vis, h) < kKinkMargin && attempt < 100) continue;
    Params p{{"z_text", param(z_text.value())}, {"z_vis", param(z_vis.value())}};
    for (auto& item : h.named_tensors()) p.push_back(item);
    const Tensor wl(signed_matrix(m, 2, 0.5, 1.5, rng));
    const Tensor wr(signed_matrix(m, 5, 0.5, 1.5, rng));
    s.check("grasp_head", tol, p, [&](auto& t) {
      const GraspHeadOutput out = grasp_head_forward(t[0], t[1], head_from(std::span(t).subspan(2)));
      return add(sum(mul(out.logits, wl)), sum(mul(out.rect_params, wr)));
    });

    std::vector<std::uint8_t> labels;
    std::vector<GraspRect> rects;
    random_targets(m, rng, labels, rects);
    Params q{{"logits", param(uniform_matrix(m, 2, -2, 2, rng))}, {"rect_params", param(uniform_matrix(m, 5, -0.9, 0.9, rng))}};
    s.check("grasp_loss", tol, q, [&](auto& t) { return grasp_loss({t[0], t[1]}, labels, rects, cfg); });
    break;
  }

  for (int attempt = 0;; ++attempt) {
    const Matrix zv = uniform_matrix(m, d, -1, 1, rng);
    const Matrix zs = uniform_matrix(m, d, -1, 1, rng);
    const std::uint64_t key = rng();
    if (correspondence_margin(zv, zs, cfg.alpha) < kKinkMargin && attempt < 100) continue;
    s.check("similarity_matrix", tol, {{"z_vis", param(zv)}, {"z_seg", param(zs)}},
            [&](auto& t) { return weighted_sum(similarity_matrix(t[0], t[1]), key); });
    s.check("correspondence_loss", tol, {{"z_vis", param(zv)}, {"z_seg", param(zs)}},
            [&](auto& t) { return correspondence_loss(t[0], t[1], cfg); });
    break;
  }
}

void check_full_model(Suite& s) {
  auto& rng = s.rng();
  const Index d = 8;
  const Index K = 3;
  const Index m = 5;

  struct Case {
    Index heads;
    QueryMode mode;
  };
  for (const Case c : {Case{1, QueryMode::TextQuery}, Case{2, QueryMode::TextQuery}, Case{4, QueryMode::TextQuery},
                       Case{1, QueryMode::RegionQuery}, Case{4, QueryMode::RegionQuery}}) {
    for (int attempt = 0;; ++attempt) {
      ModelParams model = init_params(d, c.heads, 2 * d, rng());
      // Non-trivial layer-norm affine and head biases.
      for (auto& [name, t] : model.named_tensors()) {
        if (name.find("ln_") != std::string::npos || name.find("_b") != std::string::npos) {
          t.mutable_value().array() += uniform_matrix(t.rows(), t.cols(), -0.2, 0.2, rng).array();
        }
      }
      SceneExample scene;
      scene.text = uniform_matrix(K, d, -1, 1, rng);
      scene.vis = uniform_matrix(m, d, -1, 1, rng);
      scene.seg = uniform_matrix(m, d, -1, 1, rng);
      random_targets(m, rng, scene.labels, scene.gt_rects);
      TrainConfig cfg;
      cfg.mode = c.mode;
      cfg.heads = c.heads;

      const SceneForward fwd = forward_scene(model, scene, c.mode);
      const double margin =
          std::min(head_margin(fwd.attention.z_text, fwd.attention.z_vis, model.head),
                   correspondence_margin(fwd.attention.z_vis.value(), fwd.attention.z_seg.value(), cfg.loss.alpha));
      if (margin < kKinkMargin && attempt < 100) continue;

      const std::string name = "full_model[" + std::string(to_string(c.mode)) + ",H=" + std::to_string(c.heads) + "]";
      s.check(name, kComposedTolerance, model.named_tensors(), [&](auto& t) {
        (void)t;
        return scene_loss(model, scene, cfg);
      });
      break;
    }
  }
}

}  // namespace

GradCheckReport run_gradcheck_suite(std::uint64_t seed, const GradTamper& tamper) {
  Suite s(seed, tamper);
  check_ops(s);
  check_attention(s);
  check_head_and_losses(s);
  check_full_model(s);
  return s.take();
}

}  // namespace mgrasp
