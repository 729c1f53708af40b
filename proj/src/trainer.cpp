#include "mgrasp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

namespace mgrasp {

namespace {

Tensor uniform_tensor(Index rows, Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = u(rng);
  }
  return Tensor(std::move(m), true);
}

StreamWeights init_stream(Index d, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  StreamWeights w;
  w.query = uniform_tensor(d, d, bound, rng);
  w.key = uniform_tensor(d, d, bound, rng);
  w.value = uniform_tensor(d, d, bound, rng);
  w.output = uniform_tensor(d, d, bound, rng);
  w.ln_gain = Tensor(Matrix::Ones(1, d), true);
  w.ln_bias = Tensor::zeros(1, d, true);
  return w;
}

StreamWeights clone_stream(const StreamWeights& w) {
  return {w.query.clone(), w.key.clone(), w.value.clone(), w.output.clone(), w.ln_gain.clone(), w.ln_bias.clone()};
}

}  // namespace

// ---- configuration --------------------------------------------------------

double TrainConfig::effective_lambda_c() const {
  return (disable_correspondence_loss || disable_seg_stream) ? 0.0 : loss.lambda_c;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ContractError("train config: epochs must be non-negative");
  if (!(learning_rate > 0.0)) throw ContractError("train config: learning_rate must be positive");
  if (batch_size < 1) throw ContractError("train config: batch_size must be at least 1");
  if (heads < 1) throw ContractError("train config: heads must be at least 1");
  if (threads < 1) throw ContractError("train config: threads must be at least 1");
  loss.validate();
}

Json to_json(const TrainConfig& cfg) {
  return Json{{"epochs", cfg.epochs},
              {"learning_rate", cfg.learning_rate},
              {"adam_beta1", cfg.adam_beta1},
              {"adam_beta2", cfg.adam_beta2},
              {"adam_eps", cfg.adam_eps},
              {"batch_size", cfg.batch_size},
              {"alpha", cfg.loss.alpha},
              {"beta", cfg.loss.beta},
              {"lambda_c", cfg.loss.lambda_c},
              {"smooth_l1_delta", cfg.loss.smooth_l1_delta},
              {"mode", std::string(to_string(cfg.mode))},
              {"heads", cfg.heads},
              {"seed", cfg.seed},
              {"disable_seg_stream", cfg.disable_seg_stream},
              {"disable_correspondence_loss", cfg.disable_correspondence_loss}};
}

TrainConfig train_config_from_json(const Json& j, std::size_t line) {
  TrainConfig cfg;
  cfg.epochs = field_as<int>(j, "epochs", line);
  cfg.learning_rate = field_as<double>(j, "learning_rate", line);
  cfg.adam_beta1 = field_as<double>(j, "adam_beta1", line);
  cfg.adam_beta2 = field_as<double>(j, "adam_beta2", line);
  cfg.adam_eps = field_as<double>(j, "adam_eps", line);
  cfg.batch_size = field_as<Index>(j, "batch_size", line);
  cfg.loss.alpha = field_as<double>(j, "alpha", line);
  cfg.loss.beta = field_as<double>(j, "beta", line);
  cfg.loss.lambda_c = field_as<double>(j, "lambda_c", line);
  cfg.loss.smooth_l1_delta = field_as<double>(j, "smooth_l1_delta", line);
  try {
    cfg.mode = parse_query_mode(field_as<std::string>(j, "mode", line));
  } catch (const ContractError& e) {
    throw ParseError(line, "mode", e.what());
  }
  cfg.heads = field_as<Index>(j, "heads", line);
  cfg.seed = field_as<std::uint64_t>(j, "seed", line);
  cfg.disable_seg_stream = field_as<bool>(j, "disable_seg_stream", line);
  cfg.disable_correspondence_loss = field_as<bool>(j, "disable_correspondence_loss", line);
  return cfg;
}

// ---- parameters -----------------------------------------------------------

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
  auto out = attention.named_tensors();
  for (auto& item : head.named_tensors()) out.push_back(std::move(item));
  return out;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams p;
  p.attention.dim = attention.dim;
  p.attention.heads = attention.heads;
  p.attention.text = clone_stream(attention.text);
  p.attention.vis = clone_stream(attention.vis);
  p.attention.seg = clone_stream(attention.seg);
  p.head = {head.fuse1_w.clone(), head.fuse1_b.clone(), head.fuse2_w.clone(),   head.fuse2_b.clone(),
            head.score_w.clone(), head.score_b.clone(), head.regress_w.clone(), head.regress_b.clone()};
  return p;
}

ModelParams init_params(Index d, Index heads, Index d_hid, std::uint64_t seed) {
  if (heads < 1 || d % heads != 0) {
    throw ContractError("init_params: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                        " heads");
  }
  if (d_hid < 1) throw ContractError("init_params: hidden width must be positive");
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.attention.dim = d;
  p.attention.heads = heads;
  p.attention.text = init_stream(d, rng);
  p.attention.vis = init_stream(d, rng);
  p.attention.seg = init_stream(d, rng);

  auto layer = [&rng](Index fan_in, Index fan_out) {
    return uniform_tensor(fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
  };
  p.head.fuse1_w = layer(2 * d, d_hid);
  p.head.fuse1_b = Tensor::zeros(1, d_hid, true);
  p.head.fuse2_w = layer(d_hid, d_hid);
  p.head.fuse2_b = Tensor::zeros(1, d_hid, true);
  p.head.score_w = layer(d_hid, 2);
  p.head.score_b = Tensor::zeros(1, 2, true);
  p.head.regress_w = layer(d_hid, 5);
  p.head.regress_b = Tensor::zeros(1, 5, true);
  return p;
}

// ---- optimiser ------------------------------------------------------------

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::span<Tensor> params, std::span<const Matrix> grads) {
  if (params.size() != grads.size()) throw ContractError("Adam::step: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const Tensor& p : params) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  if (m_.size() != params.size()) throw ContractError("Adam::step: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * grads[k];
    v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * grads[k].cwiseAbs2();
    Matrix& w = params[k].mutable_value();
    w.array() -= lr_ * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + eps_);
  }
}

// ---- forward / loss -------------------------------------------------------

SceneForward forward_scene(const ModelParams& params, const SceneExample& scene, QueryMode mode, bool use_seg) {
  if (scene.vis.cols() != params.dim()) {
    throw ContractError("scene " + std::to_string(scene.scene_id) + " has width " + std::to_string(scene.vis.cols()) +
                        " but the model expects " + std::to_string(params.dim()));
  }
  const StreamFeatures feats{Tensor(scene.text), Tensor(scene.vis), Tensor(scene.seg)};
  SceneForward out;
  if (use_seg) {
    out.attention = mask_guided_forward(feats, params.attention, mode);
  } else {
    StreamResult text = text_self_attention(feats.text, params.attention);
    StreamResult vis = language_vision_cross_attention(feats.text, feats.vis, params.attention, mode);
    out.attention.z_text = text.z;
    out.attention.s_text = text.weights;
    out.attention.z_vis = vis.z;
    out.attention.s_vis = vis.weights;
    out.attention.z_seg = Tensor::zeros(scene.seg.rows(), scene.seg.cols());
    out.attention.s_seg = Tensor::zeros(scene.seg.rows(), scene.seg.rows());
  }
  out.head = grasp_head_forward(out.attention.z_text, out.attention.z_vis, params.head);
  return out;
}

Tensor scene_loss(const ModelParams& params, const SceneExample& scene, const TrainConfig& cfg) {
  const double lambda = cfg.effective_lambda_c();
  const SceneForward fwd = forward_scene(params, scene, cfg.mode, !cfg.disable_seg_stream);
  const Tensor l_grasp = grasp_loss(fwd.head, scene.labels, scene.gt_rects, cfg.loss);
  if (lambda == 0.0) return l_grasp;
  LossConfig lc = cfg.loss;
  lc.lambda_c = lambda;
  return total_loss(l_grasp, correspondence_loss(fwd.attention.z_vis, fwd.attention.z_seg, lc), lc);
}

// ---- evaluation -----------------------------------------------------------

SceneOutcome score_prediction(const GraspPrediction& pred, const SceneExample& scene) {
  const auto [rect, index] = select_best(pred);
  (void)index;
  const GraspRect& gt = scene.gt_rects.at(static_cast<std::size_t>(scene.target_index));
  return {is_success(rect, std::span<const GraspRect>(&gt, 1)), scene.is_unseen};
}

std::vector<SceneOutcome> evaluate_outcomes(const ModelParams& params, QueryMode mode,
                                            std::span<const SceneExample> scenes) {
  Tape::Suspend no_record;
  std::vector<SceneOutcome> out;
  out.reserve(scenes.size());
  for (const SceneExample& s : scenes) {
    const SceneForward fwd = forward_scene(params, s, mode, false);
    out.push_back(score_prediction(decode_prediction(fwd.head), s));
  }
  return out;
}

EvalReport evaluate_model(const ModelParams& params, QueryMode mode, std::span<const SceneExample> scenes) {
  if (scenes.empty()) throw ContractError("evaluate_model: empty evaluation set");
  const std::vector<SceneOutcome> outcomes = evaluate_outcomes(params, mode, scenes);
  return summarize_outcomes(outcomes);
}

EvalReport evaluate_model(const Checkpoint& ckpt, std::span<const SceneExample> scenes) {
  return evaluate_model(ckpt.params, ckpt.config.mode, scenes);
}

// ---- training -------------------------------------------------------------

Json to_json(const EpochRecord& r) {
  Json j{{"record_type", "epoch"}, {"epoch", r.epoch}, {"loss", r.loss}};
  if (r.eval) {
    j["seen"] = r.eval->has_seen() ? Json(r.eval->seen_success) : Json(nullptr);
    j["unseen"] = r.eval->has_unseen() ? Json(r.eval->unseen_success) : Json(nullptr);
    j["h"] = (r.eval->has_seen() && r.eval->has_unseen()) ? Json(r.eval->harmonic) : Json(nullptr);
  } else {
    j["seen"] = nullptr;
    j["unseen"] = nullptr;
    j["h"] = nullptr;
  }
  return j;
}

namespace {

struct SceneGrad {
  double loss = 0.0;
  std::vector<Matrix> grads;
};

SceneGrad scene_gradient(const ModelParams& params, const std::vector<Tensor>& tensors, const SceneExample& scene,
                         const TrainConfig& cfg) {
  Tape tape;
  Tape::Scope scope(tape);
  const Tensor loss = scene_loss(params, scene, cfg);
  SceneGrad out;
  out.loss = loss.item();
  if (!std::isfinite(out.loss)) {
    throw TrainingError(scene.scene_id, "non-finite loss on scene " + std::to_string(scene.scene_id));
  }
  tape.backward(loss);
  out.grads.reserve(tensors.size());
  for (const Tensor& t : tensors) out.grads.push_back(tape.grad(t));
  return out;
}

std::vector<SceneGrad> batch_gradients(const ModelParams& params, const std::vector<Tensor>& tensors,
                                       std::span<const SceneExample> scenes, std::span<const std::size_t> batch,
                                       const TrainConfig& cfg) {
  std::vector<SceneGrad> results(batch.size());
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), batch.size());
  if (workers <= 1) {
    for (std::size_t k = 0; k < batch.size(); ++k) results[k] = scene_gradient(params, tensors, scenes[batch[k]], cfg);
    return results;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t k = w; k < batch.size(); k += workers) {
            results[k] = scene_gradient(params, tensors, scenes[batch[k]], cfg);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

double mean_loss(const ModelParams& params, std::span<const SceneExample> scenes, const TrainConfig& cfg) {
  Tape::Suspend no_record;
  double total = 0.0;
  for (const SceneExample& s : scenes) {
    const double l = scene_loss(params, s, cfg).item();
    if (!std::isfinite(l)) throw TrainingError(s.scene_id, "non-finite loss on scene " + std::to_string(s.scene_id));
    total += l;
  }
  return total / static_cast<double>(scenes.size());
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

Checkpoint train(const TrainConfig& config, std::span<const SceneExample> train_scenes,
                 std::span<const SceneExample> eval_scenes, const EpochCallback& on_epoch) {
  config.validate();
  if (train_scenes.empty()) throw ContractError("train: empty training set");
  const Index d = train_scenes.front().vis.cols();
  for (const SceneExample& s : train_scenes) {
    if (s.vis.cols() != d) throw ContractError("train: scenes disagree on feature width");
  }

  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.params = init_params(d, config.heads, 2 * d, config.seed);
  ckpt.params.attention.validate();
  ckpt.params.head.validate();

  std::mt19937_64 rng(config.seed ^ 0x5DEECE66DULL);
  std::vector<Tensor> tensors = ckpt.params.tensors();
  Adam adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);

  auto record = [&](int epoch, double loss) {
    EpochRecord r{epoch, loss, std::nullopt};
    if (!eval_scenes.empty()) r.eval = evaluate_model(ckpt.params, config.mode, eval_scenes);
    ckpt.history.push_back(r);
    if (on_epoch) on_epoch(r);
  };

  record(0, mean_loss(ckpt.params, train_scenes, config));

  std::vector<std::size_t> order(train_scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t count = std::min(batch, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, count);
      std::vector<SceneGrad> results = batch_gradients(ckpt.params, tensors, train_scenes, idx, config);

      std::vector<Matrix> grads = std::move(results.front().grads);
      epoch_loss += results.front().loss;
      for (std::size_t k = 1; k < results.size(); ++k) {
        epoch_loss += results[k].loss;
        for (std::size_t p = 0; p < grads.size(); ++p) grads[p] += results[k].grads[p];
      }
      for (Matrix& g : grads) g /= static_cast<double>(count);
      adam.step(tensors, grads);
    }
    ckpt.epoch = epoch;
    record(epoch, epoch_loss / static_cast<double>(order.size()));
  }
  ckpt.rng_state = rng_state(rng);
  return ckpt;
}

// ---- checkpoint I/O -------------------------------------------------------

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Json params = Json::array();
  for (const auto& [name, t] : ckpt.params.named_tensors()) {
    Json data = Json::array();
    for (Index r = 0; r < t.rows(); ++r) {
      for (Index c = 0; c < t.cols(); ++c) data.push_back(t(r, c));
    }
    params.push_back(Json{{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"data", std::move(data)}});
  }
  Json history = Json::array();
  for (const EpochRecord& r : ckpt.history) {
    Json h = to_json(r);
    if (r.eval) {
      h["seen_count"] = r.eval->seen_count;
      h["unseen_count"] = r.eval->unseen_count;
      h["seen_hits"] = r.eval->seen_hits;
      h["unseen_hits"] = r.eval->unseen_hits;
    }
    history.push_back(std::move(h));
  }
  const Json doc{{"format_version", kCheckpointVersion},
                 {"config", to_json(ckpt.config)},
                 {"epoch", ckpt.epoch},
                 {"rng_state", ckpt.rng_state},
                 {"dim", ckpt.params.attention.dim},
                 {"heads", ckpt.params.attention.heads},
                 {"hidden", ckpt.params.head.hidden_dim()},
                 {"history", std::move(history)},
                 {"params", std::move(params)}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << dump_json(doc) << '\n';
  out.flush();
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  Json doc;
  try {
    doc = Json::parse(buffer.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(1, "checkpoint", std::string("corrupt or truncated checkpoint: ") + e.what());
  }
  const int version = field_as<int>(doc, "format_version", 1);
  if (version != kCheckpointVersion) {
    throw ParseError(1, "format_version", "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.config = train_config_from_json(require_field(doc, "config", 1), 1);
  ckpt.epoch = field_as<int>(doc, "epoch", 1);
  ckpt.rng_state = field_as<std::string>(doc, "rng_state", 1);
  const Index d = field_as<Index>(doc, "dim", 1);
  const Index heads = field_as<Index>(doc, "heads", 1);
  const Index hidden = field_as<Index>(doc, "hidden", 1);
  try {
    ckpt.params = init_params(d, heads, hidden, 0);
  } catch (const ContractError& e) {
    throw ParseError(1, "heads", e.what());
  }

  const Json& stored = require_field(doc, "params", 1);
  if (!stored.is_array()) throw ParseError(1, "params", "expected an array");
  std::unordered_map<std::string, const Json*> by_name;
  for (const Json& p : stored) by_name[field_as<std::string>(p, "name", 1)] = &p;
  for (auto& [name, t] : ckpt.params.named_tensors()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ParseError(1, name, "parameter missing from checkpoint");
    const Json& p = *it->second;
    const Index rows = field_as<Index>(p, "rows", 1);
    const Index cols = field_as<Index>(p, "cols", 1);
    const auto data = field_as<std::vector<double>>(p, "data", 1);
    if (rows != t.rows() || cols != t.cols() || static_cast<Index>(data.size()) != rows * cols) {
      throw ParseError(1, name, "shape " + shape_string(rows, cols) + " does not match " +
                                    shape_string(t.rows(), t.cols()));
    }
    Matrix& v = t.mutable_value();
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) v(r, c) = data[static_cast<std::size_t>(r * cols + c)];
    }
  }

  for (const Json& h : require_field(doc, "history", 1)) {
    EpochRecord r;
    r.epoch = field_as<int>(h, "epoch", 1);
    r.loss = field_as<double>(h, "loss", 1);
    if (h.contains("seen_count")) {
      EvalReport e;
      e.seen_count = field_as<std::size_t>(h, "seen_count", 1);
      e.unseen_count = field_as<std::size_t>(h, "unseen_count", 1);
      e.seen_hits = field_as<std::size_t>(h, "seen_hits", 1);
      e.unseen_hits = field_as<std::size_t>(h, "unseen_hits", 1);
      if (e.has_seen()) e.seen_success = field_as<double>(h, "seen", 1);
      if (e.has_unseen()) e.unseen_success = field_as<double>(h, "unseen", 1);
      if (e.has_seen() && e.has_unseen()) e.harmonic = field_as<double>(h, "h", 1);
      r.eval = e;
    }
    ckpt.history.push_back(r);
  }
  return ckpt;
}

}  // namespace mgrasp
