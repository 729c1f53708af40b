#pragma once

#include "mgrasp/attention.hpp"
#include "mgrasp/geometry.hpp"
#include "mgrasp/grasp_head.hpp"
#include "mgrasp/json_lines.hpp"
#include "mgrasp/losses.hpp"
#include "mgrasp/synthetic.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mgrasp {

struct TrainConfig {
  int epochs = 30;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Index batch_size = 8;
  LossConfig loss;
  QueryMode mode = QueryMode::TextQuery;
  Index heads = 4;
  std::uint64_t seed = 0;
  bool disable_seg_stream = false;
  bool disable_correspondence_loss = false;
  /// Worker threads for per-scene forward/backward. Results do not depend on it.
  int threads = 1;

  /// Correspondence weight after applying the ablation switches.
  double effective_lambda_c() const;
  void validate() const;
};

Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j, std::size_t line);

/// Every learnable tensor of the model.
struct ModelParams {
  AttentionParams attention;
  GraspHeadParams head;

  Index dim() const { return attention.dim; }
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> tensors() const;
  /// Deep copy; the result shares no storage with *this.
  ModelParams clone() const;
};

/// Projection weights ~ U(±1/√d); head weights ~ U(±1/√fan_in); biases 0;
/// layer-norm gains 1. Deterministic in `seed`.
ModelParams init_params(Index d, Index heads, Index d_hid, std::uint64_t seed);

/// Standard Adam with bias correction.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(std::span<Tensor> params, std::span<const Matrix> grads);
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

struct SceneForward {
  AttentionOutput attention;
  GraspHeadOutput head;
};

/// Attention block plus grasp head. With `use_seg` false the segmentation
/// stream is skipped and z_seg is zero.
SceneForward forward_scene(const ModelParams& params, const SceneExample& scene, QueryMode mode, bool use_seg = true);

/// L_grasp + λ_c L_cor for one scene, recorded on the active tape.
Tensor scene_loss(const ModelParams& params, const SceneExample& scene, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;  // 0 is the untrained model
  double loss = 0.0;
  std::optional<EvalReport> eval;
};

Json to_json(const EpochRecord& r);

struct Checkpoint {
  ModelParams params;
  TrainConfig config;
  int epoch = 0;
  std::string rng_state;
  std::vector<EpochRecord> history;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::uint64_t scene_id, const std::string& what)
      : std::runtime_error(what), scene_id_(scene_id) {}
  std::uint64_t scene_id() const { return scene_id_; }

 private:
  std::uint64_t scene_id_;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam on the mean per-scene loss for `config.epochs` epochs.
/// Epoch 0 records the untrained loss. When `eval_scenes` is non-empty every
/// record carries an evaluation report.
Checkpoint train(const TrainConfig& config, std::span<const SceneExample> train_scenes,
                 std::span<const SceneExample> eval_scenes = {}, const EpochCallback& on_epoch = {});

/// Success of a prediction against the scene's target rectangle.
SceneOutcome score_prediction(const GraspPrediction& pred, const SceneExample& scene);

std::vector<SceneOutcome> evaluate_outcomes(const ModelParams& params, QueryMode mode,
                                            std::span<const SceneExample> scenes);
/// Both splits present gives the full report; otherwise the absent split has count 0.
EvalReport evaluate_model(const ModelParams& params, QueryMode mode, std::span<const SceneExample> scenes);
EvalReport evaluate_model(const Checkpoint& ckpt, std::span<const SceneExample> scenes);

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mgrasp
