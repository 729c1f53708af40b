#include "mgrasp/cli.hpp"

#include "mgrasp/gradcheck_suite.hpp"
#include "mgrasp/synthetic.hpp"
#include "mgrasp/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace mgrasp {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

Json nullable(bool present, double v) { return present ? Json(v) : Json(nullptr); }

Json report_json(const EvalReport& r) {
  return Json{{"record_type", "eval"},
              {"seen", nullable(r.has_seen(), r.seen_success)},
              {"unseen", nullable(r.has_unseen(), r.unseen_success)},
              {"h", nullable(r.has_seen() && r.has_unseen(), r.harmonic)},
              {"seen_count", r.seen_count},
              {"unseen_count", r.unseen_count},
              {"seen_hits", r.seen_hits},
              {"unseen_hits", r.unseen_hits}};
}

std::string pretty_rate(bool present, double v) { return present ? fixed(v, 4) : std::string("-"); }

// A directory holds train.jsonl and eval.jsonl; a file is used as given.
fs::path dataset_file(const fs::path& data, const char* name) {
  return fs::is_directory(data) ? data / name : data;
}

// ---- gen ------------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::size_t scenes = 3000;
  std::size_t eval_seen = 500;
  std::size_t eval_unseen = 500;
  GeneratorConfig cfg;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  if (a.scenes == 0 || a.eval_seen == 0 || a.eval_unseen == 0) throw UsageError("scene counts must be positive");
  try {
    a.cfg.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  const SyntheticDataset data = generate_dataset(a.cfg, a.scenes, a.eval_seen, a.eval_unseen);
  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + dir.string() + "': " + ec.message());
  std::vector<SceneExample> eval = data.eval_seen;
  eval.insert(eval.end(), data.eval_unseen.begin(), data.eval_unseen.end());
  write_dataset(dir / "train.jsonl", a.cfg, data.train);
  write_dataset(dir / "eval.jsonl", a.cfg, eval);
  out << dump_json(Json{{"record_type", "gen"},
                        {"train", data.train.size()},
                        {"eval_seen", data.eval_seen.size()},
                        {"eval_unseen", data.eval_unseen.size()},
                        {"config_hash", hex64(fnv1a64(dump_json(to_json(a.cfg))))},
                        {"out", dir.string()}})
      << '\n';
  return kExitOk;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string eval_data;
  std::string ckpt;
  TrainConfig cfg;
  std::string mode = "text-query";
  Index dim = 0;
  bool pretty = false;
};

int cmd_train(TrainArgs a, std::ostream& out) {
  try {
    a.cfg.mode = parse_query_mode(a.mode);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  if (a.dim > 0 && a.dim % a.cfg.heads != 0) {
    throw UsageError("--dim " + std::to_string(a.dim) + " is not divisible by --heads " +
                     std::to_string(a.cfg.heads));
  }
  try {
    a.cfg.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }

  const fs::path data(a.data);
  const DatasetFile train_file = read_dataset(dataset_file(data, "train.jsonl"));
  if (train_file.scenes.empty()) throw std::runtime_error("training set '" + a.data + "' is empty");
  const Index d = train_file.config.dim;
  if (a.dim > 0 && a.dim != d) {
    throw UsageError("--dim " + std::to_string(a.dim) + " differs from the dataset width " + std::to_string(d));
  }
  if (d % a.cfg.heads != 0) {
    throw UsageError("dataset width " + std::to_string(d) + " is not divisible by --heads " +
                     std::to_string(a.cfg.heads));
  }

  std::vector<SceneExample> eval;
  fs::path eval_path;
  if (!a.eval_data.empty()) {
    eval_path = dataset_file(a.eval_data, "eval.jsonl");
  } else if (fs::is_directory(data) && fs::exists(data / "eval.jsonl")) {
    eval_path = data / "eval.jsonl";
  }
  if (!eval_path.empty()) eval = read_dataset(eval_path).scenes;

  if (a.pretty) out << "epoch        loss    seen  unseen       H\n";
  auto on_epoch = [&](const EpochRecord& r) {
    if (a.pretty) {
      const bool s = r.eval && r.eval->has_seen();
      const bool u = r.eval && r.eval->has_unseen();
      out << std::setw(5) << r.epoch << std::setw(12) << fixed(r.loss, 5) << std::setw(8)
          << pretty_rate(s, s ? r.eval->seen_success : 0.0) << std::setw(8)
          << pretty_rate(u, u ? r.eval->unseen_success : 0.0) << std::setw(8)
          << pretty_rate(s && u, (s && u) ? r.eval->harmonic : 0.0) << '\n';
    } else {
      out << dump_json(to_json(r)) << '\n';
    }
    out.flush();
  };
  const Checkpoint ckpt = train(a.cfg, train_file.scenes, eval, on_epoch);
  save_checkpoint(ckpt, a.ckpt);
  if (!a.pretty) out << dump_json(Json{{"record_type", "checkpoint"}, {"path", a.ckpt}, {"epoch", ckpt.epoch}}) << '\n';
  return kExitOk;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string dump_features;
  bool pretty = false;
};

void dump_features(const Checkpoint& ckpt, std::span<const SceneExample> scenes, const fs::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  Tape::Suspend no_record;
  for (const SceneExample& s : scenes) {
    const SceneForward fwd = forward_scene(ckpt.params, s, ckpt.config.mode);
    const Matrix& z = fwd.attention.z_vis.value();
    for (Index i = 0; i < z.rows(); ++i) {
      Json row = Json::array();
      for (Index c = 0; c < z.cols(); ++c) row.push_back(z(i, c));
      f << dump_json(Json{{"scene_id", s.scene_id},
                          {"proposal", i},
                          {"category_id", s.category_id},
                          {"is_unseen", s.is_unseen},
                          {"positive", s.labels[static_cast<std::size_t>(i)] != 0},
                          {"z_vis", std::move(row)}})
        << '\n';
    }
  }
  if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const DatasetFile file = read_dataset(dataset_file(a.data, "eval.jsonl"));
  if (file.scenes.empty()) throw std::runtime_error("evaluation set '" + a.data + "' is empty");
  const EvalReport r = evaluate_model(ckpt, file.scenes);
  if (!a.dump_features.empty()) dump_features(ckpt, file.scenes, a.dump_features);
  if (a.pretty) {
    out << "split    success   hits/count\n";
    out << "seen     " << std::setw(7) << pretty_rate(r.has_seen(), r.seen_success) << "   " << r.seen_hits << '/'
        << r.seen_count << '\n';
    out << "unseen   " << std::setw(7) << pretty_rate(r.has_unseen(), r.unseen_success) << "   " << r.unseen_hits
        << '/' << r.unseen_count << '\n';
    out << "H        " << std::setw(7) << pretty_rate(r.has_seen() && r.has_unseen(), r.harmonic) << '\n';
  } else {
    out << dump_json(report_json(r)) << '\n';
  }
  return kExitOk;
}

// ---- gradcheck ------------------------------------------------------------

int cmd_gradcheck(bool corrupt, bool pretty, std::ostream& out) {
  GradTamper tamper;
  if (corrupt) {
    tamper = [](std::vector<Matrix>& grads) {
      if (!grads.empty()) grads.front() *= 1.01;
    };
  }
  const GradCheckReport report = run_gradcheck_suite(7, tamper);
  const GradCheckEntry& worst = report.worst();
  if (pretty) {
    for (const GradCheckEntry& e : report.entries) {
      out << std::left << std::setw(52) << e.name << std::right << std::setw(12) << std::scientific
          << std::setprecision(3) << e.max_rel_error << "  " << (e.passed() ? "ok" : "FAIL") << '\n';
    }
    out << std::defaultfloat << "worst: " << worst.name << " (" << worst.worst_param << ") " << worst.max_rel_error
        << '\n';
  } else {
    for (const GradCheckEntry& e : report.entries) {
      out << dump_json(Json{{"record_type", "gradcheck"},
                            {"name", e.name},
                            {"max_rel_error", e.max_rel_error},
                            {"tolerance", e.tolerance},
                            {"passed", e.passed()}})
          << '\n';
    }
    out << dump_json(Json{{"record_type", "gradcheck_summary"},
                          {"passed", report.passed()},
                          {"checks", report.entries.size()},
                          {"worst", worst.name},
                          {"worst_param", worst.worst_param},
                          {"max_rel_error", worst.max_rel_error}})
        << '\n';
  }
  return report.passed() ? kExitOk : kExitCheckFailed;
}

// ---- iou ------------------------------------------------------------------

GraspRect parse_rect(const std::string& text, const char* flag) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(item, &used);
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": '" + item + "' is not a number");
    }
    if (used != item.size() && item.find_first_not_of(" \t", used) != std::string::npos) {
      throw UsageError(std::string(flag) + ": '" + item + "' is not a number");
    }
    v.push_back(x);
  }
  if (v.size() != 5) throw UsageError(std::string(flag) + ": expected x,y,w,h,theta");
  if (!(v[2] > 0.0) || !(v[3] > 0.0)) throw UsageError(std::string(flag) + ": width and height must be positive");
  return {v[0], v[1], v[2], v[3], v[4]};
}

int cmd_iou(const std::string& r1, const std::string& r2, bool pretty, std::ostream& out) {
  const GraspRect a = parse_rect(r1, "--rect1");
  const GraspRect b = parse_rect(r2, "--rect2");
  const double iou = rotated_iou(a, b);
  const double diff = angle_diff(a.theta, b.theta);
  const bool ok = is_success(a, std::span<const GraspRect>(&b, 1));
  if (pretty) {
    out << "IoU " << fixed(iou, 6) << "\nangle_diff " << fixed(diff, 1) << "\nsuccess " << (ok ? "true" : "false")
        << '\n';
  } else {
    out << dump_json(Json{{"record_type", "iou"}, {"iou", iou}, {"angle_diff", diff}, {"success", ok}}) << '\n';
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mask-guided grasp detection toolkit", "mgrasp"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset (train.jsonl, eval.jsonl)");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--scenes", gen.scenes, "Training scenes")->capture_default_str();
  gen_cmd->add_option("--eval-seen", gen.eval_seen, "Evaluation scenes from seen categories")->capture_default_str();
  gen_cmd->add_option("--eval-unseen", gen.eval_unseen, "Evaluation scenes from unseen categories")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.cfg.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--dim", gen.cfg.dim, "Feature width d")->capture_default_str();
  gen_cmd->add_option("--proposals", gen.cfg.proposals, "Proposals per scene m")->capture_default_str();
  gen_cmd->add_option("--tokens", gen.cfg.tokens, "Text tokens per scene K")->capture_default_str();
  gen_cmd->add_option("--categories", gen.cfg.num_categories, "Number of categories")->capture_default_str();
  gen_cmd->add_option("--noise", gen.cfg.noise_sigma, "Feature noise sigma")->capture_default_str();
  gen_cmd->add_option("--instance-spread", gen.cfg.instance_sigma, "Instance spread around category prototypes")
      ->capture_default_str();
  gen_cmd->add_option("--occlusion", gen.cfg.occlusion, "Blend distractor appearance toward the target")
      ->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_cmd->add_option("--data", tr.data, "Dataset directory or training file")->required();
  train_cmd->add_option("--eval-data", tr.eval_data, "Evaluation file or directory (default: <data>/eval.jsonl)");
  train_cmd->add_option("--ckpt", tr.ckpt, "Checkpoint output path")->required();
  train_cmd->add_option("--epochs", tr.cfg.epochs, "Training epochs")->capture_default_str();
  train_cmd->add_option("--lr", tr.cfg.learning_rate, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--lambda-cor", tr.cfg.loss.lambda_c, "Correspondence loss weight")->capture_default_str();
  train_cmd->add_option("--beta", tr.cfg.loss.beta, "Regression loss weight")->capture_default_str();
  train_cmd->add_option("--alpha", tr.cfg.loss.alpha, "Triplet margin")->capture_default_str();
  train_cmd->add_option("--heads", tr.cfg.heads, "Attention heads")->capture_default_str();
  train_cmd->add_option("--dim", tr.dim, "Expected feature width");
  train_cmd->add_option("--mode", tr.mode, "text-query or region-query")->capture_default_str();
  train_cmd->add_flag("--no-seg", tr.cfg.disable_seg_stream, "Disable the segmentation stream");
  train_cmd->add_flag("--no-cor", tr.cfg.disable_correspondence_loss, "Disable the correspondence loss");
  train_cmd->add_option("--seed", tr.cfg.seed, "Initialisation and shuffling seed")->capture_default_str();
  train_cmd->add_option("--batch-size", tr.cfg.batch_size, "Scenes per gradient step")->capture_default_str();
  train_cmd->add_option("--threads", tr.cfg.threads, "Worker threads")->capture_default_str();
  train_cmd->add_flag("--pretty", tr.pretty, "Human-readable table");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory or evaluation file")->required();
  eval_cmd->add_option("--dump-features", ev.dump_features, "Write z_vis rows with labels to this file");
  eval_cmd->add_flag("--pretty", ev.pretty, "Human-readable table");

  bool gc_corrupt = false;
  bool gc_pretty = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc_cmd->add_flag("--corrupt", gc_corrupt)->group("");
  gc_cmd->add_flag("--pretty", gc_pretty, "Human-readable table");

  std::string rect1;
  std::string rect2;
  bool iou_pretty = false;
  auto* iou_cmd = app.add_subcommand("iou", "Rotated IoU and success verdict of two rectangles");
  iou_cmd->add_option("--rect1", rect1, "x,y,w,h,theta")->required();
  iou_cmd->add_option("--rect2", rect2, "x,y,w,h,theta")->required();
  iou_cmd->add_flag("--pretty", iou_pretty, "Human-readable output");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? &app : app.get_subcommands().front())->help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << "error: " << e.what() << "\n\n" << sub->help();
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen(gen, out);
    if (*train_cmd) return cmd_train(tr, out);
    if (*eval_cmd) return cmd_eval(ev, out);
    if (*gc_cmd) return cmd_gradcheck(gc_corrupt, gc_pretty, out);
    if (*iou_cmd) return cmd_iou(rect1, rect2, iou_pretty, out);
  } catch (const UsageError& e) {
    const CLI::App* sub = app.get_subcommands().front();
    err << "error: " << e.what() << "\n\n" << sub->help();
    return kExitUsage;
  } catch (const TrainingError& e) {
    err << "error: training aborted at scene " << e.scene_id() << ": " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace mgrasp
