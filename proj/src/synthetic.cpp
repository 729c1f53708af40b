#include "mgrasp/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mgrasp {

namespace {

constexpr std::uint64_t kWorldTag = 0;
constexpr std::uint64_t kSceneTag = 1;
constexpr std::uint64_t kCategoryTag = 2;

Matrix gaussian(Index rows, Index cols, double sigma, std::mt19937_64& rng) {
  if (sigma == 0.0) return Matrix::Zero(rows, cols);
  std::normal_distribution<double> n(0.0, sigma);
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = n(rng);
  }
  return m;
}

Matrix random_orthogonal(Index n, std::mt19937_64& rng) {
  const Eigen::MatrixXd g = gaussian(n, n, 1.0, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  // Fix column signs so the result does not depend on the QR sign convention.
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index c = 0; c < n; ++c) {
    if (r(c, c) < 0.0) q.col(c) *= -1.0;
  }
  return q;
}

Index uniform_index(Index lo, Index hi, std::mt19937_64& rng) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

double uniform(double lo, double hi, std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

GraspRect random_rect(std::mt19937_64& rng) {
  GraspRect r;
  r.x = uniform(0.2, 0.8, rng);
  r.y = uniform(0.2, 0.8, rng);
  r.w = uniform(0.15, 0.35, rng);
  r.h = uniform(0.08, 0.2, rng);
  r.theta = uniform(-90.0, 90.0, rng);
  return r;
}

}  // namespace

// ---- configuration --------------------------------------------------------

Index GeneratorConfig::seen_categories() const {
  return static_cast<Index>(std::lround(0.7 * static_cast<double>(num_categories)));
}

void GeneratorConfig::validate() const {
  if (dim < kReservedCols + 4) {
    throw ContractError("generator: dim must be at least " + std::to_string(kReservedCols + 4));
  }
  if (proposals < 2) throw ContractError("generator: need at least two proposals");
  if (tokens < 1) throw ContractError("generator: need at least one text token");
  if (num_categories < 3) throw ContractError("generator: need at least three categories");
  if (seen_categories() < 2 || unseen_categories() < 1) {
    throw ContractError("generator: category split leaves a split empty");
  }
  if (!(noise_sigma >= 0.0)) throw ContractError("generator: noise_sigma must be non-negative");
  if (!(instance_sigma >= 0.0)) throw ContractError("generator: instance_sigma must be non-negative");
}

Json to_json(const GeneratorConfig& cfg) {
  return Json{{"dim", cfg.dim},
              {"proposals", cfg.proposals},
              {"tokens", cfg.tokens},
              {"num_categories", cfg.num_categories},
              {"noise_sigma", cfg.noise_sigma},
              {"instance_sigma", cfg.instance_sigma},
              {"occlusion", cfg.occlusion},
              {"seed", cfg.seed}};
}

GeneratorConfig generator_config_from_json(const Json& j, std::size_t line) {
  GeneratorConfig cfg;
  cfg.dim = field_as<Index>(j, "dim", line);
  cfg.proposals = field_as<Index>(j, "proposals", line);
  cfg.tokens = field_as<Index>(j, "tokens", line);
  cfg.num_categories = field_as<Index>(j, "num_categories", line);
  cfg.noise_sigma = field_as<double>(j, "noise_sigma", line);
  cfg.instance_sigma = field_as<double>(j, "instance_sigma", line);
  cfg.occlusion = field_as<bool>(j, "occlusion", line);
  cfg.seed = field_as<std::uint64_t>(j, "seed", line);
  return cfg;
}

bool operator==(const SceneExample& a, const SceneExample& b) {
  auto same = [](const Matrix& x, const Matrix& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() && x == y;
  };
  return a.scene_id == b.scene_id && a.category_id == b.category_id && a.is_unseen == b.is_unseen &&
         a.target_index == b.target_index && same(a.vis, b.vis) && same(a.seg, b.seg) && same(a.text, b.text) &&
         a.labels == b.labels && a.gt_rects == b.gt_rects;
}

std::mt19937_64 scene_rng(std::uint64_t seed, std::uint64_t scene_id, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(scene_id), static_cast<std::uint32_t>(scene_id >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

// ---- generator ------------------------------------------------------------

SceneGenerator::SceneGenerator(GeneratorConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng = scene_rng(cfg_.seed, 0, kWorldTag);
  const Index ds = semantic_dim();
  prototypes_ = gaussian(cfg_.num_categories, ds, 1.0, rng);
  prototypes_.rowwise().normalize();
  prototypes_ *= std::sqrt(static_cast<double>(ds));
  vis_map_ = random_orthogonal(ds, rng);
  seg_map_ = random_orthogonal(cfg_.dim, rng).topRows(ds);
  text_map_ = random_orthogonal(cfg_.dim, rng).topRows(ds);
  rect_map_ = static_cast<double>(kRectScale) * random_orthogonal(5, rng);
}

SceneExample SceneGenerator::generate_scene(Index category, std::uint64_t scene_id, bool training) const {
  if (category < 0 || category >= cfg_.num_categories) {
    throw ContractError("generate_scene: category " + std::to_string(category) + " outside [0, " +
                        std::to_string(cfg_.num_categories) + ")");
  }
  std::mt19937_64 rng = scene_rng(cfg_.seed, scene_id, kSceneTag);
  const Index m = cfg_.proposals;
  const Index d = cfg_.dim;
  const Index ds = semantic_dim();
  const double sigma = cfg_.noise_sigma;

  SceneExample s;
  s.scene_id = scene_id;
  s.category_id = category;
  s.is_unseen = category >= cfg_.seen_categories();
  s.target_index = uniform_index(0, m - 1, rng);

  std::vector<Index> others;
  for (Index i = 0; i < m; ++i) {
    if (i != s.target_index) others.push_back(i);
  }
  std::shuffle(others.begin(), others.end(), rng);
  const Index n_distract = std::min<Index>(uniform_index(1, 3, rng), m - 1);

  const Index pool = training ? cfg_.seen_categories() : cfg_.num_categories;
  // Semantic vector per proposal; background proposals get a random one.
  Matrix semantic(m, ds);
  std::vector<bool> is_object(static_cast<std::size_t>(m), false);
  const double spread = cfg_.instance_sigma;
  semantic.row(s.target_index) = prototypes_.row(category) + gaussian(1, ds, spread, rng);
  is_object[static_cast<std::size_t>(s.target_index)] = true;
  for (Index k = 0; k < m - 1; ++k) {
    const Index slot = others[static_cast<std::size_t>(k)];
    if (k < n_distract) {
      Index other = uniform_index(0, pool - 2, rng);
      if (other >= category) ++other;
      semantic.row(slot) = prototypes_.row(other) + gaussian(1, ds, spread, rng);
      is_object[static_cast<std::size_t>(slot)] = true;
    } else {
      semantic.row(slot) = gaussian(1, ds, 1.0, rng);
    }
  }

  // Every latent has norm √d_sem, like the prototypes.
  for (Index i = 0; i < m; ++i) {
    if (is_object[static_cast<std::size_t>(i)] && spread == 0.0) continue;
    semantic.row(i) *= std::sqrt(static_cast<double>(ds)) / semantic.row(i).norm();
  }

  Matrix appearance = semantic * vis_map_ + gaussian(m, ds, sigma, rng);
  s.seg = semantic * seg_map_ + gaussian(m, d, sigma, rng);
  if (cfg_.occlusion) {
    for (Index k = 0; k < n_distract; ++k) {
      const Index slot = others[static_cast<std::size_t>(k)];
      appearance.row(slot) = 0.5 * appearance.row(slot) + 0.5 * appearance.row(s.target_index);
    }
  }

  s.vis.resize(m, d);
  s.vis.leftCols(ds) = appearance;
  s.labels.assign(static_cast<std::size_t>(m), 0);
  s.labels[static_cast<std::size_t>(s.target_index)] = 1;
  s.gt_rects.reserve(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) {
    const GraspRect r = random_rect(rng);
    s.gt_rects.push_back(r);
    const bool obj = is_object[static_cast<std::size_t>(i)];
    const double rho = obj ? uniform(0.6, 1.0, rng) : uniform(0.0, 0.4, rng);
    RowVector g(5);
    g << r.x, r.y, r.w, r.h, r.theta / 90.0;
    s.vis(i, ds) = rho;
    s.vis(i, ds + 1) = r.x;
    s.vis(i, ds + 2) = r.y;
    s.vis.block(i, ds + 3, 1, 5) = g * rect_map_;
  }

  const RowVector text_base = semantic.row(s.target_index) * text_map_;
  s.text = text_base.replicate(cfg_.tokens, 1) + gaussian(cfg_.tokens, d, sigma, rng);
  return s;
}

GraspRect SceneGenerator::decode_rect(const RowVector& vis_row) const {
  const Index ds = semantic_dim();
  const RowVector g = vis_row.segment(ds + 3, 5) * rect_map_.transpose() /
                      (static_cast<double>(kRectScale) * static_cast<double>(kRectScale));
  return {g(0), g(1), g(2), g(3), 90.0 * g(4)};
}

SyntheticDataset generate_dataset(const GeneratorConfig& cfg, std::size_t n_train, std::size_t n_eval_seen,
                                  std::size_t n_eval_unseen) {
  const SceneGenerator gen(cfg);
  const Index seen = cfg.seen_categories();
  SyntheticDataset out;
  std::uint64_t next_id = 0;
  auto draw = [&](std::vector<SceneExample>& dst, std::size_t n, Index lo, Index hi, bool training) {
    dst.reserve(n);
    for (std::size_t k = 0; k < n; ++k, ++next_id) {
      std::mt19937_64 rng = scene_rng(cfg.seed, next_id, kCategoryTag);
      dst.push_back(gen.generate_scene(uniform_index(lo, hi, rng), next_id, training));
    }
  };
  draw(out.train, n_train, 0, seen - 1, true);
  draw(out.eval_seen, n_eval_seen, 0, seen - 1, false);
  draw(out.eval_unseen, n_eval_unseen, seen, cfg.num_categories - 1, false);
  return out;
}

// ---- serialisation --------------------------------------------------------

Json scene_to_json(const SceneExample& s) {
  Json labels = Json::array();
  for (std::uint8_t l : s.labels) labels.push_back(l != 0);
  Json rects = Json::array();
  for (const GraspRect& r : s.gt_rects) rects.push_back(Json::array({r.x, r.y, r.w, r.h, r.theta}));
  return Json{{"scene_id", s.scene_id},
              {"category_id", s.category_id},
              {"is_unseen", s.is_unseen},
              {"target_index", s.target_index},
              {"vis", matrix_to_json(s.vis)},
              {"seg", matrix_to_json(s.seg)},
              {"text", matrix_to_json(s.text)},
              {"labels", std::move(labels)},
              {"gt_rects", std::move(rects)}};
}

SceneExample scene_from_json(const Json& j, std::size_t line) {
  SceneExample s;
  s.scene_id = field_as<std::uint64_t>(j, "scene_id", line);
  s.category_id = field_as<Index>(j, "category_id", line);
  s.is_unseen = field_as<bool>(j, "is_unseen", line);
  s.target_index = field_as<Index>(j, "target_index", line);
  s.vis = matrix_from_json(require_field(j, "vis", line), line, "vis");
  s.seg = matrix_from_json(require_field(j, "seg", line), line, "seg");
  s.text = matrix_from_json(require_field(j, "text", line), line, "text");
  for (bool l : field_as<std::vector<bool>>(j, "labels", line)) s.labels.push_back(l ? 1 : 0);
  const Json& rects = require_field(j, "gt_rects", line);
  if (!rects.is_array()) throw ParseError(line, "gt_rects", "expected an array");
  for (const Json& r : rects) {
    if (!r.is_array() || r.size() != 5) throw ParseError(line, "gt_rects", "each rectangle needs 5 numbers");
    for (const Json& x : r) {
      if (!x.is_number()) throw ParseError(line, "gt_rects", "non-numeric entry");
    }
    s.gt_rects.push_back({r[0].get<double>(), r[1].get<double>(), r[2].get<double>(), r[3].get<double>(),
                          r[4].get<double>()});
  }
  const Index m = s.vis.rows();
  if (s.seg.rows() != m || s.seg.cols() != s.vis.cols()) throw ParseError(line, "seg", "shape differs from vis");
  if (s.text.cols() != s.vis.cols()) throw ParseError(line, "text", "width differs from vis");
  if (static_cast<Index>(s.labels.size()) != m) throw ParseError(line, "labels", "one label per proposal expected");
  if (static_cast<Index>(s.gt_rects.size()) != m) throw ParseError(line, "gt_rects", "one rectangle per proposal expected");
  if (s.target_index < 0 || s.target_index >= m) throw ParseError(line, "target_index", "out of range");
  return s;
}

void write_dataset(const std::filesystem::path& path, const GeneratorConfig& cfg,
                   std::span<const SceneExample> scenes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << dump_json(Json{{"schema_version", kDatasetSchemaVersion}, {"config", to_json(cfg)}}) << '\n';
  for (const SceneExample& s : scenes) out << dump_json(scene_to_json(s)) << '\n';
  out.flush();
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

DatasetFile read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  DatasetFile file;
  std::string text;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    Json j;
    try {
      j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, have_header ? "scene" : "header", std::string("malformed record: ") + e.what());
    }
    if (!have_header) {
      const int version = field_as<int>(j, "schema_version", line_no);
      if (version != kDatasetSchemaVersion) {
        throw ParseError(line_no, "schema_version", "unsupported version " + std::to_string(version));
      }
      file.config = generator_config_from_json(require_field(j, "config", line_no), line_no);
      have_header = true;
      continue;
    }
    SceneExample s = scene_from_json(j, line_no);
    if (s.vis.cols() != file.config.dim) throw ParseError(line_no, "vis", "width differs from config dim");
    file.scenes.push_back(std::move(s));
  }
  if (!have_header) throw ParseError(line_no, "schema_version", "missing header record");
  return file;
}

}  // namespace mgrasp
