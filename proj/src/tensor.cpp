#include "mgrasp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mgrasp {

namespace {

thread_local Tape* g_active_tape = nullptr;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) +
                     " vs " + shape_string(b.rows(), b.cols()));
  }
}

Tensor unary(const Tensor& a, Matrix value, std::function<Matrix(const Matrix&, const detail::Node&)> dfn) {
  return detail::make_result(std::move(value), {a},
                             [dfn = std::move(dfn)](const Matrix& g, const detail::Node& self) {
                               return std::vector<Matrix>{dfn(g, self)};
                             });
}

}  // namespace

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << '[' << rows << "x" << cols << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) {}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::scalar(double v) { return Tensor(Matrix::Constant(1, 1, v)); }

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) {
    throw ShapeError("item: expected [1x1], got " + shape_string(rows(), cols()));
  }
  return node_->value(0, 0);
}

Matrix& Tensor::mutable_value() {
  if (!is_leaf()) throw ContractError("mutable_value: only leaf tensors may be modified");
  return node_->value;
}

Tensor Tensor::detach() const { return Tensor(node_->value, false); }

Tensor Tensor::clone() const { return Tensor(node_->value, node_->requires_grad); }

// ---- Tape -----------------------------------------------------------------

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = previous_; }

Tape::Suspend::Suspend() : previous_(g_active_tape) { g_active_tape = nullptr; }
Tape::Suspend::~Suspend() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const detail::NodePtr& node) {
  if (consumed_) throw ContractError("tape already consumed by backward(); start a new tape");
  node->tape = this;
  node->index = nodes_.size();
  nodes_.push_back(node);
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward: tape already consumed");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ContractError("backward: loss must be [1x1], got " + shape_string(loss.rows(), loss.cols()));
  }
  const detail::Node* root = loss.id();
  if (root->tape != this) throw ContractError("backward: loss is not recorded on this tape");
  consumed_ = true;

  grads_.assign(nodes_.size(), Matrix());
  leaf_grads_.clear();
  grads_[root->index] = Matrix::Ones(1, 1);

  auto accumulate = [this](const detail::NodePtr& parent, Matrix&& contribution) {
    if (!parent->requires_grad || contribution.size() == 0) return;
    Matrix* slot = nullptr;
    if (parent->tape == this) {
      slot = &grads_[parent->index];
    } else {
      slot = &leaf_grads_[parent.get()];
    }
    if (slot->size() == 0) {
      *slot = std::move(contribution);
    } else {
      *slot += contribution;
    }
  };

  for (std::size_t k = root->index + 1; k-- > 0;) {
    const detail::Node& node = *nodes_[k];
    if (grads_[k].size() == 0) continue;
    std::vector<Matrix> contributions = node.backward(grads_[k], node);
    for (std::size_t p = 0; p < node.parents.size(); ++p) {
      accumulate(node.parents[p], std::move(contributions[p]));
    }
  }
}

Matrix Tape::grad(const Tensor& t) const {
  const detail::Node* n = t.id();
  if (n->tape == this) {
    if (n->index < grads_.size() && grads_[n->index].size() != 0) return grads_[n->index];
  } else if (auto it = leaf_grads_.find(n); it != leaf_grads_.end()) {
    return it->second;
  }
  return Matrix::Zero(t.rows(), t.cols());
}

namespace detail {

Tensor make_result(Matrix value, std::vector<Tensor> parents, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  Tape* tape = Tape::active();
  bool needs_grad = false;
  for (const Tensor& p : parents) {
    if (p.node_->tape != nullptr && p.node_->tape != tape) {
      throw ContractError("operand recorded on a different tape than the active one");
    }
    needs_grad = needs_grad || p.requires_grad();
  }
  if (needs_grad && tape != nullptr) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) node->parents.push_back(p.node_);
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.rows(), a.cols()) + " x " +
                     shape_string(b.rows(), b.cols()));
  }
  Matrix out = a.value() * b.value();
  return detail::make_result(std::move(out), {a, b}, [](const Matrix& g, const detail::Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& bv = self.parents[1]->value;
    return std::vector<Matrix>{g * bv.transpose(), av.transpose() * g};
  });
}

Tensor transpose(const Tensor& a) {
  return unary(a, a.value().transpose(), [](const Matrix& g, const detail::Node&) -> Matrix { return g.transpose(); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return detail::make_result(a.value() + b.value(), {a, b}, [](const Matrix& g, const detail::Node&) {
    return std::vector<Matrix>{g, g};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return detail::make_result(a.value() - b.value(), {a, b}, [](const Matrix& g, const detail::Node&) {
    return std::vector<Matrix>{g, -g};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  return detail::make_result(std::move(out), {a, b}, [](const Matrix& g, const detail::Node& self) {
    return std::vector<Matrix>{g.cwiseProduct(self.parents[1]->value), g.cwiseProduct(self.parents[0]->value)};
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, a.value() * s, [s](const Matrix& g, const detail::Node&) -> Matrix { return g * s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, a.value().array() + s, [](const Matrix& g, const detail::Node&) { return g; });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: expected [1x" + std::to_string(a.cols()) + "] row for " +
                     shape_string(a.rows(), a.cols()) + ", got " + shape_string(row.rows(), row.cols()));
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return detail::make_result(std::move(out), {a, row}, [](const Matrix& g, const detail::Node&) {
    return std::vector<Matrix>{g, g.colwise().sum()};
  });
}

Tensor relu(const Tensor& a) {
  return unary(a, a.value().cwiseMax(0.0), [](const Matrix& g, const detail::Node& self) -> Matrix {
    return (self.parents[0]->value.array() > 0.0).select(g, 0.0);
  });
}

Tensor tanh(const Tensor& a) {
  return unary(a, a.value().array().tanh(), [](const Matrix& g, const detail::Node& self) -> Matrix {
    return g.array() * (1.0 - self.value.array().square());
  });
}

Tensor exp(const Tensor& a) {
  return unary(a, a.value().array().exp(), [](const Matrix& g, const detail::Node& self) -> Matrix {
    return g.cwiseProduct(self.value);
  });
}

Tensor log(const Tensor& a) {
  if ((a.value().array() <= 0.0).any()) throw ContractError("log: non-positive input");
  return unary(a, a.value().array().log(), [](const Matrix& g, const detail::Node& self) -> Matrix {
    return g.array() / self.parents[0]->value.array();
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo > hi");
  return unary(a, a.value().cwiseMax(lo).cwiseMin(hi), [lo, hi](const Matrix& g, const detail::Node& self) -> Matrix {
    const auto& x = self.parents[0]->value.array();
    return (x >= lo && x <= hi).select(g, 0.0);
  });
}

Tensor smooth_l1(const Tensor& a, double delta) {
  if (!(delta > 0.0)) throw ContractError("smooth_l1: delta must be positive");
  Matrix out = a.value().unaryExpr([delta](double x) {
    const double ax = std::abs(x);
    return ax < delta ? 0.5 * x * x / delta : ax - 0.5 * delta;
  });
  return unary(a, std::move(out), [delta](const Matrix& g, const detail::Node& self) -> Matrix {
    Matrix d = self.parents[0]->value.unaryExpr([delta](double x) {
      return std::abs(x) < delta ? x / delta : (x > 0.0 ? 1.0 : -1.0);
    });
    return g.cwiseProduct(d);
  });
}

Tensor row_softmax(const Tensor& a) {
  Matrix out(a.rows(), a.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    const double mx = a.value().row(r).maxCoeff();
    out.row(r) = (a.value().row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return unary(a, std::move(out), [](const Matrix& g, const detail::Node& self) -> Matrix {
    const Matrix& y = self.value;
    Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
    return y.cwiseProduct(g - dots.replicate(1, g.cols()));
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  const Index q = a.cols();
  if (q < 2) throw ShapeError("layer_norm: needs at least 2 columns, got " + shape_string(a.rows(), q));
  if (gain.rows() != 1 || gain.cols() != q || bias.rows() != 1 || bias.cols() != q) {
    throw ShapeError("layer_norm: gain/bias must be [1x" + std::to_string(q) + "], got " +
                     shape_string(gain.rows(), gain.cols()) + " and " + shape_string(bias.rows(), bias.cols()));
  }
  const Index p = a.rows();
  Matrix normed(p, q);
  Eigen::VectorXd inv_std(p);
  for (Index r = 0; r < p; ++r) {
    const double mean = a.value().row(r).mean();
    const double var = (a.value().row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    normed.row(r) = (a.value().row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (normed.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return detail::make_result(
      std::move(out), {a, gain, bias},
      [normed = std::move(normed), inv_std = std::move(inv_std)](const Matrix& g, const detail::Node& self) {
        const Matrix& gv = self.parents[1]->value;
        Matrix dnorm = g.array().rowwise() * gv.row(0).array();
        Matrix dx(g.rows(), g.cols());
        for (Index r = 0; r < g.rows(); ++r) {
          const double mean_d = dnorm.row(r).mean();
          const double mean_dx = dnorm.row(r).cwiseProduct(normed.row(r)).mean();
          dx.row(r) = inv_std(r) * (dnorm.row(r).array() - mean_d - normed.row(r).array() * mean_dx);
        }
        Matrix dgain = g.cwiseProduct(normed).colwise().sum();
        Matrix dbias = g.colwise().sum();
        return std::vector<Matrix>{std::move(dx), std::move(dgain), std::move(dbias)};
      });
}

Tensor l2_normalize_rows(const Tensor& a) {
  constexpr double kMinNorm = 1e-12;
  Matrix out = a.value();
  Eigen::VectorXd norms = a.value().rowwise().norm();
  for (Index r = 0; r < out.rows(); ++r) {
    if (norms(r) >= kMinNorm) out.row(r) /= norms(r);
  }
  return unary(a, std::move(out), [norms = std::move(norms)](const Matrix& g, const detail::Node& self) -> Matrix {
    Matrix dx = g;
    for (Index r = 0; r < g.rows(); ++r) {
      if (norms(r) < kMinNorm) continue;
      const double proj = self.value.row(r).dot(g.row(r));
      dx.row(r) = (g.row(r) - proj * self.value.row(r)) / norms(r);
    }
    return dx;
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Tensor& t : parts) {
    if (t.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_string(parts.front().rows(), parts.front().cols()) +
                       " vs " + shape_string(t.rows(), t.cols()));
    }
    cols += t.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> widths;
  Index at = 0;
  for (const Tensor& t : parts) {
    out.middleCols(at, t.cols()) = t.value();
    widths.push_back(t.cols());
    at += t.cols();
  }
  return detail::make_result(std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                             [widths = std::move(widths)](const Matrix& g, const detail::Node&) {
                               std::vector<Matrix> out;
                               Index at = 0;
                               for (Index w : widths) {
                                 out.emplace_back(g.middleCols(at, w));
                                 at += w;
                               }
                               return out;
                             });
}

Tensor slice_rows(const Tensor& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_string(a.rows(), a.cols()));
  }
  return unary(a, a.value().middleRows(begin, count), [begin, count](const Matrix& g, const detail::Node& self) -> Matrix {
    Matrix d = Matrix::Zero(self.parents[0]->value.rows(), g.cols());
    d.middleRows(begin, count) = g;
    return d;
  });
}

Tensor slice_cols(const Tensor& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_string(a.rows(), a.cols()));
  }
  return unary(a, a.value().middleCols(begin, count), [begin, count](const Matrix& g, const detail::Node& self) -> Matrix {
    Matrix d = Matrix::Zero(g.rows(), self.parents[0]->value.cols());
    d.middleCols(begin, count) = g;
    return d;
  });
}

Tensor mean_rows(const Tensor& a) {
  if (a.rows() == 0) throw ShapeError("mean_rows: empty tensor");
  return unary(a, a.value().colwise().mean(), [](const Matrix& g, const detail::Node& self) -> Matrix {
    const Index n = self.parents[0]->value.rows();
    return g.replicate(n, 1) / static_cast<double>(n);
  });
}

Tensor sum(const Tensor& a) {
  return unary(a, Matrix::Constant(1, 1, a.value().sum()), [](const Matrix& g, const detail::Node& self) -> Matrix {
    const Matrix& x = self.parents[0]->value;
    return Matrix::Constant(x.rows(), x.cols(), g(0, 0));
  });
}

Tensor pick(const Tensor& a, std::span<const std::pair<Index, Index>> entries) {
  Matrix out(static_cast<Index>(entries.size()), 1);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto [r, c] = entries[k];
    if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) {
      throw ShapeError("pick: entry (" + std::to_string(r) + ", " + std::to_string(c) + ") outside " +
                       shape_string(a.rows(), a.cols()));
    }
    out(static_cast<Index>(k), 0) = a(r, c);
  }
  std::vector<std::pair<Index, Index>> saved(entries.begin(), entries.end());
  return unary(a, std::move(out), [saved = std::move(saved)](const Matrix& g, const detail::Node& self) -> Matrix {
    const Matrix& x = self.parents[0]->value;
    Matrix d = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t k = 0; k < saved.size(); ++k) d(saved[k].first, saved[k].second) += g(static_cast<Index>(k), 0);
    return d;
  });
}

// ---- gradient checking ----------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double step,
                           const GradTamper& tamper) {
  std::vector<Matrix> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = f();
    tape.backward(loss);
    analytic.reserve(params.size());
    for (const Tensor& p : params) analytic.push_back(tape.grad(p));
  }
  if (tamper) tamper(analytic);

  Tape::Suspend no_record;
  auto evaluate = [&f]() { return f().item(); };

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& value = params[k].mutable_value();
    for (Index r = 0; r < value.rows(); ++r) {
      for (Index c = 0; c < value.cols(); ++c) {
        const double saved = value(r, c);
        value(r, c) = saved + step;
        const double up = evaluate();
        value(r, c) = saved - step;
        const double down = evaluate();
        value(r, c) = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double a = analytic[k](r, c);
        const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        if (err > result.max_rel_error) result = {err, k, r, c};
      }
    }
  }
  return result;
}

}  // namespace mgrasp
