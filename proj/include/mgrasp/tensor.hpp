#pragma once

#include <Eigen/Dense>

#include "mgrasp/errors.hpp"

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mgrasp {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

std::string shape_string(Index rows, Index cols);

class Tape;
class Tensor;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Maps the upstream gradient to one contribution per parent. An empty matrix
// means "no contribution".
using BackwardFn = std::function<std::vector<Matrix>(const Matrix& grad_out, const Node& self)>;

struct Node {
  Matrix value;
  bool requires_grad = false;
  const Tape* tape = nullptr;  // null for leaves and untracked results
  std::size_t index = 0;       // position on the owning tape
  std::vector<NodePtr> parents;
  BackwardFn backward;
};

Tensor make_result(Matrix value, std::vector<Tensor> parents, BackwardFn backward);

}  // namespace detail

/// Dense row-major 2-D array of doubles, optionally participating in a tape.
///
/// A Tensor is a shared handle: copies refer to the same node. Values of
/// recorded nodes are immutable; leaves (parameters, inputs) may be updated
/// between training steps through mutable_value().
class Tensor {
 public:
  Tensor();
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
  static Tensor scalar(double v);

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  const Matrix& value() const { return node_->value; }
  double item() const;
  double operator()(Index r, Index c) const { return node_->value(r, c); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->tape == nullptr && node_->parents.empty(); }
  bool on_tape() const { return node_->tape != nullptr; }

  /// Leaves only; throws ContractError for recorded tensors.
  Matrix& mutable_value();

  /// Same value, cut from any graph.
  Tensor detach() const;
  /// Deep copy into a fresh leaf with the same requires_grad flag.
  Tensor clone() const;

  const detail::Node* id() const { return node_.get(); }

 private:
  friend class Tape;
  friend Tensor detail::make_result(Matrix, std::vector<Tensor>, detail::BackwardFn);
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  detail::NodePtr node_;
};

/// Ordered record of differentiable operations.
///
/// Operations record onto the tape that is active on the calling thread (see
/// Tape::Scope). With no active tape, operations compute values only. A tape
/// may be consumed by backward() exactly once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes a tape the recording target for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  /// Disables recording on the current thread for its lifetime.
  class Suspend {
   public:
    Suspend();
    ~Suspend();
    Suspend(const Suspend&) = delete;
    Suspend& operator=(const Suspend&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  void backward(const Tensor& loss);

  /// Gradient of the last backward() loss with respect to `t`. Zeros of the
  /// same shape when `t` did not influence the loss.
  Matrix grad(const Tensor& t) const;

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend Tensor detail::make_result(Matrix, std::vector<Tensor>, detail::BackwardFn);
  void record(const detail::NodePtr& node);

  std::vector<detail::NodePtr> nodes_;
  std::vector<Matrix> grads_;
  std::unordered_map<const detail::Node*, Matrix> leaf_grads_;
  bool consumed_ = false;
};

// ---- differentiable operations -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
/// Adds a 1×q row to every row of a p×q tensor. The only broadcast supported.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// Gradient passes only where lo <= a <= hi.
Tensor clamp(const Tensor& a, double lo, double hi);
/// Smooth-L1 (Huber with transition `delta`), elementwise.
Tensor smooth_l1(const Tensor& a, double delta);

/// Softmax along each row, stabilised by the row maximum.
Tensor row_softmax(const Tensor& a);
/// Per-row normalisation with population variance, then affine gain/bias.
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// Rows scaled to unit L2 norm; rows with norm below 1e-12 pass through.
Tensor l2_normalize_rows(const Tensor& a);

Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, Index begin, Index count);
Tensor slice_cols(const Tensor& a, Index begin, Index count);
/// 1×q mean over rows.
Tensor mean_rows(const Tensor& a);
/// 1×1 sum of all entries.
Tensor sum(const Tensor& a);
/// n×1 column of the entries a(r, c) for each (r, c) in `entries`.
Tensor pick(const Tensor& a, std::span<const std::pair<Index, Index>> entries);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---- gradient checking ---------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t param = 0;  // index into the checked parameter list
  Index row = 0;
  Index col = 0;
};

/// Optional hook applied to the analytic gradients before comparison.
using GradTamper = std::function<void(std::vector<Matrix>&)>;

/// Compares tape gradients of the scalar produced by `f` against central
/// differences. Relative error per entry is |a − n| / max(1e-8, |a| + |n|).
/// `f` must build its graph from `params` on the active tape.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                           double step = 1e-5, const GradTamper& tamper = {});

}  // namespace mgrasp
