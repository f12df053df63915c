#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>

namespace moce {

/// Error type for every contract violation raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Index = Eigen::Index;

/// Dense row-major matrix. Every tensor the model needs is rank <= 2; higher
/// ranks (e.g. conv kernels k x C x C) are stored flattened as (k*C) x C.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
constexpr Scalar neg_inf() {
  return -std::numeric_limits<Scalar>::infinity();
}

/// A named trainable tensor that outlives any single tape. `grad` accumulates
/// across backward passes until zero_grad().
template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;

  Parameter() = default;
  Parameter(std::string n, Matrix<Scalar> v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix<Scalar>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

template <typename Scalar>
class Tape;

/// Lightweight handle to a node recorded on a Tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  const Matrix<Scalar>& grad() const { return tape_->grad(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar scalar() const { return value()(0, 0); }

  Tape<Scalar>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape. Nodes are appended in evaluation order, so the
/// reverse of insertion order is a valid topological order for backward().
///
/// A tape built with `record = false` keeps values only; it is used for
/// inference where no backward pass will happen.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<Scalar> constant(Mat value) {
    nodes_.push_back(Node{std::move(value), Mat(), {}, nullptr, false});
    return {this, nodes_.size() - 1};
  }

  /// A free input whose gradient is kept on the tape (read it via Var::grad()).
  Var<Scalar> leaf(Mat value) {
    nodes_.push_back(Node{std::move(value), Mat(), {}, nullptr, record_});
    return {this, nodes_.size() - 1};
  }

  /// Binds a Parameter; repeated calls for the same parameter return the same
  /// node so shared weights accumulate into one gradient.
  Var<Scalar> parameter(Parameter<Scalar>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
    nodes_.push_back(Node{p.value, Mat(), {}, &p, record_});
    param_ids_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  /// Records the result of an operation. `fn` runs during backward() and is
  /// dropped entirely when no parent requires a gradient.
  template <typename... Parents>
  Var<Scalar> push(Mat value, BackwardFn fn, const Parents&... parents) {
    const bool needs = record_ && (requires_grad(parents.id()) || ...);
    nodes_.push_back(Node{std::move(value), Mat(), needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
    return {this, nodes_.size() - 1};
  }

  /// Variant for operations with a runtime number of parents.
  Var<Scalar> push_many(Mat value, BackwardFn fn, bool any_parent_requires_grad) {
    const bool needs = record_ && any_parent_requires_grad;
    nodes_.push_back(Node{std::move(value), Mat(), needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
    return {this, nodes_.size() - 1};
  }

  const Mat& value(std::size_t id) const { return nodes_[id].value; }

  /// Gradient of the loss with respect to node `id`; zero-filled when the node
  /// received no contribution.
  const Mat& grad(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      auto& mut = const_cast<Node&>(n);
      mut.grad = Mat::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Mutable gradient buffer for sparse accumulation (e.g. row scatter).
  Mat& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Parameter gradients are added
  /// into Parameter::grad. A tape can be differentiated only once.
  void backward(const Var<Scalar>& loss) {
    if (!record_) throw Error("backward() on a non-recording tape");
    if (backward_done_) throw Error("backward() called twice on the same tape");
    if (loss.tape() != this) throw Error("loss does not belong to this tape");
    if (loss.rows() != 1 || loss.cols() != 1) throw Error("backward() needs a scalar (1x1) loss");
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = Mat::Constant(1, 1, Scalar(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this);
    }
    for (auto& [param, id] : param_ids_) {
      const Node& n = nodes_[id];
      if (n.grad.size() != 0) param->grad += n.grad;
    }
  }

  /// Clears the recorded graph so the tape can be reused.
  void reset() {
    nodes_.clear();
    param_ids_.clear();
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Appends a fingerprint of a discrete decision (e.g. a top-k selection).
  /// Finite-difference checks compare fingerprints to detect selection flips.
  void note_decision(std::size_t h) { decision_hash_ = decision_hash_ * 1000003u ^ (h + 0x9e3779b97f4a7c15ull); }
  std::size_t decision_fingerprint() const { return decision_hash_; }
  /// When set, piecewise-linear ops (ReLU) also fingerprint their active set.
  void set_track_kinks(bool on) { track_kinks_ = on; }
  bool track_kinks() const { return track_kinks_; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    BackwardFn backward;
    Parameter<Scalar>* param;
    bool requires_grad;
  };

  std::deque<Node> nodes_;
  std::unordered_map<Parameter<Scalar>*, std::size_t> param_ids_;
  bool record_;
  bool backward_done_ = false;
  std::size_t decision_hash_ = 0;
  bool track_kinks_ = false;
};

}  // namespace moce
