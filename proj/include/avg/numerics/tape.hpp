#pragma once

#include <functional>
#include <string>
#include <vector>

#include "avg/errors.hpp"
#include "avg/types.hpp"

namespace avg::numerics {

template <class Scalar>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <class Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Scalar scalar() const { return value()(0, 0); }

  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode autodiff record. Nodes are appended in evaluation order, so
/// creation order is a topological order and backward walks it in reverse.
template <class Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backward = std::function<void(Tape&, const Mat& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat value) { return push(std::move(value), nullptr, false, {}); }
  Var<Scalar> variable(Mat value) { return push(std::move(value), nullptr, true, {}); }

  /// Leaf that references caller-owned storage. The storage must outlive the
  /// tape and stay unmodified until backward() has run.
  Var<Scalar> parameter(const Mat& value, bool requires_grad = true) {
    return push(Mat(), &value, requires_grad, {});
  }
  Var<Scalar> parameter(Mat&&, bool = true) = delete;  // would dangle; use variable()

  /// Appends an op node. The backward closure is kept only when some input
  /// requires a gradient.
  Var<Scalar> record(Mat value, std::initializer_list<Var<Scalar>> inputs, Backward fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || requires_grad(in.id());
    if (check_finite_ && !value.allFinite()) {
      throw TrainingError("non-finite value produced by op #" + std::to_string(nodes_.size()));
    }
    return push(std::move(value), nullptr, needs, needs ? std::move(fn) : Backward{});
  }

  const Mat& value(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.external ? *n.external : n.owned;
  }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  /// Adds g into the gradient of node id (no-op if the node needs none).
  template <class Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  /// Gradient buffer for in-place sparse accumulation (zero-initialised).
  Mat* grad_buffer(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      const Mat& v = value(id);
      n.grad = Mat::Zero(v.rows(), v.cols());
      n.has_grad = true;
    }
    return &n.grad;
  }

  void backward(Var<Scalar> loss) {
    if (loss.tape() != this) throw UsageError("backward: loss belongs to another tape");
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw UsageError("backward: loss must be scalar, got " + std::to_string(loss.rows()) + "x" +
                       std::to_string(loss.cols()));
    }
    if (!loss.requires_grad()) return;
    accumulate(loss.id(), Mat::Ones(1, 1));
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Gradient of the last backward() with respect to v; zeros if unreached.
  Mat gradient(Var<Scalar> v) const {
    const Node& n = nodes_[static_cast<size_t>(v.id())];
    if (n.has_grad) return n.grad;
    return Mat::Zero(v.rows(), v.cols());
  }

  size_t size() const { return nodes_.size(); }
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    Mat owned;
    const Mat* external = nullptr;
    Mat grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };

  Var<Scalar> push(Mat value, const Mat* external, bool requires_grad, Backward fn) {
    Node n;
    n.owned = std::move(value);
    n.external = external;
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size() - 1));
  }

  std::vector<Node> nodes_;
#ifndef NDEBUG
  bool check_finite_ = true;
#else
  bool check_finite_ = false;
#endif
};

}  // namespace avg::numerics
