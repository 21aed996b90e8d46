#pragma once

#include <cmath>
#include <map>
#include <string>

#include "avg/errors.hpp"
#include "avg/types.hpp"

namespace avg::numerics {

/// Named parameter tensors, iterated in name order.
template <class Scalar>
class ParameterSet {
 public:
  using Mat = Matrix<Scalar>;
  using Map = std::map<std::string, Mat>;

  Mat& add(const std::string& name, Mat value) {
    auto [it, inserted] = entries_.emplace(name, std::move(value));
    if (!inserted) throw UsageError("duplicate parameter '" + name + "'");
    return it->second;
  }

  Mat& operator[](const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw UsageError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Mat& operator[](const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw UsageError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  Index total_size() const {
    Index n = 0;
    for (const auto& [_, m] : entries_) n += m.size();
    return n;
  }

  template <class Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (const auto& [name, m] : entries_) out.add(name, m.template cast<Other>());
    return out;
  }

  bool operator==(const ParameterSet& other) const { return entries_ == other.entries_; }

 private:
  Map entries_;
};

/// Gradients keyed like a ParameterSet; a missing entry means zero.
template <class Scalar>
using Gradients = std::map<std::string, Matrix<Scalar>>;

template <class Scalar>
Scalar global_norm(const Gradients<Scalar>& grads) {
  Scalar sq = 0;
  for (const auto& [_, g] : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

/// Rescales grads so their global L2 norm is at most max_norm.
template <class Scalar>
void clip_global_norm(Gradients<Scalar>& grads, Scalar max_norm) {
  const Scalar n = global_norm(grads);
  if (max_norm > 0 && n > max_norm) {
    for (auto& [_, g] : grads) g *= max_norm / n;
  }
}

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class Scalar>
struct AdamState {
  AdamHyper hyper;
  long step = 0;
  std::map<std::string, Matrix<Scalar>> first;
  std::map<std::string, Matrix<Scalar>> second;

  static AdamState for_parameters(const ParameterSet<Scalar>& params, AdamHyper hyper) {
    AdamState s;
    s.hyper = hyper;
    for (const auto& [name, p] : params) {
      s.first.emplace(name, Matrix<Scalar>::Zero(p.rows(), p.cols()));
      s.second.emplace(name, Matrix<Scalar>::Zero(p.rows(), p.cols()));
    }
    return s;
  }

  /// Clears the moments of one row, e.g. after reseeding a codebook entry.
  void reset_row(const std::string& name, Index row) {
    first.at(name).row(row).setZero();
    second.at(name).row(row).setZero();
  }
};

/// One bias-corrected Adam step over every parameter.
template <class Scalar>
void adam_update(ParameterSet<Scalar>& params, const Gradients<Scalar>& grads, AdamState<Scalar>& state) {
  for (const auto& [name, p] : params) {
    if (!state.first.count(name) || !state.second.count(name)) {
      throw UsageError("adam_update: no optimizer state for parameter '" + name + "'");
    }
    if (state.first.at(name).rows() != p.rows() || state.first.at(name).cols() != p.cols()) {
      throw ShapeError("adam_update: state shape mismatch for '" + name + "'");
    }
  }
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw UsageError("adam_update: gradient for unknown parameter '" + name + "'");
    const auto& p = params[name];
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw ShapeError("adam_update: gradient shape mismatch for '" + name + "'");
    }
  }
  ++state.step;
  const auto& h = state.hyper;
  const Scalar b1 = static_cast<Scalar>(h.beta1), b2 = static_cast<Scalar>(h.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(h.beta1, static_cast<double>(state.step)));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(h.beta2, static_cast<double>(state.step)));
  const Scalar lr = static_cast<Scalar>(h.lr), eps = static_cast<Scalar>(h.eps);
  for (auto& [name, p] : params) {
    auto& m = state.first.at(name);
    auto& v = state.second.at(name);
    auto it = grads.find(name);
    if (it != grads.end()) {
      m = b1 * m + (Scalar(1) - b1) * it->second;
      v = b2 * v + (Scalar(1) - b2) * it->second.cwiseAbs2();
    } else {
      m *= b1;
      v *= b2;
    }
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

}  // namespace avg::numerics
