#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "avg/numerics/tape.hpp"

namespace avg::numerics {

namespace detail {

inline std::string shape_str(Index r, Index c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

template <class Scalar>
std::string shape_str(const Var<Scalar>& v) {
  return shape_str(v.rows(), v.cols());
}

template <class Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.tape() != b.tape()) throw UsageError(std::string(op) + ": operands live on different tapes");
}

template <class Scalar>
[[noreturn]] void shape_mismatch(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

/// Row-wise numerically stable log-sum-exp.
template <class Derived>
auto row_logsumexp(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Vector<Scalar> out(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out(r) = m + std::log((x.row(r).array() - m).exp().sum());
  }
  return out;
}

}  // namespace detail

template <class Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) detail::shape_mismatch("matmul", a, b);
  Matrix<Scalar> out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// a * b^T, used for tied output projections.
template <class Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b, "matmul_nt");
  if (a.cols() != b.cols()) detail::shape_mismatch("matmul_nt", a, b);
  Matrix<Scalar> out(a.rows(), b.rows());
  out.noalias() = a.value() * b.value().transpose();
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

template <class Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b, "add");
  if (a.rows() != b.rows() || a.cols() != b.cols()) detail::shape_mismatch("add", a, b);
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() + b.value(), {a, b}, [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <class Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b, "sub");
  if (a.rows() != b.rows() || a.cols() != b.cols()) detail::shape_mismatch("sub", a, b);
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() - b.value(), {a, b}, [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, -g);
  });
}

/// Adds a 1 x cols bias row to every row of a.
template <class Scalar>
Var<Scalar> add_bias(Var<Scalar> a, Var<Scalar> bias) {
  detail::require_same_tape(a, bias, "add_bias");
  if (bias.rows() != 1 || bias.cols() != a.cols()) detail::shape_mismatch("add_bias", a, bias);
  Matrix<Scalar> out = a.value();
  out.rowwise() += bias.value().row(0);
  const int ia = a.id(), ib = bias.id();
  return a.tape()->record(std::move(out), {a, bias}, [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

/// Elementwise product.
template <class Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b, "mul");
  if (a.rows() != b.rows() || a.cols() != b.cols()) detail::shape_mismatch("mul", a, b);
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                          [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                            if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                          });
}

template <class Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  const int ia = a.id();
  return a.tape()->record(a.value() * s, {a}, [ia, s](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, g * s);
  });
}

/// Embedding lookup: out.row(i) = table.row(ids[i]). Backward scatters into
/// the selected rows only.
template <class Scalar>
Var<Scalar> gather_rows(Var<Scalar> table, std::span<const int> ids) {
  const Matrix<Scalar>& tv = table.value();
  Matrix<Scalar> out(static_cast<Index>(ids.size()), tv.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(ids[i]) + " out of range for " +
                       detail::shape_str(table));
    }
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  const int it = table.id();
  return table.tape()->record(
      std::move(out), {table},
      [it, idx = std::vector<int>(ids.begin(), ids.end())](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar>* buf = t.grad_buffer(it);
        if (!buf) return;
        for (size_t i = 0; i < idx.size(); ++i) buf->row(idx[i]) += g.row(static_cast<Index>(i));
      });
}

/// Sums consecutive row groups: out.row(s) = sum of lengths[s] rows.
template <class Scalar>
Var<Scalar> segment_sum_rows(Var<Scalar> x, std::span<const Index> lengths) {
  Index total = 0;
  for (Index l : lengths) total += l;
  if (total != x.rows()) {
    throw ShapeError("segment_sum_rows: segment lengths sum to " + std::to_string(total) + " but input is " +
                     detail::shape_str(x));
  }
  Matrix<Scalar> out = Matrix<Scalar>::Zero(static_cast<Index>(lengths.size()), x.cols());
  Index r = 0;
  for (size_t s = 0; s < lengths.size(); ++s) {
    for (Index i = 0; i < lengths[s]; ++i, ++r) out.row(static_cast<Index>(s)) += x.value().row(r);
  }
  const int ix = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [ix, lens = std::vector<Index>(lengths.begin(), lengths.end())](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar>* buf = t.grad_buffer(ix);
        if (!buf) return;
        Index r = 0;
        for (size_t s = 0; s < lens.size(); ++s) {
          for (Index i = 0; i < lens[s]; ++i, ++r) buf->row(r) += g.row(static_cast<Index>(s));
        }
      });
}

template <class Scalar>
Var<Scalar> relu(Var<Scalar> x) {
  const int ix = x.id();
  return x.tape()->record(x.value().cwiseMax(Scalar(0)), {x}, [ix](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ix, (t.value(ix).array() > Scalar(0)).select(g, Scalar(0)));
  });
}

/// Row-wise softmax.
template <class Scalar>
Var<Scalar> softmax(Var<Scalar> x) {
  const Vector<Scalar> lse = detail::row_logsumexp(x.value());
  Matrix<Scalar> y = (x.value().colwise() - lse).array().exp().matrix();
  const int ix = x.id();
  auto yv = std::make_shared<Matrix<Scalar>>(y);
  return x.tape()->record(std::move(y), {x}, [ix, yv](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const Vector<Scalar> dot = (g.array() * yv->array()).rowwise().sum();
    t.accumulate(ix, (yv->array() * (g.colwise() - dot).array()).matrix());
  });
}

/// Row-wise log-softmax.
template <class Scalar>
Var<Scalar> log_softmax(Var<Scalar> x) {
  const Vector<Scalar> lse = detail::row_logsumexp(x.value());
  Matrix<Scalar> y = x.value().colwise() - lse;
  const int ix = x.id();
  return x.tape()->record(std::move(y), {x}, [ix, lse](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const Matrix<Scalar> p = (t.value(ix).colwise() - lse).array().exp().matrix();
    const Vector<Scalar> gsum = g.rowwise().sum();
    t.accumulate(ix, g - (p.array().colwise() * gsum.array()).matrix());
  });
}

/// Row-wise layer normalisation with learned gain and bias (1 x cols each).
template <class Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias, Scalar eps = Scalar(1e-5)) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) detail::shape_mismatch("layer_norm", x, gain);
  if (bias.rows() != 1 || bias.cols() != x.cols()) detail::shape_mismatch("layer_norm", x, bias);
  const Matrix<Scalar>& xv = x.value();
  const Index n = xv.cols();
  auto xhat = std::make_shared<Matrix<Scalar>>(xv.rows(), n);
  auto inv_std = std::make_shared<Vector<Scalar>>(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar mu = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mu).square().mean();
    (*inv_std)(r) = Scalar(1) / std::sqrt(var + eps);
    xhat->row(r) = (xv.row(r).array() - mu) * (*inv_std)(r);
  }
  Matrix<Scalar> y = xhat->array().rowwise() * gain.value().row(0).array();
  y.rowwise() += bias.value().row(0);
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape()->record(std::move(y), {x, gain, bias},
                          [ix, ig, ib, xhat, inv_std, n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            if (t.requires_grad(ig)) t.accumulate(ig, (g.array() * xhat->array()).colwise().sum().matrix());
                            if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                            if (!t.requires_grad(ix)) return;
                            Matrix<Scalar> gx = g.array().rowwise() * t.value(ig).row(0).array();
                            for (Index r = 0; r < gx.rows(); ++r) {
                              const Scalar m1 = gx.row(r).mean();
                              const Scalar m2 = (gx.row(r).array() * xhat->row(r).array()).sum() / Scalar(n);
                              gx.row(r) = ((gx.row(r).array() - m1) - xhat->row(r).array() * m2) * (*inv_std)(r);
                            }
                            t.accumulate(ix, gx);
                          });
}

/// Sum of squares of all entries, as a 1x1 value.
template <class Scalar>
Var<Scalar> squared_l2(Var<Scalar> x) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().squaredNorm();
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ix, t.value(ix) * (Scalar(2) * g(0, 0)));
  });
}

template <class Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  const int ix = x.id();
  const Index r = x.rows(), c = x.cols();
  return x.tape()->record(std::move(out), {x}, [ix, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ix, Matrix<Scalar>::Constant(r, c, g(0, 0)));
  });
}

template <class Scalar>
Var<Scalar> mean(Var<Scalar> x) {
  const Scalar n = static_cast<Scalar>(x.value().size());
  return scale(sum(x), Scalar(1) / n);
}

enum class Reduction { kMean, kSum };

/// Softmax cross-entropy of each row of logits against targets[row].
template <class Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> targets, Reduction reduction = Reduction::kMean) {
  if (static_cast<Index>(targets.size()) != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     detail::shape_str(logits));
  }
  const Vector<Scalar> lse = detail::row_logsumexp(logits.value());
  Scalar total = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const int tgt = targets[static_cast<size_t>(r)];
    if (tgt < 0 || tgt >= logits.cols()) {
      throw ShapeError("cross_entropy: target " + std::to_string(tgt) + " out of range for logits " +
                       detail::shape_str(logits));
    }
    total += lse(r) - logits.value()(r, tgt);
  }
  const Scalar factor = reduction == Reduction::kMean ? Scalar(1) / Scalar(logits.rows()) : Scalar(1);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total * factor;
  const int il = logits.id();
  return logits.tape()->record(
      std::move(out), {logits},
      [il, lse, factor, tg = std::vector<int>(targets.begin(), targets.end())](Tape<Scalar>& t,
                                                                               const Matrix<Scalar>& g) {
        Matrix<Scalar> d = (t.value(il).colwise() - lse).array().exp().matrix();
        for (Index r = 0; r < d.rows(); ++r) d(r, tg[static_cast<size_t>(r)]) -= Scalar(1);
        t.accumulate(il, d * (g(0, 0) * factor));
      });
}

/// Passes the value forward and blocks gradient flow.
template <class Scalar>
Var<Scalar> stop_gradient(Var<Scalar> x) {
  return x.tape()->constant(x.value());
}

/// Inverted dropout: each entry is zeroed with probability rate and the rest
/// are scaled by 1/(1 - rate). rate 0 returns x itself.
template <class Scalar, class Rng>
Var<Scalar> dropout(Var<Scalar> x, double rate, Rng& rng) {
  if (rate <= 0) return x;
  if (rate >= 1) throw UsageError("dropout: rate must be below 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const Scalar s = static_cast<Scalar>(1.0 / (1.0 - rate));
  Matrix<Scalar> mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : Scalar(0);
  return mul(x, x.tape()->constant(std::move(mask)));
}

/// value(a) with gradient routed to both a and b: a + b - sg(b).
template <class Scalar>
Var<Scalar> straight_through(Var<Scalar> a, Var<Scalar> b) {
  return add(a, sub(b, stop_gradient(b)));
}

/// Log-sum-exp over every entry, as a 1x1 value.
template <class Scalar>
Var<Scalar> log_sum_exp(Var<Scalar> x) {
  const Scalar m = x.value().maxCoeff();
  const Scalar lse = m + std::log((x.value().array() - m).exp().sum());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = lse;
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, lse](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ix, ((t.value(ix).array() - lse).exp() * g(0, 0)).matrix());
  });
}

template <class Scalar>
Var<Scalar> element(Var<Scalar> x, Index r, Index c) {
  if (r < 0 || c < 0 || r >= x.rows() || c >= x.cols()) {
    throw ShapeError("element: (" + std::to_string(r) + "," + std::to_string(c) + ") outside " +
                     detail::shape_str(x));
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value()(r, c);
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (Matrix<Scalar>* buf = t.grad_buffer(ix)) (*buf)(r, c) += g(0, 0);
  });
}

/// Contrastive loss over consecutive score segments of a column vector:
/// sum over segments of logsumexp(segment) - segment[target].
template <class Scalar>
Var<Scalar> segment_cross_entropy(Var<Scalar> scores, std::span<const Index> lengths, std::span<const Index> targets) {
  if (scores.cols() != 1) throw ShapeError("segment_cross_entropy: scores must be a column, got " +
                                           detail::shape_str(scores));
  if (lengths.size() != targets.size()) throw ShapeError("segment_cross_entropy: lengths/targets size mismatch");
  const Vector<Scalar> s = scores.value().col(0);
  Index total = 0;
  for (size_t k = 0; k < lengths.size(); ++k) {
    if (targets[k] < 0 || targets[k] >= lengths[k]) {
      throw UsageError("segment_cross_entropy: positive index " + std::to_string(targets[k]) +
                       " outside segment of length " + std::to_string(lengths[k]));
    }
    total += lengths[k];
  }
  if (total != scores.rows()) throw ShapeError("segment_cross_entropy: segment lengths do not cover scores");
  Matrix<Scalar> out = Matrix<Scalar>::Zero(1, 1);
  auto probs = std::make_shared<Vector<Scalar>>(s.size());
  Index off = 0;
  for (size_t k = 0; k < lengths.size(); ++k) {
    const auto seg = s.segment(off, lengths[k]);
    const Scalar m = seg.maxCoeff();
    const Scalar lse = m + std::log((seg.array() - m).exp().sum());
    out(0, 0) += lse - seg(targets[k]);
    probs->segment(off, lengths[k]) = (seg.array() - lse).exp().matrix();
    off += lengths[k];
  }
  const int is = scores.id();
  return scores.tape()->record(
      std::move(out), {scores},
      [is, probs, lens = std::vector<Index>(lengths.begin(), lengths.end()),
       tg = std::vector<Index>(targets.begin(), targets.end())](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar> d = *probs;
        Index off = 0;
        for (size_t k = 0; k < lens.size(); ++k) {
          d(off + tg[k], 0) -= Scalar(1);
          off += lens[k];
        }
        t.accumulate(is, d * g(0, 0));
      });
}

}  // namespace avg::numerics
