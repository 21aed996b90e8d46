#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "avg/numerics/ops.hpp"

namespace avg::numerics {

/// One attention block: query rows [q_begin, q_begin+q_len) attend to key rows
/// [k_begin, k_begin+k_len). Several segments may share the same key rows.
struct AttentionSegment {
  Index q_begin = 0;
  Index q_len = 0;
  Index k_begin = 0;
  Index k_len = 0;
};

struct AttentionLayout {
  std::vector<AttentionSegment> segments;
  /// Query i of a segment sees keys 0..i only (requires q_len == k_len).
  bool causal = false;
};

/// Multi-head scaled dot-product attention over packed rows. q is (Rq x d),
/// k and v are (Rk x d); heads split d into equal column blocks.
template <class Scalar>
Var<Scalar> attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, const AttentionLayout& layout, int heads) {
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) detail::shape_mismatch("attention", q, k);
  if (heads < 1 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                     " heads");
  }
  const Index dh = d / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  for (const auto& s : layout.segments) {
    if (s.q_begin < 0 || s.q_begin + s.q_len > q.rows() || s.k_begin < 0 || s.k_begin + s.k_len > k.rows()) {
      throw ShapeError("attention: segment outside packed rows");
    }
    if (layout.causal && s.q_len != s.k_len) throw ShapeError("attention: causal segment needs q_len == k_len");
    if (s.q_len > 0 && s.k_len == 0) throw ShapeError("attention: segment with queries but no keys");
  }

  const Matrix<Scalar>& qv = q.value();
  const Matrix<Scalar>& kv = k.value();
  const Matrix<Scalar>& vv = v.value();
  Matrix<Scalar> out = Matrix<Scalar>::Zero(q.rows(), d);
  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>();
  probs->reserve(layout.segments.size() * static_cast<size_t>(heads));

  for (const auto& s : layout.segments) {
    for (int h = 0; h < heads; ++h) {
      if (s.q_len == 0) {
        probs->emplace_back();
        continue;
      }
      const auto qs = qv.block(s.q_begin, h * dh, s.q_len, dh);
      const auto ks = kv.block(s.k_begin, h * dh, s.k_len, dh);
      const auto vs = vv.block(s.k_begin, h * dh, s.k_len, dh);
      Matrix<Scalar> p(s.q_len, s.k_len);
      p.noalias() = qs * ks.transpose();
      p *= inv_sqrt;
      for (Index i = 0; i < s.q_len; ++i) {
        const Index visible = layout.causal ? i + 1 : s.k_len;
        auto row = p.row(i);
        const Scalar m = row.head(visible).maxCoeff();
        row.head(visible) = (row.head(visible).array() - m).exp().matrix();
        row.head(visible) /= row.head(visible).sum();
        if (visible < s.k_len) row.tail(s.k_len - visible).setZero();
      }
      out.block(s.q_begin, h * dh, s.q_len, dh).noalias() = p * vs;
      probs->push_back(std::move(p));
    }
  }

  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape()->record(
      std::move(out), {q, k, v},
      [iq, ik, iv, probs, layout, heads, dh, inv_sqrt](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar>* gq = t.grad_buffer(iq);
        Matrix<Scalar>* gk = t.grad_buffer(ik);
        Matrix<Scalar>* gv = t.grad_buffer(iv);
        const Matrix<Scalar>& qv = t.value(iq);
        const Matrix<Scalar>& kv = t.value(ik);
        const Matrix<Scalar>& vv = t.value(iv);
        size_t pi = 0;
        for (const auto& s : layout.segments) {
          for (int h = 0; h < heads; ++h, ++pi) {
            if (s.q_len == 0) continue;
            const Matrix<Scalar>& p = (*probs)[pi];
            const auto go = g.block(s.q_begin, h * dh, s.q_len, dh);
            const auto vs = vv.block(s.k_begin, h * dh, s.k_len, dh);
            if (gv) gv->block(s.k_begin, h * dh, s.k_len, dh).noalias() += p.transpose() * go;
            if (!gq && !gk) continue;
            Matrix<Scalar> gp(s.q_len, s.k_len);
            gp.noalias() = go * vs.transpose();
            const Vector<Scalar> dot = (gp.array() * p.array()).rowwise().sum();
            Matrix<Scalar> gs = (p.array() * (gp.colwise() - dot).array()).matrix() * inv_sqrt;
            if (gq) gq->block(s.q_begin, h * dh, s.q_len, dh).noalias() += gs * kv.block(s.k_begin, h * dh, s.k_len, dh);
            if (gk) gk->block(s.k_begin, h * dh, s.k_len, dh).noalias() += gs.transpose() * qv.block(s.q_begin, h * dh, s.q_len, dh);
          }
        }
      });
}

/// Log-probability of targets[r] for each hidden row r under logits
/// hidden.row(r) * table^T + bias, normalised over allowed[r] only (an empty
/// allowed set means every column). Returns an (R x 1) column.
template <class Scalar>
Var<Scalar> restricted_log_prob(Var<Scalar> hidden, Var<Scalar> table, Var<Scalar> bias,
                                std::span<const std::vector<int>> allowed, std::span<const int> targets) {
  const Index rows = hidden.rows();
  if (table.cols() != hidden.cols()) detail::shape_mismatch("restricted_log_prob", hidden, table);
  if (bias.rows() != 1 || bias.cols() != table.rows()) detail::shape_mismatch("restricted_log_prob", table, bias);
  if (static_cast<Index>(allowed.size()) != rows || static_cast<Index>(targets.size()) != rows) {
    throw ShapeError("restricted_log_prob: allowed/targets must have one entry per hidden row");
  }
  const Matrix<Scalar>& hv = hidden.value();
  const Matrix<Scalar>& tv = table.value();
  const Matrix<Scalar>& bv = bias.value();
  Matrix<Scalar> out(rows, 1);
  // probs[r] aligned with allowed[r] (or with every column when empty).
  auto probs = std::make_shared<std::vector<Vector<Scalar>>>(static_cast<size_t>(rows));
  auto target_pos = std::make_shared<std::vector<Index>>(static_cast<size_t>(rows), -1);
  for (Index r = 0; r < rows; ++r) {
    const auto& cols = allowed[static_cast<size_t>(r)];
    const int tgt = targets[static_cast<size_t>(r)];
    Vector<Scalar> logits;
    if (cols.empty()) {
      logits.noalias() = tv * hv.row(r).transpose();
      logits += bv.row(0).transpose();
      (*target_pos)[static_cast<size_t>(r)] = tgt;
    } else {
      logits.resize(static_cast<Index>(cols.size()));
      for (size_t c = 0; c < cols.size(); ++c) {
        logits(static_cast<Index>(c)) = tv.row(cols[c]).dot(hv.row(r)) + bv(0, cols[c]);
        if (cols[c] == tgt) (*target_pos)[static_cast<size_t>(r)] = static_cast<Index>(c);
      }
    }
    const Index tp = (*target_pos)[static_cast<size_t>(r)];
    if (tp < 0 || tp >= logits.size()) {
      throw UsageError("restricted_log_prob: target " + std::to_string(tgt) + " not in the allowed set");
    }
    const Scalar m = logits.maxCoeff();
    const Scalar lse = m + std::log((logits.array() - m).exp().sum());
    out(r, 0) = logits(tp) - lse;
    (*probs)[static_cast<size_t>(r)] = (logits.array() - lse).exp().matrix();
  }
  const int ih = hidden.id(), it = table.id(), ib = bias.id();
  return hidden.tape()->record(
      std::move(out), {hidden, table, bias},
      [ih, it, ib, probs, target_pos, sets = std::vector<std::vector<int>>(allowed.begin(), allowed.end())](
          Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar>* gh = t.grad_buffer(ih);
        Matrix<Scalar>* gt = t.grad_buffer(it);
        Matrix<Scalar>* gb = t.grad_buffer(ib);
        const Matrix<Scalar>& hv = t.value(ih);
        const Matrix<Scalar>& tv = t.value(it);
        for (size_t r = 0; r < sets.size(); ++r) {
          const Index row = static_cast<Index>(r);
          Vector<Scalar> dl = -(*probs)[r] * g(row, 0);
          dl((*target_pos)[r]) += g(row, 0);
          const auto& cols = sets[r];
          if (cols.empty()) {
            if (gh) gh->row(row).noalias() += dl.transpose() * tv;
            if (gt) gt->noalias() += dl * hv.row(row);
            if (gb) gb->row(0) += dl.transpose();
          } else {
            for (size_t c = 0; c < cols.size(); ++c) {
              const Scalar w = dl(static_cast<Index>(c));
              if (gh) gh->row(row) += w * tv.row(cols[c]);
              if (gt) gt->row(cols[c]) += w * hv.row(row);
              if (gb) (*gb)(0, cols[c]) += w;
            }
          }
        }
      });
}

}  // namespace avg::numerics
