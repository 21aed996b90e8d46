#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "avg/genmodel.hpp"
#include "avg/tokenizer.hpp"

namespace avg::decoding {

/// Prefix tree over the distinct voken sequences of an index.
class VokenTrie {
 public:
  struct Node {
    std::map<int, int> children;  // voken id -> node index
    bool terminal = false;
  };

  void insert(const VokenSequence& seq);

  /// Child voken ids of the node reached by prefix, ascending.
  std::vector<int> allowed_next(const VokenSequence& prefix) const;
  bool contains(const VokenSequence& seq) const;
  /// Every terminal sequence, lexicographically sorted.
  std::vector<VokenSequence> enumerate() const;

  size_t leaf_count() const { return leaves_; }
  int depth() const { return depth_; }
  const Node& root() const { return nodes_.front(); }
  const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }
  /// Node index for prefix, or -1.
  int find(const VokenSequence& prefix) const;

  genmodel::AllowedFn allowed_fn() const {
    return [this](const VokenSequence& prefix) { return allowed_next(prefix); };
  }

 private:
  std::vector<Node> nodes_{Node{}};
  size_t leaves_ = 0;
  int depth_ = 0;
};

VokenTrie build_trie(const tokenizer::VokenIndex& index);

enum class ScoreMode {
  kLogProb,  // s = sum_j log p_j
  kProbSum,  // s = sum_j p_j
};

struct BeamOptions {
  /// Renormalize each step's softmax over the allowed children; otherwise the
  /// full-vocabulary probabilities of the allowed children are used as is.
  bool renormalize = true;
  ScoreMode score_mode = ScoreMode::kLogProb;
};

struct BeamHypothesis {
  VokenSequence prefix;
  double score = 0.0;
  bool finished = false;
};

/// Higher score first, then lexicographically smaller sequence.
inline bool beam_order(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.prefix < b.prefix;
}

/// Per-step scores of the children of each expanded prefix: for group g,
/// prefix prefixes[g] of query query_of[g], one log-probability per entry of
/// children[g].
using StepScorer = std::function<std::vector<std::vector<double>>(
    const std::vector<int>& query_of, const std::vector<VokenSequence>& prefixes,
    const std::vector<std::vector<int>>& children)>;

/// Trie-constrained beam search for `queries` independent queries. Result q
/// holds min(b, reachable sequences) finished hypotheses in beam order.
std::vector<std::vector<BeamHypothesis>> beam_search(size_t queries, const VokenTrie& trie, int b, ScoreMode mode,
                                                     const StepScorer& scorer);

/// Step log-probabilities of the given children from decoder states. The
/// logits of every group come from one product with the full output table, so
/// the cost per step does not depend on how many children the trie allows.
template <class Scalar>
std::vector<std::vector<double>> child_log_probs(const genmodel::Seq2SeqModel<Scalar>& model,
                                                 const Matrix<Scalar>& hidden,
                                                 const std::vector<std::vector<int>>& children, bool renormalize) {
  const Matrix<Scalar>& embed = model.params["embed"];
  const Matrix<Scalar>& bias = model.params["out_bias"];
  Matrix<Scalar> logits = hidden * embed.transpose();
  logits.rowwise() += bias.row(0);
  std::vector<std::vector<double>> out(children.size());
  for (size_t g = 0; g < children.size(); ++g) {
    const auto row = logits.row(static_cast<Index>(g));
    Vector<Scalar> picked(static_cast<Index>(children[g].size()));
    for (size_t i = 0; i < children[g].size(); ++i) {
      picked(static_cast<Index>(i)) = row(model.vocab.voken_id(children[g][i]));
    }
    Scalar lse;
    if (renormalize) {
      const Scalar mx = picked.maxCoeff();
      lse = mx + std::log((picked.array() - mx).exp().sum());
    } else {
      const Scalar mx = row.maxCoeff();
      lse = mx + std::log((row.array() - mx).exp().sum());
    }
    for (Index i = 0; i < picked.size(); ++i) out[g].push_back(static_cast<double>(picked(i) - lse));
  }
  return out;
}

/// Scorer running the decoder over an already encoded memory.
template <class Scalar>
StepScorer model_scorer(const genmodel::Seq2SeqModel<Scalar>& model, const genmodel::Bound<Scalar>& p,
                        const genmodel::Memory<Scalar>& mem, bool renormalize) {
  return [&model, &p, &mem, renormalize](const std::vector<int>& query_of, const std::vector<VokenSequence>& prefixes,
                                         const std::vector<std::vector<int>>& children) {
    genmodel::DecoderBatch dec;
    dec.query_of = query_of;
    for (const auto& prefix : prefixes) {
      std::vector<int> in{model.vocab.bos()};
      for (int k : prefix) in.push_back(model.vocab.voken_id(k));
      dec.inputs.push_back(std::move(in));
    }
    const Matrix<Scalar>& hidden = genmodel::decode(model, p, mem, dec).value();
    Matrix<Scalar> last(static_cast<Index>(prefixes.size()), hidden.cols());
    Index row = 0;
    for (size_t g = 0; g < prefixes.size(); ++g) {
      row += static_cast<Index>(dec.inputs[g].size());
      last.row(static_cast<Index>(g)) = hidden.row(row - 1);
    }
    return child_log_probs(model, last, children, renormalize);
  };
}

template <class Scalar>
std::vector<std::vector<BeamHypothesis>> beam_search_batch(const genmodel::Seq2SeqModel<Scalar>& model,
                                                           const genmodel::Bound<Scalar>& p,
                                                           const genmodel::Memory<Scalar>& mem, const VokenTrie& trie,
                                                           int b, const BeamOptions& opt = {}) {
  if (trie.depth() != model.depth) {
    throw UsageError("trie depth " + std::to_string(trie.depth()) + " differs from model voken length " +
                     std::to_string(model.depth));
  }
  return beam_search(mem.offsets.size(), trie, b, opt.score_mode, model_scorer(model, p, mem, opt.renormalize));
}

/// Ranked (sequence, score) list for one query; every sequence is in the trie.
template <class Scalar>
std::vector<BeamHypothesis> constrained_beam_search(const genmodel::Seq2SeqModel<Scalar>& model,
                                                    const genmodel::QuerySequence& query, const VokenTrie& trie,
                                                    int b, const BeamOptions& opt = {}) {
  numerics::Tape<Scalar> tape;
  const auto p = genmodel::bind(tape, model, false);
  const auto mem = genmodel::encode(model, p, std::span<const genmodel::QuerySequence>(&query, 1));
  return std::move(beam_search_batch(model, p, mem, trie, b, opt).front());
}

}  // namespace avg::decoding
