#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "avg/numerics/attention.hpp"
#include "avg/numerics/ops.hpp"
#include "avg/numerics/parameters.hpp"
#include "avg/tokenizer.hpp"
#include "avg/types.hpp"

namespace avg::genmodel {

/// Text tokens [0, base_size), then PAD, BOS, EOS, then one id per voken.
struct Vocabulary {
  int base_size = 4096;
  int codebook_size = 0;

  int pad() const { return base_size; }
  int bos() const { return base_size + 1; }
  int eos() const { return base_size + 2; }
  int voken_offset() const { return base_size + 3; }
  int total_size() const { return base_size + 3 + codebook_size; }

  bool is_voken(int id) const { return id >= voken_offset() && id < total_size(); }
  int voken_id(int k) const {
    if (k < 0 || k >= codebook_size) {
      throw UsageError("voken " + std::to_string(k) + " outside codebook of size " + std::to_string(codebook_size));
    }
    return voken_offset() + k;
  }
  int voken_of(int id) const {
    if (!is_voken(id)) throw UsageError("vocabulary id " + std::to_string(id) + " is not a voken");
    return id - voken_offset();
  }
};

struct ModelConfig {
  int d_model = 128;
  int heads = 4;
  int layers = 2;  // E, for encoder and decoder alike
  int ff = 256;
  int max_query_len = 64;
  bool random_voken_embed = false;
  double init_std = 0.02;
  double dropout = 0.1;  // training only; not stored in checkpoints
  uint64_t seed = 1;

  void validate() const;
};

/// Token ids of one query; every id is below Vocabulary::voken_offset().
using QuerySequence = std::vector<int>;

/// Lowercased whitespace words hashed (FNV-1a) into base_size buckets,
/// truncated to max_len. An empty text yields a single PAD token.
QuerySequence hash_words(const std::string& text, int base_size, int max_len);

/// Synthetic query tokens: the text vector seen through `projections` random
/// directions, each scalar-quantized into `levels` bins. Token p has id
/// p * levels + bin.
struct ProjectionTokenizer {
  MatrixF directions;  // P x D, unit rows
  int levels = 16;
  double range = 2.0;  // bins span +-range standard deviations of a unit vector's projection

  static ProjectionTokenizer make(int dim, int projections, int levels, uint64_t seed);
  int vocab_needed() const { return static_cast<int>(directions.rows()) * levels; }
  QuerySequence operator()(const VectorF& text_vec) const;
  /// Row p*Q + b = (bin b's center) * scale * direction p, one per token.
  MatrixF embedding_rows(double scale) const;
};

template <class Scalar>
struct Seq2SeqModel {
  ModelConfig config;
  Vocabulary vocab;
  int depth = 4;  // M
  numerics::ParameterSet<Scalar> params;

  template <class Other>
  Seq2SeqModel<Other> cast() const {
    return Seq2SeqModel<Other>{config, vocab, depth, params.template cast<Other>()};
  }
};

/// Vocabulary for `base_size` text tokens plus the codebook, and an embedding
/// table whose voken rows start with the codebook rows (zero padded), unless
/// random_voken_embed asks for random rows there too.
std::pair<Vocabulary, MatrixF> build_vocab(int base_size, const tokenizer::Codebook<float>& codebook, int d_model,
                                           bool random_voken_embed, double init_std, uint64_t seed);

/// text_rows, when given, seeds the first text-token embedding rows the same
/// way the codebook seeds the voken rows.
Seq2SeqModel<float> init_model(int base_size, const tokenizer::Codebook<float>& codebook,
                               const ModelConfig& config, const MatrixF* text_rows = nullptr);

/// Parameters bound to one tape.
template <class Scalar>
struct Bound {
  std::map<std::string, numerics::Var<Scalar>> vars;
  /// Dropout applies only when a generator is set (training graphs).
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
  const numerics::Var<Scalar>& operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw UsageError("model has no parameter '" + name + "'");
    return it->second;
  }
};

template <class Scalar>
Bound<Scalar> bind(numerics::Tape<Scalar>& tape, const Seq2SeqModel<Scalar>& model, bool trainable) {
  Bound<Scalar> b;
  for (const auto& [name, m] : model.params) b.vars.emplace(name, tape.parameter(m, trainable));
  return b;
}

/// Encoder states for several queries packed row-wise.
template <class Scalar>
struct Memory {
  numerics::Var<Scalar> states;
  std::vector<Index> offsets;
  std::vector<Index> lengths;
};

/// Decoder inputs: group g feeds tokens inputs[g] and cross-attends to the
/// memory of query query_of[g].
struct DecoderBatch {
  std::vector<std::vector<int>> inputs;
  std::vector<int> query_of;

  Index rows() const {
    Index n = 0;
    for (const auto& s : inputs) n += static_cast<Index>(s.size());
    return n;
  }
};

namespace detail {

template <class Scalar>
numerics::Var<Scalar> attention_block(const Bound<Scalar>& p, const std::string& prefix, numerics::Var<Scalar> x,
                                      numerics::Var<Scalar> source, const numerics::AttentionLayout& layout,
                                      int heads) {
  using namespace numerics;
  auto q = matmul(x, p[prefix + ".wq"]);
  auto k = matmul(source, p[prefix + ".wk"]);
  auto v = matmul(source, p[prefix + ".wv"]);
  return matmul(attention(q, k, v, layout, heads), p[prefix + ".wo"]);
}

template <class Scalar>
numerics::Var<Scalar> feed_forward(const Bound<Scalar>& p, const std::string& prefix, numerics::Var<Scalar> x) {
  using namespace numerics;
  auto h = relu(add_bias(matmul(x, p[prefix + ".w1"]), p[prefix + ".b1"]));
  return add_bias(matmul(h, p[prefix + ".w2"]), p[prefix + ".b2"]);
}

template <class Scalar>
numerics::Var<Scalar> drop(const Bound<Scalar>& p, numerics::Var<Scalar> x) {
  return p.rng ? numerics::dropout(x, p.dropout, *p.rng) : x;
}

template <class Scalar>
numerics::Var<Scalar> norm(const Bound<Scalar>& p, const std::string& prefix, numerics::Var<Scalar> x) {
  return numerics::layer_norm(x, p[prefix + ".g"], p[prefix + ".b"]);
}

}  // namespace detail

template <class Scalar>
Memory<Scalar> encode(const Seq2SeqModel<Scalar>& model, const Bound<Scalar>& p, std::span<const QuerySequence> queries) {
  using namespace numerics;
  if (queries.empty()) throw UsageError("encode: no queries");
  Memory<Scalar> mem;
  std::vector<int> ids, positions;
  AttentionLayout layout;
  Index offset = 0;
  for (const auto& q : queries) {
    if (q.empty()) throw UsageError("encode: empty query");
    const Index len = std::min<Index>(static_cast<Index>(q.size()), model.config.max_query_len);
    for (Index i = 0; i < len; ++i) {
      const int id = q[static_cast<size_t>(i)];
      if (id < 0 || id >= model.vocab.voken_offset()) {
        throw UsageError("query token " + std::to_string(id) + " outside the text vocabulary");
      }
      ids.push_back(id);
      positions.push_back(static_cast<int>(i));
    }
    mem.offsets.push_back(offset);
    mem.lengths.push_back(len);
    layout.segments.push_back({offset, len, offset, len});
    offset += len;
  }
  auto x = detail::drop(p, add(gather_rows(p["embed"], std::span<const int>(ids)),
                                gather_rows(p["enc_pos"], std::span<const int>(positions))));
  for (int l = 0; l < model.config.layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    auto h = detail::norm(p, pre + ".ln1", x);
    x = add(x, detail::drop(p, detail::attention_block(p, pre + ".attn", h, h, layout, model.config.heads)));
    x = add(x, detail::drop(p, detail::feed_forward(p, pre + ".ff", detail::norm(p, pre + ".ln2", x))));
  }
  mem.states = detail::norm(p, "enc.ln_f", x);
  return mem;
}

/// Final decoder states, one row per input token, groups packed in order.
template <class Scalar>
numerics::Var<Scalar> decode(const Seq2SeqModel<Scalar>& model, const Bound<Scalar>& p, const Memory<Scalar>& mem,
                             const DecoderBatch& batch) {
  using namespace numerics;
  if (batch.inputs.size() != batch.query_of.size() || batch.inputs.empty()) {
    throw UsageError("decode: inputs and query_of must be non-empty and aligned");
  }
  std::vector<int> ids, positions;
  AttentionLayout self, cross;
  self.causal = true;
  Index offset = 0;
  for (size_t g = 0; g < batch.inputs.size(); ++g) {
    const auto& seq = batch.inputs[g];
    const Index len = static_cast<Index>(seq.size());
    if (len == 0 || len > model.depth + 1) throw UsageError("decode: decoder input length out of range");
    const int q = batch.query_of[g];
    if (q < 0 || q >= static_cast<int>(mem.offsets.size())) throw UsageError("decode: query index out of range");
    for (Index i = 0; i < len; ++i) {
      ids.push_back(seq[static_cast<size_t>(i)]);
      positions.push_back(static_cast<int>(i));
    }
    self.segments.push_back({offset, len, offset, len});
    cross.segments.push_back({offset, len, mem.offsets[static_cast<size_t>(q)], mem.lengths[static_cast<size_t>(q)]});
    offset += len;
  }
  auto x = detail::drop(p, add(gather_rows(p["embed"], std::span<const int>(ids)),
                                gather_rows(p["dec_pos"], std::span<const int>(positions))));
  for (int l = 0; l < model.config.layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    auto h = detail::norm(p, pre + ".ln1", x);
    x = add(x, detail::drop(p, detail::attention_block(p, pre + ".self", h, h, self, model.config.heads)));
    x = add(x, detail::drop(p, detail::attention_block(p, pre + ".cross", detail::norm(p, pre + ".ln2", x),
                                                       mem.states, cross, model.config.heads)));
    x = add(x, detail::drop(p, detail::feed_forward(p, pre + ".ff", detail::norm(p, pre + ".ln3", x))));
  }
  return detail::norm(p, "dec.ln_f", x);
}

/// Teacher-forced decoder inputs [BOS, v1..vM] and targets [v1..vM, EOS].
void teacher_forcing(const Vocabulary& vocab, const VokenSequence& seq, std::vector<int>* inputs,
                     std::vector<int>* targets);

/// Generative loss: sum over the M voken steps and EOS of -log p, averaged
/// over the batch.
template <class Scalar>
numerics::Var<Scalar> generative_loss_graph(const Seq2SeqModel<Scalar>& model, const Bound<Scalar>& p,
                                            const Memory<Scalar>& mem,
                                            std::span<const VokenSequence> targets) {
  using namespace numerics;
  if (targets.size() != mem.offsets.size()) throw UsageError("generative loss: one target per query required");
  DecoderBatch batch;
  std::vector<int> flat_targets;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (static_cast<int>(targets[i].size()) != model.depth) {
      throw UsageError("generative loss: target length " + std::to_string(targets[i].size()) + ", expected " +
                       std::to_string(model.depth));
    }
    std::vector<int> in, out;
    teacher_forcing(model.vocab, targets[i], &in, &out);
    batch.inputs.push_back(std::move(in));
    batch.query_of.push_back(static_cast<int>(i));
    flat_targets.insert(flat_targets.end(), out.begin(), out.end());
  }
  auto hidden = decode(model, p, mem, batch);
  auto logits = add_bias(matmul_nt(hidden, p["embed"]), p["out_bias"]);
  auto total = cross_entropy(logits, std::span<const int>(flat_targets), Reduction::kSum);
  return scale(total, Scalar(1) / static_cast<Scalar>(targets.size()));
}

/// Allowed next vokens (codebook indices) after a prefix; used for the
/// renormalized (trie-constrained) scores.
using AllowedFn = std::function<std::vector<int>(const VokenSequence& prefix)>;

/// Candidate sequences to score; candidate c belongs to query query_of[c].
struct ScoreBatch {
  std::vector<VokenSequence> sequences;
  std::vector<int> query_of;
};

/// Per-candidate log-probability s = sum_j log p(v_j | query, v_<j), as a
/// (candidates x 1) column. With `allowed`, each step's softmax is restricted
/// to the allowed vokens; otherwise it runs over the whole vocabulary.
template <class Scalar>
numerics::Var<Scalar> score_graph(const Seq2SeqModel<Scalar>& model, const Bound<Scalar>& p,
                                  const Memory<Scalar>& mem, const ScoreBatch& batch, const AllowedFn* allowed) {
  using namespace numerics;
  if (batch.sequences.size() != batch.query_of.size() || batch.sequences.empty()) {
    throw UsageError("score: sequences and query_of must be non-empty and aligned");
  }
  DecoderBatch dec;
  dec.query_of = batch.query_of;
  std::vector<int> targets;
  std::vector<std::vector<int>> allowed_cols;
  const size_t m = static_cast<size_t>(model.depth);
  for (const auto& seq : batch.sequences) {
    if (seq.size() != m) {
      throw UsageError("score: sequence length " + std::to_string(seq.size()) + ", expected " + std::to_string(m));
    }
    std::vector<int> in{model.vocab.bos()};
    VokenSequence prefix;
    for (size_t j = 0; j < m; ++j) {
      targets.push_back(model.vocab.voken_id(seq[j]));
      if (j + 1 < m) in.push_back(model.vocab.voken_id(seq[j]));
      if (allowed) {
        std::vector<int> cols;
        for (int k : (*allowed)(prefix)) cols.push_back(model.vocab.voken_id(k));
        if (cols.empty()) throw UsageError("score: prefix " + tokenizer::format_sequence(prefix) + " has no children");
        allowed_cols.push_back(std::move(cols));
      } else {
        allowed_cols.emplace_back();
      }
      prefix.push_back(seq[j]);
    }
    dec.inputs.push_back(std::move(in));
  }
  auto hidden = decode(model, p, mem, dec);
  auto logp = restricted_log_prob(hidden, p["embed"], p["out_bias"],
                                  std::span<const std::vector<int>>(allowed_cols), std::span<const int>(targets));
  const std::vector<Index> lengths(batch.sequences.size(), model.depth);
  return segment_sum_rows(logp, std::span<const Index>(lengths));
}

/// Log-probabilities of the next token for every final row of each decoder
/// group, restricted to `columns` (vocabulary ids, empty = all).
template <class Scalar>
Vector<Scalar> next_log_probs(const Seq2SeqModel<Scalar>& model, const Matrix<Scalar>& hidden_row,
                              const std::vector<int>& columns) {
  const Matrix<Scalar>& embed = model.params["embed"];
  const Matrix<Scalar>& bias = model.params["out_bias"];
  Vector<Scalar> logits(static_cast<Index>(columns.empty() ? embed.rows() : columns.size()));
  if (columns.empty()) {
    logits = (hidden_row * embed.transpose()).transpose() + bias.transpose();
  } else {
    for (size_t i = 0; i < columns.size(); ++i) {
      logits(static_cast<Index>(i)) = hidden_row.row(0).dot(embed.row(columns[i])) + bias(0, columns[i]);
    }
  }
  const Scalar mx = logits.maxCoeff();
  const Scalar lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

/// Forced score of one sequence (no gradient).
template <class Scalar>
double forced_score(const Seq2SeqModel<Scalar>& model, const QuerySequence& query, const VokenSequence& seq,
                    const AllowedFn* allowed = nullptr) {
  numerics::Tape<Scalar> tape;
  const auto p = bind(tape, model, false);
  const auto mem = encode(model, p, std::span<const QuerySequence>(&query, 1));
  ScoreBatch batch{{seq}, {0}};
  return static_cast<double>(score_graph(model, p, mem, batch, allowed).scalar());
}

/// Per-step log-probabilities of one sequence (no gradient).
template <class Scalar>
std::vector<double> step_log_probs(const Seq2SeqModel<Scalar>& model, const QuerySequence& query,
                                   const VokenSequence& seq, const AllowedFn* allowed = nullptr) {
  numerics::Tape<Scalar> tape;
  const auto p = bind(tape, model, false);
  const auto mem = encode(model, p, std::span<const QuerySequence>(&query, 1));
  std::vector<double> out;
  VokenSequence prefix;
  for (size_t j = 0; j < seq.size(); ++j) {
    std::vector<int> in{model.vocab.bos()};
    for (size_t i = 0; i < j; ++i) in.push_back(model.vocab.voken_id(seq[i]));
    DecoderBatch dec{{in}, {0}};
    const Matrix<Scalar> h = decode(model, p, mem, dec).value().bottomRows(1);
    std::vector<int> cols;
    if (allowed) {
      for (int k : (*allowed)(prefix)) cols.push_back(model.vocab.voken_id(k));
    }
    const Vector<Scalar> lp = next_log_probs(model, h, cols);
    const int target = model.vocab.voken_id(seq[j]);
    Index pos = target;
    if (!cols.empty()) {
      auto it = std::find(cols.begin(), cols.end(), target);
      if (it == cols.end()) throw UsageError("step_log_probs: voken not allowed after prefix");
      pos = it - cols.begin();
    }
    out.push_back(static_cast<double>(lp(pos)));
    prefix.push_back(seq[j]);
  }
  return out;
}

/// Mean generative loss over (query, target) pairs (no gradient).
template <class Scalar>
double generative_loss(const Seq2SeqModel<Scalar>& model, std::span<const QuerySequence> queries,
                       std::span<const VokenSequence> targets) {
  numerics::Tape<Scalar> tape;
  const auto p = bind(tape, model, false);
  const auto mem = encode(model, p, queries);
  return static_cast<double>(generative_loss_graph(model, p, mem, targets).scalar());
}

/// Checkpoint: parameters plus a "__header__" row (T_base, N, M, d_model, E,
/// heads, voken_offset, ff, max_query_len).
void save_model(const std::filesystem::path& path, const Seq2SeqModel<float>& model);
Seq2SeqModel<float> load_model(const std::filesystem::path& path);

}  // namespace avg::genmodel
