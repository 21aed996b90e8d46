#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "avg/corpus.hpp"
#include "avg/decoding.hpp"
#include "avg/genmodel.hpp"
#include "avg/tokenizer.hpp"

namespace avg::retrieval {

struct RankedItem {
  int image_id = 0;
  int rank = 0;  // 1-based
  VokenSequence sequence;
  double score = 0.0;
};

struct RetrievalResult {
  int text_id = 0;
  std::vector<RankedItem> items;
  std::string warning;  // set when b < K

  std::vector<int> image_ids() const;
};

struct RetrieveOptions {
  int k = 10;
  int beam = 10;
  decoding::BeamOptions beam_options;
};

/// Expands ranked hypotheses into images: sequences in beam order, images of
/// one sequence by ascending id; truncated to k.
RetrievalResult expand_hypotheses(std::span<const decoding::BeamHypothesis> hyps, const tokenizer::VokenIndex& index,
                                  int k);

/// One query end to end: beam search, then collision expansion.
RetrievalResult retrieve(const genmodel::Seq2SeqModel<float>& model, const decoding::VokenTrie& trie,
                         const tokenizer::VokenIndex& index, const genmodel::QuerySequence& query,
                         const RetrieveOptions& opt);

/// Many queries, encoded and searched in chunks of `chunk` queries.
std::vector<RetrievalResult> retrieve_all(const genmodel::Seq2SeqModel<float>& model, const decoding::VokenTrie& trie,
                                          const tokenizer::VokenIndex& index,
                                          std::span<const genmodel::QuerySequence> queries,
                                          const RetrieveOptions& opt, int chunk = 64);

/// Fraction of results whose gold image (gold[text_id]) is in the top k.
double recall_at_k(std::span<const RetrievalResult> results, const std::map<int, int>& gold, int k);

struct EvalReport {
  double r1 = 0, r5 = 0, r10 = 0;
  size_t queries = 0;
  std::string method = "generative";
  std::string fingerprint;

  void validate() const;
  std::string to_json() const;
  std::string to_table() const;
  bool operator==(const EvalReport&) const = default;
};

EvalReport make_report(std::span<const RetrievalResult> results, const std::map<int, int>& gold);

/// Exact top-k image ids by dot product over a linear scan; ties by
/// ascending id. images is (n x d) with ids[i] naming row i.
std::vector<int> two_tower_retrieve(const VectorF& query, const MatrixF& images, std::span<const int> ids, int k);

/// Two-tower baseline over the tokenizer heads: text head for queries, image
/// head for the corpus.
class TwoTower {
 public:
  TwoTower(const tokenizer::TokenizerModel<float>& tok, const corpus::DatasetBundle& corpus);
  std::vector<int> retrieve(const VectorF& text_vec, int k) const;
  const MatrixF& projected_images() const { return images_; }

 private:
  const tokenizer::TokenizerModel<float>* tok_;
  MatrixF images_;
  std::vector<int> ids_;
};

struct BenchRow {
  int size = 0;
  std::string method;
  double qps = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::vector<std::string> skipped;  // sizes that could not be built
  std::string execution_note = "single execution context (one thread)";

  std::optional<double> qps(int size, const std::string& method) const;
  std::vector<int> sizes() const;
  void validate() const;
  std::string to_csv() const;
  std::string to_jsonl() const;
  std::string to_table() const;
};

struct BenchConfig {
  std::vector<int> sizes{1000, 2000, 4000, 8000, 16000, 32000, 64000};
  int trials = 5;
  int queries_per_trial = 20;
  int warmup_queries = 5;
  int k = 10;
  int beam = 10;
  corpus::SynthConfig synth;  // num_images is replaced by each size
};

/// Median queries/sec per corpus size for the generative path (beam search
/// over a trie of the corpus) and the two-tower linear scan. Corpora come
/// from one seed; the same tokenizer and model serve every size.
using QueryFn = std::function<genmodel::QuerySequence(const corpus::EmbeddingRecord&)>;
BenchReport benchmark_latency(const genmodel::Seq2SeqModel<float>& model, const tokenizer::TokenizerModel<float>& tok,
                              const QueryFn& query_tokens, const BenchConfig& config);

}  // namespace avg::retrieval
