#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "avg/config.hpp"
#include "avg/corpus.hpp"
#include "avg/decoding.hpp"
#include "avg/discriminative.hpp"
#include "avg/genmodel.hpp"
#include "avg/retrieval.hpp"
#include "avg/tokenizer.hpp"

namespace avg::pipeline {

/// Maps a caption record to query tokens: projection tokens of the text
/// vector, or hashed caption words.
struct QueryEncoder {
  bool hashed = false;
  genmodel::ProjectionTokenizer projection;
  int text_vocab = 4096;
  int max_len = 64;

  static QueryEncoder from_config(const RunConfig& cfg, int dim);
  /// T_base of the generative vocabulary.
  int base_size() const;
  genmodel::QuerySequence operator()(const corpus::EmbeddingRecord& record) const;
};

using Logger = std::function<void(const std::string&)>;

corpus::DatasetBundle build_dataset(const RunConfig& cfg);
corpus::Splits make_splits(const RunConfig& cfg, const corpus::DatasetBundle& data);

/// Captions used as evaluation queries (eval_split).
const corpus::DatasetBundle& eval_queries(const RunConfig& cfg, const corpus::Splits& splits);
/// Images searched at evaluation time: every image, or only the eval split's.
const corpus::DatasetBundle& eval_corpus(const RunConfig& cfg, const corpus::DatasetBundle& data,
                                         const corpus::Splits& splits);
/// index restricted to the images of corpus.
tokenizer::VokenIndex restrict_index(const tokenizer::VokenIndex& index, const corpus::DatasetBundle& corpus);

std::vector<discriminative::TrainingExample> training_examples(const corpus::DatasetBundle& split,
                                                               const tokenizer::VokenIndex& index,
                                                               const QueryEncoder& encoder);

/// Every caption of `queries` searched against index/trie; gold is the
/// caption's own image.
retrieval::EvalReport evaluate_generative(const genmodel::Seq2SeqModel<float>& model, const decoding::VokenTrie& trie,
                                          const tokenizer::VokenIndex& index, const corpus::DatasetBundle& queries,
                                          const QueryEncoder& encoder, const retrieval::RetrieveOptions& opt,
                                          std::vector<retrieval::RetrievalResult>* results = nullptr);

retrieval::EvalReport evaluate_two_tower(const tokenizer::TokenizerModel<float>& tok,
                                         const corpus::DatasetBundle& corpus, const corpus::DatasetBundle& queries);

/// Trains the generative model on the train split with validation recall on
/// a fixed subsample of val captions.
genmodel::Seq2SeqModel<float> train_model(const RunConfig& cfg, const corpus::Splits& splits,
                                          const tokenizer::TokenizerModel<float>& tok,
                                          const tokenizer::VokenIndex& index, const decoding::VokenTrie& trie,
                                          std::vector<discriminative::EpochLog>* history, const Logger& log = {});

struct RunArtifacts {
  corpus::DatasetBundle data;
  corpus::Splits splits;
  tokenizer::TokenizerModel<float> tokenizer;
  tokenizer::VokenIndex index;
  decoding::VokenTrie trie;
  genmodel::Seq2SeqModel<float> model;
  std::vector<discriminative::EpochLog> history;
  retrieval::EvalReport generative;
  retrieval::EvalReport two_tower;
  double tokenizer_seconds = 0;
  double model_seconds = 0;
  double eval_seconds = 0;
};

/// In-memory synth -> tokenizer -> tokenize -> model -> eval.
RunArtifacts run_all(const RunConfig& cfg, const Logger& log = {});

// File-backed stages. Each reads its inputs from cfg.out_dir(), writes its
// artifact there with resolved.cfg, and names any missing input in a
// DependencyError.
struct Paths {
  std::filesystem::path root;
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path tokenizer() const { return root / "tokenizer"; }
  std::filesystem::path index() const { return root / "vokens.tsv"; }
  std::filesystem::path model() const { return root / "model.avgw"; }
  std::filesystem::path train_log() const { return root / "train_log.tsv"; }
  std::filesystem::path eval_json() const { return root / "eval.jsonl"; }
  std::filesystem::path bench_csv() const { return root / "bench.csv"; }
  std::filesystem::path bench_jsonl() const { return root / "bench.jsonl"; }
  std::filesystem::path resolved() const { return root / "resolved.cfg"; }
};

void stage_synth(const RunConfig& cfg, const Logger& log = {});
void stage_train_tokenizer(const RunConfig& cfg, const Logger& log = {});
void stage_tokenize(const RunConfig& cfg, const Logger& log = {});
void stage_train_model(const RunConfig& cfg, const Logger& log = {});
std::vector<retrieval::EvalReport> stage_eval(const RunConfig& cfg, const Logger& log = {});
retrieval::BenchReport stage_bench(const RunConfig& cfg, const Logger& log = {});
/// "id: v1,...,vM" then the other images of the same bucket.
std::string stage_inspect(const RunConfig& cfg, int image_id);

}  // namespace avg::pipeline
