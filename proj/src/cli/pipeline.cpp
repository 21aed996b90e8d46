#include "avg/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>


namespace avg::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

void require(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw DependencyError("missing file '" + p.string() + "'");
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw IntegrityError("cannot write '" + p.string() + "'");
}

Paths prepare(const RunConfig& cfg) {
  cfg.validate();
  Paths paths{cfg.out_dir()};
  std::filesystem::create_directories(paths.root);
  write_text(paths.resolved(), cfg.resolved());
  return paths;
}

corpus::DatasetBundle load_data(const Paths& paths) {
  require(paths.data() / "pairs.tsv");
  return corpus::read_dataset(paths.data());
}

tokenizer::TokenizerModel<float> load_tok(const Paths& paths) {
  require(paths.tokenizer() / "codebook.avgc");
  require(paths.tokenizer() / "tokenizer.avgw");
  return tokenizer::load_tokenizer(paths.tokenizer());
}

tokenizer::VokenIndex load_index(const Paths& paths) {
  require(paths.index());
  return tokenizer::read_voken_index(paths.index());
}

genmodel::Seq2SeqModel<float> load_gen(const Paths& paths) {
  require(paths.model());
  return genmodel::load_model(paths.model());
}

std::map<int, int> gold_of(const corpus::DatasetBundle& queries) {
  std::map<int, int> gold;
  for (const auto& r : queries.records) gold[r.text_id] = r.image_id;
  return gold;
}

// Every stride-th caption, so validation cost stays fixed as the split grows.
corpus::DatasetBundle subsample(const corpus::DatasetBundle& b, int count) {
  corpus::DatasetBundle out = b;
  if (count <= 0 || static_cast<size_t>(count) >= b.records.size()) return out;
  out.records.clear();
  const double stride = static_cast<double>(b.records.size()) / count;
  for (int i = 0; i < count; ++i) out.records.push_back(b.records[static_cast<size_t>(i * stride)]);
  return out;
}

}  // namespace

QueryEncoder QueryEncoder::from_config(const RunConfig& cfg, int dim) {
  QueryEncoder e;
  e.hashed = cfg.get("query_mode") == "hash";
  e.text_vocab = static_cast<int>(cfg.get_int("text_vocab"));
  e.max_len = static_cast<int>(cfg.get_int("max_query_len"));
  if (!e.hashed) {
    e.projection = genmodel::ProjectionTokenizer::make(dim, static_cast<int>(cfg.get_int("query_projections")),
                                                       static_cast<int>(cfg.get_int("query_levels")),
                                                       cfg.get_uint("seed") + 404);
    if (e.projection.directions.rows() > e.max_len) {
      throw ConfigError("query_projections exceeds max_query_len");
    }
  }
  return e;
}

int QueryEncoder::base_size() const { return hashed ? text_vocab : projection.vocab_needed(); }

genmodel::QuerySequence QueryEncoder::operator()(const corpus::EmbeddingRecord& record) const {
  if (hashed) return genmodel::hash_words(record.caption, text_vocab, max_len);
  return projection(record.text_vec);
}

corpus::DatasetBundle build_dataset(const RunConfig& cfg) {
  if (cfg.get("source") == "files") {
    return corpus::load_embeddings(cfg.get("pairs_path"), cfg.get("image_blob"), cfg.get("text_blob"));
  }
  return corpus::generate_synthetic(cfg.synth());
}

corpus::Splits make_splits(const RunConfig& cfg, const corpus::DatasetBundle& data) {
  return corpus::split(data, cfg.get_real("train_frac"), cfg.get_real("val_frac"), cfg.get_uint("seed") + 505);
}

const corpus::DatasetBundle& eval_queries(const RunConfig& cfg, const corpus::Splits& splits) {
  const std::string& s = cfg.get("eval_split");
  if (s == "train") return splits.train;
  if (s == "val") return splits.val;
  return splits.test;
}

const corpus::DatasetBundle& eval_corpus(const RunConfig& cfg, const corpus::DatasetBundle& data,
                                         const corpus::Splits& splits) {
  return cfg.get("eval_corpus") == "all" ? data : eval_queries(cfg, splits);
}

tokenizer::VokenIndex restrict_index(const tokenizer::VokenIndex& index, const corpus::DatasetBundle& corpus) {
  tokenizer::VokenIndex out;
  for (int id : corpus.image_ids()) {
    auto it = index.by_image.find(id);
    if (it == index.by_image.end()) {
      throw IntegrityError("image " + std::to_string(id) + " has no voken sequence in the index");
    }
    out.insert(id, it->second);
  }
  return out;
}

std::vector<discriminative::TrainingExample> training_examples(const corpus::DatasetBundle& split,
                                                               const tokenizer::VokenIndex& index,
                                                               const QueryEncoder& encoder) {
  std::vector<discriminative::TrainingExample> out;
  out.reserve(split.records.size());
  for (const auto& r : split.records) {
    auto it = index.by_image.find(r.image_id);
    if (it == index.by_image.end()) {
      throw IntegrityError("image " + std::to_string(r.image_id) + " has no voken sequence in the index");
    }
    out.push_back({encoder(r), it->second, r.image_id});
  }
  return out;
}

retrieval::EvalReport evaluate_generative(const genmodel::Seq2SeqModel<float>& model, const decoding::VokenTrie& trie,
                                          const tokenizer::VokenIndex& index, const corpus::DatasetBundle& queries,
                                          const QueryEncoder& encoder, const retrieval::RetrieveOptions& opt,
                                          std::vector<retrieval::RetrievalResult>* results) {
  std::vector<genmodel::QuerySequence> qs;
  qs.reserve(queries.records.size());
  for (const auto& r : queries.records) qs.push_back(encoder(r));
  auto res = retrieval::retrieve_all(model, trie, index, std::span<const genmodel::QuerySequence>(qs), opt);
  for (size_t i = 0; i < res.size(); ++i) res[i].text_id = queries.records[i].text_id;
  auto report = retrieval::make_report(std::span<const retrieval::RetrievalResult>(res), gold_of(queries));
  if (results) *results = std::move(res);
  return report;
}

retrieval::EvalReport evaluate_two_tower(const tokenizer::TokenizerModel<float>& tok,
                                         const corpus::DatasetBundle& corpus, const corpus::DatasetBundle& queries) {
  const retrieval::TwoTower tower(tok, corpus);
  std::vector<retrieval::RetrievalResult> res;
  res.reserve(queries.records.size());
  for (const auto& r : queries.records) {
    retrieval::RetrievalResult rr;
    rr.text_id = r.text_id;
    int rank = 1;
    for (int id : tower.retrieve(r.text_vec, 10)) rr.items.push_back({id, rank++, {}, 0.0});
    res.push_back(std::move(rr));
  }
  auto report = retrieval::make_report(std::span<const retrieval::RetrievalResult>(res), gold_of(queries));
  report.method = "two_tower";
  return report;
}

genmodel::Seq2SeqModel<float> train_model(const RunConfig& cfg, const corpus::Splits& splits,
                                          const tokenizer::TokenizerModel<float>& tok,
                                          const tokenizer::VokenIndex& index, const decoding::VokenTrie& trie,
                                          std::vector<discriminative::EpochLog>* history, const Logger& log) {
  const QueryEncoder encoder = QueryEncoder::from_config(cfg, splits.train.dim);
  std::optional<MatrixF> text_rows;
  if (!encoder.hashed && cfg.get("query_embed") == "geometric") {
    text_rows = encoder.projection.embedding_rows(cfg.get_real("query_embed_scale"));
  }
  auto model = genmodel::init_model(encoder.base_size(), tok.codebook, cfg.model(), text_rows ? &*text_rows : nullptr);
  const auto data = training_examples(splits.train, index, encoder);

  const corpus::DatasetBundle val = subsample(splits.val, static_cast<int>(cfg.get_int("val_queries")));
  retrieval::RetrieveOptions vopt = cfg.retrieve_options();
  discriminative::JointTrainHooks hooks;
  if (cfg.get_int("val_queries") > 0 && !val.records.empty()) {
    hooks.validate = [&](const genmodel::Seq2SeqModel<float>& m) {
      const auto r = evaluate_generative(m, trie, index, val, encoder, vopt);
      return std::make_pair(r.r1, r.r10);
    };
  }
  hooks.on_epoch = [&](const discriminative::EpochLog& e) { say(log, discriminative::format_epoch(e)); };
  return discriminative::train_joint(std::move(model), std::span<const discriminative::TrainingExample>(data), trie,
                                     cfg.joint(), hooks, history);
}

RunArtifacts run_all(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  RunArtifacts a;
  a.data = build_dataset(cfg);
  a.splits = make_splits(cfg, a.data);

  auto t0 = Clock::now();
  a.tokenizer = tokenizer::train_tokenizer(a.splits.train, cfg.tokenizer());
  a.index = tokenizer::assign_vokens(a.data, a.tokenizer);
  a.trie = decoding::build_trie(a.index);
  a.tokenizer_seconds = since(t0);
  say(log, "tokenizer: " + std::to_string(a.index.num_sequences()) + " sequences for " +
               std::to_string(a.index.num_images()) + " images");

  t0 = Clock::now();
  a.model = train_model(cfg, a.splits, a.tokenizer, a.index, a.trie, &a.history, log);
  a.model_seconds = since(t0);

  t0 = Clock::now();
  const auto& queries = eval_queries(cfg, a.splits);
  const auto& corpus = eval_corpus(cfg, a.data, a.splits);
  const auto index = restrict_index(a.index, corpus);
  const auto trie = decoding::build_trie(index);
  const QueryEncoder encoder = QueryEncoder::from_config(cfg, a.data.dim);
  a.generative = evaluate_generative(a.model, trie, index, queries, encoder, cfg.retrieve_options());
  a.generative.fingerprint = cfg.fingerprint();
  a.two_tower = evaluate_two_tower(a.tokenizer, corpus, queries);
  a.two_tower.fingerprint = cfg.fingerprint();
  a.eval_seconds = since(t0);
  return a;
}

void stage_synth(const RunConfig& cfg, const Logger& log) {
  const Paths paths = prepare(cfg);
  const auto data = build_dataset(cfg);
  corpus::write_dataset(paths.data(), data);
  say(log, "wrote " + std::to_string(data.records.size()) + " pairs to " + paths.data().string());
}

void stage_train_tokenizer(const RunConfig& cfg, const Logger& log) {
  const Paths paths = prepare(cfg);
  const auto data = load_data(paths);
  const auto splits = make_splits(cfg, data);
  tokenizer::TokenizerHistory history;
  const auto tok = tokenizer::train_tokenizer(splits.train, cfg.tokenizer(), &history);
  tokenizer::save_tokenizer(paths.tokenizer(), tok);
  say(log, "wrote " + paths.tokenizer().string());
}

void stage_tokenize(const RunConfig& cfg, const Logger& log) {
  const Paths paths = prepare(cfg);
  const auto data = load_data(paths);
  const auto tok = load_tok(paths);
  const auto index = tokenizer::assign_vokens(data, tok);
  tokenizer::write_voken_index(paths.index(), index);
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu images, %zu sequences, collision rate %.4f", index.num_images(),
                index.num_sequences(), index.collision_rate());
  say(log, buf);
}

void stage_train_model(const RunConfig& cfg, const Logger& log) {
  const Paths paths = prepare(cfg);
  const auto data = load_data(paths);
  const auto tok = load_tok(paths);
  const auto index = load_index(paths);
  const auto splits = make_splits(cfg, data);
  const auto trie = decoding::build_trie(index);
  std::ofstream train_log(paths.train_log());
  train_log << "epoch\tL_gen\tL_dis\tR@1_val\tR@10_val\tseconds\n";
  std::vector<discriminative::EpochLog> history;
  const auto model = train_model(cfg, splits, tok, index, trie, &history, [&](const std::string& line) {
    train_log << line << "\n" << std::flush;
    say(log, line);
  });
  genmodel::save_model(paths.model(), model);
  say(log, "wrote " + paths.model().string());
}

std::vector<retrieval::EvalReport> stage_eval(const RunConfig& cfg, const Logger& log) {
  const Paths paths = prepare(cfg);
  const auto data = load_data(paths);
  const auto tok = load_tok(paths);
  const auto full = load_index(paths);
  const auto model = load_gen(paths);
  const auto splits = make_splits(cfg, data);
  const auto& queries = eval_queries(cfg, splits);
  const auto& corpus = eval_corpus(cfg, data, splits);
  const auto index = restrict_index(full, corpus);
  const auto trie = decoding::build_trie(index);
  const QueryEncoder encoder = QueryEncoder::from_config(cfg, data.dim);
  if (model.vocab.voken_offset() != encoder.base_size() + 3) {
    throw ConfigError("query settings do not match the checkpoint's text vocabulary");
  }
  std::vector<retrieval::EvalReport> reports;
  reports.push_back(evaluate_generative(model, trie, index, queries, encoder, cfg.retrieve_options()));
  reports.push_back(evaluate_two_tower(tok, corpus, queries));
  std::string jsonl;
  for (auto& r : reports) {
    r.fingerprint = cfg.fingerprint();
    r.validate();
    jsonl += r.to_json() + "\n";
    say(log, r.to_table());
  }
  write_text(paths.eval_json(), jsonl);
  return reports;
}

retrieval::BenchReport stage_bench(const RunConfig& cfg, const Logger& log) {
  const Paths paths = prepare(cfg);
  const auto tok = load_tok(paths);
  const auto model = load_gen(paths);
  const QueryEncoder encoder = QueryEncoder::from_config(cfg, static_cast<int>(cfg.get_int("dim")));
  const auto report = retrieval::benchmark_latency(model, tok, encoder, cfg.bench());
  write_text(paths.bench_csv(), report.to_csv());
  write_text(paths.bench_jsonl(), report.to_jsonl());
  say(log, report.to_table());
  return report;
}

std::string stage_inspect(const RunConfig& cfg, int image_id) {
  const Paths paths{cfg.out_dir()};
  const auto index = load_index(paths);
  auto it = index.by_image.find(image_id);
  if (it == index.by_image.end()) throw UsageError("image " + std::to_string(image_id) + " is not in the index");
  std::string out = std::to_string(image_id) + ": " + tokenizer::format_sequence(it->second) + "\n";
  std::string others;
  for (int id : index.buckets.at(it->second)) {
    if (id != image_id) others += (others.empty() ? "" : ",") + std::to_string(id);
  }
  out += "bucket: " + (others.empty() ? std::string("(no other images)") : others) + "\n";
  return out;
}

}  // namespace avg::pipeline
