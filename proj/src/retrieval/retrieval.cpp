#include "avg/retrieval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace avg::retrieval {

std::vector<int> RetrievalResult::image_ids() const {
  std::vector<int> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.image_id);
  return out;
}

RetrievalResult expand_hypotheses(std::span<const decoding::BeamHypothesis> hyps, const tokenizer::VokenIndex& index,
                                  int k) {
  if (k < 1) throw UsageError("retrieve: K must be at least 1");
  RetrievalResult r;
  for (const auto& h : hyps) {
    auto it = index.buckets.find(h.prefix);
    if (it == index.buckets.end()) {
      throw IntegrityError("sequence [" + tokenizer::format_sequence(h.prefix) + "] is in the trie but not the index");
    }
    for (int id : it->second) {  // buckets keep ids ascending
      if (static_cast<int>(r.items.size()) == k) return r;
      r.items.push_back({id, static_cast<int>(r.items.size()) + 1, h.prefix, h.score});
    }
  }
  return r;
}

namespace {

std::string beam_warning(const RetrieveOptions& opt) {
  if (opt.beam >= opt.k) return {};
  return "beam size " + std::to_string(opt.beam) + " is below K=" + std::to_string(opt.k) +
         "; only images of at most " + std::to_string(opt.beam) + " sequences can be returned";
}

}  // namespace

RetrievalResult retrieve(const genmodel::Seq2SeqModel<float>& model, const decoding::VokenTrie& trie,
                         const tokenizer::VokenIndex& index, const genmodel::QuerySequence& query,
                         const RetrieveOptions& opt) {
  const auto hyps = decoding::constrained_beam_search(model, query, trie, opt.beam, opt.beam_options);
  auto r = expand_hypotheses(std::span<const decoding::BeamHypothesis>(hyps), index, opt.k);
  r.warning = beam_warning(opt);
  return r;
}

std::vector<RetrievalResult> retrieve_all(const genmodel::Seq2SeqModel<float>& model, const decoding::VokenTrie& trie,
                                          const tokenizer::VokenIndex& index,
                                          std::span<const genmodel::QuerySequence> queries,
                                          const RetrieveOptions& opt, int chunk) {
  if (chunk < 1) throw UsageError("retrieve_all: chunk must be positive");
  std::vector<RetrievalResult> out;
  out.reserve(queries.size());
  const std::string warning = beam_warning(opt);
  for (size_t start = 0; start < queries.size(); start += static_cast<size_t>(chunk)) {
    const size_t len = std::min(queries.size() - start, static_cast<size_t>(chunk));
    numerics::Tape<float> tape;
    const auto p = genmodel::bind(tape, model, false);
    const auto mem = genmodel::encode(model, p, queries.subspan(start, len));
    const auto beams = decoding::beam_search_batch(model, p, mem, trie, opt.beam, opt.beam_options);
    for (const auto& hyps : beams) {
      out.push_back(expand_hypotheses(std::span<const decoding::BeamHypothesis>(hyps), index, opt.k));
      out.back().warning = warning;
    }
  }
  return out;
}

double recall_at_k(std::span<const RetrievalResult> results, const std::map<int, int>& gold, int k) {
  if (results.empty()) throw UsageError("recall_at_k: no results");
  size_t hits = 0;
  for (const auto& r : results) {
    auto g = gold.find(r.text_id);
    if (g == gold.end()) throw UsageError("recall_at_k: no gold image for query " + std::to_string(r.text_id));
    const size_t n = std::min(r.items.size(), static_cast<size_t>(k));
    for (size_t i = 0; i < n; ++i) {
      if (r.items[i].image_id == g->second) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

void EvalReport::validate() const {
  for (double r : {r1, r5, r10}) {
    if (r < 0 || r > 1) throw IntegrityError("eval report: recall outside [0,1]");
  }
  if (!(r1 <= r5 && r5 <= r10)) throw IntegrityError("eval report: recall not monotone in K");
}

std::string EvalReport::to_json() const {
  nlohmann::json j{{"method", method}, {"R@1", r1},          {"R@5", r5},
                   {"R@10", r10},      {"queries", queries}, {"fingerprint", fingerprint}};
  return j.dump();
}

std::string EvalReport::to_table() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %8s %8s %8s %8s\n%-12s %8.4f %8.4f %8.4f %8zu\n", "method", "R@1", "R@5",
                "R@10", "queries", method.c_str(), r1, r5, r10, queries);
  return buf;
}

EvalReport make_report(std::span<const RetrievalResult> results, const std::map<int, int>& gold) {
  EvalReport r;
  r.r1 = recall_at_k(results, gold, 1);
  r.r5 = recall_at_k(results, gold, 5);
  r.r10 = recall_at_k(results, gold, 10);
  r.queries = results.size();
  r.validate();
  return r;
}

std::vector<int> two_tower_retrieve(const VectorF& query, const MatrixF& images, std::span<const int> ids, int k) {
  if (query.size() != images.cols()) {
    throw ShapeError("two_tower_retrieve: query of length " + std::to_string(query.size()) + " against width " +
                     std::to_string(images.cols()));
  }
  if (static_cast<Index>(ids.size()) != images.rows()) throw ShapeError("two_tower_retrieve: ids/rows mismatch");
  if (k < 1) throw UsageError("two_tower_retrieve: K must be at least 1");
  const VectorF scores = images * query;
  std::vector<Index> order(static_cast<size_t>(images.rows()));
  std::iota(order.begin(), order.end(), 0);
  const size_t keep = std::min(order.size(), static_cast<size_t>(k));
  auto better = [&](Index a, Index b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return ids[static_cast<size_t>(a)] < ids[static_cast<size_t>(b)];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), better);
  std::vector<int> out;
  for (size_t i = 0; i < keep; ++i) out.push_back(ids[static_cast<size_t>(order[i])]);
  return out;
}

TwoTower::TwoTower(const tokenizer::TokenizerModel<float>& tok, const corpus::DatasetBundle& corpus) : tok_(&tok) {
  images_ = tok.project_images(corpus.image_matrix(&ids_));
}

std::vector<int> TwoTower::retrieve(const VectorF& text_vec, int k) const {
  const MatrixF q = tok_->project_texts(MatrixF(text_vec.transpose()));
  return two_tower_retrieve(VectorF(q.row(0).transpose()), images_, std::span<const int>(ids_), k);
}

std::optional<double> BenchReport::qps(int size, const std::string& method) const {
  for (const auto& r : rows) {
    if (r.size == size && r.method == method) return r.qps;
  }
  return std::nullopt;
}

std::vector<int> BenchReport::sizes() const {
  std::vector<int> out;
  for (const auto& r : rows) {
    if (out.empty() || out.back() != r.size) out.push_back(r.size);
  }
  return out;
}

void BenchReport::validate() const {
  const auto s = sizes();
  for (size_t i = 1; i < s.size(); ++i) {
    if (s[i] <= s[i - 1]) throw IntegrityError("bench report: sizes not strictly increasing");
  }
  for (const auto& r : rows) {
    if (!(r.qps > 0)) throw IntegrityError("bench report: non-positive throughput");
  }
  for (int size : s) {
    if (!qps(size, "generative") || !qps(size, "two_tower")) {
      throw IntegrityError("bench report: size " + std::to_string(size) + " lacks a method");
    }
  }
}

std::string BenchReport::to_csv() const {
  std::ostringstream out;
  out << "size,method,qps\n";
  for (const auto& r : rows) out << r.size << ',' << r.method << ',' << r.qps << '\n';
  return out.str();
}

std::string BenchReport::to_jsonl() const {
  std::ostringstream out;
  for (const auto& r : rows) out << nlohmann::json{{"size", r.size}, {"method", r.method}, {"qps", r.qps}}.dump() << '\n';
  for (const auto& s : skipped) out << nlohmann::json{{"skipped", s}}.dump() << '\n';
  return out.str();
}

std::string BenchReport::to_table() const {
  std::ostringstream out;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%10s %16s %16s\n", "size", "generative q/s", "two-tower q/s");
  out << buf;
  for (int s : sizes()) {
    std::snprintf(buf, sizeof buf, "%10d %16.1f %16.1f\n", s, qps(s, "generative").value_or(0),
                  qps(s, "two_tower").value_or(0));
    out << buf;
  }
  for (const auto& s : skipped) out << "skipped: " << s << '\n';
  out << "(" << execution_note << ")\n";
  return out.str();
}

namespace {

template <class F>
double median_qps(int trials, int queries, F&& run_one) {
  std::vector<double> rates;
  for (int t = 0; t < trials; ++t) {
    const auto start = std::chrono::steady_clock::now();
    for (int q = 0; q < queries; ++q) run_one(t * queries + q);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rates.push_back(static_cast<double>(queries) / std::max(secs, 1e-9));
  }
  std::sort(rates.begin(), rates.end());
  const size_t n = rates.size();
  return n % 2 ? rates[n / 2] : 0.5 * (rates[n / 2 - 1] + rates[n / 2]);
}

}  // namespace

BenchReport benchmark_latency(const genmodel::Seq2SeqModel<float>& model, const tokenizer::TokenizerModel<float>& tok,
                              const QueryFn& query_tokens, const BenchConfig& config) {
  if (config.trials < 1 || config.queries_per_trial < 1) throw ConfigError("bench: trials and queries must be positive");
  BenchReport report;
  int previous = 0;
  for (int size : config.sizes) {
    if (size <= previous) throw ConfigError("bench: sizes must be strictly increasing");
    previous = size;
    try {
      corpus::SynthConfig sc = config.synth;
      sc.num_images = size;
      sc.captions_per_image = 1;
      const auto bundle = corpus::generate_synthetic(sc);
      const auto index = tokenizer::assign_vokens(bundle, tok);
      const auto trie = decoding::build_trie(index);
      const TwoTower tower(tok, bundle);
      const size_t total = static_cast<size_t>(config.warmup_queries + config.trials * config.queries_per_trial);
      std::vector<genmodel::QuerySequence> queries;
      std::vector<const corpus::EmbeddingRecord*> records;
      for (size_t i = 0; i < total; ++i) {
        const auto& rec = bundle.records[(i * 7919) % bundle.records.size()];
        records.push_back(&rec);
        queries.push_back(query_tokens(rec));
      }
      RetrieveOptions opt;
      opt.k = config.k;
      opt.beam = config.beam;
      size_t sink = 0;
      const size_t w = static_cast<size_t>(config.warmup_queries);
      for (size_t i = 0; i < w; ++i) {
        sink += retrieve(model, trie, index, queries[i], opt).items.size();
        sink += tower.retrieve(records[i]->text_vec, config.k).size();
      }
      const double gen = median_qps(config.trials, config.queries_per_trial, [&](int i) {
        sink += retrieve(model, trie, index, queries[w + static_cast<size_t>(i)], opt).items.size();
      });
      const double two = median_qps(config.trials, config.queries_per_trial, [&](int i) {
        sink += tower.retrieve(records[w + static_cast<size_t>(i)]->text_vec, config.k).size();
      });
      if (sink == 0) report.execution_note += "; no results returned";
      report.rows.push_back({size, "generative", gen});
      report.rows.push_back({size, "two_tower", two});
    } catch (const std::bad_alloc&) {
      report.skipped.push_back(std::to_string(size) + ": out of memory");
    }
  }
  return report;
}

}  // namespace avg::retrieval
