#include "avg/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace avg {

namespace {

using T = RunConfig::Type;

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_int(const std::string& s, long long* out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, *out);
  return ec == std::errc() && p == end && !s.empty();
}

bool parse_uint(const std::string& s, uint64_t* out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, *out);
  return ec == std::errc() && p == end && !s.empty();
}

bool parse_real(const std::string& s, double* out) {
  if (s.empty()) return false;
  char* end = nullptr;
  *out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(*out);
}

bool parse_bool(const std::string& s, bool* out) {
  if (s == "true" || s == "1" || s == "yes") {
    *out = true;
    return true;
  }
  if (s == "false" || s == "0" || s == "no") {
    *out = false;
    return true;
  }
  return false;
}

bool parse_sizes(const std::string& s, std::vector<int>* out) {
  out->clear();
  for (const auto& part : split_on(s, ':')) {
    long long v = 0;
    if (!parse_int(part, &v) || v < 1 || v > 100000000) return false;
    out->push_back(static_cast<int>(v));
  }
  return !out->empty();
}

bool value_ok(const RunConfig::Key& k, const std::string& v) {
  long long i = 0;
  uint64_t u = 0;
  double r = 0;
  bool b = false;
  std::vector<int> sizes;
  switch (k.type) {
    case T::kInt: return parse_int(v, &i);
    case T::kUint: return parse_uint(v, &u);
    case T::kReal: return parse_real(v, &r);
    case T::kBool: return parse_bool(v, &b);
    case T::kSizes: return parse_sizes(v, &sizes);
    case T::kString:
      return k.choices.empty() || std::find(k.choices.begin(), k.choices.end(), v) != k.choices.end();
  }
  return false;
}

const RunConfig::Key* find_key(const std::string& name) {
  for (const auto& k : RunConfig::schema()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

std::string canonical(const std::string& name) {
  auto it = RunConfig::aliases().find(name);
  return it == RunConfig::aliases().end() ? name : it->second;
}

}  // namespace

const std::vector<RunConfig::Key>& RunConfig::schema() {
  static const std::vector<Key> keys = {
      {"seed", "1", T::kUint, "master seed; --seed overrides", {}},
      {"out_dir", "runs/default", T::kString, "artifact directory (relative to $AVG_OUT_ROOT when set)", {}},
      // data
      {"source", "synth", T::kString, "synth or files", {"synth", "files"}},
      {"pairs_path", "", T::kString, "pairs file for source=files", {}},
      {"image_blob", "", T::kString, "image embedding blob for source=files", {}},
      {"text_blob", "", T::kString, "text embedding blob for source=files", {}},
      {"num_images", "512", T::kInt, "synthetic images", {}},
      {"num_clusters", "16", T::kInt, "synthetic clusters", {}},
      {"dim", "64", T::kInt, "embedding dimension D", {}},
      {"captions_per_image", "5", T::kInt, "captions per image", {}},
      {"image_noise", "0.05", T::kReal, "image noise sigma", {}},
      {"text_noise", "0.05", T::kReal, "text noise sigma", {}},
      {"gap", "0", T::kReal, "modality gap strength", {}},
      {"instance_sigma", "2.0", T::kReal, "per-image semantic offset scale", {}},
      {"instance_rank", "8", T::kInt, "rank of the semantic offset subspace (0 = full)", {}},
      {"train_frac", "0.8", T::kReal, "train fraction of images", {}},
      {"val_frac", "0.1", T::kReal, "validation fraction of images", {}},
      // tokenizer
      {"codebook_size", "1024", T::kInt, "codebook size N", {}},
      {"voken_length", "4", T::kInt, "voken length M", {}},
      {"code_dim", "0", T::kInt, "code dimension D_c (0 = D)", {}},
      {"tok_lr", "0.001", T::kReal, "tokenizer learning rate", {}},
      {"tok_batch", "256", T::kInt, "tokenizer batch size", {}},
      {"tok_epochs", "40", T::kInt, "tokenizer epochs", {}},
      {"w_recon", "1", T::kReal, "reconstruction loss weight", {}},
      {"w_commit", "1", T::kReal, "commit loss weight", {}},
      {"w_align", "1", T::kReal, "alignment loss weight", {}},
      {"disable_align", "false", T::kBool, "drop the alignment loss", {}},
      {"train_text_head", "false", T::kBool, "let the text head train", {}},
      {"straight_through", "true", T::kBool, "straight-through gradient to the image head", {}},
      {"reseed_dead", "true", T::kBool, "move unused codebook rows onto observed residuals each epoch", {}},
      {"reseed_noise", "0.01", T::kReal, "dead-code reseed noise sigma", {}},
      // queries
      {"query_mode", "projection", T::kString, "projection (synthetic vectors) or hash (caption words)",
       {"projection", "hash"}},
      {"query_projections", "32", T::kInt, "projection tokens per query", {}},
      {"query_levels", "16", T::kInt, "quantization levels per projection token", {}},
      {"query_embed", "geometric", T::kString,
       "projection-token embedding init: geometric (bin center times direction) or random", {"geometric", "random"}},
      {"query_embed_scale", "8", T::kReal, "scale of geometric projection-token embeddings", {}},
      {"text_vocab", "4096", T::kInt, "hash buckets T_base for query_mode=hash", {}},
      {"max_query_len", "64", T::kInt, "longest query in tokens", {}},
      // model
      {"d_model", "128", T::kInt, "model width", {}},
      {"heads", "4", T::kInt, "attention heads", {}},
      {"layers", "2", T::kInt, "encoder and decoder layers E", {}},
      {"ff", "256", T::kInt, "feed-forward width", {}},
      {"dropout", "0.1", T::kReal, "dropout rate while training the generative model", {}},
      {"init_std", "0.02", T::kReal, "embedding init sigma", {}},
      {"random_voken_embed", "false", T::kBool, "random voken embeddings instead of codebook copies", {}},
      // joint training
      {"epochs", "20", T::kInt, "generative training epochs", {}},
      {"warmup_epochs", "-1", T::kInt, "generation-only epochs (-1 = 30% of epochs)", {}},
      {"train_beam", "10", T::kInt, "beam size for training candidates", {}},
      {"candidate_refresh", "1", T::kInt, "refresh candidates every this many epochs", {}},
      {"lr", "0.001", T::kReal, "generative learning rate", {}},
      {"batch_size", "128", T::kInt, "generative batch size", {}},
      {"clip_norm", "1", T::kReal, "gradient clip norm (0 = off)", {}},
      {"weight_dis", "1", T::kReal, "discriminative loss weight", {}},
      {"disable_dis", "false", T::kBool, "drop the discriminative loss", {}},
      {"renormalize", "true", T::kBool, "renormalize step softmax over trie children", {}},
      {"freeze_voken_embed", "false", T::kBool, "keep voken embedding rows at their initial values", {}},
      {"keep_best", "true", T::kBool, "keep the parameters of the best validation epoch", {}},
      {"val_queries", "100", T::kInt, "validation queries per epoch (0 = skip)", {}},
      // evaluation
      {"beam", "10", T::kInt, "inference beam size", {}},
      {"eval_split", "test", T::kString, "query split for eval", {"train", "val", "test"}},
      {"eval_corpus", "all", T::kString, "retrieval corpus: all images or the eval split's", {"all", "split"}},
      {"score_mode", "log", T::kString, "sequence score: log (sum log p) or prob (sum p)", {"log", "prob"}},
      // bench
      {"bench_sizes", "1000:2000:4000:8000:16000:32000:64000", T::kSizes, "corpus sizes, colon separated", {}},
      {"bench_trials", "5", T::kInt, "timed trials per size", {}},
      {"bench_queries", "20", T::kInt, "queries per trial", {}},
  };
  return keys;
}

const std::map<std::string, std::string>& RunConfig::aliases() {
  static const std::map<std::string, std::string> a{
      {"N", "codebook_size"}, {"M", "voken_length"}, {"D", "dim"}, {"E", "layers"}};
  return a;
}

RunConfig::RunConfig() {
  for (const auto& k : schema()) values_[k.name] = k.default_value;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing file '" + path.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (!line.empty()) lines.push_back(line);
  }
  RunConfig c;
  c.apply(lines);
  return c;
}

void RunConfig::apply(const std::vector<std::string>& assignments) {
  std::vector<std::string> bad;
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) {
      bad.push_back("'" + a + "' (expected key=value)");
      continue;
    }
    const std::string key = canonical(trim(a.substr(0, eq)));
    const Key* k = find_key(key);
    if (!k) {
      bad.push_back(key + " (unknown key)");
      continue;
    }
    const std::string value = trim(a.substr(eq + 1));
    for (const auto& v : split_on(value, ',')) {
      if (!value_ok(*k, trim(v))) {
        bad.push_back(key + "='" + v + "'");
        break;
      }
    }
    values_[key] = value;
  }
  if (!bad.empty()) {
    std::string msg = "config:";
    for (const auto& b : bad) msg += " " + b + ";";
    msg.pop_back();
    throw ConfigError(msg);
  }
}

void RunConfig::set(const std::string& key, const std::string& value) { apply({key + "=" + value}); }

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(canonical(key));
  if (it == values_.end()) throw ConfigError("config: unknown key " + key);
  if (it->second.find(',') != std::string::npos) {
    throw ConfigError("config: " + key + " holds a sweep; expand_sweeps first");
  }
  return it->second;
}

long long RunConfig::get_int(const std::string& key) const {
  long long v = 0;
  if (!parse_int(get(key), &v)) throw ConfigError("config: " + key + " is not an integer");
  return v;
}

uint64_t RunConfig::get_uint(const std::string& key) const {
  uint64_t v = 0;
  if (!parse_uint(get(key), &v)) throw ConfigError("config: " + key + " is not an unsigned integer");
  return v;
}

double RunConfig::get_real(const std::string& key) const {
  double v = 0;
  if (!parse_real(get(key), &v)) throw ConfigError("config: " + key + " is not a number");
  return v;
}

bool RunConfig::get_bool(const std::string& key) const {
  bool v = false;
  if (!parse_bool(get(key), &v)) throw ConfigError("config: " + key + " is not a boolean");
  return v;
}

std::vector<int> RunConfig::get_sizes(const std::string& key) const {
  std::vector<int> v;
  if (!parse_sizes(get(key), &v)) throw ConfigError("config: " + key + " is not a colon-separated size list");
  return v;
}

void RunConfig::validate() const {
  std::vector<std::string> bad;
  for (const auto& k : schema()) {
    for (const auto& v : split_on(values_.at(k.name), ',')) {
      if (!value_ok(k, trim(v))) {
        bad.push_back(k.name + "='" + v + "'");
        break;
      }
    }
  }
  if (bad.empty() && !has_sweep()) {
    auto positive = [&](const char* key) {
      if (get_int(key) < 1) bad.push_back(std::string(key) + " must be positive");
    };
    for (const char* key : {"num_images", "num_clusters", "dim", "captions_per_image", "codebook_size",
                            "voken_length", "tok_batch", "query_projections", "text_vocab", "max_query_len",
                            "d_model", "heads", "layers", "ff", "batch_size", "beam", "candidate_refresh",
                            "bench_trials", "bench_queries"}) {
      positive(key);
    }
    if (get("source") == "files") {
      for (const char* key : {"pairs_path", "image_blob", "text_blob"}) {
        if (get(key).empty()) bad.push_back(std::string(key) + " required for source=files");
      }
    }
    if (get_int("codebook_size") < 2) bad.push_back("codebook_size must be at least 2");
    if (get_int("query_levels") < 2) bad.push_back("query_levels must be at least 2");
    if (get_int("d_model") % std::max<long long>(1, get_int("heads")) != 0) bad.push_back("heads must divide d_model");
    if (!get_bool("disable_dis") && get_int("train_beam") < 2) bad.push_back("train_beam must be >= 2");
    if (get_int("code_dim") < 0) bad.push_back("code_dim must be >= 0");
    const long long dc = get_int("code_dim") == 0 ? get_int("dim") : get_int("code_dim");
    if (get_int("d_model") < dc) bad.push_back("d_model must be >= code dimension");
    const double tf = get_real("train_frac"), vf = get_real("val_frac");
    if (!(tf > 0 && vf > 0 && tf + vf < 1)) bad.push_back("train_frac and val_frac must be positive with a sum below 1");
  }
  if (!bad.empty()) {
    std::string msg = "invalid config:";
    for (const auto& b : bad) msg += " " + b + ";";
    msg.pop_back();
    throw ConfigError(msg);
  }
}

bool RunConfig::has_sweep() const {
  return std::any_of(values_.begin(), values_.end(),
                     [](const auto& kv) { return kv.second.find(',') != std::string::npos; });
}

std::vector<RunConfig> RunConfig::expand_sweeps() const {
  std::vector<RunConfig> runs{*this};
  std::vector<std::string> suffix{""};
  for (const auto& [key, value] : values_) {
    if (value.find(',') == std::string::npos) continue;
    const auto options = split_on(value, ',');
    std::vector<RunConfig> next;
    std::vector<std::string> next_suffix;
    for (size_t r = 0; r < runs.size(); ++r) {
      for (const auto& o : options) {
        RunConfig c = runs[r];
        c.values_[key] = trim(o);
        next.push_back(std::move(c));
        next_suffix.push_back(suffix[r] + "_" + key + "=" + trim(o));
      }
    }
    runs = std::move(next);
    suffix = std::move(next_suffix);
  }
  if (runs.size() > 1) {
    for (size_t r = 0; r < runs.size(); ++r) runs[r].values_["out_dir"] += suffix[r];
  }
  return runs;
}

std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

std::string RunConfig::fingerprint() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : resolved()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::filesystem::path RunConfig::out_dir() const {
  std::filesystem::path p = get("out_dir");
  if (p.is_relative()) {
    if (const char* root = std::getenv("AVG_OUT_ROOT"); root && *root) p = std::filesystem::path(root) / p;
  }
  return p;
}

corpus::SynthConfig RunConfig::synth() const {
  corpus::SynthConfig s;
  s.num_images = static_cast<int>(get_int("num_images"));
  s.num_clusters = static_cast<int>(get_int("num_clusters"));
  s.dim = static_cast<int>(get_int("dim"));
  s.captions_per_image = static_cast<int>(get_int("captions_per_image"));
  s.image_noise_sigma = get_real("image_noise");
  s.text_noise_sigma = get_real("text_noise");
  s.modality_gap_strength = get_real("gap");
  s.instance_sigma = get_real("instance_sigma");
  s.instance_rank = static_cast<int>(get_int("instance_rank"));
  s.seed = get_uint("seed");
  return s;
}

tokenizer::TokenizerConfig RunConfig::tokenizer() const {
  tokenizer::TokenizerConfig t;
  t.codebook_size = static_cast<int>(get_int("codebook_size"));
  t.depth = static_cast<int>(get_int("voken_length"));
  t.code_dim = static_cast<int>(get_int("code_dim"));
  t.lr = get_real("tok_lr");
  t.batch_size = static_cast<int>(get_int("tok_batch"));
  t.epochs = static_cast<int>(get_int("tok_epochs"));
  t.weight_recon = get_real("w_recon");
  t.weight_commit = get_real("w_commit");
  t.weight_align = get_real("w_align");
  t.disable_align = get_bool("disable_align");
  t.train_text_head = get_bool("train_text_head");
  t.straight_through = get_bool("straight_through");
  t.reseed_dead = get_bool("reseed_dead");
  t.reseed_noise = get_real("reseed_noise");
  t.seed = get_uint("seed") + 101;
  return t;
}

genmodel::ModelConfig RunConfig::model() const {
  genmodel::ModelConfig m;
  m.d_model = static_cast<int>(get_int("d_model"));
  m.heads = static_cast<int>(get_int("heads"));
  m.layers = static_cast<int>(get_int("layers"));
  m.ff = static_cast<int>(get_int("ff"));
  m.max_query_len = static_cast<int>(get_int("max_query_len"));
  m.init_std = get_real("init_std");
  m.dropout = get_real("dropout");
  m.random_voken_embed = get_bool("random_voken_embed");
  m.seed = get_uint("seed") + 202;
  return m;
}

discriminative::JointTrainConfig RunConfig::joint() const {
  discriminative::JointTrainConfig j;
  j.epochs = static_cast<int>(get_int("epochs"));
  j.warmup_epochs = static_cast<int>(get_int("warmup_epochs"));
  j.train_beam = static_cast<int>(get_int("train_beam"));
  j.candidate_refresh = static_cast<int>(get_int("candidate_refresh"));
  j.lr = get_real("lr");
  j.batch_size = static_cast<int>(get_int("batch_size"));
  j.clip_norm = get_real("clip_norm");
  j.weight_dis = get_real("weight_dis");
  j.disable_dis = get_bool("disable_dis");
  j.renormalize = get_bool("renormalize");
  j.freeze_voken_embed = get_bool("freeze_voken_embed");
  j.keep_best = get_bool("keep_best");
  j.seed = get_uint("seed") + 303;
  return j;
}

retrieval::RetrieveOptions RunConfig::retrieve_options() const {
  retrieval::RetrieveOptions r;
  r.k = 10;
  r.beam = static_cast<int>(get_int("beam"));
  r.beam_options.renormalize = get_bool("renormalize");
  r.beam_options.score_mode = get("score_mode") == "prob" ? decoding::ScoreMode::kProbSum : decoding::ScoreMode::kLogProb;
  return r;
}

retrieval::BenchConfig RunConfig::bench() const {
  retrieval::BenchConfig b;
  b.sizes = get_sizes("bench_sizes");
  b.trials = static_cast<int>(get_int("bench_trials"));
  b.queries_per_trial = static_cast<int>(get_int("bench_queries"));
  b.beam = static_cast<int>(get_int("beam"));
  b.synth = synth();
  return b;
}

}  // namespace avg
