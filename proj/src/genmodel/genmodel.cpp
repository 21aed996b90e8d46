#include "avg/genmodel.hpp"

#include <cctype>
#include <sstream>

#include "avg/numerics/checkpoint.hpp"

namespace avg::genmodel {

void ModelConfig::validate() const {
  std::vector<std::string> bad;
  if (d_model < 1) bad.push_back("d_model");
  if (heads < 1 || (d_model > 0 && d_model % heads != 0)) bad.push_back("heads");
  if (layers < 1) bad.push_back("layers");
  if (ff < 1) bad.push_back("ff");
  if (max_query_len < 1) bad.push_back("max_query_len");
  if (!(init_std > 0)) bad.push_back("init_std");
  if (!(dropout >= 0 && dropout < 1)) bad.push_back("dropout");
  if (!bad.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& b : bad) msg += " " + b;
    throw ConfigError(msg);
  }
}

QuerySequence hash_words(const std::string& text, int base_size, int max_len) {
  if (base_size < 1) throw ConfigError("hash_words: base_size must be positive");
  QuerySequence out;
  std::istringstream words(text);
  std::string w;
  while (words >> w && static_cast<int>(out.size()) < max_len) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : w) {
      h ^= static_cast<uint64_t>(std::tolower(c));
      h *= 0x100000001b3ULL;
    }
    out.push_back(static_cast<int>(h % static_cast<uint64_t>(base_size)));
  }
  if (out.empty()) out.push_back(base_size);  // PAD
  return out;
}

ProjectionTokenizer ProjectionTokenizer::make(int dim, int projections, int levels, uint64_t seed) {
  if (dim < 1 || projections < 1 || levels < 2) throw ConfigError("projection tokenizer: bad dim/projections/levels");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  ProjectionTokenizer t;
  t.levels = levels;
  t.directions.resize(projections, dim);
  for (int p = 0; p < projections; ++p) {
    VectorD d(dim);
    for (int k = 0; k < dim; ++k) d(k) = n(rng);
    t.directions.row(p) = (d / d.norm()).transpose().cast<float>();
  }
  return t;
}

QuerySequence ProjectionTokenizer::operator()(const VectorF& text_vec) const {
  if (text_vec.size() != directions.cols()) {
    throw ShapeError("projection tokenizer: vector of length " + std::to_string(text_vec.size()) + ", expected " +
                     std::to_string(directions.cols()));
  }
  // A unit vector's projection on a random unit direction has std 1/sqrt(D).
  const double spread = range / std::sqrt(static_cast<double>(directions.cols()));
  QuerySequence out(static_cast<size_t>(directions.rows()));
  for (Index p = 0; p < directions.rows(); ++p) {
    const double s = directions.row(p).cast<double>().dot(text_vec.cast<double>());
    const double u = (s + spread) / (2.0 * spread);
    const int bin = std::clamp(static_cast<int>(std::floor(u * levels)), 0, levels - 1);
    out[static_cast<size_t>(p)] = static_cast<int>(p) * levels + bin;
  }
  return out;
}

MatrixF ProjectionTokenizer::embedding_rows(double scale) const {
  const double spread = range / std::sqrt(static_cast<double>(directions.cols()));
  MatrixF rows(directions.rows() * levels, directions.cols());
  for (Index p = 0; p < directions.rows(); ++p) {
    for (int b = 0; b < levels; ++b) {
      const double center = -spread + (b + 0.5) * 2.0 * spread / levels;
      rows.row(p * levels + b) = directions.row(p) * static_cast<float>(center * scale);
    }
  }
  return rows;
}

std::pair<Vocabulary, MatrixF> build_vocab(int base_size, const tokenizer::Codebook<float>& codebook, int d_model,
                                           bool random_voken_embed, double init_std, uint64_t seed) {
  if (base_size < 1) throw ConfigError("build_vocab: base_size must be positive");
  if (d_model < codebook.dim()) {
    throw ConfigError("build_vocab: d_model " + std::to_string(d_model) + " is smaller than code dim " +
                      std::to_string(codebook.dim()));
  }
  Vocabulary vocab{base_size, codebook.size()};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, init_std);
  MatrixF embed(vocab.total_size(), d_model);
  for (Index i = 0; i < embed.size(); ++i) embed.data()[i] = static_cast<float>(n(rng));
  if (!random_voken_embed) {
    embed.block(vocab.voken_offset(), 0, codebook.size(), d_model).setZero();
    embed.block(vocab.voken_offset(), 0, codebook.size(), codebook.dim()) = codebook.entries;
  }
  return {vocab, embed};
}

namespace {

MatrixF xavier(std::mt19937_64& rng, Index in, Index out) {
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(in + out)));
  MatrixF m(in, out);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(n(rng));
  return m;
}

void add_norm(numerics::ParameterSet<float>& p, const std::string& name, int d) {
  p.add(name + ".g", MatrixF::Ones(1, d));
  p.add(name + ".b", MatrixF::Zero(1, d));
}

void add_attention(numerics::ParameterSet<float>& p, std::mt19937_64& rng, const std::string& name, int d) {
  for (const char* w : {".wq", ".wk", ".wv", ".wo"}) p.add(name + w, xavier(rng, d, d));
}

void add_ff(numerics::ParameterSet<float>& p, std::mt19937_64& rng, const std::string& name, int d, int ff) {
  p.add(name + ".w1", xavier(rng, d, ff));
  p.add(name + ".b1", MatrixF::Zero(1, ff));
  p.add(name + ".w2", xavier(rng, ff, d));
  p.add(name + ".b2", MatrixF::Zero(1, d));
}

}  // namespace

Seq2SeqModel<float> init_model(int base_size, const tokenizer::Codebook<float>& codebook, const ModelConfig& config,
                               const MatrixF* text_rows) {
  config.validate();
  codebook.validate();
  Seq2SeqModel<float> m;
  m.config = config;
  m.depth = codebook.depth;
  auto [vocab, embed] =
      build_vocab(base_size, codebook, config.d_model, config.random_voken_embed, config.init_std, config.seed);
  m.vocab = vocab;
  const int d = config.d_model;
  if (text_rows) {
    if (text_rows->rows() > base_size || text_rows->cols() > d) {
      throw ShapeError("init_model: text rows " + std::to_string(text_rows->rows()) + "x" +
                       std::to_string(text_rows->cols()) + " do not fit the text vocabulary");
    }
    embed.topRows(text_rows->rows()).setZero();
    embed.block(0, 0, text_rows->rows(), text_rows->cols()) = *text_rows;
  }
  std::mt19937_64 rng(config.seed ^ 0xA5A5A5A5ULL);
  std::normal_distribution<double> n(0.0, config.init_std);
  auto gauss = [&](Index r, Index c) {
    MatrixF x(r, c);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(n(rng));
    return x;
  };
  m.params.add("embed", std::move(embed));
  m.params.add("out_bias", MatrixF::Zero(1, vocab.total_size()));
  m.params.add("enc_pos", gauss(config.max_query_len, d));
  m.params.add("dec_pos", gauss(m.depth + 1, d));
  for (int l = 0; l < config.layers; ++l) {
    const std::string e = "enc." + std::to_string(l);
    add_norm(m.params, e + ".ln1", d);
    add_attention(m.params, rng, e + ".attn", d);
    add_norm(m.params, e + ".ln2", d);
    add_ff(m.params, rng, e + ".ff", d, config.ff);
  }
  add_norm(m.params, "enc.ln_f", d);
  for (int l = 0; l < config.layers; ++l) {
    const std::string e = "dec." + std::to_string(l);
    add_norm(m.params, e + ".ln1", d);
    add_attention(m.params, rng, e + ".self", d);
    add_norm(m.params, e + ".ln2", d);
    add_attention(m.params, rng, e + ".cross", d);
    add_norm(m.params, e + ".ln3", d);
    add_ff(m.params, rng, e + ".ff", d, config.ff);
  }
  add_norm(m.params, "dec.ln_f", d);
  return m;
}

void teacher_forcing(const Vocabulary& vocab, const VokenSequence& seq, std::vector<int>* inputs,
                     std::vector<int>* targets) {
  inputs->assign(1, vocab.bos());
  targets->clear();
  for (int k : seq) {
    const int id = vocab.voken_id(k);
    inputs->push_back(id);
    targets->push_back(id);
  }
  targets->push_back(vocab.eos());
}

namespace {
constexpr const char* kHeader = "__header__";
}

void save_model(const std::filesystem::path& path, const Seq2SeqModel<float>& model) {
  numerics::ParameterSet<float> out = model.params;
  MatrixF header(1, 9);
  header << static_cast<float>(model.vocab.base_size), static_cast<float>(model.vocab.codebook_size),
      static_cast<float>(model.depth), static_cast<float>(model.config.d_model),
      static_cast<float>(model.config.layers), static_cast<float>(model.config.heads),
      static_cast<float>(model.vocab.voken_offset()), static_cast<float>(model.config.ff),
      static_cast<float>(model.config.max_query_len);
  out.add(kHeader, header);
  numerics::write_checkpoint(path, out);
}

Seq2SeqModel<float> load_model(const std::filesystem::path& path) {
  auto params = numerics::read_checkpoint(path);
  if (!params.contains(kHeader) || params[kHeader].size() != 9) {
    throw FormatError("'" + path.string() + "': model checkpoint lacks a valid header");
  }
  const MatrixF header = params[kHeader];
  auto at = [&](int i) { return static_cast<int>(header(0, i)); };
  Seq2SeqModel<float> m;
  m.vocab = Vocabulary{at(0), at(1)};
  m.depth = at(2);
  m.config.d_model = at(3);
  m.config.layers = at(4);
  m.config.heads = at(5);
  m.config.ff = at(7);
  m.config.max_query_len = at(8);
  if (m.vocab.voken_offset() != at(6)) throw FormatError("'" + path.string() + "': inconsistent voken offset");
  try {
    m.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
  for (const auto& [name, value] : params) {
    if (name != kHeader) m.params.add(name, value);
  }
  if (!m.params.contains("embed") || m.params["embed"].rows() != m.vocab.total_size() ||
      m.params["embed"].cols() != m.config.d_model) {
    throw FormatError("'" + path.string() + "': embedding table does not match the header");
  }
  if (!m.params.contains("dec_pos") || m.params["dec_pos"].rows() != m.depth + 1) {
    throw FormatError("'" + path.string() + "': decoder positions do not match the header");
  }
  return m;
}

}  // namespace avg::genmodel
