#include "avg/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "avg/io/binary.hpp"
#include "avg/numerics/checkpoint.hpp"

namespace avg::tokenizer {

using numerics::AdamHyper;
using numerics::AdamState;
using numerics::Gradients;
using numerics::ParameterSet;
using numerics::Tape;

void TokenizerConfig::validate() const {
  std::vector<std::string> bad;
  if (codebook_size < 2) bad.push_back("codebook_size");
  if (depth < 1) bad.push_back("depth");
  if (code_dim < 0) bad.push_back("code_dim");
  if (!(lr > 0)) bad.push_back("lr");
  if (batch_size < 1) bad.push_back("batch_size");
  if (epochs < 0) bad.push_back("epochs");
  if (weight_recon < 0 || weight_commit < 0 || weight_align < 0) bad.push_back("loss weights");
  if (!bad.empty()) {
    std::string msg = "invalid tokenizer config:";
    for (const auto& b : bad) msg += " " + b;
    throw ConfigError(msg);
  }
}

namespace {

MatrixF gaussian(std::mt19937_64& rng, Index r, Index c, double sigma) {
  std::normal_distribution<double> n(0.0, sigma);
  MatrixF m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(n(rng));
  return m;
}

MatrixF projection_head(int in, int out, uint64_t seed) {
  if (in == out) return MatrixF::Identity(in, out);
  const MatrixD q = corpus::random_orthogonal(std::max(in, out), seed);
  return q.topLeftCorner(in, out).cast<float>();
}

}  // namespace

TokenizerModel<float> init_tokenizer(int input_dim, const TokenizerConfig& config) {
  config.validate();
  const int dc = config.code_dim == 0 ? input_dim : config.code_dim;
  std::mt19937_64 rng(config.seed);
  TokenizerModel<float> m;
  m.codebook.depth = config.depth;
  m.codebook.entries = gaussian(rng, config.codebook_size, dc, config.init_scale / std::sqrt(static_cast<double>(dc)));
  m.params.add("image_head.w", projection_head(input_dim, dc, config.seed + 1));
  m.params.add("image_head.b", MatrixF::Zero(1, dc));
  m.params.add("text_head.w", projection_head(input_dim, dc, config.seed + 1));
  m.params.add("text_head.b", MatrixF::Zero(1, dc));
  // relu(x W1) W2 with W1 = [I, -I], W2 = [I; -I] is the identity map.
  MatrixF w1(dc, 2 * dc), w2(2 * dc, dc);
  w1 << MatrixF::Identity(dc, dc), -MatrixF::Identity(dc, dc);
  w2 << MatrixF::Identity(dc, dc), -MatrixF::Identity(dc, dc);
  m.params.add("decoder.w1", w1 + gaussian(rng, dc, 2 * dc, 1e-3));
  m.params.add("decoder.b1", MatrixF::Zero(1, 2 * dc));
  m.params.add("decoder.w2", w2 + gaussian(rng, 2 * dc, dc, 1e-3));
  m.params.add("decoder.b2", MatrixF::Zero(1, dc));
  m.codebook.validate();
  return m;
}

TokenizerLosses tokenizer_losses(const corpus::EmbeddingRecord& record, const TokenizerModel<float>& model,
                                 const TokenizerLossOptions& opt) {
  Tape<float> tape;
  const auto g = tokenizer_loss_graph(tape, model, MatrixF(record.image_vec.transpose()),
                                      MatrixF(record.text_vec.transpose()), opt);
  return {g.recon.scalar(), g.commit.scalar(), g.align.scalar(), g.total.scalar()};
}

TokenizerModel<float> train_tokenizer(const corpus::DatasetBundle& train, const TokenizerConfig& config,
                                      TokenizerHistory* history) {
  if (train.records.empty()) throw UsageError("train_tokenizer: empty training bundle");
  config.validate();
  TokenizerModel<float> model = init_tokenizer(train.dim, config);
  const Index n = static_cast<Index>(train.records.size());
  MatrixF images(n, train.dim), texts(n, train.dim);
  for (Index i = 0; i < n; ++i) {
    images.row(i) = train.records[static_cast<size_t>(i)].image_vec.transpose();
    texts.row(i) = train.records[static_cast<size_t>(i)].text_vec.transpose();
  }

  TokenizerLossOptions opt;
  opt.weight_recon = config.weight_recon;
  opt.weight_commit = config.weight_commit;
  opt.weight_align = config.weight_align;
  opt.disable_align = config.disable_align;
  opt.straight_through = config.straight_through;
  opt.train_text_head = config.train_text_head;

  // The codebook trains alongside the heads/decoder under one optimizer.
  ParameterSet<float> all = model.params;
  all.add("codebook", model.codebook.entries);
  auto adam = AdamState<float>::for_parameters(all, AdamHyper{.lr = config.lr});
  std::mt19937_64 rng(config.seed ^ 0x5DEECE66DULL);
  std::normal_distribution<double> noise(0.0, config.reseed_noise);

  auto full_pass = [&]() {
    TokenizerLosses sum;
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index len = std::min<Index>(config.batch_size, n - start);
      Tape<float> tape;
      const auto g = tokenizer_loss_graph(tape, model, MatrixF(images.middleRows(start, len)),
                                          MatrixF(texts.middleRows(start, len)), opt);
      const double w = static_cast<double>(len) / static_cast<double>(n);
      sum.recon += w * g.recon.scalar();
      sum.commit += w * g.commit.scalar();
      sum.align += w * g.align.scalar();
      sum.total += w * g.total.scalar();
    }
    return sum;
  };
  if (history) {
    history->epochs.clear();
    history->reseeded_per_epoch.clear();
    history->epochs.push_back(full_pass());
  }

  std::vector<Index> order(static_cast<size_t>(n));
  long step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<long> usage(static_cast<size_t>(model.codebook.size()), 0);
    std::vector<VectorF> residuals;
    TokenizerLosses epoch_sum;
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index len = std::min<Index>(config.batch_size, n - start);
      MatrixF bi(len, train.dim), bt(len, train.dim);
      for (Index i = 0; i < len; ++i) {
        bi.row(i) = images.row(order[static_cast<size_t>(start + i)]);
        bt.row(i) = texts.row(order[static_cast<size_t>(start + i)]);
      }
      Tape<float> tape;
      auto g = tokenizer_loss_graph(tape, model, bi, bt, opt);
      ++step;
      if (!std::isfinite(g.total.scalar())) {
        throw TrainingError("tokenizer loss became non-finite at step " + std::to_string(step));
      }
      tape.backward(g.total);
      Gradients<float> grads;
      for (const auto& [name, var] : g.params) {
        if (var.requires_grad()) grads[name] = tape.gradient(var);
      }
      for (const auto& q : g.quantized) {
        for (int id : q.ids) ++usage[static_cast<size_t>(id)];
        for (Index j = 0; j < q.residuals.rows(); ++j) residuals.emplace_back(q.residuals.row(j).transpose());
      }
      const double w = static_cast<double>(len) / static_cast<double>(n);
      epoch_sum.recon += w * g.recon.scalar();
      epoch_sum.commit += w * g.commit.scalar();
      epoch_sum.align += w * g.align.scalar();
      epoch_sum.total += w * g.total.scalar();

      all["codebook"] = model.codebook.entries;
      for (auto& [name, m] : model.params) all[name] = m;
      numerics::adam_update(all, grads, adam);
      model.codebook.entries = all["codebook"];
      for (auto& [name, m] : model.params) m = all[name];
    }

    // Dead rows move to a random observed residual; skipped after the last
    // epoch so the final assignments match the trained codebook.
    int reseeded = 0;
    if (config.reseed_dead && epoch < config.epochs && !residuals.empty()) {
      std::uniform_int_distribution<size_t> pick(0, residuals.size() - 1);
      for (int k = 0; k < model.codebook.size(); ++k) {
        if (usage[static_cast<size_t>(k)] != 0) continue;
        const VectorF& src = residuals[pick(rng)];
        for (Index c = 0; c < src.size(); ++c) {
          model.codebook.entries(k, c) = src(c) + static_cast<float>(noise(rng));
        }
        adam.reset_row("codebook", k);
        ++reseeded;
      }
      all["codebook"] = model.codebook.entries;
    }
    if (history) {
      history->epochs.push_back(epoch_sum);
      history->reseeded_per_epoch.push_back(reseeded);
    }
  }
  model.codebook.validate();
  return model;
}

size_t VokenIndex::colliding_sequences() const {
  return static_cast<size_t>(
      std::count_if(buckets.begin(), buckets.end(), [](const auto& kv) { return kv.second.size() >= 2; }));
}

size_t VokenIndex::max_bucket() const {
  size_t m = 0;
  for (const auto& [_, ids] : buckets) m = std::max(m, ids.size());
  return m;
}

double VokenIndex::collision_rate() const {
  if (by_image.empty()) return 0.0;
  return static_cast<double>(by_image.size() - buckets.size()) / static_cast<double>(by_image.size());
}

void VokenIndex::insert(int image_id, VokenSequence seq) {
  if (!by_image.emplace(image_id, seq).second) {
    throw IntegrityError("image " + std::to_string(image_id) + " already has a voken sequence");
  }
  auto& bucket = buckets[std::move(seq)];
  bucket.insert(std::upper_bound(bucket.begin(), bucket.end(), image_id), image_id);
}

void VokenIndex::validate() const {
  size_t total = 0;
  for (const auto& [seq, ids] : buckets) {
    if (ids.empty()) throw IntegrityError("empty voken bucket");
    for (int id : ids) {
      auto it = by_image.find(id);
      if (it == by_image.end() || it->second != seq) {
        throw IntegrityError("voken index maps disagree for image " + std::to_string(id));
      }
    }
    total += ids.size();
  }
  if (total != by_image.size()) throw IntegrityError("voken index buckets do not cover every image exactly once");
}

VokenIndex assign_vokens(const corpus::DatasetBundle& bundle, const TokenizerModel<float>& model) {
  std::vector<int> ids;
  const MatrixF images = bundle.image_matrix(&ids);
  const MatrixF projected = model.project_images(images);
  VokenIndex index;
  for (size_t i = 0; i < ids.size(); ++i) {
    index.insert(ids[i], residual_quantize(projected.row(static_cast<Index>(i)).transpose(), model.codebook).ids);
  }
  return index;
}

void write_codebook(const std::filesystem::path& path, const Codebook<float>& cb) {
  io::BinaryWriter w(path);
  w.magic("AVGC");
  w.put<uint32_t>(kCodebookVersion);
  w.put<uint32_t>(static_cast<uint32_t>(cb.size()));
  w.put<uint32_t>(static_cast<uint32_t>(cb.dim()));
  w.put<uint32_t>(static_cast<uint32_t>(cb.depth));
  w.bytes(cb.entries.data(), sizeof(float) * static_cast<size_t>(cb.entries.size()));
  w.close();
}

Codebook<float> read_codebook(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("AVGC");
  const auto version = r.get<uint32_t>();
  if (version != kCodebookVersion) throw FormatError("'" + path.string() + "': unsupported codebook version");
  const auto n = r.get<uint32_t>();
  const auto dc = r.get<uint32_t>();
  const auto m = r.get<uint32_t>();
  Codebook<float> cb;
  cb.depth = static_cast<int>(m);
  cb.entries.resize(n, dc);
  r.bytes(cb.entries.data(), sizeof(float) * static_cast<size_t>(cb.entries.size()));
  if (!r.at_end()) throw FormatError("'" + path.string() + "': trailing bytes");
  try {
    cb.validate();
  } catch (const Error& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
  return cb;
}

void save_tokenizer(const std::filesystem::path& dir, const TokenizerModel<float>& model) {
  std::filesystem::create_directories(dir);
  write_codebook(dir / "codebook.avgc", model.codebook);
  numerics::write_checkpoint(dir / "tokenizer.avgw", model.params);
}

TokenizerModel<float> load_tokenizer(const std::filesystem::path& dir) {
  TokenizerModel<float> m;
  m.codebook = read_codebook(dir / "codebook.avgc");
  m.params = numerics::read_checkpoint(dir / "tokenizer.avgw");
  for (const char* name : {"image_head.w", "image_head.b", "text_head.w", "text_head.b", "decoder.w1", "decoder.b1",
                           "decoder.w2", "decoder.b2"}) {
    if (!m.params.contains(name)) throw FormatError("tokenizer checkpoint lacks '" + std::string(name) + "'");
  }
  if (m.params["image_head.w"].cols() != m.codebook.dim()) {
    throw FormatError("tokenizer heads do not match codebook dimension");
  }
  return m;
}

std::string format_sequence(const VokenSequence& seq) {
  std::string out;
  for (size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(seq[i]);
  }
  return out;
}

void write_voken_index(const std::filesystem::path& path, const VokenIndex& index) {
  std::ofstream out(path);
  if (!out) throw IntegrityError("cannot write '" + path.string() + "'");
  for (const auto& [id, seq] : index.by_image) out << id << '\t' << format_sequence(seq) << '\n';
  if (!out) throw IntegrityError("write to '" + path.string() + "' failed");
}

VokenIndex read_voken_index(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing file '" + path.string() + "'");
  VokenIndex index;
  std::string line;
  size_t lineno = 0;
  size_t depth = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (tab == std::string::npos) throw FormatError(where + ": expected image_id<TAB>v1,...,vM");
    VokenSequence seq;
    int image_id = 0;
    try {
      image_id = std::stoi(line.substr(0, tab));
      std::stringstream ss(line.substr(tab + 1));
      std::string tok;
      while (std::getline(ss, tok, ',')) seq.push_back(std::stoi(tok));
    } catch (const std::logic_error&) {
      throw FormatError(where + ": non-integer field");
    }
    if (image_id < 0 || seq.empty() || std::any_of(seq.begin(), seq.end(), [](int v) { return v < 0; })) {
      throw FormatError(where + ": negative id or empty sequence");
    }
    if (depth == 0) depth = seq.size();
    if (seq.size() != depth) throw FormatError(where + ": sequence length differs from earlier lines");
    index.insert(image_id, std::move(seq));
  }
  return index;
}

}  // namespace avg::tokenizer
