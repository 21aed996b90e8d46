#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "avg/corpus.hpp"
#include "avg/errors.hpp"
#include "avg/io/binary.hpp"

namespace avg::corpus {

const char* to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::kTrain: return "train";
    case SplitTag::kVal: return "val";
    case SplitTag::kTest: return "test";
  }
  return "?";
}

std::vector<int> DatasetBundle::image_ids() const {
  std::set<int> ids;
  for (const auto& r : records) ids.insert(r.image_id);
  return {ids.begin(), ids.end()};
}

MatrixF DatasetBundle::image_matrix(std::vector<int>* ids) const {
  std::map<int, const EmbeddingRecord*> first;
  for (const auto& r : records) first.emplace(r.image_id, &r);
  MatrixF out(static_cast<Index>(first.size()), dim);
  Index row = 0;
  if (ids) ids->clear();
  for (const auto& [id, rec] : first) {
    out.row(row++) = rec->image_vec.transpose();
    if (ids) ids->push_back(id);
  }
  return out;
}

void DatasetBundle::validate(bool require_dense) const {
  if (dim <= 0) throw IntegrityError("bundle dimension must be positive");
  std::map<int, int> counts;
  std::set<int> text_ids;
  for (const auto& r : records) {
    if (r.image_id < 0 || r.text_id < 0) throw IntegrityError("negative id in bundle");
    if (r.image_vec.size() != dim || r.text_vec.size() != dim) {
      throw IntegrityError("record text_id=" + std::to_string(r.text_id) + " has wrong vector length");
    }
    if (!r.image_vec.allFinite() || !r.text_vec.allFinite()) {
      throw IntegrityError("record text_id=" + std::to_string(r.text_id) + " has non-finite values");
    }
    if (!text_ids.insert(r.text_id).second) throw IntegrityError("duplicate text_id " + std::to_string(r.text_id));
    ++counts[r.image_id];
  }
  for (const auto& [id, n] : counts) {
    if (n != captions_per_image) {
      throw IntegrityError("image " + std::to_string(id) + " has " + std::to_string(n) + " captions, expected " +
                           std::to_string(captions_per_image));
    }
  }
  if (require_dense && !counts.empty() && counts.rbegin()->first != static_cast<int>(counts.size()) - 1) {
    throw IntegrityError("image ids are not dense in [0, " + std::to_string(counts.size()) + ")");
  }
}

void write_embedding_blob(const std::filesystem::path& path, const MatrixF& rows) {
  io::BinaryWriter w(path);
  w.magic("AVGE");
  w.put<uint32_t>(kBlobVersion);
  w.put<uint32_t>(static_cast<uint32_t>(rows.cols()));
  w.put<uint64_t>(static_cast<uint64_t>(rows.rows()));
  w.bytes(rows.data(), sizeof(float) * static_cast<size_t>(rows.size()));
  w.close();
}

MatrixF read_embedding_blob(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("AVGE");
  const auto version = r.get<uint32_t>();
  if (version != kBlobVersion) throw FormatError("'" + path.string() + "': unsupported blob version " + std::to_string(version));
  const auto d = r.get<uint32_t>();
  const auto rows = r.get<uint64_t>();
  if (d == 0) throw FormatError("'" + path.string() + "': zero dimension");
  const auto size = std::filesystem::file_size(path);
  if (size != 20 + rows * d * sizeof(float)) {
    throw FormatError("'" + path.string() + "': header says " + std::to_string(rows) + "x" + std::to_string(d) +
                      " but file has " + std::to_string(size) + " bytes");
  }
  MatrixF m(static_cast<Index>(rows), static_cast<Index>(d));
  r.bytes(m.data(), sizeof(float) * static_cast<size_t>(m.size()));
  if (!m.allFinite()) throw FormatError("'" + path.string() + "': non-finite values");
  return m;
}

namespace {

struct PairLine {
  long long text_id;
  long long image_id;
  std::string caption;
};

std::vector<PairLine> read_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing file '" + path.string() + "'");
  std::vector<PairLine> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    if (t1 == std::string::npos) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected text_id<TAB>image_id");
    const auto t2 = line.find('\t', t1 + 1);
    PairLine p;
    try {
      size_t used = 0;
      const std::string a = line.substr(0, t1);
      const std::string b = line.substr(t1 + 1, t2 == std::string::npos ? std::string::npos : t2 - t1 - 1);
      p.text_id = std::stoll(a, &used);
      if (used != a.size()) throw std::invalid_argument(a);
      p.image_id = std::stoll(b, &used);
      if (used != b.size()) throw std::invalid_argument(b);
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": non-integer id");
    }
    if (t2 != std::string::npos) p.caption = line.substr(t2 + 1);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

DatasetBundle load_embeddings(const std::filesystem::path& pairs_path, const std::filesystem::path& image_blob_path,
                              const std::filesystem::path& text_blob_path) {
  const MatrixF images = read_embedding_blob(image_blob_path);
  const MatrixF texts = read_embedding_blob(text_blob_path);
  if (images.cols() != texts.cols()) {
    throw FormatError("dimension mismatch: image blob D=" + std::to_string(images.cols()) + ", text blob D=" +
                      std::to_string(texts.cols()));
  }
  const auto pairs = read_pairs(pairs_path);
  if (static_cast<Index>(pairs.size()) != texts.rows()) {
    throw FormatError("pairs file has " + std::to_string(pairs.size()) + " rows but text blob has " +
                      std::to_string(texts.rows()));
  }
  DatasetBundle bundle;
  bundle.dim = static_cast<int>(images.cols());
  std::map<long long, int> per_image;
  for (const auto& p : pairs) {
    if (p.text_id < 0 || p.text_id >= texts.rows()) {
      throw IntegrityError("text_id " + std::to_string(p.text_id) + " outside text blob of " +
                           std::to_string(texts.rows()) + " rows");
    }
    if (p.image_id < 0 || p.image_id >= images.rows()) {
      throw IntegrityError("image_id " + std::to_string(p.image_id) + " outside image blob of " +
                           std::to_string(images.rows()) + " rows");
    }
    EmbeddingRecord rec;
    rec.text_id = static_cast<int>(p.text_id);
    rec.image_id = static_cast<int>(p.image_id);
    rec.image_vec = l2_normalize(images.row(static_cast<Index>(p.image_id)).transpose());
    rec.text_vec = l2_normalize(texts.row(static_cast<Index>(p.text_id)).transpose());
    rec.caption = p.caption;
    ++per_image[p.image_id];
    bundle.records.push_back(std::move(rec));
  }
  if (!per_image.empty()) bundle.captions_per_image = per_image.begin()->second;
  bundle.validate(false);
  return bundle;
}

void write_dataset(const std::filesystem::path& dir, const DatasetBundle& bundle) {
  std::filesystem::create_directories(dir);
  std::vector<int> ids;
  const MatrixF images = bundle.image_matrix(&ids);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != static_cast<int>(i)) throw UsageError("write_dataset: image ids must be dense");
  }
  MatrixF texts(static_cast<Index>(bundle.records.size()), bundle.dim);
  std::ofstream pairs(dir / "pairs.tsv");
  if (!pairs) throw IntegrityError("cannot write '" + (dir / "pairs.tsv").string() + "'");
  for (const auto& r : bundle.records) {
    if (r.text_id < 0 || r.text_id >= texts.rows()) throw UsageError("write_dataset: text ids must be dense");
    texts.row(r.text_id) = r.text_vec.transpose();
    pairs << r.text_id << '\t' << r.image_id;
    if (!r.caption.empty()) {
      pairs << '\t' << r.caption;
    } else if (r.cluster_id) {
      pairs << '\t' << "cluster " << *r.cluster_id;
    }
    pairs << '\n';
  }
  write_embedding_blob(dir / "images.avge", images);
  write_embedding_blob(dir / "texts.avge", texts);
}

DatasetBundle read_dataset(const std::filesystem::path& dir) {
  return load_embeddings(dir / "pairs.tsv", dir / "images.avge", dir / "texts.avge");
}

Splits split(const DatasetBundle& bundle, double train_frac, double val_frac, uint64_t seed) {
  if (!(train_frac > 0 && train_frac < 1) || !(val_frac > 0 && val_frac < 1) || !(train_frac + val_frac < 1)) {
    throw ConfigError("split fractions must lie in (0,1) with a sum below 1 (train_frac, val_frac)");
  }
  std::vector<int> ids = bundle.image_ids();
  std::mt19937_64 rng(seed);
  for (size_t i = ids.size(); i > 1; --i) {
    std::uniform_int_distribution<size_t> pick(0, i - 1);
    std::swap(ids[i - 1], ids[pick(rng)]);
  }
  const auto n = static_cast<double>(ids.size());
  const auto n_train = static_cast<size_t>(std::llround(train_frac * n));
  const auto n_val = static_cast<size_t>(std::llround(val_frac * n));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= ids.size()) {
    throw ConfigError("split of " + std::to_string(ids.size()) + " images leaves an empty partition");
  }
  std::map<int, SplitTag> tag;
  for (size_t i = 0; i < ids.size(); ++i) {
    tag[ids[i]] = i < n_train ? SplitTag::kTrain : i < n_train + n_val ? SplitTag::kVal : SplitTag::kTest;
  }
  Splits out;
  for (DatasetBundle* b : {&out.train, &out.val, &out.test}) {
    b->dim = bundle.dim;
    b->captions_per_image = bundle.captions_per_image;
  }
  out.train.split_tag = SplitTag::kTrain;
  out.val.split_tag = SplitTag::kVal;
  out.test.split_tag = SplitTag::kTest;
  for (const auto& r : bundle.records) {
    switch (tag.at(r.image_id)) {
      case SplitTag::kTrain: out.train.records.push_back(r); break;
      case SplitTag::kVal: out.val.records.push_back(r); break;
      case SplitTag::kTest: out.test.records.push_back(r); break;
    }
  }
  return out;
}

}  // namespace avg::corpus
