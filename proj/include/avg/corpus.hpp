#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "avg/types.hpp"

namespace avg::corpus {

/// A paired text/image embedding sample.
struct EmbeddingRecord {
  int image_id = 0;
  int text_id = 0;
  VectorF image_vec;
  VectorF text_vec;
  std::optional<int> cluster_id;
  std::string caption;
};

enum class SplitTag { kTrain, kVal, kTest };

const char* to_string(SplitTag tag);

struct DatasetBundle {
  std::vector<EmbeddingRecord> records;
  int captions_per_image = 5;
  int dim = 0;
  SplitTag split_tag = SplitTag::kTrain;

  /// Distinct image ids in ascending order.
  std::vector<int> image_ids() const;
  size_t num_images() const { return image_ids().size(); }

  /// One row per image (ascending image_id) and the ids in the same order.
  MatrixF image_matrix(std::vector<int>* ids = nullptr) const;

  /// Checks vector shapes/finiteness and the captions-per-image invariant;
  /// with require_dense also checks image ids cover [0, num_images).
  void validate(bool require_dense) const;
};

struct SynthConfig {
  int num_images = 512;
  int num_clusters = 16;
  int dim = 64;
  int captions_per_image = 5;
  double image_noise_sigma = 0.05;
  double text_noise_sigma = 0.05;
  double modality_gap_strength = 0.0;
  /// Per-image semantic offset around the cluster center, shared by the image
  /// and all its captions. Zero gives captions that only know the cluster.
  double instance_sigma = 0.0;
  /// Dimension of the subspace the semantic offsets live in (0 = full).
  int instance_rank = 0;
  uint64_t seed = 1;

  void validate() const;
};

/// L2-normalises v (in double precision). Zero vectors are returned unchanged.
template <class Derived>
auto l2_normalize(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const double n = v.template cast<double>().norm();
  Vector<Scalar> out = v;
  if (n > 0) out = (v.template cast<double>() / n).template cast<Scalar>();
  return out;
}

/// Clustered synthetic pairs: image = normalize(x + N(0, s_img^2)),
/// caption = normalize(G x + N(0, s_txt^2)) with x = center + semantic offset
/// and G = (1 - g) I + g R for a seeded random orthogonal R.
DatasetBundle generate_synthetic(const SynthConfig& config);

/// Seeded Haar-random orthogonal matrix (QR of a Gaussian with sign fix).
MatrixD random_orthogonal(int dim, uint64_t seed);

// Embedding blob: "AVGE", u32 version=1, u32 D, u64 rows, rows*D f32 (LE).
inline constexpr uint32_t kBlobVersion = 1;
void write_embedding_blob(const std::filesystem::path& path, const MatrixF& rows);
MatrixF read_embedding_blob(const std::filesystem::path& path);

/// Loads pairs ("text_id<TAB>image_id[<TAB>caption]") against image and text
/// blobs, normalising every vector.
DatasetBundle load_embeddings(const std::filesystem::path& pairs_path, const std::filesystem::path& image_blob_path,
                              const std::filesystem::path& text_blob_path);

/// Writes pairs.tsv, images.avge and texts.avge into dir. Text ids must be
/// dense for the text blob; image rows are written by image id.
void write_dataset(const std::filesystem::path& dir, const DatasetBundle& bundle);
DatasetBundle read_dataset(const std::filesystem::path& dir);

struct Splits {
  DatasetBundle train;
  DatasetBundle val;
  DatasetBundle test;
};

/// Partitions by image id (captions stay together). Records keep their
/// original ids so split members can be looked up in corpus-wide indices.
Splits split(const DatasetBundle& bundle, double train_frac, double val_frac, uint64_t seed);

}  // namespace avg::corpus
