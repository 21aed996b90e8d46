#include <random>

#include "avg/corpus.hpp"
#include "avg/errors.hpp"

namespace avg::corpus {

void SynthConfig::validate() const {
  std::vector<std::string> bad;
  if (num_images < 1) bad.push_back("num_images");
  if (num_clusters < 1 || num_clusters > num_images) bad.push_back("num_clusters");
  if (dim < 2) bad.push_back("dim");
  if (captions_per_image < 1) bad.push_back("captions_per_image");
  if (!(image_noise_sigma >= 0)) bad.push_back("image_noise_sigma");
  if (!(text_noise_sigma >= 0)) bad.push_back("text_noise_sigma");
  if (!(modality_gap_strength >= 0)) bad.push_back("modality_gap_strength");
  if (!(instance_sigma >= 0)) bad.push_back("instance_sigma");
  if (instance_rank < 0 || instance_rank > dim) bad.push_back("instance_rank");
  if (!bad.empty()) {
    std::string msg = "invalid synthetic config:";
    for (const auto& b : bad) msg += " " + b;
    throw ConfigError(msg);
  }
}

MatrixD random_orthogonal(int dim, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  MatrixD a(dim, dim);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
  Eigen::HouseholderQR<MatrixD> qr(a);
  MatrixD q = qr.householderQ();
  const MatrixD r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < dim; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return q;
}

DatasetBundle generate_synthetic(const SynthConfig& config) {
  config.validate();
  const int d = config.dim;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal;
  auto gaussian = [&](Index n) {
    VectorD v(n);
    for (Index i = 0; i < n; ++i) v(i) = normal(rng);
    return v;
  };

  MatrixD centers(config.num_clusters, d);
  for (int k = 0; k < config.num_clusters; ++k) centers.row(k) = gaussian(d).transpose();

  const double g = config.modality_gap_strength;
  MatrixD gap = MatrixD::Identity(d, d);
  if (g != 0.0) gap = (1.0 - g) * MatrixD::Identity(d, d) + g * random_orthogonal(d, config.seed ^ 0x9E3779B97F4A7C15ULL);

  const int rank = config.instance_rank == 0 ? d : config.instance_rank;
  const MatrixD basis = random_orthogonal(d, config.seed ^ 0xD1B54A32D192ED03ULL).leftCols(rank);

  DatasetBundle bundle;
  bundle.dim = d;
  bundle.captions_per_image = config.captions_per_image;
  bundle.records.reserve(static_cast<size_t>(config.num_images) * config.captions_per_image);
  for (int i = 0; i < config.num_images; ++i) {
    const int cluster = i % config.num_clusters;
    VectorD latent = centers.row(cluster).transpose();
    if (config.instance_sigma > 0) latent += config.instance_sigma * (basis * gaussian(rank));
    VectorD image = latent;
    if (config.image_noise_sigma > 0) image += config.image_noise_sigma * gaussian(d);
    const VectorF image_vec = l2_normalize(image).cast<float>();
    const VectorD text_mean = g != 0.0 ? VectorD(gap * latent) : latent;
    for (int c = 0; c < config.captions_per_image; ++c) {
      VectorD text = text_mean;
      if (config.text_noise_sigma > 0) text += config.text_noise_sigma * gaussian(d);
      EmbeddingRecord rec;
      rec.image_id = i;
      rec.text_id = i * config.captions_per_image + c;
      rec.image_vec = image_vec;
      rec.text_vec = l2_normalize(text).cast<float>();
      rec.cluster_id = cluster;
      bundle.records.push_back(std::move(rec));
    }
  }
  return bundle;
}

}  // namespace avg::corpus
