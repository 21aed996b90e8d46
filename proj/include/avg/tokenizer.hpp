#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "avg/corpus.hpp"
#include "avg/numerics/ops.hpp"
#include "avg/numerics/parameters.hpp"
#include "avg/types.hpp"

namespace avg::tokenizer {

/// The visual codebook: row k is voken k. One table is shared by every
/// quantization step.
template <class Scalar>
struct Codebook {
  Matrix<Scalar> entries;  // N x D_c
  int depth = 4;           // M

  int size() const { return static_cast<int>(entries.rows()); }
  int dim() const { return static_cast<int>(entries.cols()); }

  void validate() const {
    if (entries.rows() < 2) throw ConfigError("codebook needs at least 2 entries");
    if (depth < 1) throw ConfigError("voken length must be at least 1");
    if (!entries.allFinite()) throw IntegrityError("codebook has non-finite entries");
  }

  template <class Other>
  Codebook<Other> cast() const {
    return Codebook<Other>{entries.template cast<Other>(), depth};
  }
};

template <class Scalar>
struct QuantizationResult {
  VokenSequence ids;             // length M
  Matrix<Scalar> partial_sums;   // row d-1 holds z^(d)
  Matrix<Scalar> residuals;      // row j-1 holds r_j; r_1 is the input
  Vector<Scalar> final_residual; // r_{M+1}
};

/// Index of the row nearest to r (squared distance accumulated in double);
/// ties go to the lowest index.
template <class Scalar, class Derived>
int nearest_row(const Matrix<Scalar>& entries, const Eigen::MatrixBase<Derived>& r) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const Vector<double> rd = r.template cast<double>();
  const Index dim = entries.cols();
  for (Index c = 0; c < entries.rows(); ++c) {
    const Scalar* row = entries.data() + c * dim;
    double d = 0.0;
    for (Index k = 0; k < dim; ++k) {
      const double diff = static_cast<double>(row[k]) - rd[k];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

/// Greedy residual quantization of v against the codebook, M steps.
template <class Scalar, class Derived>
QuantizationResult<Scalar> residual_quantize(const Eigen::MatrixBase<Derived>& v, const Codebook<Scalar>& cb) {
  if (v.size() != cb.dim()) {
    throw ShapeError("residual_quantize: vector of length " + std::to_string(v.size()) + " against codebook dim " +
                     std::to_string(cb.dim()));
  }
  if (cb.entries.rows() == 0) throw UsageError("residual_quantize: empty codebook");
  QuantizationResult<Scalar> out;
  const Index dc = cb.dim();
  out.ids.resize(static_cast<size_t>(cb.depth));
  out.partial_sums.resize(cb.depth, dc);
  out.residuals.resize(cb.depth, dc);
  Vector<Scalar> r = v;
  Vector<Scalar> z = Vector<Scalar>::Zero(dc);
  for (int j = 0; j < cb.depth; ++j) {
    out.residuals.row(j) = r.transpose();
    const int id = nearest_row(cb.entries, r);
    out.ids[static_cast<size_t>(j)] = id;
    z += cb.entries.row(id).transpose();
    r -= cb.entries.row(id).transpose();
    out.partial_sums.row(j) = z.transpose();
  }
  out.final_residual = r;
  return out;
}

/// Trainable parts: the codebook plus image/text heads (D -> D_c affine) and a
/// one-hidden-layer relu decoder D_c -> 2 D_c -> D_c. Parameter names:
/// image_head.{w,b}, text_head.{w,b}, decoder.{w1,b1,w2,b2}.
template <class Scalar>
struct TokenizerModel {
  Codebook<Scalar> codebook;
  numerics::ParameterSet<Scalar> params;

  int input_dim() const { return static_cast<int>(params["image_head.w"].rows()); }
  int code_dim() const { return codebook.dim(); }

  Matrix<Scalar> project_images(const Matrix<Scalar>& x) const { return affine(x, "image_head"); }
  Matrix<Scalar> project_texts(const Matrix<Scalar>& x) const { return affine(x, "text_head"); }

  Matrix<Scalar> decode(const Matrix<Scalar>& z) const {
    Matrix<Scalar> h = z * params["decoder.w1"];
    h.rowwise() += params["decoder.b1"].row(0);
    h = h.cwiseMax(Scalar(0));
    Matrix<Scalar> out = h * params["decoder.w2"];
    out.rowwise() += params["decoder.b2"].row(0);
    return out;
  }

  template <class Other>
  TokenizerModel<Other> cast() const {
    return TokenizerModel<Other>{codebook.template cast<Other>(), params.template cast<Other>()};
  }

 private:
  Matrix<Scalar> affine(const Matrix<Scalar>& x, const std::string& name) const {
    if (x.cols() != params[name + ".w"].rows()) {
      throw ShapeError(name + ": input width " + std::to_string(x.cols()) + " but head expects " +
                       std::to_string(params[name + ".w"].rows()));
    }
    Matrix<Scalar> out = x * params[name + ".w"];
    out.rowwise() += params[name + ".b"].row(0);
    return out;
  }
};

struct TokenizerConfig {
  int codebook_size = 1024;  // N
  int depth = 4;             // M
  int code_dim = 0;          // D_c; 0 means the input dimension
  double lr = 1e-3;
  int batch_size = 256;
  int epochs = 40;
  double weight_recon = 1.0;
  double weight_commit = 1.0;
  double weight_align = 1.0;
  bool disable_align = false;
  bool train_text_head = false;
  bool straight_through = true;
  bool reseed_dead = true;  // move unused codebook rows onto observed residuals
  double reseed_noise = 0.01;
  double init_scale = 0.05;
  uint64_t seed = 1;

  void validate() const;
};

/// Fresh model: identity (or orthonormal) heads, near-identity decoder and a
/// small random codebook.
TokenizerModel<float> init_tokenizer(int input_dim, const TokenizerConfig& config);

struct TokenizerLossOptions {
  double weight_recon = 1.0;
  double weight_commit = 1.0;
  double weight_align = 1.0;
  bool disable_align = false;
  bool straight_through = true;
  bool train_text_head = false;
};

template <class Scalar>
struct TokenizerLossGraph {
  numerics::Var<Scalar> recon, commit, align, total;
  std::map<std::string, numerics::Var<Scalar>> params;  // includes "codebook"
  std::vector<QuantizationResult<Scalar>> quantized;
};

/// Builds the batch-mean tokenizer losses on a tape. Reconstruction and
/// alignment reach the decoder and, through z^(M) = sum of selected rows, the
/// codebook; the straight-through path copies grad(z^(M)) onto the image
/// head output; the commit term sees stop-gradient partial sums.
template <class Scalar>
TokenizerLossGraph<Scalar> tokenizer_loss_graph(numerics::Tape<Scalar>& tape, const TokenizerModel<Scalar>& model,
                                                const Matrix<Scalar>& images, const Matrix<Scalar>& texts,
                                                const TokenizerLossOptions& opt) {
  using namespace numerics;
  if (images.rows() != texts.rows() || images.rows() == 0) throw ShapeError("tokenizer loss: empty or ragged batch");
  TokenizerLossGraph<Scalar> g;
  for (const auto& [name, m] : model.params) {
    const bool trainable = name.rfind("text_head", 0) != 0 || opt.train_text_head;
    g.params.emplace(name, tape.parameter(m, trainable));
  }
  g.params.emplace("codebook", tape.parameter(model.codebook.entries));
  const Index batch = images.rows();
  const int depth = model.codebook.depth;
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(batch);

  auto v_img = add_bias(matmul(tape.constant(images), g.params.at("image_head.w")), g.params.at("image_head.b"));
  if (v_img.cols() != model.codebook.dim()) throw ShapeError("tokenizer loss: head width differs from codebook dim");

  std::vector<int> flat_ids;
  flat_ids.reserve(static_cast<size_t>(batch * depth));
  g.quantized.reserve(static_cast<size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    g.quantized.push_back(residual_quantize(v_img.value().row(b).transpose(), model.codebook));
    flat_ids.insert(flat_ids.end(), g.quantized.back().ids.begin(), g.quantized.back().ids.end());
  }
  const std::vector<Index> groups(static_cast<size_t>(batch), depth);
  auto z = segment_sum_rows(gather_rows(g.params.at("codebook"), std::span<const int>(flat_ids)),
                            std::span<const Index>(groups));
  if (opt.straight_through) z = straight_through(z, v_img);

  auto hidden = relu(add_bias(matmul(z, g.params.at("decoder.w1")), g.params.at("decoder.b1")));
  auto v_hat = add_bias(matmul(hidden, g.params.at("decoder.w2")), g.params.at("decoder.b2"));

  g.recon = scale(squared_l2(sub(v_img, v_hat)), inv_b);

  Var<Scalar> commit = tape.constant(Matrix<Scalar>::Zero(1, 1));
  for (int d = 0; d < depth; ++d) {
    Matrix<Scalar> zd(batch, model.codebook.dim());
    for (Index b = 0; b < batch; ++b) zd.row(b) = g.quantized[static_cast<size_t>(b)].partial_sums.row(d);
    commit = add(commit, squared_l2(sub(v_img, tape.constant(std::move(zd)))));
  }
  g.commit = scale(commit, inv_b);

  if (opt.disable_align) {
    g.align = tape.constant(Matrix<Scalar>::Zero(1, 1));
  } else {
    auto v_txt = add_bias(matmul(tape.constant(texts), g.params.at("text_head.w")), g.params.at("text_head.b"));
    g.align = scale(squared_l2(sub(v_hat, v_txt)), inv_b);
  }
  g.total = add(add(scale(g.recon, static_cast<Scalar>(opt.weight_recon)),
                    scale(g.commit, static_cast<Scalar>(opt.weight_commit))),
                scale(g.align, static_cast<Scalar>(opt.weight_align)));
  return g;
}

struct TokenizerLosses {
  double recon = 0, commit = 0, align = 0, total = 0;
};

/// Loss values for a single record (no gradient).
TokenizerLosses tokenizer_losses(const corpus::EmbeddingRecord& record, const TokenizerModel<float>& model,
                                 const TokenizerLossOptions& opt = {});

struct TokenizerHistory {
  /// Entry 0 is the pre-training pass; entry e is the mean over epoch e.
  std::vector<TokenizerLosses> epochs;
  std::vector<int> reseeded_per_epoch;
};

TokenizerModel<float> train_tokenizer(const corpus::DatasetBundle& train, const TokenizerConfig& config,
                                      TokenizerHistory* history = nullptr);

/// Item identifiers for a corpus: sequence -> images and image -> sequence.
struct VokenIndex {
  std::map<VokenSequence, std::vector<int>> buckets;  // image ids ascending
  std::map<int, VokenSequence> by_image;

  size_t num_images() const { return by_image.size(); }
  size_t num_sequences() const { return buckets.size(); }
  size_t colliding_sequences() const;
  size_t max_bucket() const;
  double collision_rate() const;
  int depth() const { return by_image.empty() ? 0 : static_cast<int>(by_image.begin()->second.size()); }

  void insert(int image_id, VokenSequence seq);
  /// Checks that both maps agree and every image appears exactly once.
  void validate() const;
};

VokenIndex assign_vokens(const corpus::DatasetBundle& bundle, const TokenizerModel<float>& model);

// Codebook file: "AVGC", u32 version, u32 N, u32 D_c, u32 M, N*D_c f32 rows.
inline constexpr uint32_t kCodebookVersion = 1;
void write_codebook(const std::filesystem::path& path, const Codebook<float>& cb);
Codebook<float> read_codebook(const std::filesystem::path& path);

/// codebook.avgc plus heads/decoder in tokenizer.avgw.
void save_tokenizer(const std::filesystem::path& dir, const TokenizerModel<float>& model);
TokenizerModel<float> load_tokenizer(const std::filesystem::path& dir);

/// Text lines "image_id<TAB>v1,v2,...,vM", ascending image id.
void write_voken_index(const std::filesystem::path& path, const VokenIndex& index);
VokenIndex read_voken_index(const std::filesystem::path& path);

std::string format_sequence(const VokenSequence& seq);

}  // namespace avg::tokenizer
