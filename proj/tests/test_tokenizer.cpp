#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "avg/corpus.hpp"
#include "avg/errors.hpp"
#include "avg/numerics/gradcheck.hpp"
#include "avg/tokenizer.hpp"
#include "doctest.h"

using namespace avg;
using namespace avg::tokenizer;

namespace {

Codebook<double> toy_codebook(int depth) {
  Codebook<double> cb;
  cb.entries.resize(3, 2);
  cb.entries << 1, 0, 0, 1, 0, 0;
  cb.depth = depth;
  return cb;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("avg_tokenizer_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Exhaustive per-step oracle, written independently of residual_quantize.
std::vector<int> oracle_quantize(const std::vector<double>& v, const std::vector<std::vector<double>>& rows, int m) {
  std::vector<double> r = v;
  std::vector<int> ids;
  for (int step = 0; step < m; ++step) {
    std::vector<double> dist;
    for (const auto& row : rows) {
      double d = 0;
      for (size_t k = 0; k < r.size(); ++k) d += (r[k] - row[k]) * (r[k] - row[k]);
      dist.push_back(d);
    }
    const int best = static_cast<int>(std::min_element(dist.begin(), dist.end()) - dist.begin());
    ids.push_back(best);
    for (size_t k = 0; k < r.size(); ++k) r[k] -= rows[static_cast<size_t>(best)][k];
  }
  return ids;
}

corpus::DatasetBundle clustered(int images, int clusters, double noise, uint64_t seed = 3) {
  corpus::SynthConfig c;
  c.num_images = images;
  c.num_clusters = clusters;
  c.dim = 16;
  c.captions_per_image = 1;
  c.image_noise_sigma = noise;
  c.text_noise_sigma = noise;
  c.seed = seed;
  return corpus::generate_synthetic(c);
}

}  // namespace

TEST_CASE("residual_quantize picks an exact codeword") {
  const VectorD v = (VectorD(2) << 0, 1).finished();
  const auto q = residual_quantize(v, toy_codebook(1));
  CHECK(q.ids == VokenSequence{1});
  CHECK(q.final_residual.isZero(0));
}

TEST_CASE("residual_quantize hand example over two steps") {
  const VectorD v = (VectorD(2) << 0.9, 0.2).finished();
  const auto q = residual_quantize(v, toy_codebook(2));
  CHECK(q.ids == VokenSequence{0, 2});
  CHECK(q.partial_sums(1, 0) == 1.0);
  CHECK(q.partial_sums(1, 1) == 0.0);
  CHECK(q.final_residual(0) == doctest::Approx(-0.1).epsilon(1e-12));
  CHECK(q.final_residual(1) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("residual_quantize rejects a dimension mismatch") {
  const VectorD v = VectorD::Zero(3);
  CHECK_THROWS_AS(residual_quantize(v, toy_codebook(1)), ShapeError);
}

TEST_CASE("ties go to the lowest row") {
  Codebook<double> cb;
  cb.entries.resize(3, 1);
  cb.entries << 1, -1, 1;
  cb.depth = 1;
  CHECK(residual_quantize(VectorD::Zero(1), cb).ids == VokenSequence{0});
}

TEST_CASE("residual_quantize agrees with the exhaustive oracle on 1000 vectors") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 1);
  std::uniform_int_distribution<int> coarse(-2, 2);
  const int rows = 256, dim = 8, depth = 4;
  Codebook<float> cb;
  cb.depth = depth;
  cb.entries.resize(rows, dim);
  // Half the rows sit on a coarse lattice so exact ties occur.
  for (int r = 0; r < rows; ++r) {
    for (int k = 0; k < dim; ++k) {
      cb.entries(r, k) = r % 2 == 0 ? static_cast<float>(coarse(rng)) * 0.5f : static_cast<float>(n(rng) * 0.5);
    }
  }
  std::vector<std::vector<double>> table(rows, std::vector<double>(dim));
  for (int r = 0; r < rows; ++r)
    for (int k = 0; k < dim; ++k) table[r][k] = cb.entries(r, k);

  for (int t = 0; t < 1000; ++t) {
    VectorF v(dim);
    for (int k = 0; k < dim; ++k) {
      v(k) = t % 4 == 0 ? static_cast<float>(coarse(rng)) * 0.25f : static_cast<float>(n(rng));
    }
    const auto q = residual_quantize(v, cb);
    // The oracle runs on float residuals too so rounding matches step by step.
    std::vector<double> vd(v.data(), v.data() + dim);
    VectorF r = v;
    std::vector<int> expect;
    for (int step = 0; step < depth; ++step) {
      std::vector<double> rd(r.data(), r.data() + dim);
      const int id = oracle_quantize(rd, table, 1)[0];
      expect.push_back(id);
      r -= cb.entries.row(id).transpose();
    }
    REQUIRE(q.ids == expect);
    if (t < 50) CHECK(oracle_quantize(vd, table, 1)[0] == q.ids[0]);
  }
}

TEST_CASE("quantization invariants hold exactly") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  Codebook<float> cb;
  cb.depth = 4;
  cb.entries = MatrixF::NullaryExpr(64, 6, [&] { return static_cast<float>(n(rng)); });
  for (int t = 0; t < 200; ++t) {
    const VectorF v = VectorF::NullaryExpr(6, [&] { return static_cast<float>(n(rng)); });
    const auto q = residual_quantize(v, cb);
    CHECK(q.residuals.row(0) == v.transpose());
    VectorF z = VectorF::Zero(6);
    for (int j = 0; j < cb.depth; ++j) {
      z += cb.entries.row(q.ids[j]).transpose();
      CHECK(q.partial_sums.row(j) == z.transpose());
      const VectorF next = j + 1 < cb.depth ? VectorF(q.residuals.row(j + 1).transpose()) : q.final_residual;
      CHECK(next == VectorF(q.residuals.row(j).transpose() - cb.entries.row(q.ids[j]).transpose()));
      // argmin: the kept residual is no longer than any alternative.
      for (int c = 0; c < cb.size(); ++c) {
        const VectorD alt = (q.residuals.row(j) - cb.entries.row(c)).transpose().cast<double>();
        CHECK(next.cast<double>().norm() <= alt.norm() + 1e-6);
      }
    }
  }
}

TEST_CASE("reconstruction identity is exact on dyadic values and tight otherwise") {
  Codebook<double> dyadic;
  dyadic.depth = 3;
  dyadic.entries.resize(4, 2);
  dyadic.entries << 0.5, 0.25, -0.125, 1, 0, 0, 2, -0.5;
  const VectorD v = (VectorD(2) << 1.375, 0.625).finished();
  const auto q = residual_quantize(v, dyadic);
  CHECK(VectorD(q.partial_sums.row(2).transpose()) + q.final_residual == v);

  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0, 1);
  Codebook<double> cb;
  cb.depth = 4;
  cb.entries = MatrixD::NullaryExpr(128, 8, [&] { return n(rng); });
  for (int t = 0; t < 100; ++t) {
    const VectorD x = VectorD::NullaryExpr(8, [&] { return n(rng); });
    const auto r = residual_quantize(x, cb);
    CHECK((VectorD(r.partial_sums.row(3).transpose()) + r.final_residual - x).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("tokenizer loss hand examples") {
  // Identity heads and an identity decoder on a 2-d toy codebook.
  TokenizerModel<double> m;
  m.codebook = toy_codebook(2);
  m.params.add("image_head.w", MatrixD::Identity(2, 2));
  m.params.add("image_head.b", MatrixD::Zero(1, 2));
  m.params.add("text_head.w", MatrixD::Identity(2, 2));
  m.params.add("text_head.b", MatrixD::Zero(1, 2));
  MatrixD w1(2, 4), w2(4, 2);
  w1 << 1, 0, -1, 0, 0, 1, 0, -1;
  w2 << 1, 0, 0, 1, -1, 0, 0, -1;
  m.params.add("decoder.w1", w1);
  m.params.add("decoder.b1", MatrixD::Zero(1, 4));
  m.params.add("decoder.w2", w2);
  m.params.add("decoder.b2", MatrixD::Zero(1, 2));

  numerics::Tape<double> tape;
  const MatrixD img = (MatrixD(1, 2) << 0.9, 0.2).finished();
  const MatrixD txt = (MatrixD(1, 2) << 0, 1).finished();
  const auto g = tokenizer_loss_graph(tape, m, img, txt, {});
  // z^(1) = z^(2) = (1,0): commit = 2 * (0.01 + 0.04).
  CHECK(g.commit.scalar() == doctest::Approx(0.10).epsilon(1e-12));
  // v_hat = (1,0) against v_t' = (0,1).
  CHECK(g.align.scalar() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(g.recon.scalar() == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(g.total.scalar() == doctest::Approx(2.15).epsilon(1e-12));

  // The input is an exact codeword, so the decoder reproduces it.
  numerics::Tape<double> tape2;
  const MatrixD exact = (MatrixD(1, 2) << 0, 1).finished();
  const auto g2 = tokenizer_loss_graph(tape2, m, exact, txt, {});
  CHECK(g2.recon.scalar() == 0.0);

  TokenizerLossOptions no_align;
  no_align.disable_align = true;
  numerics::Tape<double> tape3;
  const auto g3 = tokenizer_loss_graph(tape3, m, img, txt, no_align);
  CHECK(g3.align.scalar() == 0.0);
  CHECK(g3.total.scalar() == doctest::Approx(0.15).epsilon(1e-12));
}

TEST_CASE("tokenizer loss gradients match finite differences") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    TokenizerConfig cfg;
    cfg.codebook_size = 6;
    cfg.depth = 2;
    cfg.code_dim = 3;
    cfg.init_scale = 1.0;
    cfg.seed = seed;
    const TokenizerModel<double> base = init_tokenizer(4, cfg).cast<double>();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0, 1);
    const MatrixD images = MatrixD::NullaryExpr(2, 4, [&] { return n(rng); });
    const MatrixD texts = MatrixD::NullaryExpr(2, 4, [&] { return n(rng); });

    for (bool with_codebook : {false, true}) {
      TokenizerLossOptions opt;
      opt.straight_through = false;
      opt.train_text_head = true;
      // The stop-gradient makes the commit term's codebook gradient zero by
      // construction, which differencing cannot reproduce.
      if (with_codebook) opt.weight_commit = 0.0;
      numerics::LossFn f = [&](const numerics::ParameterSet<double>& p, numerics::Gradients<double>* grads) {
        TokenizerModel<double> m = base;
        for (const auto& [name, value] : p) {
          if (name == "codebook") m.codebook.entries = value;
          else m.params[name] = value;
        }
        numerics::Tape<double> tape;
        auto g = tokenizer_loss_graph(tape, m, images, texts, opt);
        if (grads) {
          tape.backward(g.total);
          for (const auto& [name, _] : p) (*grads)[name] = tape.gradient(g.params.at(name));
        }
        return g.total.scalar();
      };
      numerics::ParameterSet<double> p;
      if (with_codebook) {
        p.add("codebook", base.codebook.entries);
      } else {
        p = base.params;
      }
      const auto report = numerics::finite_difference_check(f, p, 1e-6, 1e-4);
      INFO("seed " << seed << " codebook " << with_codebook << " worst " << report.worst);
      CHECK(report.pass);
    }
  }
}

TEST_CASE("disable_align contributes no gradient") {
  TokenizerConfig cfg;
  cfg.codebook_size = 8;
  cfg.depth = 2;
  cfg.seed = 4;
  const auto m = init_tokenizer(4, cfg).cast<double>();
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  const MatrixD images = MatrixD::NullaryExpr(3, 4, [&] { return n(rng); });
  const MatrixD t1 = MatrixD::NullaryExpr(3, 4, [&] { return n(rng); });
  const MatrixD t2 = MatrixD::NullaryExpr(3, 4, [&] { return n(rng); });
  TokenizerLossOptions opt;
  opt.disable_align = true;
  opt.train_text_head = true;
  numerics::Tape<double> a, b;
  auto ga = tokenizer_loss_graph(a, m, images, t1, opt);
  auto gb = tokenizer_loss_graph(b, m, images, t2, opt);
  a.backward(ga.total);
  b.backward(gb.total);
  CHECK(ga.align.scalar() == 0.0);
  CHECK(a.gradient(ga.params.at("text_head.w")).isZero(0));
  for (const auto& [name, var] : ga.params) CHECK(a.gradient(var) == b.gradient(gb.params.at(name)));
}

TEST_CASE("one cluster with zero noise reconstructs almost perfectly") {
  const auto data = clustered(32, 1, 0.0);
  TokenizerConfig cfg;
  cfg.codebook_size = 4;
  cfg.depth = 1;
  cfg.epochs = 200;
  cfg.batch_size = 32;
  const auto m = train_tokenizer(data, cfg);
  TokenizerLossOptions opt;
  const auto l = tokenizer_losses(data.records.front(), m, opt);
  INFO("recon " << l.recon);
  CHECK(l.recon < 1e-3);
}

TEST_CASE("training is deterministic and reduces the loss") {
  corpus::SynthConfig sc;
  sc.num_images = 512;
  sc.captions_per_image = 1;
  sc.dim = 32;
  const auto data = corpus::generate_synthetic(sc);
  TokenizerConfig cfg;
  cfg.codebook_size = 256;
  cfg.depth = 4;
  cfg.epochs = 15;
  cfg.batch_size = 64;
  TokenizerHistory h1, h2;
  const auto m1 = train_tokenizer(data, cfg, &h1);
  const auto m2 = train_tokenizer(data, cfg, &h2);
  CHECK(m1.codebook.entries == m2.codebook.entries);
  CHECK(m1.params == m2.params);
  REQUIRE(h1.epochs.size() == 16);
  INFO("initial " << h1.epochs.front().total << " final " << h1.epochs.back().total);
  CHECK(h1.epochs.back().total <= 0.5 * h1.epochs.front().total);
}

TEST_CASE("separated clusters get distinct first vokens") {
  const auto data = clustered(256, 16, 0.02);
  TokenizerConfig cfg;
  cfg.codebook_size = 256;
  cfg.depth = 4;
  cfg.epochs = 20;
  cfg.batch_size = 64;
  const auto m = train_tokenizer(data, cfg);
  const auto index = assign_vokens(data, m);
  index.validate();
  // An image counts when no image of another cluster shares its first voken.
  std::map<int, std::set<int>> clusters_of;
  for (const auto& r : data.records) clusters_of[index.by_image.at(r.image_id)[0]].insert(*r.cluster_id);
  int good = 0;
  for (const auto& r : data.records) {
    if (clusters_of[index.by_image.at(r.image_id)[0]].size() == 1) ++good;
  }
  const double frac = static_cast<double>(good) / static_cast<double>(data.records.size());
  INFO("fraction " << frac);
  CHECK(frac >= 0.9);
}

TEST_CASE("identical images collide into one bucket") {
  auto data = clustered(6, 3, 0.05);
  data.records[4].image_vec = data.records[1].image_vec;
  TokenizerConfig cfg;
  cfg.codebook_size = 16;
  cfg.depth = 3;
  const auto index = assign_vokens(data, init_tokenizer(data.dim, cfg));
  index.validate();
  CHECK(index.by_image.at(1) == index.by_image.at(4));
  const auto& bucket = index.buckets.at(index.by_image.at(1));
  CHECK(bucket.size() >= 2);
  CHECK(index.colliding_sequences() >= 1);
  CHECK(index.collision_rate() ==
        doctest::Approx(static_cast<double>(index.num_images() - index.num_sequences()) / index.num_images()));
}

TEST_CASE("default codebook size and depth give ids in range") {
  const auto data = clustered(64, 8, 0.05);
  TokenizerConfig cfg;
  const auto m = init_tokenizer(data.dim, cfg);
  CHECK(m.codebook.size() == 1024);
  CHECK(m.codebook.depth == 4);
  const auto index = assign_vokens(data, m);
  for (const auto& [id, seq] : index.by_image) {
    REQUIRE(seq.size() == 4);
    for (int v : seq) CHECK((v >= 0 && v < 1024));
  }
}

TEST_CASE("voken index inserts reject duplicates and validate catches drift") {
  VokenIndex idx;
  idx.insert(3, {1, 2});
  idx.insert(1, {1, 2});
  CHECK(idx.buckets.at({1, 2}) == std::vector<int>{1, 3});
  CHECK_THROWS_AS(idx.insert(3, {0, 0}), IntegrityError);
  idx.by_image[3] = {5, 5};
  CHECK_THROWS_AS(idx.validate(), IntegrityError);
}

TEST_CASE("tokenizer artifacts round-trip") {
  const auto dir = scratch("roundtrip");
  TokenizerConfig cfg;
  cfg.codebook_size = 32;
  cfg.depth = 3;
  const auto m = init_tokenizer(8, cfg);
  save_tokenizer(dir, m);
  const auto back = load_tokenizer(dir);
  CHECK(back.codebook.entries == m.codebook.entries);
  CHECK(back.codebook.depth == 3);
  CHECK(back.params == m.params);

  VokenIndex idx;
  idx.insert(0, {4, 5, 6});
  idx.insert(2, {4, 5, 6});
  idx.insert(1, {0, 1, 2});
  write_voken_index(dir / "vokens.tsv", idx);
  const auto idx2 = read_voken_index(dir / "vokens.tsv");
  CHECK(idx2.by_image == idx.by_image);
  CHECK(idx2.buckets == idx.buckets);
  CHECK(format_sequence({659, 566, 629, 227}) == "659,566,629,227");

  std::ofstream(dir / "bad.tsv") << "0\t1,2\n1\t1,2,3\n";
  CHECK_THROWS_AS(read_voken_index(dir / "bad.tsv"), FormatError);
  CHECK_THROWS_AS(read_voken_index(dir / "missing.tsv"), DependencyError);
  std::ofstream(dir / "codebook.avgc", std::ios::app) << 'x';
  CHECK_THROWS_AS(read_codebook(dir / "codebook.avgc"), FormatError);
}

TEST_CASE("invalid tokenizer config names the keys") {
  TokenizerConfig cfg;
  cfg.codebook_size = 1;
  cfg.lr = 0;
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("codebook_size") != std::string::npos);
    CHECK(msg.find("lr") != std::string::npos);
  }
}
