#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "avg/decoding.hpp"
#include "avg/errors.hpp"
#include "doctest.h"
#include "support/model_cases.hpp"

using namespace avg;
using namespace avg::decoding;

namespace {

using testing::random_codebook;
using testing::tiny_config;

VokenTrie small_trie() {
  VokenTrie t;
  for (const VokenSequence& s : {VokenSequence{0, 1}, VokenSequence{0, 2}, VokenSequence{1, 1}}) t.insert(s);
  return t;
}


genmodel::Seq2SeqModel<double> random_model(int n, int depth, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1.0);
  tokenizer::Codebook<float> cb;
  cb.depth = depth;
  cb.entries = MatrixF::NullaryExpr(n, 4, [&] { return static_cast<float>(g(rng)); });
  return genmodel::init_model(6, cb, tiny_config(seed)).cast<double>();
}

VokenTrie random_trie(std::mt19937_64& rng, int n, int depth, int max_leaves) {
  std::uniform_int_distribution<int> sym(0, n - 1);
  std::uniform_int_distribution<int> count(1, max_leaves);
  VokenTrie t;
  const int target = count(rng);
  for (int i = 0; i < target; ++i) {
    VokenSequence s(static_cast<size_t>(depth));
    for (auto& v : s) v = sym(rng);
    t.insert(s);
  }
  return t;
}

genmodel::QuerySequence random_query(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tok(0, 5);
  std::uniform_int_distribution<int> len(1, 5);
  genmodel::QuerySequence q(static_cast<size_t>(len(rng)));
  for (auto& t : q) t = tok(rng);
  return q;
}

}  // namespace

TEST_CASE("trie construction and allowed_next") {
  const auto t = small_trie();
  CHECK(t.allowed_next({}) == std::vector<int>{0, 1});
  CHECK(t.allowed_next({0}) == std::vector<int>{1, 2});
  CHECK(t.allowed_next({0, 1}).empty());
  CHECK(t.leaf_count() == 3);
  CHECK(t.enumerate() == std::vector<VokenSequence>{{0, 1}, {0, 2}, {1, 1}});
  CHECK_THROWS_AS(t.allowed_next({2}), UsageError);
  CHECK(t.contains({1, 1}));
  CHECK_FALSE(t.contains({1}));
  CHECK_FALSE(t.contains({1, 2}));
}

TEST_CASE("build_trie matches the index") {
  tokenizer::VokenIndex idx;
  idx.insert(0, {3, 1});
  idx.insert(1, {3, 1});
  idx.insert(2, {0, 4});
  const auto t = build_trie(idx);
  CHECK(t.leaf_count() == idx.num_sequences());
  std::vector<VokenSequence> seqs;
  for (const auto& [s, _] : idx.buckets) seqs.push_back(s);
  CHECK(t.enumerate() == seqs);
  CHECK_THROWS_AS(build_trie(tokenizer::VokenIndex{}), UsageError);
}

TEST_CASE("beam search on a fixed step table") {
  const auto t = small_trie();
  const StepScorer table = [](const std::vector<int>&, const std::vector<VokenSequence>& prefixes,
                              const std::vector<std::vector<int>>& children) {
    std::vector<std::vector<double>> out;
    for (size_t g = 0; g < prefixes.size(); ++g) {
      std::vector<double> lp;
      for (int c : children[g]) {
        double p = 1.0;
        if (prefixes[g].empty()) p = c == 0 ? 0.6 : 0.4;
        else if (prefixes[g] == VokenSequence{0}) p = c == 1 ? 0.9 : 0.1;
        lp.push_back(std::log(p));
      }
      out.push_back(lp);
    }
    return out;
  };
  const auto top2 = beam_search(1, t, 2, ScoreMode::kLogProb, table)[0];
  REQUIRE(top2.size() == 2);
  CHECK(top2[0].prefix == VokenSequence{0, 1});
  CHECK(top2[0].score == doctest::Approx(std::log(0.54)).epsilon(1e-12));
  CHECK(top2[1].prefix == VokenSequence{1, 1});
  CHECK(top2[1].score == doctest::Approx(std::log(0.4)).epsilon(1e-12));
  const auto all = beam_search(1, t, 5, ScoreMode::kLogProb, table)[0];
  REQUIRE(all.size() == 3);
  CHECK(all[2].prefix == VokenSequence{0, 2});
  CHECK(std::exp(all[2].score) == doctest::Approx(0.06));
  for (const auto& h : all) CHECK(h.finished);
  CHECK_THROWS_AS(beam_search(1, t, 0, ScoreMode::kLogProb, table), UsageError);
}

TEST_CASE("equal scores are ordered lexicographically") {
  VokenTrie t;
  for (const VokenSequence& s : {VokenSequence{2, 0}, VokenSequence{1, 1}, VokenSequence{1, 0}}) t.insert(s);
  const StepScorer flat = [](const std::vector<int>&, const std::vector<VokenSequence>&,
                             const std::vector<std::vector<int>>& children) {
    std::vector<std::vector<double>> out;
    for (const auto& c : children) out.emplace_back(c.size(), -1.0);
    return out;
  };
  const auto r = beam_search(1, t, 3, ScoreMode::kLogProb, flat)[0];
  REQUIRE(r.size() == 3);
  CHECK(r[0].prefix == VokenSequence{1, 0});
  CHECK(r[1].prefix == VokenSequence{1, 1});
  CHECK(r[2].prefix == VokenSequence{2, 0});
}

TEST_CASE("beam search with b = leaf count reproduces the exhaustive ranking") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 5, depth = 1 + trial % 3;
    const auto model = random_model(n, depth, static_cast<uint64_t>(trial + 1));
    const auto trie = random_trie(rng, n, depth, 32);
    const auto q = random_query(rng);
    const auto allowed = trie.allowed_fn();
    std::vector<BeamHypothesis> oracle;
    for (const auto& s : trie.enumerate()) oracle.push_back({s, genmodel::forced_score(model, q, s, &allowed), true});
    std::sort(oracle.begin(), oracle.end(), beam_order);
    const auto beam = constrained_beam_search(model, q, trie, static_cast<int>(trie.leaf_count()));
    REQUIRE(beam.size() == oracle.size());
    for (size_t i = 0; i < beam.size(); ++i) {
      CHECK(beam[i].prefix == oracle[i].prefix);
      CHECK(beam[i].score == doctest::Approx(oracle[i].score).epsilon(1e-9));
    }
  }
}

TEST_CASE("without renormalization beam scores equal full-vocabulary forced scores") {
  std::mt19937_64 rng(3);
  const auto model = random_model(4, 2, 5);
  const auto trie = random_trie(rng, 4, 2, 10);
  const genmodel::QuerySequence q{1, 2, 3};
  BeamOptions opt;
  opt.renormalize = false;
  const auto beam = constrained_beam_search(model, q, trie, static_cast<int>(trie.leaf_count()), opt);
  for (const auto& h : beam) CHECK(h.score == doctest::Approx(genmodel::forced_score(model, q, h.prefix)).epsilon(1e-9));
}

TEST_CASE("fuzzed beam output is valid, capped and monotone in b") {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<int> beam(1, 12);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 6, depth = 1 + trial % 4;
    const auto model = random_model(n, depth, static_cast<uint64_t>(trial % 20 + 1));
    const auto trie = random_trie(rng, n, depth, 32);
    const auto q = random_query(rng);
    const int b = beam(rng);
    const auto r = constrained_beam_search(model, q, trie, b);
    REQUIRE(r.size() == std::min<size_t>(static_cast<size_t>(b), trie.leaf_count()));
    std::set<VokenSequence> seen;
    for (const auto& h : r) {
      REQUIRE(trie.contains(h.prefix));
      CHECK(h.score <= 0.0);
      seen.insert(h.prefix);
    }
    CHECK(seen.size() == r.size());
    if (trial % 50 == 0) {
      size_t last = 0;
      for (int bb = 1; bb <= 12; ++bb) {
        const size_t len = constrained_beam_search(model, q, trie, bb).size();
        CHECK(len >= last);
        last = len;
      }
    }
  }
}

TEST_CASE("restricted step distributions sum to one") {
  std::mt19937_64 rng(8);
  const auto model = random_model(6, 3, 2);
  const auto trie = random_trie(rng, 6, 3, 20);
  numerics::Tape<double> tape;
  const auto p = genmodel::bind(tape, model, false);
  const genmodel::QuerySequence q{0, 1};
  const auto mem = genmodel::encode(model, p, std::span<const genmodel::QuerySequence>(&q, 1));
  const auto scorer = model_scorer(model, p, mem, true);
  for (const auto& s : trie.enumerate()) {
    for (size_t j = 0; j < s.size(); ++j) {
      const VokenSequence prefix(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(j));
      const auto lp = scorer({0}, {prefix}, {trie.allowed_next(prefix)})[0];
      double total = 0;
      for (double x : lp) total += std::exp(x);
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("b = 1 follows the greedy path") {
  std::mt19937_64 rng(4);
  const auto model = random_model(5, 3, 9);
  const auto trie = random_trie(rng, 5, 3, 25);
  const genmodel::QuerySequence q{4, 4, 1};
  const auto r = constrained_beam_search(model, q, trie, 1);
  REQUIRE(r.size() == 1);
  numerics::Tape<double> tape;
  const auto p = genmodel::bind(tape, model, false);
  const auto mem = genmodel::encode(model, p, std::span<const genmodel::QuerySequence>(&q, 1));
  const auto scorer = model_scorer(model, p, mem, true);
  VokenSequence greedy;
  for (int j = 0; j < 3; ++j) {
    const auto kids = trie.allowed_next(greedy);
    const auto lp = scorer({0}, {greedy}, {kids})[0];
    greedy.push_back(kids[static_cast<size_t>(std::max_element(lp.begin(), lp.end()) - lp.begin())]);
  }
  CHECK(r[0].prefix == greedy);
}

TEST_CASE("probability-sum scoring ranks by summed step probabilities") {
  const auto t = small_trie();
  const auto model = random_model(3, 2, 4);
  const genmodel::QuerySequence q{2};
  BeamOptions opt;
  opt.score_mode = ScoreMode::kProbSum;
  const auto r = constrained_beam_search(model, q, t, 3, opt);
  const auto allowed = t.allowed_fn();
  for (const auto& h : r) {
    const auto steps = genmodel::step_log_probs(model, q, h.prefix, &allowed);
    CHECK(h.score == doctest::Approx(std::exp(steps[0]) + std::exp(steps[1])).epsilon(1e-9));
  }
  CHECK(r[0].score >= r[1].score);
}
