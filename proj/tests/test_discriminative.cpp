#include <cmath>
#include <random>

#include "avg/discriminative.hpp"
#include "avg/errors.hpp"
#include "avg/numerics/gradcheck.hpp"
#include "avg/retrieval.hpp"
#include "doctest.h"
#include "support/model_cases.hpp"

using namespace avg;
using namespace avg::discriminative;

namespace {

using testing::random_codebook;
using testing::tiny_config;

std::vector<VokenSequence> beam_of(int n) {
  std::vector<VokenSequence> out;
  for (int i = 0; i < n; ++i) out.push_back({i, i + 1});
  return out;
}



}  // namespace

TEST_CASE("assemble_candidates keeps a positive already in the beam") {
  std::mt19937_64 rng(1);
  const auto beam = beam_of(10);
  const auto set = assemble_candidates(std::span<const VokenSequence>(beam), beam[2], 10, rng);
  CHECK(set.sequences == beam);
  CHECK(set.positive_index == 2);
}

TEST_CASE("assemble_candidates replaces one slot of a full beam") {
  const auto beam = beam_of(10);
  const VokenSequence pos{99, 99};
  for (uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const auto set = assemble_candidates(std::span<const VokenSequence>(beam), pos, 10, rng);
    REQUIRE(set.sequences.size() == 10);
    CHECK(std::count(set.sequences.begin(), set.sequences.end(), pos) == 1);
    CHECK(set.sequences[static_cast<size_t>(set.positive_index)] == pos);
  }
}

TEST_CASE("assemble_candidates appends to a short beam") {
  std::mt19937_64 rng(1);
  const auto beam = beam_of(4);
  const auto set = assemble_candidates(std::span<const VokenSequence>(beam), {7, 7}, 10, rng);
  CHECK(set.sequences.size() == 5);
  CHECK(set.positive_index == 4);
  CHECK_THROWS_AS(assemble_candidates(std::span<const VokenSequence>(), {}, 10, rng), UsageError);
}

TEST_CASE("discriminative loss hand values") {
  const std::vector<double> flat(10, -3.5);
  CHECK(discriminative_loss(flat, 4) == doctest::Approx(std::log(10.0)).epsilon(1e-9));
  CHECK(std::abs(discriminative_loss(flat, 4) - 2.302585) < 1e-6);
  const std::vector<double> two{2.0, 0.0};
  CHECK(discriminative_loss(two, 0) == doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-12));
  CHECK(std::abs(discriminative_loss(two, 0) - 0.126928) < 1e-6);
  const std::vector<double> one{-1.0};
  CHECK(discriminative_loss(one, 0) == 0.0);
  CHECK_THROWS_AS(discriminative_loss(two, 2), UsageError);
}

TEST_CASE("discriminative loss is non-negative and shift invariant") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 3);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> s(static_cast<size_t>(2 + t % 9));
    for (auto& x : s) x = n(rng);
    const int pos = t % static_cast<int>(s.size());
    const double l = discriminative_loss(s, pos);
    CHECK(l >= 0.0);
    auto shifted = s;
    for (auto& x : shifted) x += 17.25;
    CHECK(discriminative_loss(shifted, pos) == doctest::Approx(l).epsilon(1e-6));
  }
  // Zero only when the positive holds all the mass.
  CHECK(discriminative_loss(std::vector<double>{0.0, -800.0}, 0) == 0.0);
}

TEST_CASE("joint loss gradient on a frozen two-candidate case matches finite differences") {
  const auto cb = random_codebook(4, 4, 2, 3);
  const auto base = genmodel::init_model(5, cb, tiny_config(3)).cast<double>();
  decoding::VokenTrie trie;
  trie.insert({1, 3});
  trie.insert({2, 0});
  const auto allowed = trie.allowed_fn();
  const std::vector<genmodel::QuerySequence> q{{0, 4, 1}};
  const std::vector<VokenSequence> gold{{1, 3}};
  const std::vector<CandidateSet> sets{{{{2, 0}, {1, 3}}, 1}};
  const genmodel::ScoreBatch batch{{{2, 0}, {1, 3}}, {0, 0}};
  numerics::LossFn f = [&](const numerics::ParameterSet<double>& params, numerics::Gradients<double>* grads) {
    auto m = base;
    m.params = params;
    numerics::Tape<double> tape;
    const auto p = genmodel::bind(tape, m, true);
    const auto mem = genmodel::encode(m, p, std::span<const genmodel::QuerySequence>(q));
    auto gen = genmodel::generative_loss_graph(m, p, mem, std::span<const VokenSequence>(gold));
    auto scores = genmodel::score_graph(m, p, mem, batch, &allowed);
    auto loss = numerics::add(gen, discriminative_loss_graph(scores, std::span<const CandidateSet>(sets), 1));
    if (grads) {
      tape.backward(loss);
      for (const auto& [name, var] : p.vars) (*grads)[name] = tape.gradient(var);
    }
    return loss.scalar();
  };
  const auto report = numerics::finite_difference_check(f, base.params, 1e-6, 1e-4);
  INFO("worst " << report.worst);
  CHECK(report.pass);
}

TEST_CASE("detached candidate scores carry no gradient") {
  const auto cb = random_codebook(4, 4, 2, 2);
  const auto m = genmodel::init_model(5, cb, tiny_config(2)).cast<double>();
  numerics::Tape<double> tape;
  const auto p = genmodel::bind(tape, m, true);
  const std::vector<genmodel::QuerySequence> q{{1, 2}};
  const auto mem = genmodel::encode(m, p, std::span<const genmodel::QuerySequence>(q));
  const genmodel::ScoreBatch batch{{{0, 1}, {3, 2}, {1, 1}}, {0, 0, 0}};
  auto scores = numerics::stop_gradient(genmodel::score_graph(m, p, mem, batch, nullptr));
  const std::vector<CandidateSet> sets{{batch.sequences, 2}};
  auto loss = discriminative_loss_graph(scores, std::span<const CandidateSet>(sets), 1);
  CHECK(loss.scalar() > 0.0);
  tape.backward(loss);
  for (const auto& [name, var] : p.vars) CHECK(tape.gradient(var).isZero(0));
}

TEST_CASE("joint config validation") {
  JointTrainConfig c;
  c.train_beam = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.disable_dis = true;
  CHECK_NOTHROW(c.validate());
  c.epochs = 10;
  c.warmup_epochs = -1;
  CHECK(c.resolved_warmup() == 3);
}

namespace {

struct Toy {
  genmodel::Seq2SeqModel<float> model;
  tokenizer::VokenIndex index;
  decoding::VokenTrie trie;
  std::vector<TrainingExample> data;
};

Toy toy_corpus() {
  Toy t;
  auto cb = random_codebook(16, 8, 3, 4);
  genmodel::ModelConfig c;
  c.d_model = 32;
  c.heads = 4;
  c.ff = 64;
  c.seed = 6;
  t.model = genmodel::init_model(40, cb, c);
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> v(0, 15), tok(0, 39);
  for (int img = 0; img < 8; ++img) {
    VokenSequence s{v(rng), v(rng), v(rng)};
    t.index.insert(img, s);
    genmodel::QuerySequence q{tok(rng), tok(rng), tok(rng), tok(rng)};
    t.data.push_back({q, s, img});
  }
  t.trie = decoding::build_trie(t.index);
  return t;
}

double train_r1(const Toy& t, const genmodel::Seq2SeqModel<float>& m) {
  std::vector<genmodel::QuerySequence> q;
  std::map<int, int> gold;
  for (const auto& ex : t.data) {
    q.push_back(ex.query);
    gold[ex.image_id] = ex.image_id;
  }
  retrieval::RetrieveOptions opt;
  auto results = retrieval::retrieve_all(m, t.trie, t.index, std::span<const genmodel::QuerySequence>(q), opt);
  for (size_t i = 0; i < results.size(); ++i) results[i].text_id = t.data[i].image_id;
  return retrieval::recall_at_k(std::span<const retrieval::RetrievalResult>(results), gold, 1);
}

}  // namespace

TEST_CASE("joint training memorizes an 8-image toy corpus") {
  const auto t = toy_corpus();
  JointTrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 4;
  cfg.train_beam = 4;
  cfg.lr = 3e-3;
  std::vector<EpochLog> log;
  const auto trained = train_joint(t.model, std::span<const TrainingExample>(t.data), t.trie, cfg, {}, &log);
  CHECK(train_r1(t, trained) == 1.0);
  REQUIRE(log.size() == 60);
  CHECK(log.front().l_dis == 0.0);  // warmup
  CHECK(log.back().l_dis > 0.0);
  CHECK(log.back().l_gen < log.front().l_gen);
}

TEST_CASE("disable_dis reports zero L_dis every epoch and runs deterministically") {
  const auto t = toy_corpus();
  JointTrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 3;
  cfg.disable_dis = true;
  std::vector<EpochLog> a, b;
  const auto ma = train_joint(t.model, std::span<const TrainingExample>(t.data), t.trie, cfg, {}, &a);
  const auto mb = train_joint(t.model, std::span<const TrainingExample>(t.data), t.trie, cfg, {}, &b);
  for (const auto& e : a) CHECK(e.l_dis == 0.0);
  CHECK(ma.params == mb.params);

  cfg.disable_dis = false;
  cfg.warmup_epochs = 2;
  cfg.train_beam = 3;
  const auto mc = train_joint(t.model, std::span<const TrainingExample>(t.data), t.trie, cfg);
  const auto md = train_joint(t.model, std::span<const TrainingExample>(t.data), t.trie, cfg);
  CHECK(mc.params == md.params);
}

TEST_CASE("epoch log line format") {
  EpochLog e{3, 1.5, 0.25, 0.5, 0.75, 2.0};
  CHECK(format_epoch(e) == "3\t1.500000\t0.250000\t0.5000\t0.7500\t2.00");
}

TEST_CASE("keep_best returns the parameters of the best validation epoch") {
  const auto t = toy_corpus();
  JointTrainConfig cfg;
  cfg.epochs = 4;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 3;
  cfg.train_beam = 3;
  // Scripted validation: epoch 2 is best, epoch 4 ties it and loses.
  const std::vector<double> r10{0.2, 0.9, 0.5, 0.9};
  int calls = 0;
  JointTrainHooks hooks;
  hooks.validate = [&](const genmodel::Seq2SeqModel<float>&) { return std::make_pair(0.0, r10[calls++ % 4]); };
  std::vector<EpochLog> log;
  const auto best = train_joint(t.model, std::span<const TrainingExample>(t.data), t.trie, cfg, hooks, &log);
  REQUIRE(log.size() == 4);
  CHECK(log[0].best);
  CHECK(log[1].best);
  CHECK_FALSE(log[2].best);
  CHECK_FALSE(log[3].best);

  cfg.epochs = 2;
  cfg.keep_best = false;
  const auto two = train_joint(t.model, std::span<const TrainingExample>(t.data), t.trie, cfg);
  CHECK(best.params == two.params);

  cfg.epochs = 4;
  const auto last = train_joint(t.model, std::span<const TrainingExample>(t.data), t.trie, cfg, hooks);
  CHECK_FALSE(last.params == two.params);
}
