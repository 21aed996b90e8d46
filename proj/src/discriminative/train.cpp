#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "avg/discriminative.hpp"

namespace avg::discriminative {

using genmodel::Seq2SeqModel;

CandidateSet assemble_candidates(std::span<const VokenSequence> beam_output, const VokenSequence& positive, int b,
                                 std::mt19937_64& rng) {
  if (beam_output.empty() && positive.empty()) throw UsageError("assemble_candidates: no beam output and no positive");
  CandidateSet set;
  set.sequences.assign(beam_output.begin(), beam_output.end());
  auto it = std::find(set.sequences.begin(), set.sequences.end(), positive);
  if (it != set.sequences.end()) {
    set.positive_index = static_cast<int>(it - set.sequences.begin());
  } else if (static_cast<int>(set.sequences.size()) >= b && !set.sequences.empty()) {
    std::uniform_int_distribution<size_t> slot(0, set.sequences.size() - 1);
    const size_t i = slot(rng);
    set.sequences[i] = positive;
    set.positive_index = static_cast<int>(i);
  } else {
    set.sequences.push_back(positive);
    set.positive_index = static_cast<int>(set.sequences.size()) - 1;
  }
  return set;
}

double discriminative_loss(std::span<const double> scores, int positive_index) {
  if (positive_index < 0 || positive_index >= static_cast<int>(scores.size())) {
    throw UsageError("discriminative_loss: positive index " + std::to_string(positive_index) + " out of range");
  }
  const double m = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (double s : scores) total += std::exp(s - m);
  return m + std::log(total) - scores[static_cast<size_t>(positive_index)];
}

int JointTrainConfig::resolved_warmup() const {
  return warmup_epochs >= 0 ? warmup_epochs : static_cast<int>(std::lround(0.3 * epochs));
}

void JointTrainConfig::validate() const {
  std::vector<std::string> bad;
  if (epochs < 0) bad.push_back("epochs");
  if (warmup_epochs < -1) bad.push_back("warmup_epochs");
  if (!disable_dis && train_beam < 2) bad.push_back("train_beam");
  if (candidate_refresh < 1) bad.push_back("candidate_refresh");
  if (!(lr > 0)) bad.push_back("lr");
  if (batch_size < 1) bad.push_back("batch_size");
  if (clip_norm < 0) bad.push_back("clip_norm");
  if (weight_dis < 0) bad.push_back("weight_dis");
  if (!bad.empty()) {
    std::string msg = "invalid joint training config:";
    for (const auto& k : bad) msg += " " + k;
    throw ConfigError(msg);
  }
}

std::string format_epoch(const EpochLog& log) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d\t%.6f\t%.6f\t%.4f\t%.4f\t%.2f", log.epoch, log.l_gen, log.l_dis, log.r1_val,
                log.r10_val, log.seconds);
  return buf;
}

Seq2SeqModel<float> train_joint(Seq2SeqModel<float> model, std::span<const TrainingExample> data,
                                const decoding::VokenTrie& trie, const JointTrainConfig& config,
                                const JointTrainHooks& hooks, std::vector<EpochLog>* history) {
  config.validate();
  if (data.empty()) throw UsageError("train_joint: no training examples");
  for (const auto& ex : data) {
    if (!trie.contains(ex.target)) {
      throw UsageError("train_joint: target [" + tokenizer::format_sequence(ex.target) + "] of image " +
                       std::to_string(ex.image_id) + " is not in the trie");
    }
  }
  const int warmup = config.resolved_warmup();
  auto adam = numerics::AdamState<float>::for_parameters(model.params, numerics::AdamHyper{.lr = config.lr});
  std::mt19937_64 order_rng(config.seed);
  std::mt19937_64 dropout_rng(config.seed ^ 0x2545F4914F6CDD1DULL);
  std::vector<size_t> order(data.size());
  std::vector<std::vector<VokenSequence>> cached(data.size());
  const genmodel::AllowedFn allowed = trie.allowed_fn();
  long step = 0;
  numerics::ParameterSet<float> best_params;
  double best_r10 = -1.0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const bool joint = epoch > warmup && !config.disable_dis;
    const bool refresh = joint && (epoch - warmup - 1) % config.candidate_refresh == 0;
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    double sum_gen = 0, sum_dis = 0;

    for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(config.batch_size)) {
      const size_t len = std::min(order.size() - b0, static_cast<size_t>(config.batch_size));
      std::vector<genmodel::QuerySequence> queries;
      std::vector<VokenSequence> targets;
      for (size_t i = 0; i < len; ++i) {
        queries.push_back(data[order[b0 + i]].query);
        targets.push_back(data[order[b0 + i]].target);
      }
      numerics::Tape<float> tape;
      auto p = genmodel::bind(tape, model, true);
      p.dropout = model.config.dropout;
      p.rng = &dropout_rng;
      const auto mem = genmodel::encode(model, p, std::span<const genmodel::QuerySequence>(queries));
      auto loss = genmodel::generative_loss_graph(model, p, mem, std::span<const VokenSequence>(targets));
      const double l_gen = loss.scalar();
      double l_dis = 0.0;

      if (joint) {
        if (refresh) {
          // Candidate search is a non-differentiable set-building step: it runs
          // on a separate tape over a detached copy of the encoder states
          // (re-encoded without dropout when dropout is on).
          numerics::Tape<float> search_tape;
          const auto frozen = genmodel::bind(search_tape, model, false);
          genmodel::Memory<float> detached =
              p.dropout > 0 ? genmodel::encode(model, frozen, std::span<const genmodel::QuerySequence>(queries))
                            : genmodel::Memory<float>{search_tape.constant(mem.states.value()), mem.offsets,
                                                      mem.lengths};
          decoding::BeamOptions opt;
          opt.renormalize = config.renormalize;
          const auto beams = decoding::beam_search_batch(model, frozen, detached, trie, config.train_beam, opt);
          for (size_t i = 0; i < len; ++i) {
            auto& c = cached[order[b0 + i]];
            c.clear();
            for (const auto& h : beams[i]) c.push_back(h.prefix);
          }
        }
        std::vector<CandidateSet> sets;
        genmodel::ScoreBatch batch;
        for (size_t i = 0; i < len; ++i) {
          const size_t item = order[b0 + i];
          std::seed_seq seq{config.seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(item)};
          std::mt19937_64 rng(seq);
          auto set = assemble_candidates(std::span<const VokenSequence>(cached[item]), targets[i], config.train_beam,
                                         rng);
          if (set.sequences.size() < 2) continue;  // positive only: contributes zero
          for (const auto& s : set.sequences) {
            batch.sequences.push_back(s);
            batch.query_of.push_back(static_cast<int>(i));
          }
          sets.push_back(std::move(set));
        }
        if (!sets.empty()) {
          auto scores = genmodel::score_graph(model, p, mem, batch, config.renormalize ? &allowed : nullptr);
          auto dis = discriminative_loss_graph(scores, std::span<const CandidateSet>(sets), static_cast<Index>(len));
          l_dis = dis.scalar();
          loss = numerics::add(loss, numerics::scale(dis, static_cast<float>(config.weight_dis)));
        }
      }
      ++step;
      if (!std::isfinite(loss.scalar())) {
        throw TrainingError("joint loss became non-finite at epoch " + std::to_string(epoch) + " step " +
                            std::to_string(step));
      }
      tape.backward(loss);
      numerics::Gradients<float> grads;
      for (const auto& [name, var] : p.vars) grads[name] = tape.gradient(var);
      if (config.freeze_voken_embed) {
        grads["embed"].middleRows(model.vocab.voken_offset(), model.vocab.codebook_size).setZero();
      }
      if (config.clip_norm > 0) numerics::clip_global_norm(grads, static_cast<float>(config.clip_norm));
      numerics::adam_update(model.params, grads, adam);
      sum_gen += l_gen * static_cast<double>(len);
      sum_dis += l_dis * static_cast<double>(len);
    }

    EpochLog log;
    log.epoch = epoch;
    log.l_gen = sum_gen / static_cast<double>(data.size());
    log.l_dis = sum_dis / static_cast<double>(data.size());
    if (hooks.validate) {
      std::tie(log.r1_val, log.r10_val) = hooks.validate(model);
      if (log.r10_val > best_r10) {
        best_r10 = log.r10_val;
        log.best = true;
        if (config.keep_best) best_params = model.params;
      }
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (history) history->push_back(log);
    if (hooks.on_epoch) hooks.on_epoch(log);
  }
  if (config.keep_best && best_r10 >= 0) model.params = std::move(best_params);
  return model;
}

}  // namespace avg::discriminative
