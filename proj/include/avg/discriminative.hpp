#pragma once

#include <functional>
#include <random>
#include <span>
#include <vector>

#include "avg/decoding.hpp"
#include "avg/genmodel.hpp"

namespace avg::discriminative {

/// Beam candidates for one training query with the gold sequence injected.
struct CandidateSet {
  std::vector<VokenSequence> sequences;
  int positive_index = 0;
};

/// Marks the positive if the beam already holds it; otherwise replaces a
/// uniformly chosen slot (full beam) or appends it (beam shorter than b).
CandidateSet assemble_candidates(std::span<const VokenSequence> beam_output, const VokenSequence& positive, int b,
                                 std::mt19937_64& rng);

/// -log softmax(scores)[positive], stable log-sum-exp.
double discriminative_loss(std::span<const double> scores, int positive_index);

/// Batch graph: sum over items of -log softmax(scores of item)[positive],
/// scaled by 1/batch. scores is the packed (sum of set sizes x 1) column.
template <class Scalar>
numerics::Var<Scalar> discriminative_loss_graph(numerics::Var<Scalar> scores, std::span<const CandidateSet> sets,
                                                Index batch) {
  std::vector<Index> lengths, positives;
  for (const auto& s : sets) {
    if (s.positive_index < 0 || s.positive_index >= static_cast<int>(s.sequences.size())) {
      throw UsageError("candidate set: positive index " + std::to_string(s.positive_index) + " out of range");
    }
    lengths.push_back(static_cast<Index>(s.sequences.size()));
    positives.push_back(s.positive_index);
  }
  auto total = numerics::segment_cross_entropy(scores, std::span<const Index>(lengths), std::span<const Index>(positives));
  return numerics::scale(total, Scalar(1) / static_cast<Scalar>(batch));
}

struct TrainingExample {
  genmodel::QuerySequence query;
  VokenSequence target;
  int image_id = 0;
};

struct JointTrainConfig {
  int epochs = 20;
  int warmup_epochs = -1;  // -1: 30% of epochs
  int train_beam = 10;
  int candidate_refresh = 1;  // rebuild beam candidates every this many epochs
  double lr = 1e-3;
  int batch_size = 128;
  double clip_norm = 1.0;
  double weight_dis = 1.0;
  bool disable_dis = false;
  bool renormalize = true;
  bool freeze_voken_embed = false;  // keep voken rows of the embedding table fixed
  bool keep_best = true;            // return the parameters of the best validation epoch
  uint64_t seed = 1;

  int resolved_warmup() const;
  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double l_gen = 0;
  double l_dis = 0;
  double r1_val = 0;
  double r10_val = 0;
  double seconds = 0;
  bool best = false;  // best validation R@10 so far
};

struct JointTrainHooks {
  /// Returns (R@1, R@10) on validation data; nullptr skips validation.
  std::function<std::pair<double, double>(const genmodel::Seq2SeqModel<float>&)> validate;
  /// Called after every epoch.
  std::function<void(const EpochLog&)> on_epoch;
};

/// Phase 1 minimizes L_gen; phase 2 minimizes L_gen + L_dis with beam
/// candidates drawn under the current parameters. With a validate hook and
/// keep_best, the parameters of the epoch with the highest validation R@10
/// (earliest on ties) are returned.
genmodel::Seq2SeqModel<float> train_joint(genmodel::Seq2SeqModel<float> model,
                                          std::span<const TrainingExample> data, const decoding::VokenTrie& trie,
                                          const JointTrainConfig& config, const JointTrainHooks& hooks = {},
                                          std::vector<EpochLog>* history = nullptr);

/// "epoch L_gen L_dis R@1_val R@10_val seconds", tab separated.
std::string format_epoch(const EpochLog& log);

}  // namespace avg::discriminative
