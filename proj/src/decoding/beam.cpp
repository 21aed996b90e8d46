#include <algorithm>
#include <cmath>

#include "avg/decoding.hpp"

namespace avg::decoding {

std::vector<std::vector<BeamHypothesis>> beam_search(size_t queries, const VokenTrie& trie, int b, ScoreMode mode,
                                                     const StepScorer& scorer) {
  if (b < 1) throw UsageError("beam size must be at least 1, got " + std::to_string(b));
  if (trie.leaf_count() == 0) throw UsageError("beam search over an empty trie");
  std::vector<std::vector<BeamHypothesis>> beams(queries, std::vector<BeamHypothesis>{BeamHypothesis{}});
  for (int step = 0; step < trie.depth(); ++step) {
    std::vector<int> query_of;
    std::vector<VokenSequence> prefixes;
    std::vector<std::vector<int>> children;
    std::vector<const BeamHypothesis*> parents;
    for (size_t q = 0; q < queries; ++q) {
      for (const auto& h : beams[q]) {
        query_of.push_back(static_cast<int>(q));
        prefixes.push_back(h.prefix);
        children.push_back(trie.allowed_next(h.prefix));
        parents.push_back(&h);
      }
    }
    const auto scores = scorer(query_of, prefixes, children);
    if (scores.size() != children.size()) throw UsageError("beam search: scorer returned the wrong group count");

    // Rank (parent, child) pairs and build prefixes only for the survivors.
    // Candidates of one step share a length, so comparing the parent prefix
    // and then the child is the lexicographic order of beam_order.
    struct Candidate {
      double score;
      size_t group;
      int child;
    };
    std::vector<std::vector<Candidate>> cands(queries);
    for (size_t g = 0; g < children.size(); ++g) {
      if (scores[g].size() != children[g].size()) throw UsageError("beam search: scorer returned the wrong width");
      for (size_t c = 0; c < children[g].size(); ++c) {
        const double lp = scores[g][c];
        cands[static_cast<size_t>(query_of[g])].push_back(
            {parents[g]->score + (mode == ScoreMode::kLogProb ? lp : std::exp(lp)), g, children[g][c]});
      }
    }
    const auto better = [&](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.group != b.group) {
        const auto& pa = parents[a.group]->prefix;
        const auto& pb = parents[b.group]->prefix;
        if (pa != pb) return pa < pb;
      }
      return a.child < b.child;
    };
    std::vector<std::vector<BeamHypothesis>> next(queries);
    for (size_t q = 0; q < queries; ++q) {
      auto& cand = cands[q];
      const size_t keep = std::min(cand.size(), static_cast<size_t>(b));
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(), better);
      for (size_t i = 0; i < keep; ++i) {
        BeamHypothesis h;
        h.prefix = parents[cand[i].group]->prefix;
        h.prefix.push_back(cand[i].child);
        h.score = cand[i].score;
        h.finished = trie.contains(h.prefix);
        next[q].push_back(std::move(h));
      }
    }
    beams = std::move(next);
  }
  return beams;
}

}  // namespace avg::decoding
