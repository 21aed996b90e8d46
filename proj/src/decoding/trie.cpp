#include <functional>

#include "avg/decoding.hpp"

namespace avg::decoding {

void VokenTrie::insert(const VokenSequence& seq) {
  if (seq.empty()) throw UsageError("trie: empty voken sequence");
  if (depth_ != 0 && static_cast<int>(seq.size()) != depth_) {
    throw UsageError("trie: sequence length " + std::to_string(seq.size()) + " differs from " +
                     std::to_string(depth_));
  }
  depth_ = static_cast<int>(seq.size());
  int cur = 0;
  for (int v : seq) {
    auto& kids = nodes_[static_cast<size_t>(cur)].children;
    auto it = kids.find(v);
    if (it == kids.end()) {
      const int next = static_cast<int>(nodes_.size());
      kids.emplace(v, next);
      nodes_.emplace_back();  // invalidates `kids`
      cur = next;
    } else {
      cur = it->second;
    }
  }
  auto& leaf = nodes_[static_cast<size_t>(cur)];
  if (!leaf.terminal) {
    leaf.terminal = true;
    ++leaves_;
  }
}

int VokenTrie::find(const VokenSequence& prefix) const {
  int cur = 0;
  for (int v : prefix) {
    const auto& kids = nodes_[static_cast<size_t>(cur)].children;
    auto it = kids.find(v);
    if (it == kids.end()) return -1;
    cur = it->second;
  }
  return cur;
}

std::vector<int> VokenTrie::allowed_next(const VokenSequence& prefix) const {
  const int n = find(prefix);
  if (n < 0) throw UsageError("prefix [" + tokenizer::format_sequence(prefix) + "] is not in the trie");
  std::vector<int> out;
  for (const auto& [v, _] : nodes_[static_cast<size_t>(n)].children) out.push_back(v);
  return out;
}

bool VokenTrie::contains(const VokenSequence& seq) const {
  const int n = find(seq);
  return n >= 0 && nodes_[static_cast<size_t>(n)].terminal;
}

std::vector<VokenSequence> VokenTrie::enumerate() const {
  std::vector<VokenSequence> out;
  VokenSequence path;
  std::function<void(int)> walk = [&](int n) {
    const auto& node = nodes_[static_cast<size_t>(n)];
    if (node.terminal) out.push_back(path);
    for (const auto& [v, child] : node.children) {
      path.push_back(v);
      walk(child);
      path.pop_back();
    }
  };
  walk(0);
  return out;
}

VokenTrie build_trie(const tokenizer::VokenIndex& index) {
  if (index.buckets.empty()) throw UsageError("build_trie: empty voken index");
  VokenTrie trie;
  for (const auto& [seq, _] : index.buckets) trie.insert(seq);
  return trie;
}

}  // namespace avg::decoding
