#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "avg/corpus.hpp"
#include "avg/decoding.hpp"
#include "avg/discriminative.hpp"
#include "avg/genmodel.hpp"
#include "avg/retrieval.hpp"
#include "avg/tokenizer.hpp"

namespace avg {

/// Flat key=value run configuration. Every key has a default; unknown keys
/// are rejected. A value holding commas is a sweep (see expand_sweeps).
class RunConfig {
 public:
  enum class Type { kInt, kUint, kReal, kBool, kString, kSizes };
  struct Key {
    std::string name;
    std::string default_value;
    Type type;
    std::string help;
    std::vector<std::string> choices;  // for enumerated strings
  };

  RunConfig();

  static const std::vector<Key>& schema();
  /// Short names accepted in place of the long ones (N, M, D, E).
  static const std::map<std::string, std::string>& aliases();

  /// Reads "key=value" lines; blank lines and '#' comments are skipped.
  static RunConfig from_file(const std::filesystem::path& path);

  /// Applies "key=value" assignments; unknown keys and malformed
  /// assignments are all reported in one ConfigError.
  void apply(const std::vector<std::string>& assignments);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  long long get_int(const std::string& key) const;
  uint64_t get_uint(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_sizes(const std::string& key) const;

  /// Type and range checks over every key; all offenders in one ConfigError.
  void validate() const;
  bool has_sweep() const;
  /// One config per combination of comma-listed values, each with out_dir
  /// suffixed by its assignments.
  std::vector<RunConfig> expand_sweeps() const;

  /// Sorted "key=value" lines.
  std::string resolved() const;
  /// Hex hash of resolved().
  std::string fingerprint() const;
  /// out_dir, made absolute against $AVG_OUT_ROOT when relative and set.
  std::filesystem::path out_dir() const;

  corpus::SynthConfig synth() const;
  tokenizer::TokenizerConfig tokenizer() const;
  genmodel::ModelConfig model() const;
  discriminative::JointTrainConfig joint() const;
  retrieval::RetrieveOptions retrieve_options() const;
  retrieval::BenchConfig bench() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace avg
