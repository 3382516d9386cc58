#ifndef SLICEHIER_CONFIG_HPP
#define SLICEHIER_CONFIG_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "slicehier/data.hpp"
#include "slicehier/eval.hpp"
#include "slicehier/model.hpp"
#include "slicehier/train.hpp"

namespace slicehier {

struct ConfigKey {
  const char* key;
  const char* default_value;
  const char* doc;
};

/// Every recognised key with its default, in snapshot order.
const std::vector<ConfigKey>& config_keys();

/// Flat dotted-key configuration: defaults, then a key=value file, then
/// individual overrides. Unknown keys are rejected.
class Config {
public:
  Config();

  void set(const std::string& key, const std::string& value);
  /// `key=value` lines; `#` starts a comment; blank lines ignored.
  void merge_text(const std::string& text, const std::string& origin = "config");
  void merge_file(const std::filesystem::path& path);

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<double> get_list(const std::string& key, std::size_t expected) const;

  static bool known(const std::string& key);

  /// All keys as key=value lines, in config_keys() order.
  std::string snapshot() const;

private:
  std::map<std::string, std::string> values_;
};

CorpusSpec corpus_spec_from(const Config& c);
PreprocessConfig preprocess_from(const Config& c);
ModelConfig model_config_from(const Config& c);
TrainConfig train_config_from(const Config& c);
std::array<double, 3> split_fractions_from(const Config& c);
Thresholds threshold_targets_from(const Config& c);
TypePopulation type_population_from(const Config& c);

/// Parses every typed key so malformed values fail before a command runs.
void validate_config(const Config& c);

}  // namespace slicehier

#endif  // SLICEHIER_CONFIG_HPP
