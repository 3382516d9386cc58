#include "slicehier/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <sstream>

#include "slicehier/error.hpp"
#include "slicehier/parallel.hpp"
#include "slicehier/volume_io.hpp"

namespace slicehier {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "7", "master seed for corpus generation, splitting, initialisation and shuffling"},
      {"run.corpus", "", "corpus directory (input of train/calibrate/eval/ablate)"},
      {"run.out", "", "output directory"},
      {"run.checkpoint", "", "checkpoint file (default <run.out>/checkpoint.bin)"},
      {"run.thresholds", "", "thresholds file (default <run.out>/thresholds.json)"},
      {"run.split", "test", "split evaluated by eval: train|val|test"},
      {"run.calibration_split", "val", "split used by calibrate"},
      {"run.force", "false", "allow synth to replace a non-empty output directory"},
      {"run.quiet", "false", "suppress progress output"},
      {"run.roc", "false", "eval also writes roc_app.csv and roc_type.csv"},
      {"corpus.n_cases", "60", "number of 3D volumes"},
      {"corpus.class_mix", "0.5,0.3,0.2", "fractions normal,simple,complicated"},
      {"corpus.raw_slices", "20", "raw slices per volume"},
      {"corpus.raw_height", "32", "raw slice height"},
      {"corpus.raw_width", "32", "raw slice width"},
      {"corpus.background_hu", "40", "mean background intensity (HU)"},
      {"corpus.anatomy_hu", "35", "amplitude of the smooth background pattern (HU)"},
      {"corpus.lesion_hu", "150", "lesion intensity offset (HU)"},
      {"corpus.simple_radius", "3,4.5", "in-plane lesion radius range for simple cases (pixels)"},
      {"corpus.complicated_radius", "5,7", "in-plane lesion radius range for complicated cases (pixels)"},
      {"corpus.simple_blobs", "1,1", "lesion count range for simple cases"},
      {"corpus.complicated_blobs", "2,2", "lesion count range for complicated cases"},
      {"corpus.half_depth", "1.5,3", "lesion z semi-axis range (slices)"},
      {"corpus.noise_sigma", "20", "voxel noise standard deviation (HU)"},
      {"corpus.aux_cases", "20", "volumes whose slices form the auxiliary 2D set"},
      {"split.fractions", "0.7,0.15,0.15", "train,val,test fractions"},
      {"preprocess.window_center", "40", "window center (HU)"},
      {"preprocess.window_width", "400", "window width (HU)"},
      {"preprocess.slice_count", "16", "slices selected per volume"},
      {"preprocess.center_policy", "midpoint", "midpoint|fixed"},
      {"preprocess.center_index", "0", "center slice for center_policy=fixed"},
      {"preprocess.target_height", "32", "resized slice height"},
      {"preprocess.target_width", "32", "resized slice width"},
      {"preprocess.pad_value", "0", "value of padding slices"},
      {"model.feature_dim", "32", "slice feature dimension D"},
      {"model.conv1_channels", "8", "first conv stage channels"},
      {"model.conv2_channels", "16", "second conv stage channels"},
      {"model.hierarchical", "true", "false = flat base variant (no type attention)"},
      {"loss.alpha", "1", "weight of L_app"},
      {"loss.beta", "1", "weight of L_type"},
      {"loss.gamma", "0.1", "weight of L_center"},
      {"loss.delta", "0.1", "weight of L_coherence"},
      {"loss.lambda", "1", "weight of L_2D"},
      {"loss.epsilon", "1e-6", "epsilon of the alignment weights"},
      {"loss.type_on_positives_only", "true", "L_type only on appendicitis-positive volumes"},
      {"loss.coherence_on_positives_only", "false", "L_coherence only on appendicitis-positive volumes"},
      {"train.epochs", "20", "epochs"},
      {"train.batch_size", "2", "3D volumes per step"},
      {"train.aux_batch_size", "8", "2D slices per step"},
      {"train.aux_every_k_steps", "1", "draw a 2D batch every k steps"},
      {"train.aux_balanced", "true", "alternate lesion and non-lesion slices within each 2D batch"},
      {"train.lr", "5e-5", "initial learning rate"},
      {"train.checkpoint_every", "0", "also keep a checkpoint every k epochs (0 = best only)"},
      {"optimizer.momentum", "0.9", "SGD momentum"},
      {"optimizer.weight_decay", "0.001", "L2 weight decay added to the gradient"},
      {"scheduler.patience", "5", "epochs without val AUC improvement before decay"},
      {"scheduler.factor", "0.5", "learning-rate decay factor"},
      {"scheduler.min_delta", "1e-4", "minimum AUC gain counted as improvement"},
      {"scheduler.min_lr", "1e-7", "learning-rate floor"},
      {"eval.target_sens_app", "0.9", "sensitivity target for the appendicitis threshold"},
      {"eval.target_sens_type", "0.8", "sensitivity target for the complicated threshold"},
      {"eval.type_population", "gt_positive", "type-task population: gt_positive|predicted_positive"},
      {"gradcheck.slices", "4", "slices per volume of the gradient-check instance"},
      {"gradcheck.feature_dim", "3", "feature dimension of the gradient-check instance"},
      {"gradcheck.h", "1e-5", "central-difference step"},
      {"gradcheck.tolerance", "1e-4", "maximum relative error"},
      {"gradcheck.corrupt", "", "test hook: corrupt the analytic gradient of this term (e.g. L_type)"},
  };
  return keys;
}

Config::Config() {
  for (const auto& k : config_keys()) values_[k.key] = k.default_value;
}

bool Config::known(const std::string& key) {
  const auto& keys = config_keys();
  return std::any_of(keys.begin(), keys.end(), [&](const ConfigKey& k) { return key == k.key; });
}

void Config::set(const std::string& key, const std::string& value) {
  if (!known(key)) throw Error(Errc::invalid_argument, "unknown configuration key '" + key + "'");
  values_[key] = value;
}

void Config::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(Errc::invalid_argument, origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!known(key)) {
      throw Error(Errc::invalid_argument,
                  origin + ":" + std::to_string(lineno) + ": unknown configuration key '" + key + "'");
    }
    values_[key] = trim(line.substr(eq + 1));
  }
}

void Config::merge_file(const std::filesystem::path& path) { merge_text(read_text(path), path.string()); }

const std::string& Config::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error(Errc::invalid_argument, "unknown configuration key '" + key + "'");
  return it->second;
}

double Config::get_double(const std::string& key) const {
  const auto& s = get(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(Errc::invalid_argument, key + ": expected a number, got '" + s + "'");
  }
}

std::int64_t Config::get_int(const std::string& key) const {
  const auto& s = get(key);
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(Errc::invalid_argument, key + ": expected an integer, got '" + s + "'");
  }
}

std::uint64_t Config::get_u64(const std::string& key) const {
  const auto& s = get(key);
  try {
    std::size_t used = 0;
    if (!s.empty() && s[0] == '-') throw std::invalid_argument(s);
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(Errc::invalid_argument, key + ": expected an unsigned integer, got '" + s + "'");
  }
}

bool Config::get_bool(const std::string& key) const {
  const auto& s = get(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw Error(Errc::invalid_argument, key + ": expected true/false, got '" + s + "'");
}

std::vector<double> Config::get_list(const std::string& key, std::size_t expected) const {
  std::vector<double> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(Errc::invalid_argument, key + ": expected comma-separated numbers, got '" + get(key) + "'");
    }
  }
  if (out.size() != expected) {
    throw Error(Errc::invalid_argument, key + ": expected " + std::to_string(expected) + " values");
  }
  return out;
}

std::string Config::snapshot() const {
  std::ostringstream os;
  os << "# resolved slicehier configuration\n";
  for (const auto& k : config_keys()) os << k.key << "=" << values_.at(k.key) << "\n";
  return os.str();
}

namespace {

std::size_t positive(const Config& c, const std::string& key) {
  const auto v = c.get_int(key);
  if (v < 1) throw Error(Errc::invalid_argument, key + " must be >= 1");
  return static_cast<std::size_t>(v);
}

template <std::size_t N>
std::array<double, N> list(const Config& c, const std::string& key) {
  const auto v = c.get_list(key, N);
  std::array<double, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

std::array<int, 2> int_pair(const Config& c, const std::string& key) {
  const auto v = list<2>(c, key);
  return {static_cast<int>(v[0]), static_cast<int>(v[1])};
}

}  // namespace

CorpusSpec corpus_spec_from(const Config& c) {
  CorpusSpec s;
  s.n_cases = positive(c, "corpus.n_cases");
  s.class_mix = list<3>(c, "corpus.class_mix");
  double sum = s.class_mix[0] + s.class_mix[1] + s.class_mix[2];
  if (std::abs(sum - 1.0) > 1e-9) {
    throw Error(Errc::invalid_argument, "corpus.class_mix must sum to 1 (got " + std::to_string(sum) + ")");
  }
  s.raw_slices = positive(c, "corpus.raw_slices");
  s.raw_height = positive(c, "corpus.raw_height");
  s.raw_width = positive(c, "corpus.raw_width");
  s.background_hu = c.get_double("corpus.background_hu");
  s.anatomy_hu = c.get_double("corpus.anatomy_hu");
  s.lesion_hu = c.get_double("corpus.lesion_hu");
  s.simple_radius = list<2>(c, "corpus.simple_radius");
  s.complicated_radius = list<2>(c, "corpus.complicated_radius");
  s.simple_blobs = int_pair(c, "corpus.simple_blobs");
  s.complicated_blobs = int_pair(c, "corpus.complicated_blobs");
  s.half_depth = list<2>(c, "corpus.half_depth");
  s.noise_sigma = c.get_double("corpus.noise_sigma");
  s.aux_cases = static_cast<std::size_t>(std::max<std::int64_t>(0, c.get_int("corpus.aux_cases")));
  s.rng_seed = c.get_u64("seed");
  s.validate();
  return s;
}

PreprocessConfig preprocess_from(const Config& c) {
  PreprocessConfig p;
  p.window_center = c.get_double("preprocess.window_center");
  p.window_width = c.get_double("preprocess.window_width");
  p.slice_count = positive(c, "preprocess.slice_count");
  const auto& policy = c.get("preprocess.center_policy");
  if (policy == "midpoint") {
    p.center_policy = CenterPolicy::volume_midpoint;
  } else if (policy == "fixed") {
    p.center_policy = CenterPolicy::fixed_index;
  } else {
    throw Error(Errc::invalid_argument, "preprocess.center_policy must be midpoint or fixed");
  }
  p.center_index = static_cast<long>(c.get_int("preprocess.center_index"));
  p.target_height = positive(c, "preprocess.target_height");
  p.target_width = positive(c, "preprocess.target_width");
  p.pad_value = static_cast<float>(c.get_double("preprocess.pad_value"));
  p.validate();
  return p;
}

ModelConfig model_config_from(const Config& c) {
  const auto pre = preprocess_from(c);
  ModelConfig m;
  m.backbone.in_height = pre.target_height;
  m.backbone.in_width = pre.target_width;
  m.backbone.conv1_channels = positive(c, "model.conv1_channels");
  m.backbone.conv2_channels = positive(c, "model.conv2_channels");
  m.backbone.feature_dim = positive(c, "model.feature_dim");
  m.hierarchical = c.get_bool("model.hierarchical");
  m.backbone.validate();
  return m;
}

TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.epochs = static_cast<int>(c.get_int("train.epochs"));
  t.batch_size = positive(c, "train.batch_size");
  t.aux_batch_size = static_cast<std::size_t>(std::max<std::int64_t>(0, c.get_int("train.aux_batch_size")));
  t.aux_every_k_steps = static_cast<int>(c.get_int("train.aux_every_k_steps"));
  t.aux_balanced = c.get_bool("train.aux_balanced");
  t.initial_lr = c.get_double("train.lr");
  t.checkpoint_every = static_cast<int>(c.get_int("train.checkpoint_every"));
  t.momentum = c.get_double("optimizer.momentum");
  t.weight_decay = c.get_double("optimizer.weight_decay");
  t.scheduler_patience = static_cast<int>(c.get_int("scheduler.patience"));
  t.scheduler_factor = c.get_double("scheduler.factor");
  t.scheduler_min_delta = c.get_double("scheduler.min_delta");
  t.scheduler_min_lr = c.get_double("scheduler.min_lr");
  t.objective.weights = {c.get_double("loss.alpha"), c.get_double("loss.beta"), c.get_double("loss.gamma"),
                         c.get_double("loss.delta"), c.get_double("loss.lambda")};
  t.objective.epsilon = c.get_double("loss.epsilon");
  t.objective.type_loss_on_positives_only = c.get_bool("loss.type_on_positives_only");
  t.objective.coherence_on_positives_only = c.get_bool("loss.coherence_on_positives_only");
  t.seed = c.get_u64("seed");
  t.threads = threads_from_env();
  t.validate();
  return t;
}

std::array<double, 3> split_fractions_from(const Config& c) { return list<3>(c, "split.fractions"); }

Thresholds threshold_targets_from(const Config& c) {
  Thresholds t;
  t.target_sens_app = c.get_double("eval.target_sens_app");
  t.target_sens_type = c.get_double("eval.target_sens_type");
  for (double v : {t.target_sens_app, t.target_sens_type}) {
    if (v < 0.0 || v > 1.0) throw Error(Errc::invalid_argument, "eval.target_sens_* must lie in [0,1]");
  }
  return t;
}

TypePopulation type_population_from(const Config& c) {
  const auto& v = c.get("eval.type_population");
  if (v == "gt_positive") return TypePopulation::gt_positive;
  if (v == "predicted_positive") return TypePopulation::predicted_positive;
  throw Error(Errc::invalid_argument, "eval.type_population must be gt_positive or predicted_positive");
}

int threads_from_env() {
  const char* env = std::getenv("SLICEHIER_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  const int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

void validate_config(const Config& c) {
  c.get_u64("seed");
  const auto spec = corpus_spec_from(c);
  spec.validate();
  preprocess_from(c).validate();
  model_config_from(c).backbone.validate();
  train_config_from(c).validate();
  split_fractions_from(c);
  threshold_targets_from(c);
  type_population_from(c);
  for (const char* key : {"run.force", "run.quiet", "run.roc"}) c.get_bool(key);
  c.get_int("gradcheck.slices");
  c.get_int("gradcheck.feature_dim");
  c.get_double("gradcheck.h");
  c.get_double("gradcheck.tolerance");
}

}  // namespace slicehier
