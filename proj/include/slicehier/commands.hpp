#ifndef SLICEHIER_COMMANDS_HPP
#define SLICEHIER_COMMANDS_HPP

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "slicehier/config.hpp"
#include "slicehier/eval.hpp"
#include "slicehier/train.hpp"

namespace slicehier {

/// Inputs shared by the training commands, loaded from a corpus directory.
struct Dataset {
  SplitManifest split;
  std::vector<PreparedVolume> train, val, test;
  std::vector<Slice2D> aux;

  const std::vector<PreparedVolume>& part(const std::string& name) const;
};

/// Loads the corpus named by run.corpus, its split manifest (split.txt, or a
/// fresh split when absent) and preprocesses everything.
Dataset load_dataset(const Config& c);

struct SynthResult {
  std::filesystem::path dir;
  SplitManifest split;
};

struct TrainResult {
  FitResult fit;
  std::filesystem::path checkpoint;
};

struct AblationRow {
  std::string variant;
  MetricsReport report;
  std::string split_hash;
  double val_auc_app = 0;
};

/// Every command writes its resolved config snapshot to
/// `<run.out>/config.<command>.txt`.
SynthResult cmd_synth(const Config& c, std::ostream& log);
TrainResult cmd_train(const Config& c, std::ostream& log);
Thresholds cmd_calibrate(const Config& c, std::ostream& log);
/// Throws Errc::undefined_metric after writing the report when an AUC is undefined.
MetricsReport cmd_eval(const Config& c, std::ostream& log);
std::vector<GradCheckResult> cmd_gradcheck(const Config& c, std::ostream& log);
std::vector<AblationRow> cmd_ablate(const Config& c, std::ostream& log);

inline constexpr const char* kAblationVariants[] = {"base", "base+hierarchy", "base+hierarchy+2D"};

/// Config of one ablation variant derived from the base config.
Config ablation_variant(const Config& c, const std::string& variant);

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string ablation_markdown(const std::vector<AblationRow>& rows);

/// Parses argv and runs a subcommand. Exit codes: 0 success, 1 usage or
/// configuration error, 2 runtime or numeric error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace slicehier

#endif  // SLICEHIER_COMMANDS_HPP
