#ifndef SLICEHIER_TRAIN_HPP
#define SLICEHIER_TRAIN_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slicehier/data.hpp"
#include "slicehier/losses.hpp"
#include "slicehier/model.hpp"

namespace slicehier {

template <class T>
struct OptimizerState {
  double learning_rate = 5e-5;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  Parameters<T> velocity;  // lazily shaped like the parameters on first step
};

/// v <- momentum * v - lr * (g + wd * theta); theta <- theta + v.
/// Errc::shape_mismatch on layout disagreement, Errc::numeric (naming the
/// group) on a non-finite gradient.
template <class T>
void sgd_step(Parameters<T>& params, const Parameters<T>& grads, OptimizerState<T>& state);

struct SchedulerState {
  double learning_rate = 5e-5;
  double best = -std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;
  int patience = 5;
  double factor = 0.5;
  double min_delta = 1e-4;
  double min_lr = 1e-7;
};

/// Plateau rule on validation AUC; returns the learning rate to use next.
double scheduler_update(SchedulerState& s, double val_auc);

/// What the batch objective optimises, besides the model itself.
struct ObjectiveConfig {
  LossWeights weights;
  double epsilon = kAlignEpsilon;
  bool type_loss_on_positives_only = true;
  bool coherence_on_positives_only = false;
};

/// Loss of one batch and, if `grads` is non-null, its gradient
/// (accumulated). Volume terms are averaged over the 3D batch (the type term
/// over the volumes it applies to); center and 2D terms over the 2D batch.
/// `frozen_align`, when given, replaces the freshly computed alignment
/// targets (one vector per volume); `align_out` receives the targets used.
template <class T>
LossBreakdown batch_objective(const Model<T>& m, std::span<const PreparedVolume* const> volumes,
                              std::span<const Slice2D* const> aux, const ObjectiveConfig& obj, Parameters<T>* grads,
                              const std::vector<std::vector<T>>* frozen_align = nullptr,
                              std::vector<std::vector<T>>* align_out = nullptr, int threads = 1);

/// One optimisation step: batch_objective with gradients, then sgd_step.
template <class T>
LossBreakdown train_step(Model<T>& m, OptimizerState<T>& opt, std::span<const PreparedVolume* const> volumes,
                         std::span<const Slice2D* const> aux, const ObjectiveConfig& obj, int threads = 1);

struct TrainConfig {
  int epochs = 20;
  std::size_t batch_size = 2;
  std::size_t aux_batch_size = 8;
  int aux_every_k_steps = 1;
  /// Alternate lesion and non-lesion slices within each auxiliary batch.
  bool aux_balanced = true;
  double initial_lr = 5e-5;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  ObjectiveConfig objective;
  int scheduler_patience = 5;
  double scheduler_factor = 0.5;
  double scheduler_min_delta = 1e-4;
  double scheduler_min_lr = 1e-7;
  std::uint64_t seed = 7;
  int threads = 1;
  /// Also write `checkpoint_epoch_NNN.bin` every k epochs (0 = off).
  int checkpoint_every = 0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  LossBreakdown train;  // means over the epoch's steps
  double val_auc_app = 0;
  double val_auc_type = std::numeric_limits<double>::quiet_NaN();
  double lr = 0;  // rate used during the epoch
};

struct StepRecord {
  std::size_t step = 0;
  LossBreakdown loss;
  double lr = 0;
};

struct FitResult {
  Model<float> best;
  CheckpointMeta best_meta;
  std::vector<EpochRecord> history;
  std::vector<StepRecord> steps;
};

/// Epoch loop: seeded shuffle, train steps, validation AUC, scheduler,
/// best-checkpoint bookkeeping. With a non-empty `checkpoint_dir` the best
/// model is written to `checkpoint.bin` whenever it improves.
FitResult fit(const ModelConfig& model_cfg, std::span<const PreparedVolume> train,
              std::span<const PreparedVolume> val, std::span<const Slice2D> aux, const TrainConfig& cfg,
              const std::filesystem::path& checkpoint_dir = {},
              const std::function<void(const EpochRecord&)>& on_epoch = {});

std::string history_csv(std::span<const EpochRecord> history);
std::string steps_csv(std::span<const StepRecord> steps);

// --- gradient checking -----------------------------------------------------

/// max over i of |a_i - n_i| / max(|a_i|, |n_i|, floor).
inline constexpr double kRelativeErrorFloor = 1e-6;
double relative_error(double analytic, double numeric);

/// Central difference (f(x + h e_i) - f(x - h e_i)) / 2h for every i.
std::vector<double> central_difference(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> x, double h);

enum class LossTerm { app, type, center, coherence, aux2d, total };
const char* to_string(LossTerm t);
inline constexpr LossTerm kAllLossTerms[] = {LossTerm::app,       LossTerm::type,  LossTerm::center,
                                             LossTerm::coherence, LossTerm::aux2d, LossTerm::total};

/// A tiny double-precision problem: a few volumes (one with padding) and a
/// few auxiliary slices, every parameter randomised.
struct GradCheckInstance {
  Model<double> model;
  std::vector<PreparedVolume> volumes;
  std::vector<Slice2D> aux;
  ObjectiveConfig objective;
};

GradCheckInstance make_gradcheck_instance(std::uint64_t seed, std::size_t slices = 4, std::size_t feature_dim = 3);

struct GradCheckOptions {
  double h = 1e-5;
  double tolerance = 1e-4;
  /// Test hook: perturb the analytic gradient of this term (negative control).
  std::optional<LossTerm> corrupt = std::nullopt;
};

struct GradCheckResult {
  LossTerm term = LossTerm::total;
  double max_rel_error = 0;
  std::string worst_parameter;
  std::size_t checked = 0;
  bool pass = false;
};

/// Compares the analytic gradient of one loss term with central
/// differences over every scalar parameter. Alignment targets are held at
/// their unperturbed values, matching the stop-gradient in training.
GradCheckResult gradient_check(const GradCheckInstance& inst, LossTerm term, const GradCheckOptions& opt = {});

/// Weights selecting a single term (all-ones-on-that-term), or the
/// instance's weights for LossTerm::total.
LossWeights weights_for(LossTerm term, const LossWeights& total);

}  // namespace slicehier

#endif  // SLICEHIER_TRAIN_HPP
