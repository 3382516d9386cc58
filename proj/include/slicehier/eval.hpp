#ifndef SLICEHIER_EVAL_HPP
#define SLICEHIER_EVAL_HPP

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slicehier/data.hpp"
#include "slicehier/model.hpp"

namespace slicehier {

struct ScoredCases {
  std::vector<std::string> case_id;
  std::vector<double> p_app;
  std::vector<double> p_type;
  std::vector<int> y_app;
  std::vector<int> y_type;

  std::size_t size() const { return case_id.size(); }
};

/// Runs forward_full on every volume. Order of the output follows the input.
ScoredCases score_volumes(const Model<float>& m, std::span<const PreparedVolume> volumes, int threads = 1);

/// Mann-Whitney statistic: fraction of (positive, negative) pairs ranked
/// correctly, ties counted 0.5. Errc::undefined_metric for single-class input.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct Confusion {
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
  /// Empty when the denominator is zero.
  std::optional<double> accuracy, sensitivity, specificity;
};

/// Predicts positive iff score >= tau.
Confusion confusion_at(std::span<const double> scores, std::span<const int> labels, double tau);

/// Largest candidate threshold (observed scores plus one value above the
/// maximum) whose sensitivity is at least `target_sensitivity`.
double calibrate_threshold(std::span<const double> scores, std::span<const int> labels, double target_sensitivity);

struct Thresholds {
  double tau_app = 0.5;
  double tau_type = 0.5;
  double target_sens_app = 0.9;
  double target_sens_type = 0.8;
};

enum class Diagnosis { normal, simple, complicated };
const char* to_string(Diagnosis d);

/// Level one gates level two: complicated is only reachable when
/// p_app >= tau_app.
Diagnosis hierarchical_predict(double p_app, double p_type, const Thresholds& t);

enum class TypePopulation { gt_positive, predicted_positive };

struct TaskMetrics {
  std::size_t n = 0;
  std::size_t positives = 0;
  std::optional<double> auc;
  std::string auc_error;  // set when auc is empty
  double threshold = 0.0;
  Confusion confusion;
};

struct MetricsReport {
  std::string split;
  std::size_t total = 0;
  TypePopulation type_population = TypePopulation::gt_positive;
  Thresholds thresholds;
  TaskMetrics appendicitis;
  TaskMetrics type;
  std::array<std::size_t, 3> predicted{};  // normal, simple, complicated
};

MetricsReport evaluate_scores(const ScoredCases& scored, const Thresholds& t,
                              TypePopulation population = TypePopulation::gt_positive);

MetricsReport evaluate_corpus(const Model<float>& m, std::span<const PreparedVolume> volumes, const Thresholds& t,
                              TypePopulation population = TypePopulation::gt_positive, int threads = 1);

/// Fixed key order JSON.
std::string report_to_json(const MetricsReport& r);

struct RocPoint {
  double fpr, tpr, threshold;
};
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);
std::string roc_csv(std::span<const RocPoint> points);

std::string thresholds_to_json(const Thresholds& t);
Thresholds thresholds_from_json(const std::string& text);

/// Type-task population as (scores, labels) for the given report policy.
void type_population(const ScoredCases& scored, const Thresholds& t, TypePopulation population,
                     std::vector<double>& scores, std::vector<int>& labels);

/// Spearman rank correlation (midranks for ties). Zero when either input is
/// constant.
double spearman(std::span<const double> a, std::span<const double> b);

struct AttentionStats {
  std::size_t volumes = 0;        // positive volumes with lesion and non-lesion slices
  std::size_t localized = 0;      // mean w_app on lesion slices > mean elsewhere
  double localization_rate = 0;   // localized / volumes
  double mean_spearman = 0;       // w_app vs w_align over non-padded slices
};

/// Attention diagnostics over the positive volumes of a split.
AttentionStats attention_stats(const Model<float>& m, std::span<const PreparedVolume> volumes,
                               double epsilon = 1e-6);

}  // namespace slicehier

#endif  // SLICEHIER_EVAL_HPP
