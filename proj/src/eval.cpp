#include "slicehier/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "slicehier/error.hpp"
#include "slicehier/losses.hpp"
#include "slicehier/parallel.hpp"

namespace slicehier {

using json = nlohmann::ordered_json;

namespace {

void check_lengths(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.size() != labels.size()) {
    throw Error(Errc::shape_mismatch, std::string(what) + ": scores and labels differ in length");
  }
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json task_json(const TaskMetrics& t) {
  json j;
  j["n"] = t.n;
  j["positives"] = t.positives;
  j["auc"] = optional_json(t.auc);
  if (!t.auc) j["auc_error"] = t.auc_error;
  j["threshold"] = t.threshold;
  j["accuracy"] = optional_json(t.confusion.accuracy);
  j["sensitivity"] = optional_json(t.confusion.sensitivity);
  j["specificity"] = optional_json(t.confusion.specificity);
  j["tp"] = t.confusion.tp;
  j["fn"] = t.confusion.fn;
  j["tn"] = t.confusion.tn;
  j["fp"] = t.confusion.fp;
  return j;
}

TaskMetrics task_metrics(std::span<const double> scores, std::span<const int> labels, double tau) {
  TaskMetrics t;
  t.n = scores.size();
  t.positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  t.threshold = tau;
  t.confusion = confusion_at(scores, labels, tau);
  try {
    t.auc = roc_auc(scores, labels);
  } catch (const Error& e) {
    if (e.code() != Errc::undefined_metric) throw;
    t.auc_error = e.what();
  }
  return t;
}

}  // namespace

ScoredCases score_volumes(const Model<float>& m, std::span<const PreparedVolume> volumes, int threads) {
  ScoredCases s;
  const std::size_t n = volumes.size();
  s.p_app.resize(n);
  s.p_type.resize(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto t = forward_full(m, volumes[i]);
    s.p_app[i] = t.p_app;
    s.p_type[i] = t.p_type;
  });
  for (const auto& v : volumes) {
    s.case_id.push_back(v.case_id);
    s.y_app.push_back(v.y_app);
    s.y_type.push_back(v.y_type);
  }
  return s;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores, labels, "roc_auc");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (int y : labels) pos += y == 1 ? 1 : 0;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) {
    throw Error(Errc::undefined_metric, "AUC undefined: need at least one positive and one negative case (got " +
                                            std::to_string(pos) + " positive, " + std::to_string(neg) + " negative)");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of positive ranks with midranks for ties, kept doubled to stay integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t twice_midrank = static_cast<std::uint64_t>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) twice_rank_sum += twice_midrank;
    }
    i = j;
  }
  const std::uint64_t twice_u = twice_rank_sum - static_cast<std::uint64_t>(pos) * (pos + 1);
  return (static_cast<double>(twice_u) / 2.0) / (static_cast<double>(pos) * static_cast<double>(neg));
}

Confusion confusion_at(std::span<const double> scores, std::span<const int> labels, double tau) {
  check_lengths(scores, labels, "confusion_at");
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= tau;
    if (labels[i] == 1) {
      predicted ? ++c.tp : ++c.fn;
    } else {
      predicted ? ++c.fp : ++c.tn;
    }
  }
  auto ratio = [](std::size_t num, std::size_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  c.accuracy = ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn);
  c.sensitivity = ratio(c.tp, c.tp + c.fn);
  c.specificity = ratio(c.tn, c.tn + c.fp);
  return c;
}

double calibrate_threshold(std::span<const double> scores, std::span<const int> labels, double target_sensitivity) {
  check_lengths(scores, labels, "calibrate_threshold");
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0) throw Error(Errc::undefined_metric, "calibrate_threshold: no positive cases");

  std::vector<double> candidates(scores.begin(), scores.end());
  std::sort(candidates.begin(), candidates.end(), std::greater<>());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  const double top = candidates.front();
  const double above = top < 1.0 ? std::nextafter(top, 1.0) : 1.0;

  std::vector<double> pos_scores;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 1) pos_scores.push_back(scores[i]);
  }
  std::sort(pos_scores.begin(), pos_scores.end(), std::greater<>());
  auto sensitivity = [&](double tau) {
    const auto hits = std::upper_bound(pos_scores.begin(), pos_scores.end(), tau,
                                       [](double t, double s) { return s < t; }) -
                      pos_scores.begin();
    return static_cast<double>(hits) / static_cast<double>(positives);
  };

  if (above > top && sensitivity(above) >= target_sensitivity) return above;
  for (double tau : candidates) {
    if (sensitivity(tau) >= target_sensitivity) return tau;
  }
  return candidates.back();
}

const char* to_string(Diagnosis d) {
  switch (d) {
    case Diagnosis::normal: return "normal";
    case Diagnosis::simple: return "simple";
    case Diagnosis::complicated: return "complicated";
  }
  return "?";
}

Diagnosis hierarchical_predict(double p_app, double p_type, const Thresholds& t) {
  if (p_app < t.tau_app) return Diagnosis::normal;
  return p_type < t.tau_type ? Diagnosis::simple : Diagnosis::complicated;
}

void type_population(const ScoredCases& s, const Thresholds& t, TypePopulation population,
                     std::vector<double>& scores, std::vector<int>& labels) {
  scores.clear();
  labels.clear();
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool include =
        population == TypePopulation::gt_positive ? s.y_app[i] == 1 : s.p_app[i] >= t.tau_app;
    if (!include) continue;
    scores.push_back(s.p_type[i]);
    labels.push_back(s.y_app[i] == 1 && s.y_type[i] == 1 ? 1 : 0);
  }
}

MetricsReport evaluate_scores(const ScoredCases& s, const Thresholds& t, TypePopulation population) {
  MetricsReport r;
  r.total = s.size();
  r.type_population = population;
  r.thresholds = t;
  r.appendicitis = task_metrics(s.p_app, s.y_app, t.tau_app);
  std::vector<double> scores;
  std::vector<int> labels;
  type_population(s, t, population, scores, labels);
  r.type = task_metrics(scores, labels, t.tau_type);
  for (std::size_t i = 0; i < s.size(); ++i) ++r.predicted[static_cast<int>(hierarchical_predict(s.p_app[i], s.p_type[i], t))];
  return r;
}

MetricsReport evaluate_corpus(const Model<float>& m, std::span<const PreparedVolume> volumes, const Thresholds& t,
                              TypePopulation population, int threads) {
  return evaluate_scores(score_volumes(m, volumes, threads), t, population);
}

std::string report_to_json(const MetricsReport& r) {
  json j;
  j["split"] = r.split;
  j["total"] = r.total;
  j["type_population"] = r.type_population == TypePopulation::gt_positive ? "gt_positive" : "predicted_positive";
  j["thresholds"] = json::parse(thresholds_to_json(r.thresholds));
  j["appendicitis"] = task_json(r.appendicitis);
  j["type"] = task_json(r.type);
  j["predicted"] = {{"normal", r.predicted[0]}, {"simple", r.predicted[1]}, {"complicated", r.predicted[2]}};
  return j.dump(2) + "\n";
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores, labels, "roc_curve");
  const auto pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double neg = static_cast<double>(labels.size()) - pos;
  std::vector<double> taus(scores.begin(), scores.end());
  std::sort(taus.begin(), taus.end(), std::greater<>());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  std::vector<RocPoint> out;
  out.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  for (double tau : taus) {
    const auto c = confusion_at(scores, labels, tau);
    out.push_back({neg > 0 ? static_cast<double>(c.fp) / neg : 0.0, pos > 0 ? static_cast<double>(c.tp) / pos : 0.0,
                   tau});
  }
  return out;
}

std::string roc_csv(std::span<const RocPoint> points) {
  std::ostringstream os;
  os << "fpr,tpr,threshold\n";
  char buf[96];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", p.fpr, p.tpr, p.threshold);
    os << buf;
  }
  return os.str();
}

std::string thresholds_to_json(const Thresholds& t) {
  json j;
  j["tau_app"] = t.tau_app;
  j["tau_type"] = t.tau_type;
  j["target_sens_app"] = t.target_sens_app;
  j["target_sens_type"] = t.target_sens_type;
  return j.dump(2) + "\n";
}

Thresholds thresholds_from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    Thresholds t;
    t.tau_app = j.at("tau_app").get<double>();
    t.tau_type = j.at("tau_type").get<double>();
    t.target_sens_app = j.at("target_sens_app").get<double>();
    t.target_sens_type = j.at("target_sens_type").get<double>();
    return t;
  } catch (const json::exception& e) {
    throw Error(Errc::corrupt_file, std::string("thresholds file: ") + e.what());
  }
}

namespace {

std::vector<double> midranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = rank;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(Errc::shape_mismatch, "spearman: length mismatch");
  if (a.size() < 2) return 0.0;
  const auto ra = midranks(a), rb = midranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

AttentionStats attention_stats(const Model<float>& m, std::span<const PreparedVolume> volumes, double epsilon) {
  AttentionStats s;
  double rho_sum = 0;
  std::size_t rho_count = 0;
  for (const auto& v : volumes) {
    if (v.y_app != 1) continue;
    const auto t = forward_full(m, v, false);
    const auto target = align_weights<float>(t.features, m.params.center_pos.data, static_cast<float>(epsilon),
                                             v.padded);
    std::vector<double> wa, wt;
    double on = 0, off = 0;
    std::size_t n_on = 0, n_off = 0;
    for (std::size_t i = 0; i < v.slices; ++i) {
      if (v.padded[i]) continue;
      wa.push_back(t.w_app[i]);
      wt.push_back(target[i]);
      if (v.lesion[i]) {
        on += t.w_app[i];
        ++n_on;
      } else {
        off += t.w_app[i];
        ++n_off;
      }
    }
    rho_sum += spearman(wa, wt);
    ++rho_count;
    if (n_on == 0 || n_off == 0) continue;
    ++s.volumes;
    if (on / static_cast<double>(n_on) > off / static_cast<double>(n_off)) ++s.localized;
  }
  if (s.volumes > 0) s.localization_rate = static_cast<double>(s.localized) / static_cast<double>(s.volumes);
  if (rho_count > 0) s.mean_spearman = rho_sum / static_cast<double>(rho_count);
  return s;
}

}  // namespace slicehier
