// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "slicehier/commands.hpp"
#include "slicehier/losses.hpp"
#include "slicehier/volume_io.hpp"
#include "support.hpp"

using namespace slicehier;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome gradient_oracle() {
  Config c;
  std::ostringstream log;
  const auto t0 = Clock::now();
  const auto results = cmd_gradcheck(c, log);
  const double secs = seconds_since(t0);
  bool all = results.size() == std::size(kAllLossTerms);
  double worst = 0;
  std::string names;
  for (const auto& r : results) {
    all = all && r.pass;
    worst = std::max(worst, r.max_rel_error);
    names += std::string(to_string(r.term)) + " ";
  }
  return {all && secs < 30.0, fmt("terms %s; max rel err %.2e (< 1e-4); %.2fs (< 30s)", names.c_str(), worst, secs)};
}

Outcome loss_oracles() {
  testing::Gen g(2024);
  double center_worst = 0, align_worst = 0, coherence_worst = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = g.index(1, 8), d = g.index(1, 5);
    const auto f = g.matrix(m, d, 2.0);
    std::vector<int> y(m);
    for (auto& v : y) v = g.bit();
    const auto cp = g.normals(d), cn = g.normals(d);
    double oracle = 0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = f(i, k) - (y[i] ? cp[k] : cn[k]);
        oracle += diff * diff;
      }
    oracle /= static_cast<double>(m);
    center_worst = std::max(center_worst, testing::rel_diff(center_loss<double>(f, y, cp, cn), oracle));

    // Every fourth instance puts all features at one distance from C_pos.
    auto feats = f;
    if (t % 4 == 0) {
      const double radius = g.uniform(0.5, 4.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < d; ++k) feats(i, k) = cp[k];
        feats(i, g.index(0, d - 1)) += radius;
      }
    }
    const double eps = 1e-6;
    const auto w = align_weights<double>(feats, cp, eps);
    std::vector<double> dist(m);
    double max_d = 0;
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += (feats(i, k) - cp[k]) * (feats(i, k) - cp[k]);
      dist[i] = std::sqrt(s);
      max_d = std::max(max_d, dist[i]);
    }
    for (std::size_t i = 0; i < m; ++i)
      align_worst = std::max(align_worst, std::abs(w[i] - (1.0 - dist[i] / (max_d + eps))));

    std::vector<double> a(m), b(m);
    double coh = 0;
    for (std::size_t i = 0; i < m; ++i) {
      a[i] = g.uniform();
      b[i] = g.uniform();
      coh += (a[i] - b[i]) * (a[i] - b[i]);
    }
    coherence_worst = std::max(coherence_worst, std::abs(coherence_loss<double>(a, b) - coh));
  }
  const bool pass = center_worst < 1e-9 && align_worst <= 1e-12 && coherence_worst <= 1e-12;
  return {pass, fmt("center rel %.1e (< 1e-9); align abs %.1e, coherence abs %.1e (<= 1e-12); 100 instances",
                    center_worst, align_worst, coherence_worst)};
}

Outcome auc_oracle() {
  testing::Gen g(77);
  int exact = 0, invariant = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = g.index(2, 50);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::round(g.uniform() * 16.0) / 16.0;
      y[i] = g.bit();
    }
    y[0] = 1;
    y[1] = 0;
    const double auc = roc_auc(s, y);
    exact += auc == testing::pairwise_auc(s, y);
    std::vector<double> moved(n);
    for (std::size_t i = 0; i < n; ++i) moved[i] = std::atan(3.0 * s[i]) * 2.0 + 1.0;
    invariant += roc_auc(moved, y) == auc;
  }
  return {exact == 200 && invariant == 200,
          fmt("pairwise equality %d/200, increasing-transform invariance %d/200", exact, invariant)};
}

Outcome aggregation_identities() {
  testing::Gen g(4);
  int one_hot = 0, trials = 0;
  for (; trials < 500; ++trials) {
    const std::size_t n = g.index(1, 20), d = g.index(1, 8);
    const auto m = g.matrix(n, d, 5.0);
    const std::size_t k = g.index(0, n - 1);
    std::vector<double> w(n, 0.0);
    w[k] = 1.0;
    const auto a = aggregate<double>(w, m);
    bool same = true;
    for (std::size_t c = 0; c < d; ++c) same = same && std::memcmp(&a[c], &m(k, c), sizeof(double)) == 0;
    one_hot += same;
  }
  int pad_ok = 0, pad_trials = 0;
  for (int hier = 0; hier < 2; ++hier) {
    ModelConfig cfg;
    cfg.backbone.in_height = 16;
    cfg.backbone.in_width = 16;
    cfg.backbone.feature_dim = 6;
    cfg.hierarchical = hier == 1;
    const auto model = Model<float>::init(cfg, 9 + hier);
    for (int t = 0; t < 100; ++t, ++pad_trials) {
      const std::size_t n = g.index(2, 12);
      auto v = g.volume(n, 16, 16, 1, 0, g.index(1, n - 1));
      const auto ref = forward_full(model, v);
      for (std::size_t k = 0; k < n; ++k)
        if (v.padded[k])
          for (std::size_t p = 0; p < 256; ++p) v.pixels[k * 256 + p] = static_cast<float>(g.uniform(-50, 50));
      const auto out = forward_full(model, v);
      pad_ok += std::memcmp(&out.p_app, &ref.p_app, sizeof(float)) == 0 &&
                std::memcmp(&out.p_type, &ref.p_type, sizeof(float)) == 0;
    }
  }
  return {one_hot == trials && pad_ok == pad_trials,
          fmt("one-hot bitwise %d/%d; pad fuzz unchanged %d/%d", one_hot, trials, pad_ok, pad_trials)};
}

/// Shared state of the trained-model criteria.
struct LearningRun {
  bool ok = false;
  std::string error;
  double seconds = 0;
  double auc_app = 0, auc_type = 0;
  AttentionStats with_delta, without_delta;
  Dataset data;
  fs::path run_dir;
  Config config;
};

Config learning_config(const fs::path& root) {
  Config c;
  c.set("seed", "7");
  c.set("corpus.n_cases", "200");
  c.set("preprocess.slice_count", "16");
  c.set("preprocess.target_height", "32");
  c.set("preprocess.target_width", "32");
  c.set("model.feature_dim", "16");
  c.set("train.epochs", "30");
  c.set("train.lr", "5e-4");
  c.set("run.quiet", "true");
  c.set("run.corpus", (root / "corpus").string());
  return c;
}

LearningRun learn(const fs::path& root) {
  LearningRun r;
  try {
    std::ostringstream log;
    Config synth = learning_config(root);
    synth.set("run.out", (root / "corpus").string());
    synth.set("run.force", "true");
    cmd_synth(synth, log);

    r.config = learning_config(root);
    r.run_dir = root / "delta";
    r.config.set("run.out", r.run_dir.string());
    const auto t0 = Clock::now();
    const auto trained = cmd_train(r.config, log);
    r.seconds = seconds_since(t0);
    const auto& best = trained.fit.history[static_cast<std::size_t>(trained.fit.best_meta.epoch - 1)];
    r.auc_app = best.val_auc_app;
    r.auc_type = best.val_auc_type;

    r.data = load_dataset(r.config);
    r.with_delta = attention_stats(trained.fit.best, r.data.val);

    Config ablated = learning_config(root);
    ablated.set("loss.delta", "0");
    ablated.set("run.out", (root / "no_delta").string());
    const auto plain = cmd_train(ablated, log);
    r.without_delta = attention_stats(plain.fit.best, r.data.val);
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

Outcome end_to_end(const LearningRun& r) {
  if (!r.ok) return {false, "training failed: " + r.error};
  return {r.auc_app >= 0.95 && r.auc_type >= 0.85 && r.seconds < 600.0,
          fmt("val AUC app %.4f (>= 0.95), type %.4f (>= 0.85); %.1fs (< 600s); 200 volumes, N=16, 32x32, D=16, "
              "30 epochs, lr 5e-4",
              r.auc_app, r.auc_type, r.seconds)};
}

Outcome localization(const LearningRun& r) {
  if (!r.ok) return {false, "training failed: " + r.error};
  const auto& s = r.with_delta;
  return {s.volumes > 0 && s.localization_rate >= 0.9,
          fmt("lesion mean w_app above non-lesion mean in %zu/%zu positive val volumes (%.3f >= 0.9)", s.localized,
              s.volumes, s.localization_rate)};
}

Outcome alignment(const LearningRun& r) {
  if (!r.ok) return {false, "training failed: " + r.error};
  const double a = r.with_delta.mean_spearman, b = r.without_delta.mean_spearman;
  return {a >= 0.7 && a - b >= 0.1,
          fmt("mean Spearman delta=0.1: %.3f (>= 0.7); delta=0: %.3f; gap %.3f (>= 0.1)", a, b, a - b)};
}

Outcome calibration(const LearningRun& r) {
  testing::Gen g(99);
  bool gated = true;
  for (int t = 0; t < 100000; ++t) {
    const Thresholds th{g.uniform(), g.uniform(), 0.9, 0.8};
    const double pa = g.uniform(), pt = g.uniform();
    if (pa < th.tau_app && hierarchical_predict(pa, pt, th) != Diagnosis::normal) gated = false;
  }
  if (!r.ok) return {false, "training failed: " + r.error};
  try {
    std::ostringstream log;
    const auto th = cmd_calibrate(r.config, log);
    const auto model = load_checkpoint(r.run_dir / "checkpoint.bin").model;
    const auto report = evaluate_corpus(model, r.data.val, th);
    const double sa = report.appendicitis.confusion.sensitivity.value_or(0.0);
    const double st = report.type.confusion.sensitivity.value_or(0.0);
    return {sa >= 0.9 && st >= 0.8 && gated,
            fmt("val sensitivity app %.3f (>= 0.9) at tau %.4f, type %.3f (>= 0.8) at tau %.4f; gating fuzz 1e5 %s",
                sa, th.tau_app, st, th.tau_type, gated ? "clean" : "VIOLATED")};
  } catch (const std::exception& e) {
    return {false, std::string("calibration failed: ") + e.what()};
  }
}

Outcome reproducibility(const fs::path& root) {
  try {
    std::ostringstream log;
    Config base;
    base.set("run.quiet", "true");
    base.set("corpus.n_cases", "60");
    base.set("train.epochs", "3");
    base.set("train.lr", "5e-4");
    base.set("run.corpus", (root / "corpus60").string());
    Config synth = base;
    synth.set("run.out", (root / "corpus60").string());
    synth.set("run.force", "true");
    cmd_synth(synth, log);

    Config a = base, b = base;
    a.set("run.out", (root / "train_a").string());
    b.set("run.out", (root / "train_b").string());
    cmd_train(a, log);
    cmd_train(b, log);
    const bool same = read_text(root / "train_a" / "history.csv") == read_text(root / "train_b" / "history.csv");

    Config ab = base;
    ab.set("train.epochs", "2");
    ab.set("run.out", (root / "ablate").string());
    const auto rows = cmd_ablate(ab, log);
    bool shared = rows.size() == 3;
    for (const auto& row : rows) shared = shared && row.split_hash == rows.front().split_hash;
    const bool table = fs::exists(root / "ablate" / "ablation.csv") && fs::exists(root / "ablate" / "ablation.md");
    return {same && shared && table,
            fmt("history CSVs %s; ablation rows %zu with %s split hash %s", same ? "identical" : "DIFFER", rows.size(),
                shared ? "shared" : "MIXED", rows.empty() ? "-" : rows.front().split_hash.c_str())};
  } catch (const std::exception& e) {
    return {false, std::string("failed: ") + e.what()};
  }
}

}  // namespace

int main() {
  const fs::path root = testing::temp_dir("acceptance");
  int failures = 0;
  auto report = [&](int id, const char* name, const Outcome& o) {
    std::printf("criterion %d %-26s %s  %s\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  };

  report(1, "gradient oracle", gradient_oracle());
  report(2, "loss oracles", loss_oracles());
  report(3, "AUC oracle", auc_oracle());
  report(4, "aggregation identities", aggregation_identities());
  const auto run = learn(root);
  report(5, "end-to-end learning", end_to_end(run));
  report(6, "attention localization", localization(run));
  report(7, "alignment effect", alignment(run));
  report(8, "calibration contract", calibration(run));
  report(9, "reproducibility", reproducibility(root));
  std::printf("%d of 9 criteria passed\n", 9 - failures);
  return failures == 0 ? 0 : 1;
}
