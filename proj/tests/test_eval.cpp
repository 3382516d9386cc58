#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "slicehier/error.hpp"
#include "slicehier/eval.hpp"
#include "support.hpp"

using namespace slicehier;

namespace {

double sens_at(const std::vector<double>& s, const std::vector<int>& y, double tau) {
  double tp = 0, p = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    p += 1;
    if (s[i] >= tau) tp += 1;
  }
  return tp / p;
}

/// Random scores on a coarse grid so ties are common.
void random_instance(testing::Gen& g, std::vector<double>& s, std::vector<int>& y) {
  const std::size_t n = g.index(2, 50);
  s.resize(n);
  y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = std::round(g.uniform() * 20.0) / 20.0;
    y[i] = g.bit();
  }
  y[0] = 1;
  y[1] = 0;
}

}  // namespace

TEST_CASE("auc: separated, all ties and hand example") {
  const std::vector<double> sep{0.1, 0.2, 0.8, 0.9};
  const std::vector<int> y{0, 0, 1, 1};
  CHECK(roc_auc(sep, y) == 1.0);
  const std::vector<double> flat(4, 0.3);
  CHECK(roc_auc(flat, y) == 0.5);
  const std::vector<double> ex{0.1, 0.4, 0.35, 0.8};
  CHECK(roc_auc(ex, y) == 0.75);
}

TEST_CASE("auc: single class is undefined") {
  const std::vector<double> s{0.1, 0.2};
  const std::vector<int> y{1, 1};
  try {
    roc_auc(s, y);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::undefined_metric);
  }
}

TEST_CASE("auc: equals the pairwise statistic and ignores increasing transforms") {
  testing::Gen g(200);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> s;
    std::vector<int> y;
    random_instance(g, s, y);
    const double auc = roc_auc(s, y);
    CHECK(auc == testing::pairwise_auc(s, y));
    std::vector<double> moved(s.size());
    const double a = g.uniform(0.5, 3.0), b = g.uniform(-1, 1);
    for (std::size_t i = 0; i < s.size(); ++i) moved[i] = std::exp(a * s[i]) + b;
    CHECK(roc_auc(moved, y) == auc);
  }
}

TEST_CASE("auc: agrees with the trapezoidal ROC area") {
  testing::Gen g(201);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s;
    std::vector<int> y;
    random_instance(g, s, y);
    const auto pts = roc_curve(s, y);
    double area = 0;
    for (std::size_t i = 1; i < pts.size(); ++i)
      area += (pts[i].fpr - pts[i - 1].fpr) * 0.5 * (pts[i].tpr + pts[i - 1].tpr);
    CHECK(area == doctest::Approx(roc_auc(s, y)).epsilon(1e-12));
    CHECK(pts.back().fpr == 1.0);
    CHECK(pts.back().tpr == 1.0);
  }
}

TEST_CASE("confusion: extremes and hand example") {
  const std::vector<double> s{0.9, 0.7, 0.3, 0.6, 0.2};
  const std::vector<int> y{1, 1, 1, 0, 0};
  const auto all = confusion_at(s, y, 0.0);
  CHECK(*all.sensitivity == 1.0);
  CHECK(*all.specificity == 0.0);
  const auto none = confusion_at(s, y, 0.95);
  CHECK(*none.sensitivity == 0.0);
  CHECK(*none.specificity == 1.0);
  const auto c = confusion_at(s, y, 0.65);
  CHECK(c.tp == 2);
  CHECK(c.fn == 1);
  CHECK(c.tn == 2);
  CHECK(c.fp == 0);
  CHECK(*c.sensitivity == doctest::Approx(2.0 / 3.0));
  CHECK(*c.specificity == 1.0);
  CHECK(*c.accuracy == doctest::Approx(0.8));

  const std::vector<double> only_pos{0.4};
  const std::vector<int> pos{1};
  const auto u = confusion_at(only_pos, pos, 0.5);
  CHECK(u.sensitivity.has_value());
  CHECK_FALSE(u.specificity.has_value());
}

TEST_CASE("calibrate: enumeration examples") {
  const std::vector<double> s{0.9, 0.7, 0.3, 0.6, 0.2};
  const std::vector<int> y{1, 1, 1, 0, 0};
  const double t90 = calibrate_threshold(s, y, 0.9);
  CHECK(t90 == 0.3);
  CHECK(*confusion_at(s, y, t90).specificity == 0.5);
  const double t66 = calibrate_threshold(s, y, 0.66);
  CHECK(t66 == 0.7);
  CHECK(*confusion_at(s, y, t66).specificity == 1.0);
  const double t0 = calibrate_threshold(s, y, 0.0);
  CHECK(t0 > 0.9);
  CHECK(*confusion_at(s, y, t0).sensitivity == 0.0);
  CHECK(*confusion_at(s, y, t0).specificity == 1.0);
  const std::vector<int> none{0, 0, 0, 0, 0};
  CHECK_THROWS_AS(calibrate_threshold(s, none, 0.9), Error);
}

TEST_CASE("calibrate: largest candidate meeting the sensitivity floor") {
  testing::Gen g(202);
  for (int t = 0; t < 300; ++t) {
    std::vector<double> s;
    std::vector<int> y;
    random_instance(g, s, y);
    const double target = g.uniform();
    const double tau = calibrate_threshold(s, y, target);
    CHECK(sens_at(s, y, tau) >= target);
    for (double cand : s)
      if (cand > tau) CHECK(sens_at(s, y, cand) < target);
    CHECK(calibrate_threshold(s, y, target) == tau);
  }
}

TEST_CASE("hierarchical predict: gating examples") {
  const Thresholds t{0.5, 0.6, 0.9, 0.8};
  CHECK(hierarchical_predict(0.95, 0.9, t) == Diagnosis::complicated);
  CHECK(hierarchical_predict(0.2, 0.99, t) == Diagnosis::normal);
  CHECK(hierarchical_predict(0.8, 0.3, t) == Diagnosis::simple);
  CHECK(hierarchical_predict(0.5, 0.6, t) == Diagnosis::complicated);
}

TEST_CASE("hierarchical predict: complicated only behind a positive first level") {
  testing::Gen g(203);
  for (int t = 0; t < 100000; ++t) {
    const Thresholds th{g.uniform(), g.uniform(), 0.9, 0.8};
    const double pa = g.uniform(), pt = g.uniform();
    const auto d = hierarchical_predict(pa, pt, th);
    if (pa < th.tau_app) REQUIRE(d == Diagnosis::normal);
    if (d == Diagnosis::complicated) REQUIRE(pa >= th.tau_app);
  }
}

TEST_CASE("evaluate: bookkeeping and constant scores") {
  ScoredCases s;
  for (int i = 0; i < 10; ++i) {
    s.case_id.push_back("c" + std::to_string(i));
    s.p_app.push_back(0.5);
    s.p_type.push_back(0.5);
    s.y_app.push_back(i < 6);
    s.y_type.push_back(i < 2);
  }
  const auto r = evaluate_scores(s, Thresholds{});
  CHECK(r.total == 10);
  CHECK(r.appendicitis.n == 10);
  CHECK(r.type.n == 6);
  CHECK(*r.appendicitis.auc == 0.5);
  CHECK(*r.type.auc == 0.5);
  const auto j = report_to_json(r);
  CHECK(j.find("\"appendicitis\"") != std::string::npos);
  CHECK(j.find("\"type\"") != std::string::npos);

  for (auto& y : s.y_type) y = 0;
  const auto u = evaluate_scores(s, Thresholds{});
  CHECK_FALSE(u.type.auc.has_value());
  CHECK_FALSE(u.type.auc_error.empty());
}

TEST_CASE("evaluate: thresholds calibrated on the same set meet their targets") {
  testing::Gen g(204);
  for (int t = 0; t < 100; ++t) {
    ScoredCases s;
    const std::size_t n = g.index(6, 40);
    for (std::size_t i = 0; i < n; ++i) {
      s.case_id.push_back("c");
      const int ya = i < 2 ? 1 : g.bit();
      const int yt = ya && (i == 0 || g.bit());
      s.y_app.push_back(i == 2 ? 0 : ya);
      s.y_type.push_back(i == 2 ? 0 : (i == 1 ? 0 : yt));
      s.p_app.push_back(g.uniform());
      s.p_type.push_back(g.uniform());
    }
    Thresholds th;
    th.tau_app = calibrate_threshold(s.p_app, s.y_app, 0.9);
    std::vector<double> ts;
    std::vector<int> tl;
    type_population(s, th, TypePopulation::gt_positive, ts, tl);
    th.tau_type = calibrate_threshold(ts, tl, 0.8);
    const auto r = evaluate_scores(s, th);
    CHECK(*r.appendicitis.confusion.sensitivity >= 0.9);
    CHECK(*r.type.confusion.sensitivity >= 0.8);
  }
}

TEST_CASE("thresholds: json round trip and corrupt input") {
  const Thresholds t{0.125, 0.75, 0.9, 0.8};
  const auto back = thresholds_from_json(thresholds_to_json(t));
  CHECK(back.tau_app == t.tau_app);
  CHECK(back.tau_type == t.tau_type);
  CHECK(back.target_sens_app == 0.9);
  CHECK(back.target_sens_type == 0.8);
  CHECK_THROWS_AS(thresholds_from_json("{\"tau_app\": 1"), Error);
}

TEST_CASE("spearman: perfect, reversed, constant and tied inputs") {
  const std::vector<double> a{1, 2, 3, 4}, b{10, 20, 30, 40}, r{4, 3, 2, 1}, c{5, 5, 5, 5};
  CHECK(spearman(a, b) == doctest::Approx(1.0));
  CHECK(spearman(a, r) == doctest::Approx(-1.0));
  CHECK(spearman(a, c) == 0.0);
  const std::vector<double> x{1, 2, 2, 3}, y{1, 3, 2, 4};
  // Midranks x = (1, 2.5, 2.5, 4), y = (1, 3, 2, 4): Pearson of the ranks.
  CHECK(spearman(x, y) == doctest::Approx(0.9486833).epsilon(1e-6));
}
