#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "slicehier/error.hpp"
#include "slicehier/losses.hpp"
#include "support.hpp"

using namespace slicehier;

namespace {

/// Two-loop oracle: per slice, per dimension accumulation.
double center_oracle(const Matrix<double>& f, const std::vector<int>& y, const std::vector<double>& cp,
                     const std::vector<double>& cn) {
  double sum = 0;
  for (std::size_t i = 0; i < f.rows; ++i) {
    const auto& c = y[i] ? cp : cn;
    for (std::size_t k = 0; k < f.cols; ++k) {
      const double diff = f(i, k) - c[k];
      sum += diff * diff;
    }
  }
  return sum / static_cast<double>(f.rows);
}

std::vector<double> align_oracle(const Matrix<double>& f, const std::vector<double>& cp, double eps) {
  std::vector<double> d(f.rows);
  double max_d = 0;
  for (std::size_t i = 0; i < f.rows; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < f.cols; ++k) s += (f(i, k) - cp[k]) * (f(i, k) - cp[k]);
    d[i] = std::sqrt(s);
    max_d = std::max(max_d, d[i]);
  }
  std::vector<double> w(f.rows);
  for (std::size_t i = 0; i < f.rows; ++i) w[i] = 1.0 - d[i] / (max_d + eps);
  return w;
}

}  // namespace

TEST_CASE("bce: midpoint, limits and direct evaluation") {
  CHECK(bce(0.5, 0) == doctest::Approx(std::log(2.0)));
  CHECK(bce(0.5, 1) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(bce(1.0, 1) < 1e-6);
  CHECK(bce(0.0, 0) < 1e-6);
  CHECK(bce(0.9, 0) == doctest::Approx(2.302585).epsilon(1e-6));
  CHECK(std::isfinite(bce(0.0, 1)));
  CHECK(bce(0.0, 1) == doctest::Approx(-std::log(kProbabilityClamp)));
  CHECK(bce_logit_grad(0.8, 1) == doctest::Approx(-0.2));
  CHECK(bce_logit_grad(0.8, 0) == doctest::Approx(0.8));
}

TEST_CASE("center loss: fixed point and hand examples") {
  Matrix<double> f(1, 2);
  f(0, 0) = 1;
  const std::vector<int> y1{1};
  const std::vector<double> zero{0, 0};
  CHECK(center_loss<double>(f, y1, zero, zero) == 1.0);

  Matrix<double> g(2, 2);
  g(0, 0) = 1;
  g(1, 1) = 2;
  const std::vector<int> y2{1, 0};
  CHECK(center_loss<double>(g, y2, zero, zero) == 2.5);

  const std::vector<double> cp{1, 0}, cn{0, 2};
  CHECK(center_loss<double>(g, y2, cp, cn) == 0.0);

  const std::vector<double> wide{0, 0, 0};
  CHECK_THROWS_AS(center_loss<double>(g, y2, wide, zero), Error);
}

TEST_CASE("center loss: matches the two-loop oracle on random instances") {
  testing::Gen g(100);
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = g.index(1, 8), d = g.index(1, 5);
    const auto f = g.matrix(m, d, 2.0);
    std::vector<int> y(m);
    for (auto& v : y) v = g.bit();
    const auto cp = g.normals(d), cn = g.normals(d);
    const double got = center_loss<double>(f, y, cp, cn);
    CHECK(testing::rel_diff(got, center_oracle(f, y, cp, cn)) < 1e-9);
    CHECK(got >= 0.0);
  }
}

TEST_CASE("center loss: gradient matches central differences") {
  testing::Gen g(101);
  for (int t = 0; t < 20; ++t) {
    const std::size_t m = g.index(1, 5), d = g.index(1, 4);
    auto f = g.matrix(m, d);
    std::vector<int> y(m);
    for (auto& v : y) v = g.bit();
    auto cp = g.normals(d), cn = g.normals(d);
    Matrix<double> df(m, d);
    std::vector<double> dp(d, 0.0), dn(d, 0.0);
    center_loss_grad<double>(f, y, cp, cn, 1.0, df, dp, dn);
    const double h = 1e-6;
    auto numeric = [&](double& x) {
      const double keep = x;
      x = keep + h;
      const double up = center_oracle(f, y, cp, cn);
      x = keep - h;
      const double down = center_oracle(f, y, cp, cn);
      x = keep;
      return (up - down) / (2 * h);
    };
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < d; ++k) CHECK(df(i, k) == doctest::Approx(numeric(f(i, k))).epsilon(1e-6));
    for (std::size_t k = 0; k < d; ++k) {
      CHECK(dp[k] == doctest::Approx(numeric(cp[k])).epsilon(1e-6));
      CHECK(dn[k] == doctest::Approx(numeric(cn[k])).epsilon(1e-6));
    }
  }
}

TEST_CASE("align weights: hand examples") {
  Matrix<double> same(3, 2);
  const std::vector<double> zero{0, 0};
  for (double w : align_weights<double>(same, zero, 1e-6)) CHECK(w == 1.0);

  Matrix<double> f(3, 2);
  f(1, 0) = 3;
  f(2, 1) = 4;
  const auto w = align_weights<double>(f, zero, 1e-12);
  CHECK(w[0] == doctest::Approx(1.0));
  CHECK(w[1] == doctest::Approx(0.25));
  CHECK(w[2] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("align weights: equal distances collapse to eps / (k + eps)") {
  testing::Gen g(102);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = g.index(1, 10), d = g.index(2, 5);
    const double k = g.uniform(0.5, 5.0);
    const auto cp = g.normals(d);
    Matrix<double> f(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      // A point at distance k along one of the +/- axes.
      const std::size_t axis = g.index(0, d - 1);
      for (std::size_t c = 0; c < d; ++c) f(i, c) = cp[c];
      f(i, axis) += g.bit() ? k : -k;
    }
    const double eps = 1e-6;
    const auto w = align_weights<double>(f, cp, eps);
    const auto oracle = align_oracle(f, cp, eps);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(w[i] - oracle[i]) <= 1e-12);
      CHECK(w[i] == doctest::Approx(eps / (k + eps)).epsilon(1e-6));
    }
  }
}

TEST_CASE("align weights: match the direct formula and stay in (0,1]") {
  testing::Gen g(103);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = g.index(1, 12), d = g.index(1, 6);
    const auto f = g.matrix(n, d, 3.0);
    const auto cp = g.normals(d);
    const auto w = align_weights<double>(f, cp, 1e-6);
    const auto oracle = align_oracle(f, cp, 1e-6);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(w[i] - oracle[i]) <= 1e-12);
      CHECK(w[i] > 0.0);
      CHECK(w[i] <= 1.0);
    }
  }
}

TEST_CASE("align weights: skipped rows get zero and leave the max alone") {
  Matrix<double> f(3, 1);
  f(0, 0) = 1;
  f(1, 0) = 2;
  f(2, 0) = 100;
  const std::vector<double> c{0};
  const std::vector<std::uint8_t> skip{0, 0, 1};
  const auto w = align_weights<double>(f, c, 0.0, skip);
  CHECK(w[0] == doctest::Approx(0.5));
  CHECK(w[1] == doctest::Approx(0.0));
  CHECK(w[2] == 0.0);
}

TEST_CASE("coherence: hand examples and the sum convention") {
  const std::vector<double> a{1, 0}, b{0, 1};
  CHECK(coherence_loss<double>(a, a) == 0.0);
  CHECK(coherence_loss<double>(a, b) == 2.0);
  const std::vector<double> x(4, 0.75), z(4, 0.25);
  CHECK(coherence_loss<double>(x, z) == 1.0);
  const std::vector<double> shorter{1};
  CHECK_THROWS_AS(coherence_loss<double>(a, shorter), Error);
}

TEST_CASE("coherence: matches the direct formula and its gradient") {
  testing::Gen g(104);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = g.index(1, 20);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = g.uniform();
      b[i] = g.uniform();
    }
    double oracle = 0;
    for (std::size_t i = 0; i < n; ++i) oracle += (a[i] - b[i]) * (a[i] - b[i]);
    CHECK(std::abs(coherence_loss<double>(a, b) - oracle) <= 1e-12);
    const auto grad = coherence_loss_grad<double>(a, b);
    for (std::size_t i = 0; i < n; ++i) CHECK(grad[i] == 2.0 * (a[i] - b[i]));
  }
}

TEST_CASE("total: linearity, coefficient zeroing and rejection") {
  LossWeights ones{1, 1, 1, 1, 1};
  CHECK(total_loss(1, 2, 3, 4, 5, ones).total == 15.0);
  LossWeights hier{1, 1, 0, 0, 0};
  const auto b = total_loss(0.4, 0.3, 7, 8, 9, hier);
  CHECK(b.total == doctest::Approx(0.7));
  CHECK(b.l_center == 7.0);
  LossWeights app_only{1, 0, 0, 0, 0};
  CHECK(total_loss(std::log(2.0), 1, 1, 1, 1, app_only).total == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK_THROWS_AS(total_loss(-1, 0, 0, 0, 0, ones), Error);
  CHECK_THROWS_AS(total_loss(std::numeric_limits<double>::quiet_NaN(), 0, 0, 0, 0, ones), Error);
}

TEST_CASE("total: weighted sum holds on random inputs") {
  testing::Gen g(105);
  for (int t = 0; t < 200; ++t) {
    LossWeights w{g.uniform(0, 2), g.uniform(0, 2), g.uniform(0, 2), g.uniform(0, 2), g.uniform(0, 2)};
    const double c[5] = {g.uniform(0, 5), g.uniform(0, 5), g.uniform(0, 5), g.uniform(0, 5), g.uniform(0, 5)};
    const auto b = total_loss(c[0], c[1], c[2], c[3], c[4], w);
    const double expect = w.alpha * c[0] + w.beta * c[1] + w.gamma * c[2] + w.delta * c[3] + w.lambda * c[4];
    CHECK(testing::rel_diff(b.total, expect) < 1e-9);
  }
}
