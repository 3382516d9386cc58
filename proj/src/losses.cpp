#include "slicehier/losses.hpp"

#include <algorithm>
#include <cmath>

#include "slicehier/error.hpp"

namespace slicehier {

void LossWeights::validate() const {
  for (double c : {alpha, beta, gamma, delta, lambda}) {
    if (!(c >= 0.0) || !std::isfinite(c)) {
      throw Error(Errc::invalid_argument, "loss weights must be finite and >= 0");
    }
  }
}

template <class T>
T bce(T p, int y) {
  const T lo = static_cast<T>(kProbabilityClamp);
  const T q = std::clamp(p, lo, T(1) - lo);
  return y == 1 ? -std::log(q) : -std::log(T(1) - q);
}

template <class T>
T bce_logit_grad(T p, int y) {
  return p - static_cast<T>(y);
}

template <class T>
T center_loss(const Matrix<T>& features, std::span<const int> labels, std::span<const T> c_pos,
              std::span<const T> c_neg) {
  if (features.rows == 0) throw Error(Errc::invalid_argument, "center_loss: empty batch");
  if (labels.size() != features.rows) throw Error(Errc::shape_mismatch, "center_loss: label count mismatch");
  if (c_pos.size() != features.cols || c_neg.size() != features.cols) {
    throw Error(Errc::shape_mismatch, "center_loss: center width does not match features");
  }
  T total = 0;
  for (std::size_t i = 0; i < features.rows; ++i) {
    const auto c = labels[i] == 1 ? c_pos : c_neg;
    const auto f = features.row(i);
    T s = 0;
    for (std::size_t k = 0; k < features.cols; ++k) s += (f[k] - c[k]) * (f[k] - c[k]);
    total += s;
  }
  return total / static_cast<T>(features.rows);
}

template <class T>
void center_loss_grad(const Matrix<T>& features, std::span<const int> labels, std::span<const T> c_pos,
                      std::span<const T> c_neg, T scale, Matrix<T>& d_features, std::span<T> d_pos,
                      std::span<T> d_neg) {
  const T factor = T(2) * scale / static_cast<T>(features.rows);
  for (std::size_t i = 0; i < features.rows; ++i) {
    const bool pos = labels[i] == 1;
    const auto c = pos ? c_pos : c_neg;
    auto dc = pos ? d_pos : d_neg;
    const auto f = features.row(i);
    for (std::size_t k = 0; k < features.cols; ++k) {
      const T g = factor * (f[k] - c[k]);
      d_features(i, k) += g;
      dc[k] -= g;
    }
  }
}

template <class T>
std::vector<T> align_weights(const Matrix<T>& features, std::span<const T> c_pos, T epsilon,
                             std::span<const std::uint8_t> skip) {
  if (c_pos.size() != features.cols) throw Error(Errc::shape_mismatch, "align_weights: center width mismatch");
  std::vector<T> dist(features.rows, T(0));
  T max_d = 0;
  for (std::size_t i = 0; i < features.rows; ++i) {
    if (!skip.empty() && skip[i]) continue;
    const auto f = features.row(i);
    T s = 0;
    for (std::size_t k = 0; k < features.cols; ++k) s += (f[k] - c_pos[k]) * (f[k] - c_pos[k]);
    dist[i] = std::sqrt(s);
    max_d = std::max(max_d, dist[i]);
  }
  std::vector<T> w(features.rows, T(0));
  for (std::size_t i = 0; i < features.rows; ++i) {
    if (!skip.empty() && skip[i]) continue;
    w[i] = T(1) - dist[i] / (max_d + epsilon);
  }
  return w;
}

template <class T>
T coherence_loss(std::span<const T> w_app, std::span<const T> w_align) {
  if (w_app.size() != w_align.size()) throw Error(Errc::shape_mismatch, "coherence_loss: length mismatch");
  T s = 0;
  for (std::size_t i = 0; i < w_app.size(); ++i) s += (w_app[i] - w_align[i]) * (w_app[i] - w_align[i]);
  return s;
}

template <class T>
std::vector<T> coherence_loss_grad(std::span<const T> w_app, std::span<const T> w_align) {
  if (w_app.size() != w_align.size()) throw Error(Errc::shape_mismatch, "coherence_loss: length mismatch");
  std::vector<T> g(w_app.size());
  for (std::size_t i = 0; i < w_app.size(); ++i) g[i] = T(2) * (w_app[i] - w_align[i]);
  return g;
}

LossBreakdown total_loss(double l_app, double l_type, double l_center, double l_coherence, double l_2d,
                         const LossWeights& w) {
  w.validate();
  for (double c : {l_app, l_type, l_center, l_coherence, l_2d}) {
    if (!(c >= 0.0) || !std::isfinite(c)) {
      throw Error(Errc::numeric, "total_loss: loss components must be finite and >= 0");
    }
  }
  LossBreakdown b{l_app, l_type, l_center, l_coherence, l_2d, 0.0};
  b.total = w.alpha * l_app + w.beta * l_type + w.gamma * l_center + w.delta * l_coherence + w.lambda * l_2d;
  return b;
}

#define SLICEHIER_INSTANTIATE(T)                                                                                 \
  template T bce<T>(T, int);                                                                                     \
  template T bce_logit_grad<T>(T, int);                                                                          \
  template T center_loss<T>(const Matrix<T>&, std::span<const int>, std::span<const T>, std::span<const T>);    \
  template void center_loss_grad<T>(const Matrix<T>&, std::span<const int>, std::span<const T>,                 \
                                    std::span<const T>, T, Matrix<T>&, std::span<T>, std::span<T>);              \
  template std::vector<T> align_weights<T>(const Matrix<T>&, std::span<const T>, T, std::span<const std::uint8_t>); \
  template T coherence_loss<T>(std::span<const T>, std::span<const T>);                                          \
  template std::vector<T> coherence_loss_grad<T>(std::span<const T>, std::span<const T>);

SLICEHIER_INSTANTIATE(float)
SLICEHIER_INSTANTIATE(double)
#undef SLICEHIER_INSTANTIATE

}  // namespace slicehier
