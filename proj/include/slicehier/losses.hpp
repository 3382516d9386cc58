#ifndef SLICEHIER_LOSSES_HPP
#define SLICEHIER_LOSSES_HPP

#include <span>
#include <vector>

#include "slicehier/model.hpp"

namespace slicehier {

inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr double kAlignEpsilon = 1e-6;

/// Coefficients of the composite objective.
struct LossWeights {
  double alpha = 1.0;   // appendicitis BCE
  double beta = 1.0;    // type BCE
  double gamma = 0.1;   // center loss
  double delta = 0.1;   // coherence loss
  double lambda = 1.0;  // auxiliary 2D BCE

  void validate() const;
};

/// Unweighted components plus the weighted total.
struct LossBreakdown {
  double l_app = 0, l_type = 0, l_center = 0, l_coherence = 0, l_2d = 0, total = 0;
};

/// -[y ln p + (1-y) ln(1-p)], p clamped to [1e-7, 1 - 1e-7].
template <class T>
T bce(T p, int y);

/// p - y: the logit gradient of the unclamped loss, so saturated heads keep
/// a gradient.
template <class T>
T bce_logit_grad(T p, int y);

/// (1/M) sum_i [y_i |F_i - C_pos|^2 + (1 - y_i) |F_i - C_neg|^2].
template <class T>
T center_loss(const Matrix<T>& features, std::span<const int> labels, std::span<const T> c_pos,
              std::span<const T> c_neg);

/// Gradients of center_loss, accumulated (scaled by `scale`) into the
/// output spans; d_features is M x D.
template <class T>
void center_loss_grad(const Matrix<T>& features, std::span<const int> labels, std::span<const T> c_pos,
                      std::span<const T> c_neg, T scale, Matrix<T>& d_features, std::span<T> d_pos,
                      std::span<T> d_neg);

/// w_i = 1 - d_i / (max_j d_j + eps), d_i = |F_i - C_pos|_2. Rows flagged in
/// `skip` (padding) are excluded from the max and get weight 0.
template <class T>
std::vector<T> align_weights(const Matrix<T>& features, std::span<const T> c_pos, T epsilon,
                             std::span<const std::uint8_t> skip = {});

/// sum_i (a_i - b_i)^2 -- a sum over slices, not a mean.
template <class T>
T coherence_loss(std::span<const T> w_app, std::span<const T> w_align);

/// d coherence / d w_app = 2 (w_app - w_align); the target gets no gradient.
template <class T>
std::vector<T> coherence_loss_grad(std::span<const T> w_app, std::span<const T> w_align);

/// Weighted sum of the five components; rejects negative or non-finite parts.
LossBreakdown total_loss(double l_app, double l_type, double l_center, double l_coherence, double l_2d,
                         const LossWeights& w);

}  // namespace slicehier

#endif  // SLICEHIER_LOSSES_HPP
