#include "slicehier/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include "slicehier/error.hpp"

namespace slicehier {

namespace {

struct Dims {
  std::size_t h, w, h2, w2, h4, w4, c1, c2, d;
};

Dims dims_of(const BackboneConfig& b) {
  return {b.in_height, b.in_width, b.in_height / 2, b.in_width / 2, b.in_height / 4, b.in_width / 4,
          b.conv1_channels, b.conv2_channels, b.feature_dim};
}

template <class T, class U>
void conv3x3_forward(const U* in, std::size_t cin, std::size_t h, std::size_t w, const T* weight, const T* bias,
                     std::size_t cout, T* out) {
  const std::size_t plane = h * w;
  for (std::size_t oc = 0; oc < cout; ++oc) {
    T* o = out + oc * plane;
    std::fill(o, o + plane, bias[oc]);
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const U* src = in + ic * plane;
      for (int ky = 0; ky < 3; ++ky) {
        const long dy = ky - 1;
        const std::size_t y_lo = dy < 0 ? 1 : 0, y_hi = dy > 0 ? h - 1 : h;
        for (int kx = 0; kx < 3; ++kx) {
          const long dx = kx - 1;
          const T k = weight[((oc * cin + ic) * 3 + ky) * 3 + kx];
          const std::size_t x_lo = dx < 0 ? 1 : 0, x_hi = dx > 0 ? w - 1 : w;
          for (std::size_t y = y_lo; y < y_hi; ++y) {
            T* orow = o + y * w;
            const U* irow = src + (y + dy) * w + dx;
            for (std::size_t x = x_lo; x < x_hi; ++x) orow[x] += k * static_cast<T>(irow[x]);
          }
        }
      }
    }
  }
}

/// d_in may be null (first layer).
template <class T, class U>
void conv3x3_backward(const U* in, std::size_t cin, std::size_t h, std::size_t w, const T* weight, std::size_t cout,
                      const T* dz, T* d_weight, T* d_bias, T* d_in) {
  const std::size_t plane = h * w;
  for (std::size_t oc = 0; oc < cout; ++oc) {
    const T* g = dz + oc * plane;
    T sum = 0;
    for (std::size_t i = 0; i < plane; ++i) sum += g[i];
    d_bias[oc] += sum;
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const U* src = in + ic * plane;
      for (int ky = 0; ky < 3; ++ky) {
        const long dy = ky - 1;
        const std::size_t y_lo = dy < 0 ? 1 : 0, y_hi = dy > 0 ? h - 1 : h;
        for (int kx = 0; kx < 3; ++kx) {
          const long dx = kx - 1;
          const std::size_t widx = ((oc * cin + ic) * 3 + ky) * 3 + kx;
          const T k = weight[widx];
          const std::size_t x_lo = dx < 0 ? 1 : 0, x_hi = dx > 0 ? w - 1 : w;
          T acc = 0;
          for (std::size_t y = y_lo; y < y_hi; ++y) {
            const T* grow = g + y * w;
            const U* irow = src + (y + dy) * w + dx;
            for (std::size_t x = x_lo; x < x_hi; ++x) acc += grow[x] * static_cast<T>(irow[x]);
            if (d_in != nullptr) {
              T* drow = d_in + ic * plane + (y + dy) * w + dx;
              for (std::size_t x = x_lo; x < x_hi; ++x) drow[x] += k * grow[x];
            }
          }
          d_weight[widx] += acc;
        }
      }
    }
  }
}

template <class T>
void avgpool2_forward(const T* in, std::size_t c, std::size_t h, std::size_t w, T* out) {
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* src = in + ch * h * w;
    T* dst = out + ch * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const T* p = src + 2 * y * w + 2 * x;
        dst[y * ow + x] = (p[0] + p[1] + p[w] + p[w + 1]) * T(0.25);
      }
    }
  }
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <class T>
void check_width(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw Error(Errc::shape_mismatch,
                std::string(what) + ": width " + std::to_string(got) + " != expected " + std::to_string(want));
  }
}

}  // namespace

void BackboneConfig::validate() const {
  if (in_height < 4 || in_width < 4) throw Error(Errc::invalid_argument, "backbone input must be at least 4x4");
  if (conv1_channels == 0 || conv2_channels == 0 || feature_dim == 0) {
    throw Error(Errc::invalid_argument, "backbone channel counts and feature_dim must be positive");
  }
}

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Model<T> Model<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.backbone.validate();
  const Dims dm = dims_of(config.backbone);
  Model m;
  m.config = config;
  std::mt19937_64 rng(seed ^ 0x6d6f64656cULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Tensor<T>& t, std::vector<std::size_t> shape, double stddev) {
    t = Tensor<T>(std::move(shape));
    for (auto& x : t.data) x = static_cast<T>(stddev * normal(rng));
  };
  auto zeros = [](Tensor<T>& t, std::vector<std::size_t> shape) { t = Tensor<T>(std::move(shape)); };

  const std::size_t d = dm.d;
  auto& p = m.params;
  fill(p.conv1_w, {dm.c1, 1, 3, 3}, std::sqrt(1.0 / 9.0));
  zeros(p.conv1_b, {dm.c1});
  fill(p.conv2_w, {dm.c2, dm.c1, 3, 3}, std::sqrt(1.0 / (9.0 * static_cast<double>(dm.c1))));
  zeros(p.conv2_b, {dm.c2});
  fill(p.proj_w, {d, dm.c2}, std::sqrt(1.0 / static_cast<double>(dm.c2)));
  zeros(p.proj_b, {d});
  fill(p.att_app_w, {d}, 0.1 / std::sqrt(static_cast<double>(d)));
  zeros(p.att_app_b, {1});
  const std::size_t type_in = config.hierarchical ? 2 * d : d;
  if (config.hierarchical) {
    fill(p.att_type_w, {2 * d}, 0.1 / std::sqrt(static_cast<double>(2 * d)));
    zeros(p.att_type_b, {1});
  }
  fill(p.cls_app_w, {d}, 1.0 / std::sqrt(static_cast<double>(d)));
  zeros(p.cls_app_b, {1});
  fill(p.cls_type_w, {type_in}, 1.0 / std::sqrt(static_cast<double>(type_in)));
  zeros(p.cls_type_b, {1});
  fill(p.cls_2d_w, {d}, 1.0 / std::sqrt(static_cast<double>(d)));
  zeros(p.cls_2d_b, {1});
  fill(p.center_pos, {d}, 0.1);
  fill(p.center_neg, {d}, 0.1);
  return m;
}

template <class T>
template <class U>
Model<U> Model<T>::cast() const {
  Model<U> out;
  out.config = config;
  auto convert = [](const Tensor<T>& src, Tensor<U>& dst) {
    dst.shape = src.shape;
    dst.data.assign(src.data.begin(), src.data.end());
  };
  const auto& s = params;
  auto& d = out.params;
  convert(s.conv1_w, d.conv1_w);
  convert(s.conv1_b, d.conv1_b);
  convert(s.conv2_w, d.conv2_w);
  convert(s.conv2_b, d.conv2_b);
  convert(s.proj_w, d.proj_w);
  convert(s.proj_b, d.proj_b);
  convert(s.att_app_w, d.att_app_w);
  convert(s.att_app_b, d.att_app_b);
  convert(s.att_type_w, d.att_type_w);
  convert(s.att_type_b, d.att_type_b);
  convert(s.cls_app_w, d.cls_app_w);
  convert(s.cls_app_b, d.cls_app_b);
  convert(s.cls_type_w, d.cls_type_w);
  convert(s.cls_type_b, d.cls_type_b);
  convert(s.cls_2d_w, d.cls_2d_w);
  convert(s.cls_2d_b, d.cls_2d_b);
  convert(s.center_pos, d.center_pos);
  convert(s.center_neg, d.center_neg);
  return out;
}

namespace {

/// Maps windowed [0,1] intensities to [-1,1].
std::vector<float> backbone_input(std::span<const float> pixels) {
  std::vector<float> out(pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2.0f * pixels[i] - 1.0f;
  return out;
}

}  // namespace

template <class T>
std::vector<T> backbone_forward(const Model<T>& m, std::span<const float> pixels, BackboneCache<T>* cache) {
  const Dims dm = dims_of(m.config.backbone);
  if (pixels.size() != dm.h * dm.w) {
    throw Error(Errc::shape_mismatch, "backbone expects " + std::to_string(dm.h) + "x" + std::to_string(dm.w) +
                                          " slices, got " + std::to_string(pixels.size()) + " pixels");
  }
  const auto& p = m.params;
  BackboneCache<T> local;
  BackboneCache<T>& c = cache != nullptr ? *cache : local;
  c.act1.assign(dm.c1 * dm.h * dm.w, T(0));
  const auto input = backbone_input(pixels);
  conv3x3_forward(input.data(), 1, dm.h, dm.w, p.conv1_w.data.data(), p.conv1_b.data.data(), dm.c1, c.act1.data());
  for (auto& x : c.act1) x = std::tanh(x);
  c.pool1.assign(dm.c1 * dm.h2 * dm.w2, T(0));
  avgpool2_forward(c.act1.data(), dm.c1, dm.h, dm.w, c.pool1.data());
  c.act2.assign(dm.c2 * dm.h2 * dm.w2, T(0));
  conv3x3_forward(c.pool1.data(), dm.c1, dm.h2, dm.w2, p.conv2_w.data.data(), p.conv2_b.data.data(), dm.c2,
                  c.act2.data());
  for (auto& x : c.act2) x = std::tanh(x);

  // Log-sum-exp pooling over the region the second 2x pool would cover.
  c.pooled.assign(dm.c2, T(0));
  const T r = static_cast<T>(kPoolSharpness);
  const T count = static_cast<T>(4 * dm.h4 * dm.w4);
  for (std::size_t ch = 0; ch < dm.c2; ++ch) {
    const T* a = c.act2.data() + ch * dm.h2 * dm.w2;
    T top = a[0];
    for (std::size_t y = 0; y < 2 * dm.h4; ++y) {
      for (std::size_t x = 0; x < 2 * dm.w4; ++x) top = std::max(top, a[y * dm.w2 + x]);
    }
    T s = 0;
    for (std::size_t y = 0; y < 2 * dm.h4; ++y) {
      for (std::size_t x = 0; x < 2 * dm.w4; ++x) s += std::exp(r * (a[y * dm.w2 + x] - top));
    }
    c.pooled[ch] = top + std::log(s / count) / r;
  }

  std::vector<T> feature(dm.d);
  for (std::size_t k = 0; k < dm.d; ++k) {
    feature[k] = p.proj_b[k] + dot<T>({p.proj_w.data.data() + k * dm.c2, dm.c2}, c.pooled);
  }
  return feature;
}

template <class T>
void backbone_backward(const Model<T>& m, std::span<const float> pixels, const BackboneCache<T>& c,
                       std::span<const T> d_feature, Parameters<T>& grads) {
  const Dims dm = dims_of(m.config.backbone);
  const auto& p = m.params;
  std::vector<T> d_pooled(dm.c2, T(0));
  for (std::size_t k = 0; k < dm.d; ++k) {
    const T g = d_feature[k];
    grads.proj_b[k] += g;
    if (g == T(0)) continue;
    T* gw = grads.proj_w.data.data() + k * dm.c2;
    const T* w = p.proj_w.data.data() + k * dm.c2;
    for (std::size_t ch = 0; ch < dm.c2; ++ch) {
      gw[ch] += g * c.pooled[ch];
      d_pooled[ch] += g * w[ch];
    }
  }

  const T r = static_cast<T>(kPoolSharpness);
  const T scale = T(1) / static_cast<T>(4 * dm.h4 * dm.w4);
  std::vector<T> dz2(dm.c2 * dm.h2 * dm.w2, T(0));
  for (std::size_t ch = 0; ch < dm.c2; ++ch) {
    const T g = d_pooled[ch] * scale;
    const T* a = c.act2.data() + ch * dm.h2 * dm.w2;
    T* dz = dz2.data() + ch * dm.h2 * dm.w2;
    for (std::size_t y = 0; y < 2 * dm.h4; ++y) {
      for (std::size_t x = 0; x < 2 * dm.w4; ++x) {
        const T v = a[y * dm.w2 + x];
        dz[y * dm.w2 + x] = g * std::exp(r * (v - c.pooled[ch])) * (T(1) - v * v);
      }
    }
  }

  std::vector<T> d_pool1(dm.c1 * dm.h2 * dm.w2, T(0));
  conv3x3_backward(c.pool1.data(), dm.c1, dm.h2, dm.w2, p.conv2_w.data.data(), dm.c2, dz2.data(),
                   grads.conv2_w.data.data(), grads.conv2_b.data.data(), d_pool1.data());

  std::vector<T> dz1(dm.c1 * dm.h * dm.w, T(0));
  for (std::size_t ch = 0; ch < dm.c1; ++ch) {
    const T* dp = d_pool1.data() + ch * dm.h2 * dm.w2;
    const T* a = c.act1.data() + ch * dm.h * dm.w;
    T* dz = dz1.data() + ch * dm.h * dm.w;
    for (std::size_t y = 0; y < 2 * dm.h2; ++y) {
      for (std::size_t x = 0; x < 2 * dm.w2; ++x) {
        const T v = a[y * dm.w + x];
        dz[y * dm.w + x] = dp[(y / 2) * dm.w2 + x / 2] * T(0.25) * (T(1) - v * v);
      }
    }
  }
  const auto input = backbone_input(pixels);
  conv3x3_backward<T, float>(input.data(), 1, dm.h, dm.w, p.conv1_w.data.data(), dm.c1, dz1.data(),
                             grads.conv1_w.data.data(), grads.conv1_b.data.data(), nullptr);
}

template <class T>
Matrix<T> extract_features(const Model<T>& m, std::span<const float> slices, std::size_t n) {
  const std::size_t plane = m.config.backbone.in_height * m.config.backbone.in_width;
  if (slices.size() != n * plane) {
    throw Error(Errc::shape_mismatch, "extract_features: stack of " + std::to_string(slices.size()) +
                                          " values is not " + std::to_string(n) + " slices of the backbone size");
  }
  Matrix<T> out(n, m.feature_dim());
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = backbone_forward<T>(m, slices.subspan(i * plane, plane), nullptr);
    std::copy(f.begin(), f.end(), out.row(i).begin());
  }
  return out;
}

template <class T>
std::vector<T> attention_scores(std::span<const T> weight, T bias, const Matrix<T>& features) {
  check_width<T>(features.cols, weight.size(), "attention_scores");
  std::vector<T> w(features.rows);
  for (std::size_t i = 0; i < features.rows; ++i) w[i] = sigmoid(dot<T>(weight, features.row(i)) + bias);
  return w;
}

template <class T>
std::vector<T> aggregate(std::span<const T> weights, const Matrix<T>& features) {
  if (weights.size() != features.rows) {
    throw Error(Errc::shape_mismatch, "aggregate: " + std::to_string(weights.size()) + " weights for " +
                                          std::to_string(features.rows) + " slices");
  }
  std::vector<T> out(features.cols, T(0));
  for (std::size_t i = 0; i < features.rows; ++i) {
    const T w = weights[i];
    if (w == T(0)) continue;
    const auto row = features.row(i);
    for (std::size_t k = 0; k < features.cols; ++k) out[k] += w * row[k];
  }
  return out;
}

template <class T>
Matrix<T> concat_type_features(std::span<const T> global, const Matrix<T>& features) {
  check_width<T>(features.cols, global.size(), "concat_type_features");
  const std::size_t d = features.cols;
  Matrix<T> out(features.rows, 2 * d);
  for (std::size_t i = 0; i < features.rows; ++i) {
    auto row = out.row(i);
    std::copy(global.begin(), global.end(), row.begin());
    const auto local = features.row(i);
    std::copy(local.begin(), local.end(), row.begin() + static_cast<long>(d));
  }
  return out;
}

template <class T>
ForwardTrace<T> forward_full(const Model<T>& m, const PreparedVolume& v, bool keep_caches) {
  const auto& b = m.config.backbone;
  if (v.height != b.in_height || v.width != b.in_width) {
    throw Error(Errc::shape_mismatch, "forward_full: volume " + v.case_id + " slices are " +
                                          std::to_string(v.height) + "x" + std::to_string(v.width) +
                                          ", backbone expects " + std::to_string(b.in_height) + "x" +
                                          std::to_string(b.in_width));
  }
  const auto& p = m.params;
  const std::size_t n = v.slices, d = m.feature_dim();
  ForwardTrace<T> t;
  t.padded = v.padded;
  t.features = Matrix<T>(n, d);
  if (keep_caches) t.caches.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (v.padded[i]) continue;
    const auto f = backbone_forward(m, v.slice(i), keep_caches ? &t.caches[i] : nullptr);
    std::copy(f.begin(), f.end(), t.features.row(i).begin());
  }

  t.w_app = attention_scores<T>(p.att_app_w.data, p.att_app_b[0], t.features);
  for (std::size_t i = 0; i < n; ++i) {
    if (v.padded[i]) t.w_app[i] = T(0);
  }
  t.agg_app = aggregate<T>(t.w_app, t.features);
  t.logit_app = dot<T>(p.cls_app_w.data, t.agg_app) + p.cls_app_b[0];
  t.p_app = sigmoid(t.logit_app);

  if (m.config.hierarchical) {
    t.type_features = concat_type_features<T>(t.agg_app, t.features);
    t.w_type = attention_scores<T>(p.att_type_w.data, p.att_type_b[0], t.type_features);
    for (std::size_t i = 0; i < n; ++i) {
      if (v.padded[i]) t.w_type[i] = T(0);
    }
    t.agg_type = aggregate<T>(t.w_type, t.type_features);
    t.logit_type = dot<T>(p.cls_type_w.data, t.agg_type) + p.cls_type_b[0];
  } else {
    t.logit_type = dot<T>(p.cls_type_w.data, t.agg_app) + p.cls_type_b[0];
  }
  t.p_type = sigmoid(t.logit_type);
  return t;
}

template <class T>
void backward_full(const Model<T>& m, const PreparedVolume& v, const ForwardTrace<T>& t,
                   const TraceGradient<T>& up, Parameters<T>& grads) {
  const std::size_t n = v.slices, d = m.feature_dim();
  if (t.caches.size() != n) throw Error(Errc::invalid_argument, "backward_full needs a trace with caches");
  const auto& p = m.params;

  std::vector<T> d_agg(d, T(0));
  for (std::size_t k = 0; k < d; ++k) {
    grads.cls_app_w[k] += up.d_logit_app * t.agg_app[k];
    d_agg[k] = up.d_logit_app * p.cls_app_w[k];
  }
  grads.cls_app_b[0] += up.d_logit_app;

  Matrix<T> d_features(n, d);
  if (m.config.hierarchical) {
    const std::size_t d2 = 2 * d;
    std::vector<T> d_agg_type(d2);
    for (std::size_t k = 0; k < d2; ++k) {
      grads.cls_type_w[k] += up.d_logit_type * t.agg_type[k];
      d_agg_type[k] = up.d_logit_type * p.cls_type_w[k];
    }
    grads.cls_type_b[0] += up.d_logit_type;
    std::vector<T> d_row(d2);
    for (std::size_t i = 0; i < n; ++i) {
      if (t.padded[i]) continue;
      const auto row = t.type_features.row(i);
      const T wt = t.w_type[i];
      const T d_score = dot<T>(d_agg_type, row) * wt * (T(1) - wt);
      grads.att_type_b[0] += d_score;
      for (std::size_t k = 0; k < d2; ++k) {
        grads.att_type_w[k] += d_score * row[k];
        d_row[k] = wt * d_agg_type[k] + d_score * p.att_type_w[k];
      }
      for (std::size_t k = 0; k < d; ++k) {
        d_agg[k] += d_row[k];
        d_features(i, k) += d_row[d + k];
      }
    }
  } else {
    for (std::size_t k = 0; k < d; ++k) {
      grads.cls_type_w[k] += up.d_logit_type * t.agg_app[k];
      d_agg[k] += up.d_logit_type * p.cls_type_w[k];
    }
    grads.cls_type_b[0] += up.d_logit_type;
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (t.padded[i]) continue;
    const auto row = t.features.row(i);
    const T w = t.w_app[i];
    T d_w = dot<T>(d_agg, row);
    if (!up.d_w_app.empty()) d_w += up.d_w_app[i];
    const T d_score = d_w * w * (T(1) - w);
    grads.att_app_b[0] += d_score;
    for (std::size_t k = 0; k < d; ++k) {
      grads.att_app_w[k] += d_score * row[k];
      d_features(i, k) += w * d_agg[k] + d_score * p.att_app_w[k];
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (t.padded[i]) continue;
    backbone_backward<T>(m, v.slice(i), t.caches[i], d_features.row(i), grads);
  }
}

template <class T>
Prediction2D<T> predict_2d(const Model<T>& m, const Slice2D& s, bool keep_cache) {
  const auto& b = m.config.backbone;
  if (s.height != b.in_height || s.width != b.in_width) {
    throw Error(Errc::shape_mismatch, "predict_2d: slice is " + std::to_string(s.height) + "x" +
                                          std::to_string(s.width) + ", backbone expects " +
                                          std::to_string(b.in_height) + "x" + std::to_string(b.in_width));
  }
  Prediction2D<T> out;
  out.feature = backbone_forward(m, s.pixels, keep_cache ? &out.cache : nullptr);
  out.logit = dot<T>(m.params.cls_2d_w.data, out.feature) + m.params.cls_2d_b[0];
  out.probability = sigmoid(out.logit);
  return out;
}

template <class T>
void backward_2d(const Model<T>& m, const Slice2D& s, const Prediction2D<T>& pred, T d_logit,
                 std::span<const T> d_feature, Parameters<T>& grads) {
  const std::size_t d = m.feature_dim();
  if (pred.cache.act1.empty()) throw Error(Errc::invalid_argument, "backward_2d needs a cached prediction");
  std::vector<T> d_f(d);
  for (std::size_t k = 0; k < d; ++k) {
    grads.cls_2d_w[k] += d_logit * pred.feature[k];
    d_f[k] = d_logit * m.params.cls_2d_w[k] + (d_feature.empty() ? T(0) : d_feature[k]);
  }
  grads.cls_2d_b[0] += d_logit;
  backbone_backward<T>(m, s.pixels, pred.cache, d_f, grads);
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

class Reader {
public:
  Reader(const std::string& buf, std::string path) : buf_(buf), path_(std::move(path)) {}

  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int b = 0; b < bytes; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + b])) << (8 * b);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw Error(Errc::corrupt_file, path_ + ": truncated checkpoint");
  }
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& m, const CheckpointMeta& meta) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u32(out, kCheckpointVersion);
  const auto& b = m.config.backbone;
  put_u32(out, static_cast<std::uint32_t>(b.feature_dim));
  put_u32(out, static_cast<std::uint32_t>(b.in_height));
  put_u32(out, static_cast<std::uint32_t>(b.in_width));
  put_u32(out, static_cast<std::uint32_t>(b.conv1_channels));
  put_u32(out, static_cast<std::uint32_t>(b.conv2_channels));
  put_u32(out, m.config.hierarchical ? 1u : 0u);
  put_u32(out, static_cast<std::uint32_t>(static_cast<std::int32_t>(meta.epoch)));
  put_u64(out, std::bit_cast<std::uint64_t>(meta.val_auc));
  std::uint32_t groups = 0;
  m.params.visit([&](const std::string&, const Tensor<T>&) { ++groups; });
  put_u32(out, groups);
  m.params.visit([&](const std::string& name, const Tensor<T>& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto dim : t.shape) put_u32(out, static_cast<std::uint32_t>(dim));
    for (T x : t.data) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  });
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::io, "cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error(Errc::io, "write failed for checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::io, "cannot open checkpoint " + path.string());
  const std::string buf{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  Reader r(buf, path.string());
  if (r.bytes(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw Error(Errc::corrupt_file, path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = r.uint(4);
  if (version != kCheckpointVersion) {
    throw Error(Errc::unsupported_version, path.string() + ": checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  cfg.backbone.feature_dim = r.uint(4);
  cfg.backbone.in_height = r.uint(4);
  cfg.backbone.in_width = r.uint(4);
  cfg.backbone.conv1_channels = r.uint(4);
  cfg.backbone.conv2_channels = r.uint(4);
  cfg.hierarchical = r.uint(4) != 0;
  LoadedCheckpoint out;
  out.meta.epoch = static_cast<std::int32_t>(static_cast<std::uint32_t>(r.uint(4)));
  out.meta.val_auc = std::bit_cast<double>(r.uint(8));
  try {
    cfg.backbone.validate();
  } catch (const Error& e) {
    throw Error(Errc::corrupt_file, path.string() + ": " + e.what());
  }

  // Shapes come from a fresh model of the same config; the file must match them.
  out.model = Model<float>::init(cfg, 0);
  const auto groups = r.uint(4);
  std::uint32_t seen = 0;
  out.model.params.visit([&](const std::string& name, Tensor<float>& t) {
    ++seen;
    const auto len = r.uint(4);
    const std::string got = r.bytes(len);
    if (got != name) throw Error(Errc::corrupt_file, path.string() + ": expected group " + name + ", found " + got);
    const auto rank = r.uint(4);
    std::vector<std::size_t> shape(rank);
    for (auto& dim : shape) dim = r.uint(4);
    if (shape != t.shape) throw Error(Errc::shape_mismatch, path.string() + ": group " + name + " has wrong shape");
    for (auto& x : t.data) x = std::bit_cast<float>(static_cast<std::uint32_t>(r.uint(4)));
  });
  if (seen != groups || !r.done()) throw Error(Errc::corrupt_file, path.string() + ": unexpected group count");
  return out;
}

#define SLICEHIER_INSTANTIATE(T)                                                                                   \
  template T sigmoid<T>(T);                                                                                        \
  template struct Model<T>;                                                                                        \
  template std::vector<T> backbone_forward<T>(const Model<T>&, std::span<const float>, BackboneCache<T>*);         \
  template void backbone_backward<T>(const Model<T>&, std::span<const float>, const BackboneCache<T>&,            \
                                     std::span<const T>, Parameters<T>&);                                          \
  template Matrix<T> extract_features<T>(const Model<T>&, std::span<const float>, std::size_t);                   \
  template std::vector<T> attention_scores<T>(std::span<const T>, T, const Matrix<T>&);                           \
  template std::vector<T> aggregate<T>(std::span<const T>, const Matrix<T>&);                                     \
  template Matrix<T> concat_type_features<T>(std::span<const T>, const Matrix<T>&);                               \
  template ForwardTrace<T> forward_full<T>(const Model<T>&, const PreparedVolume&, bool);                         \
  template void backward_full<T>(const Model<T>&, const PreparedVolume&, const ForwardTrace<T>&,                  \
                                 const TraceGradient<T>&, Parameters<T>&);                                         \
  template Prediction2D<T> predict_2d<T>(const Model<T>&, const Slice2D&, bool);                                  \
  template void backward_2d<T>(const Model<T>&, const Slice2D&, const Prediction2D<T>&, T, std::span<const T>,    \
                               Parameters<T>&);                                                                    \
  template void save_checkpoint<T>(const std::filesystem::path&, const Model<T>&, const CheckpointMeta&);

SLICEHIER_INSTANTIATE(float)
SLICEHIER_INSTANTIATE(double)
#undef SLICEHIER_INSTANTIATE

template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;

}  // namespace slicehier
