#ifndef SLICEHIER_MODEL_HPP
#define SLICEHIER_MODEL_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "slicehier/data.hpp"

namespace slicehier {

template <class T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    std::size_t n = shape.empty() ? 0 : 1;
    for (auto d : shape) n *= d;
    data.assign(n, T(0));
  }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
};

/// Row-major dense matrix; rows are slices.
template <class T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}
  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

/// Sharpness r of the log-sum-exp spatial pooling (1/r) log mean exp(r a).
inline constexpr double kPoolSharpness = 16.0;

/// Slice backbone: input mapped to [-1,1], conv3x3 + tanh, 2x average pool,
/// conv3x3 + tanh, log-sum-exp spatial pooling, linear projection to
/// `feature_dim`.

struct BackboneConfig {
  std::size_t in_height = 32;
  std::size_t in_width = 32;
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t feature_dim = 32;

  void validate() const;
};

struct ModelConfig {
  BackboneConfig backbone;
  /// false selects the flat "base" variant: no type attention, the type
  /// classifier reads the appendicitis aggregate directly.
  bool hierarchical = true;
};

/// Every trainable tensor of the model, visited in a fixed order that is
/// also the checkpoint order. Empty tensors (the type attention head of
/// the flat variant) are skipped by visit().
template <class T>
struct Parameters {
  Tensor<T> conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b;
  Tensor<T> att_app_w, att_app_b, att_type_w, att_type_b;
  Tensor<T> cls_app_w, cls_app_b, cls_type_w, cls_type_b, cls_2d_w, cls_2d_b;
  Tensor<T> center_pos, center_neg;

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  Parameters zeros_like() const {
    Parameters out = *this;
    out.visit([](const std::string&, Tensor<T>& t) { std::fill(t.data.begin(), t.data.end(), T(0)); });
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    auto one = [&](const char* name, auto& t) {
      if (!t.empty()) f(std::string(name), t);
    };
    one("backbone.conv1.weight", self.conv1_w);
    one("backbone.conv1.bias", self.conv1_b);
    one("backbone.conv2.weight", self.conv2_w);
    one("backbone.conv2.bias", self.conv2_b);
    one("backbone.proj.weight", self.proj_w);
    one("backbone.proj.bias", self.proj_b);
    one("attention.app.weight", self.att_app_w);
    one("attention.app.bias", self.att_app_b);
    one("attention.type.weight", self.att_type_w);
    one("attention.type.bias", self.att_type_b);
    one("classifier.app.weight", self.cls_app_w);
    one("classifier.app.bias", self.cls_app_b);
    one("classifier.type.weight", self.cls_type_w);
    one("classifier.type.bias", self.cls_type_b);
    one("classifier.aux2d.weight", self.cls_2d_w);
    one("classifier.aux2d.bias", self.cls_2d_b);
    one("centers.positive", self.center_pos);
    one("centers.negative", self.center_neg);
  }
};

template <class T>
struct Model {
  ModelConfig config;
  Parameters<T> params;

  /// Seeded random initialisation; centers start as small random vectors.
  static Model init(const ModelConfig& config, std::uint64_t seed);

  std::size_t feature_dim() const { return config.backbone.feature_dim; }

  template <class U>
  Model<U> cast() const;
};

/// Intermediate activations of one slice, kept for the backward pass.
template <class T>
struct BackboneCache {
  std::vector<T> act1;    // C1 x H x W after tanh
  std::vector<T> pool1;   // C1 x H/2 x W/2
  std::vector<T> act2;    // C2 x H/2 x W/2 after tanh
  std::vector<T> pooled;  // C2, log-sum-exp pool of the second activation map
};

/// Feature of one slice. `cache` may be null when no backward pass follows.
template <class T>
std::vector<T> backbone_forward(const Model<T>& m, std::span<const float> pixels, BackboneCache<T>* cache);

/// Accumulates parameter gradients for one slice given dL/dfeature.
template <class T>
void backbone_backward(const Model<T>& m, std::span<const float> pixels, const BackboneCache<T>& cache,
                       std::span<const T> d_feature, Parameters<T>& grads);

/// Row i is the feature of slice i; slices is n x H x W row-major.
template <class T>
Matrix<T> extract_features(const Model<T>& m, std::span<const float> slices, std::size_t n);

/// w_i = sigmoid(weight . F_i + bias), per slice, no cross-slice normalisation.
template <class T>
std::vector<T> attention_scores(std::span<const T> weight, T bias, const Matrix<T>& features);

/// sum_i w_i F_i (no division by the weight sum).
template <class T>
std::vector<T> aggregate(std::span<const T> weights, const Matrix<T>& features);

/// Row i = (global, F_i), global part first.
template <class T>
Matrix<T> concat_type_features(std::span<const T> global, const Matrix<T>& features);

template <class T>
T sigmoid(T x);

template <class T>
struct ForwardTrace {
  Matrix<T> features;         // N x D
  std::vector<T> w_app;       // N, zero on padded slices
  std::vector<T> agg_app;     // D
  Matrix<T> type_features;    // N x 2D (hierarchical only)
  std::vector<T> w_type;      // N (hierarchical only)
  std::vector<T> agg_type;    // 2D (hierarchical only)
  T logit_app = 0, logit_type = 0;
  T p_app = 0, p_type = 0;
  std::vector<std::uint8_t> padded;
  std::vector<BackboneCache<T>> caches;  // empty unless requested
};

template <class T>
ForwardTrace<T> forward_full(const Model<T>& m, const PreparedVolume& v, bool keep_caches = false);

/// Gradients arriving at the outputs of forward_full.
template <class T>
struct TraceGradient {
  T d_logit_app = 0;
  T d_logit_type = 0;
  std::vector<T> d_w_app;  // empty or N
};

template <class T>
void backward_full(const Model<T>& m, const PreparedVolume& v, const ForwardTrace<T>& trace,
                   const TraceGradient<T>& upstream, Parameters<T>& grads);

template <class T>
struct Prediction2D {
  T logit = 0;
  T probability = 0;
  std::vector<T> feature;
  BackboneCache<T> cache;
};

template <class T>
Prediction2D<T> predict_2d(const Model<T>& m, const Slice2D& s, bool keep_cache = false);

/// d_feature is the gradient reaching the slice feature from other terms
/// (the center loss); d_logit is the gradient at the auxiliary logit.
template <class T>
void backward_2d(const Model<T>& m, const Slice2D& s, const Prediction2D<T>& pred, T d_logit,
                 std::span<const T> d_feature, Parameters<T>& grads);

struct CheckpointMeta {
  int epoch = -1;
  double val_auc = 0.0;
};

inline constexpr char kCheckpointMagic[8] = {'S', 'L', 'H', 'I', 'E', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& m, const CheckpointMeta& meta = {});

struct LoadedCheckpoint {
  Model<float> model;
  CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace slicehier

#endif  // SLICEHIER_MODEL_HPP
