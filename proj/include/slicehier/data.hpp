#ifndef SLICEHIER_DATA_HPP
#define SLICEHIER_DATA_HPP

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace slicehier {

/// One scan: a stack of raw slices in HU-like units plus case-level labels.
/// Voxels are stored slice-major (slice, row, column).
struct Volume {
  std::string case_id;
  std::size_t slices = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> voxels;
  int y_app = 0;
  int y_type = 0;
  std::vector<int> lesion_slices;

  std::size_t slice_size() const { return height * width; }
  std::span<const float> slice(std::size_t k) const {
    return {voxels.data() + k * slice_size(), slice_size()};
  }

  /// Throws Errc::invalid_argument if shape, finiteness or label
  /// invariants are violated.
  void validate() const;
};

bool operator==(const Volume& a, const Volume& b);

/// Three-way class used for stratification and reporting.
enum class CaseClass { normal = 0, simple = 1, complicated = 2 };

CaseClass case_class(int y_app, int y_type);
const char* to_string(CaseClass c);

/// A windowed 2D slice with a slice-level label, used by the auxiliary task.
struct Slice2D {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  int y_slice = 0;
};

enum class CenterPolicy { volume_midpoint, fixed_index };

struct PreprocessConfig {
  double window_center = 40.0;
  double window_width = 400.0;
  std::size_t slice_count = 16;
  CenterPolicy center_policy = CenterPolicy::volume_midpoint;
  long center_index = 0;
  std::size_t target_height = 32;
  std::size_t target_width = 32;
  float pad_value = 0.0f;

  void validate() const;
};

struct CorpusSpec {
  std::size_t n_cases = 60;
  std::array<double, 3> class_mix{0.5, 0.3, 0.2};  // normal, simple, complicated
  std::size_t raw_slices = 20;
  std::size_t raw_height = 32;
  std::size_t raw_width = 32;
  double background_hu = 40.0;
  double anatomy_hu = 35.0;  // amplitude of the z-constant background pattern
  double lesion_hu = 150.0;
  std::array<double, 2> simple_radius{3.0, 4.5};
  std::array<double, 2> complicated_radius{5.0, 7.0};
  std::array<int, 2> simple_blobs{1, 1};
  std::array<int, 2> complicated_blobs{2, 2};
  std::array<double, 2> half_depth{1.5, 3.0};  // z semi-axis in slices
  double noise_sigma = 20.0;
  std::size_t aux_cases = 20;
  std::uint64_t rng_seed = 7;

  void validate() const;
};

struct Corpus {
  std::vector<Volume> volumes;
  /// Source volumes of the auxiliary slice set; never part of the 3D splits.
  std::vector<Volume> aux_volumes;
  std::vector<Slice2D> aux_slices;
};

/// Generates the 3D corpus and the slice-labelled auxiliary set. Pure in
/// the spec; equal specs give bitwise-equal output.
Corpus generate_corpus(const CorpusSpec& spec, const PreprocessConfig& pre = {});

/// Auxiliary slices from source volumes: every slice, windowed and resized,
/// labelled 1 iff its index is a lesion slice.
std::vector<Slice2D> make_aux_slices(std::span<const Volume> sources, const PreprocessConfig& pre);

/// clamp((x - (center - width/2)) / width, 0, 1) elementwise.
std::vector<float> apply_window(std::span<const float> voxels, double center, double width);
float window_value(float x, double center, double width);

struct SliceSelection {
  std::size_t slices = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> voxels;
  std::vector<std::uint8_t> padded;
  /// Source index of each output slice, -1 for padding.
  std::vector<long> source_index;
};

long center_index(const Volume& v, const PreprocessConfig& cfg);
SliceSelection select_slices(const Volume& v, const PreprocessConfig& cfg);

/// Bilinear resize with corner-aligned sampling. Input is row-major h x w.
std::vector<float> resize_slice(std::span<const float> in, std::size_t h, std::size_t w,
                                std::size_t target_h, std::size_t target_w);

/// A case ready for the model: N windowed, resized slices and its pad mask.
struct PreparedVolume {
  std::string case_id;
  std::size_t slices = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  std::vector<std::uint8_t> padded;
  std::vector<std::uint8_t> lesion;  // ground-truth lesion flag per output slice
  int y_app = 0;
  int y_type = 0;

  std::span<const float> slice(std::size_t k) const {
    return {pixels.data() + k * height * width, height * width};
  }
};

PreparedVolume preprocess(const Volume& v, const PreprocessConfig& cfg);

struct CaseLabel {
  std::string case_id;
  int y_app = 0;
  int y_type = 0;
};

struct SplitManifest {
  std::array<double, 3> fractions{0.7, 0.15, 0.15};
  std::uint64_t seed = 0;
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

bool operator==(const SplitManifest& a, const SplitManifest& b);

/// Stratified, seeded partition. Split sizes are floor(f * n) for val and
/// test with the remainder in train; each class is spread so every split
/// tracks the corpus class mix within one case.
SplitManifest split_corpus(std::span<const CaseLabel> cases, std::array<double, 3> fractions,
                           std::uint64_t seed);

}  // namespace slicehier

#endif  // SLICEHIER_DATA_HPP
