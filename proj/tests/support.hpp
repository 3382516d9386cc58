#ifndef SLICEHIER_TESTS_SUPPORT_HPP
#define SLICEHIER_TESTS_SUPPORT_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "slicehier/data.hpp"
#include "slicehier/model.hpp"

namespace testing {

/// Seeded generator helpers for hand-rolled property tests.
struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  double normal(double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(rng); }
  std::size_t index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  }
  int bit() { return static_cast<int>(index(0, 1)); }

  std::vector<double> normals(std::size_t n, double sd = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = normal(sd);
    return v;
  }

  slicehier::Matrix<double> matrix(std::size_t rows, std::size_t cols, double sd = 1.0) {
    slicehier::Matrix<double> m(rows, cols);
    for (auto& x : m.data) x = normal(sd);
    return m;
  }

  /// A prepared volume of uniform random pixels; `pad_tail` trailing slices padded.
  slicehier::PreparedVolume volume(std::size_t slices, std::size_t h, std::size_t w, int y_app, int y_type,
                                   std::size_t pad_tail = 0) {
    slicehier::PreparedVolume v;
    v.case_id = "rand";
    v.slices = slices;
    v.height = h;
    v.width = w;
    v.y_app = y_app;
    v.y_type = y_type;
    v.pixels.resize(slices * h * w);
    for (auto& x : v.pixels) x = static_cast<float>(uniform());
    v.padded.assign(slices, 0);
    v.lesion.assign(slices, 0);
    for (std::size_t k = slices - pad_tail; k < slices; ++k) {
      v.padded[k] = 1;
      std::fill(v.pixels.begin() + static_cast<long>(k * h * w), v.pixels.begin() + static_cast<long>((k + 1) * h * w),
                0.0f);
    }
    return v;
  }
};

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("slicehier_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << bytes;
}

/// O(n^2) pairwise AUC: fraction of (positive, negative) pairs ordered
/// correctly, ties worth one half.
inline double pairwise_auc(std::span<const double> s, std::span<const int> y) {
  double wins = 0;
  double pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1;
      if (s[i] > s[j]) wins += 1;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

inline double rel_diff(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / scale;
}

}  // namespace testing

#endif  // SLICEHIER_TESTS_SUPPORT_HPP
