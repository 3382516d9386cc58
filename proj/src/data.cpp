#include "slicehier/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>

#include "slicehier/error.hpp"

namespace slicehier {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::size_t exact_floor(double x) { return static_cast<std::size_t>(std::floor(x + 1e-9)); }

/// Largest-remainder apportionment of total into parts proportional to
/// weights; ties go to the lower index.
std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights) {
  std::vector<std::size_t> out(weights.size());
  std::vector<double> frac(weights.size());
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double ideal = weights[i] * static_cast<double>(total);
    out[i] = exact_floor(ideal);
    frac[i] = ideal - static_cast<double>(out[i]);
    used += out[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; used < total; k = (k + 1) % order.size()) {
    ++out[order[k]];
    ++used;
  }
  return out;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(Errc::invalid_argument, what);
}

struct Blob {
  double cy, cx, cz, ry, rx, rz;
};

Volume synthesize(const CorpusSpec& spec, CaseClass cls, std::string id, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  const std::size_t n = spec.raw_slices, h = spec.raw_height, w = spec.raw_width;
  Volume v;
  v.case_id = std::move(id);
  v.slices = n;
  v.height = h;
  v.width = w;
  v.y_app = cls == CaseClass::normal ? 0 : 1;
  v.y_type = cls == CaseClass::complicated ? 1 : 0;

  // z-constant background: a base level plus a few smooth bumps.
  std::vector<double> plane(h * w, spec.background_hu + uniform(-10.0, 10.0));
  for (int b = 0; b < 3; ++b) {
    const double by = uniform(0.0, static_cast<double>(h - 1));
    const double bx = uniform(0.0, static_cast<double>(w - 1));
    const double sigma = uniform(3.0, 8.0);
    const double amp = uniform(-1.0, 1.0) * spec.anatomy_hu;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - by, dx = static_cast<double>(x) - bx;
        plane[y * w + x] += amp * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      }
    }
  }

  std::vector<Blob> blobs;
  if (cls != CaseClass::normal) {
    const bool complicated = cls == CaseClass::complicated;
    const auto& radius = complicated ? spec.complicated_radius : spec.simple_radius;
    const auto& count = complicated ? spec.complicated_blobs : spec.simple_blobs;
    const int n_blobs = uniform_int(count[0], count[1]);
    const double rz_max = spec.half_depth[1];
    const int z_lo = static_cast<int>(std::ceil(rz_max)) + 1;
    const int z_hi = static_cast<int>(n) - 2 - static_cast<int>(std::ceil(rz_max));
    const int z0 = z_lo <= z_hi ? uniform_int(z_lo, z_hi) : static_cast<int>(n / 2);
    for (int b = 0; b < n_blobs; ++b) {
      Blob blob{};
      const double r = uniform(radius[0], radius[1]);
      blob.ry = r;
      blob.rx = r * uniform(0.85, 1.15);
      blob.rz = uniform(spec.half_depth[0], spec.half_depth[1]);
      const double margin_y = blob.ry + 1.0, margin_x = blob.rx + 1.0;
      blob.cy = uniform(margin_y, static_cast<double>(h - 1) - margin_y);
      blob.cx = uniform(margin_x, static_cast<double>(w - 1) - margin_x);
      // Integer z centres within one slice of each other keep the lesion run contiguous.
      blob.cz = std::clamp(z0 + (b == 0 ? 0 : uniform_int(-1, 1)), 0, static_cast<int>(n) - 1);
      blobs.push_back(blob);
    }
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  v.voxels.resize(n * h * w);
  std::set<int> lesion;
  for (std::size_t z = 0; z < n; ++z) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double value = plane[y * w + x];
        for (const auto& b : blobs) {
          const double dz = (static_cast<double>(z) - b.cz) / b.rz;
          const double dy = (static_cast<double>(y) - b.cy) / b.ry;
          const double dx = (static_cast<double>(x) - b.cx) / b.rx;
          if (dz * dz + dy * dy + dx * dx <= 1.0) {
            value += spec.lesion_hu;
            lesion.insert(static_cast<int>(z));
            break;
          }
        }
        if (spec.noise_sigma > 0.0) value += spec.noise_sigma * noise(rng);
        v.voxels[(z * h + y) * w + x] = static_cast<float>(value);
      }
    }
  }
  v.lesion_slices.assign(lesion.begin(), lesion.end());
  return v;
}

std::vector<Volume> synthesize_set(const CorpusSpec& spec, std::size_t count, const std::string& prefix,
                                   std::uint64_t stream) {
  const auto per_class = apportion(count, spec.class_mix);
  std::vector<CaseClass> classes;
  for (int c = 0; c < 3; ++c) classes.insert(classes.end(), per_class[c], static_cast<CaseClass>(c));
  std::mt19937_64 order_rng(splitmix64(spec.rng_seed ^ stream));
  std::shuffle(classes.begin(), classes.end(), order_rng);

  std::vector<Volume> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "%s_%04zu", prefix.c_str(), i);
    const std::uint64_t seed = splitmix64(splitmix64(spec.rng_seed ^ stream) + i + 1);
    out.push_back(synthesize(spec, classes[i], id, seed));
  }
  return out;
}

}  // namespace

void Volume::validate() const {
  require(slices >= 1 && height >= 1 && width >= 1, "volume " + case_id + ": empty shape");
  if (voxels.size() != slices * height * width) {
    throw Error(Errc::shape_mismatch, "volume " + case_id + ": voxel count does not match shape");
  }
  for (float x : voxels) require(std::isfinite(x), "volume " + case_id + ": non-finite voxel");
  require(y_app == 0 || y_app == 1, "volume " + case_id + ": y_app must be 0 or 1");
  require(y_type == 0 || y_type == 1, "volume " + case_id + ": y_type must be 0 or 1");
  require(y_type == 0 || y_app == 1, "volume " + case_id + ": complicated without appendicitis");
  require(y_app == 1 || lesion_slices.empty(), "volume " + case_id + ": negative case with lesions");
  for (int k : lesion_slices) {
    require(k >= 0 && static_cast<std::size_t>(k) < slices, "volume " + case_id + ": lesion index out of range");
  }
}

bool operator==(const Volume& a, const Volume& b) {
  return a.case_id == b.case_id && a.slices == b.slices && a.height == b.height && a.width == b.width &&
         a.y_app == b.y_app && a.y_type == b.y_type && a.lesion_slices == b.lesion_slices &&
         a.voxels.size() == b.voxels.size() &&
         std::equal(a.voxels.begin(), a.voxels.end(), b.voxels.begin(),
                    [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
}

CaseClass case_class(int y_app, int y_type) {
  if (y_app == 0) return CaseClass::normal;
  return y_type == 1 ? CaseClass::complicated : CaseClass::simple;
}

const char* to_string(CaseClass c) {
  switch (c) {
    case CaseClass::normal: return "normal";
    case CaseClass::simple: return "simple";
    case CaseClass::complicated: return "complicated";
  }
  return "?";
}

void PreprocessConfig::validate() const {
  require(window_width > 0.0, "preprocess.window_width must be > 0");
  require(slice_count >= 1, "preprocess.slice_count must be >= 1");
  require(target_height >= 1 && target_width >= 1, "preprocess target size must be >= 1");
}

void CorpusSpec::validate() const {
  require(n_cases >= 1, "corpus.n_cases must be >= 1");
  double sum = 0.0;
  for (double f : class_mix) {
    require(f >= 0.0 && f <= 1.0, "corpus.class_mix entries must lie in [0,1]");
    sum += f;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "corpus.class_mix must sum to 1");
  require(raw_slices >= 1 && raw_height >= 1 && raw_width >= 1, "corpus raw shape must be positive");
  require(noise_sigma >= 0.0, "corpus.noise_sigma must be >= 0");
  require(simple_radius[0] > 0 && simple_radius[0] <= simple_radius[1], "corpus.simple_radius range invalid");
  require(complicated_radius[0] > 0 && complicated_radius[0] <= complicated_radius[1],
          "corpus.complicated_radius range invalid");
  require(half_depth[0] >= 1.0 && half_depth[0] <= half_depth[1], "corpus.half_depth range invalid (min >= 1)");
  require(simple_blobs[0] >= 1 && simple_blobs[0] <= simple_blobs[1], "corpus.simple_blobs range invalid");
  require(complicated_blobs[0] >= 1 && complicated_blobs[0] <= complicated_blobs[1],
          "corpus.complicated_blobs range invalid");
  // Complicated lesions must dominate simple ones: larger or more numerous.
  require(complicated_radius[0] > simple_radius[1] || complicated_blobs[0] > simple_blobs[1],
          "corpus: complicated lesions must be strictly larger or more numerous than simple ones");
  const double r_max = std::max(simple_radius[1], complicated_radius[1]) * 1.15;
  const double plane = static_cast<double>(std::min(raw_height, raw_width));
  require(2.0 * r_max + 3.0 <= plane, "corpus: blob radius exceeds raw_shape");
  require(2.0 * std::ceil(half_depth[1]) + 3.0 <= static_cast<double>(raw_slices),
          "corpus: blob depth exceeds raw_shape");
}

Corpus generate_corpus(const CorpusSpec& spec, const PreprocessConfig& pre) {
  spec.validate();
  pre.validate();
  Corpus corpus;
  corpus.volumes = synthesize_set(spec, spec.n_cases, "case", 0x3d);
  corpus.aux_volumes = synthesize_set(spec, spec.aux_cases, "aux", 0xa0c5);
  corpus.aux_slices = make_aux_slices(corpus.aux_volumes, pre);
  return corpus;
}

std::vector<Slice2D> make_aux_slices(std::span<const Volume> sources, const PreprocessConfig& pre) {
  pre.validate();
  std::vector<Slice2D> out;
  for (const auto& v : sources) {
    for (std::size_t k = 0; k < v.slices; ++k) {
      Slice2D s;
      s.height = pre.target_height;
      s.width = pre.target_width;
      const auto windowed = apply_window(v.slice(k), pre.window_center, pre.window_width);
      s.pixels = resize_slice(windowed, v.height, v.width, pre.target_height, pre.target_width);
      s.y_slice = std::binary_search(v.lesion_slices.begin(), v.lesion_slices.end(), static_cast<int>(k)) ? 1 : 0;
      out.push_back(std::move(s));
    }
  }
  return out;
}

float window_value(float x, double center, double width) {
  const double lo = center - width / 2.0;
  return static_cast<float>(std::clamp((static_cast<double>(x) - lo) / width, 0.0, 1.0));
}

std::vector<float> apply_window(std::span<const float> voxels, double center, double width) {
  require(width > 0.0, "window width must be > 0");
  std::vector<float> out(voxels.size());
  std::transform(voxels.begin(), voxels.end(), out.begin(), [&](float x) { return window_value(x, center, width); });
  return out;
}

long center_index(const Volume& v, const PreprocessConfig& cfg) {
  return cfg.center_policy == CenterPolicy::volume_midpoint ? static_cast<long>(v.slices / 2) : cfg.center_index;
}

SliceSelection select_slices(const Volume& v, const PreprocessConfig& cfg) {
  require(cfg.slice_count >= 1, "preprocess.slice_count must be >= 1");
  const long n = static_cast<long>(cfg.slice_count);
  const long c = center_index(v, cfg);
  const long first = c - n / 2;

  SliceSelection sel;
  sel.slices = cfg.slice_count;
  sel.height = v.height;
  sel.width = v.width;
  sel.voxels.assign(cfg.slice_count * v.slice_size(), cfg.pad_value);
  sel.padded.assign(cfg.slice_count, 1);
  sel.source_index.assign(cfg.slice_count, -1);
  for (long k = 0; k < n; ++k) {
    const long src = first + k;
    if (src < 0 || src >= static_cast<long>(v.slices)) continue;
    const auto s = v.slice(static_cast<std::size_t>(src));
    std::copy(s.begin(), s.end(), sel.voxels.begin() + k * static_cast<long>(v.slice_size()));
    sel.padded[k] = 0;
    sel.source_index[k] = src;
  }
  return sel;
}

std::vector<float> resize_slice(std::span<const float> in, std::size_t h, std::size_t w, std::size_t target_h,
                                std::size_t target_w) {
  require(h >= 1 && w >= 1 && in.size() == h * w, "resize_slice: empty or inconsistent input");
  require(target_h >= 1 && target_w >= 1, "resize_slice: target size must be >= 1");
  if (h == target_h && w == target_w) return {in.begin(), in.end()};

  auto coord = [](std::size_t i, std::size_t src, std::size_t dst) {
    if (dst == 1) return static_cast<double>(src - 1) / 2.0;
    return static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
  };
  std::vector<float> out(target_h * target_w);
  for (std::size_t y = 0; y < target_h; ++y) {
    const double sy = coord(y, h, target_h);
    const std::size_t y0 = std::min(static_cast<std::size_t>(sy), h - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < target_w; ++x) {
      const double sx = coord(x, w, target_w);
      const std::size_t x0 = std::min(static_cast<std::size_t>(sx), w - 1);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1.0 - fx) * in[y0 * w + x0] + fx * in[y0 * w + x1];
      const double bottom = (1.0 - fx) * in[y1 * w + x0] + fx * in[y1 * w + x1];
      out[y * target_w + x] = static_cast<float>((1.0 - fy) * top + fy * bottom);
    }
  }
  return out;
}

PreparedVolume preprocess(const Volume& v, const PreprocessConfig& cfg) {
  cfg.validate();
  const auto sel = select_slices(v, cfg);
  PreparedVolume p;
  p.case_id = v.case_id;
  p.slices = cfg.slice_count;
  p.height = cfg.target_height;
  p.width = cfg.target_width;
  p.y_app = v.y_app;
  p.y_type = v.y_type;
  p.padded = sel.padded;
  p.lesion.assign(p.slices, 0);
  p.pixels.assign(p.slices * p.height * p.width, cfg.pad_value);
  for (std::size_t k = 0; k < p.slices; ++k) {
    if (sel.padded[k]) continue;
    const long src = sel.source_index[k];
    p.lesion[k] = std::binary_search(v.lesion_slices.begin(), v.lesion_slices.end(), static_cast<int>(src)) ? 1 : 0;
    const auto windowed = apply_window(v.slice(static_cast<std::size_t>(src)), cfg.window_center, cfg.window_width);
    const auto resized = resize_slice(windowed, v.height, v.width, p.height, p.width);
    std::copy(resized.begin(), resized.end(), p.pixels.begin() + static_cast<long>(k * p.height * p.width));
  }
  return p;
}

bool operator==(const SplitManifest& a, const SplitManifest& b) {
  return a.fractions == b.fractions && a.seed == b.seed && a.train == b.train && a.val == b.val && a.test == b.test;
}

SplitManifest split_corpus(std::span<const CaseLabel> cases, std::array<double, 3> fractions, std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    require(f >= 0.0 && f <= 1.0, "split fractions must lie in [0,1]");
    sum += f;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "split fractions must sum to 1");
  require(cases.size() >= 3, "split_corpus: fewer cases than classes");

  std::array<std::vector<std::string>, 3> by_class;
  for (const auto& c : cases) by_class[static_cast<int>(case_class(c.y_app, c.y_type))].push_back(c.case_id);
  std::mt19937_64 rng(splitmix64(seed));
  for (auto& ids : by_class) {
    std::sort(ids.begin(), ids.end());
    std::shuffle(ids.begin(), ids.end(), rng);
  }

  const std::size_t n = cases.size();
  std::array<std::size_t, 3> split_size{};
  split_size[1] = exact_floor(fractions[1] * static_cast<double>(n));
  split_size[2] = exact_floor(fractions[2] * static_cast<double>(n));
  split_size[0] = n - split_size[1] - split_size[2];

  // Controlled rounding of the class x split table n_c n_s / n: floor every
  // cell, then hand out the leftover units so row and column sums are exact.
  std::size_t count[3][3];
  std::size_t rem[3][3];
  std::array<std::size_t, 3> row_left{}, col_left = split_size;
  for (int c = 0; c < 3; ++c) {
    row_left[c] = by_class[c].size();
    for (int s = 0; s < 3; ++s) {
      const std::size_t prod = by_class[c].size() * split_size[s];
      count[c][s] = prod / n;
      rem[c][s] = prod % n;
      row_left[c] -= count[c][s];
      col_left[s] -= count[c][s];
    }
  }
  std::array<int, 3> rows{0, 1, 2};
  std::stable_sort(rows.begin(), rows.end(), [&](int a, int b) { return row_left[a] > row_left[b]; });
  for (int c : rows) {
    std::array<int, 3> cols{0, 1, 2};
    std::stable_sort(cols.begin(), cols.end(), [&](int a, int b) {
      if (col_left[a] != col_left[b]) return col_left[a] > col_left[b];
      return rem[c][a] > rem[c][b];
    });
    for (std::size_t k = 0; k < row_left[c]; ++k) {
      ++count[c][cols[k]];
      --col_left[cols[k]];
    }
  }

  SplitManifest m;
  m.fractions = fractions;
  m.seed = seed;
  std::vector<std::string>* outputs[3] = {&m.train, &m.val, &m.test};
  for (int c = 0; c < 3; ++c) {
    auto it = by_class[c].begin();
    for (int s = 0; s < 3; ++s) {
      outputs[s]->insert(outputs[s]->end(), it, it + static_cast<long>(count[c][s]));
      it += static_cast<long>(count[c][s]);
    }
  }
  std::sort(m.train.begin(), m.train.end());
  std::sort(m.val.begin(), m.val.end());
  std::sort(m.test.begin(), m.test.end());
  return m;
}

}  // namespace slicehier
