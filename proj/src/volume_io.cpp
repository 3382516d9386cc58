#include "slicehier/volume_io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "slicehier/error.hpp"

namespace slicehier {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

void put_f32le(std::string& out, float f) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(f);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xffu));
}

float get_f32le(const unsigned char* p) {
  const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(u);
}

json spec_to_json(const CorpusSpec& s) {
  json j;
  j["n_cases"] = s.n_cases;
  j["class_mix"] = s.class_mix;
  j["raw_shape"] = {s.raw_slices, s.raw_height, s.raw_width};
  j["background_hu"] = s.background_hu;
  j["anatomy_hu"] = s.anatomy_hu;
  j["lesion_hu"] = s.lesion_hu;
  j["simple_radius"] = s.simple_radius;
  j["complicated_radius"] = s.complicated_radius;
  j["simple_blobs"] = s.simple_blobs;
  j["complicated_blobs"] = s.complicated_blobs;
  j["half_depth"] = s.half_depth;
  j["noise_sigma"] = s.noise_sigma;
  j["aux_cases"] = s.aux_cases;
  j["rng_seed"] = s.rng_seed;
  return j;
}

CorpusSpec spec_from_json(const json& j) {
  CorpusSpec s;
  s.n_cases = j.at("n_cases").get<std::size_t>();
  s.class_mix = j.at("class_mix").get<std::array<double, 3>>();
  const auto shape = j.at("raw_shape").get<std::array<std::size_t, 3>>();
  s.raw_slices = shape[0];
  s.raw_height = shape[1];
  s.raw_width = shape[2];
  s.background_hu = j.at("background_hu").get<double>();
  s.anatomy_hu = j.at("anatomy_hu").get<double>();
  s.lesion_hu = j.at("lesion_hu").get<double>();
  s.simple_radius = j.at("simple_radius").get<std::array<double, 2>>();
  s.complicated_radius = j.at("complicated_radius").get<std::array<double, 2>>();
  s.simple_blobs = j.at("simple_blobs").get<std::array<int, 2>>();
  s.complicated_blobs = j.at("complicated_blobs").get<std::array<int, 2>>();
  s.half_depth = j.at("half_depth").get<std::array<double, 2>>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.aux_cases = j.at("aux_cases").get<std::size_t>();
  s.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  return s;
}

}  // namespace

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(Errc::io, "write failed for " + path.string());
}

fs::path save_volume(const fs::path& dir, const Volume& v) {
  v.validate();
  json j;
  j["version"] = kVolumeFormatVersion;
  j["case_id"] = v.case_id;
  j["shape"] = {v.slices, v.height, v.width};
  j["dtype"] = "f32le";
  j["y_app"] = v.y_app;
  j["y_type"] = v.y_type;
  j["lesion_slices"] = v.lesion_slices;

  std::string payload;
  payload.reserve(v.voxels.size() * 4);
  for (float f : v.voxels) put_f32le(payload, f);

  const fs::path manifest = dir / (v.case_id + ".json");
  write_text(manifest, j.dump(2) + "\n");
  write_text(dir / (v.case_id + ".bin"), payload);
  return manifest;
}

Volume load_volume(const fs::path& manifest) {
  json j;
  try {
    j = json::parse(read_text(manifest));
  } catch (const json::exception& e) {
    throw Error(Errc::corrupt_file, manifest.string() + ": unparseable manifest (" + e.what() + ")");
  }

  Volume v;
  std::string dtype;
  int version = 0;
  try {
    version = j.at("version").get<int>();
    v.case_id = j.at("case_id").get<std::string>();
    const auto shape = j.at("shape").get<std::array<std::size_t, 3>>();
    v.slices = shape[0];
    v.height = shape[1];
    v.width = shape[2];
    dtype = j.at("dtype").get<std::string>();
    v.y_app = j.at("y_app").get<int>();
    v.y_type = j.at("y_type").get<int>();
    v.lesion_slices = j.at("lesion_slices").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw Error(Errc::corrupt_file, manifest.string() + ": malformed header (" + e.what() + ")");
  }
  if (version != kVolumeFormatVersion) {
    throw Error(Errc::unsupported_version, manifest.string() + ": unsupported version " + std::to_string(version));
  }
  if (dtype != "f32le") throw Error(Errc::corrupt_file, manifest.string() + ": unsupported dtype " + dtype);
  if (v.slices == 0 || v.height == 0 || v.width == 0) {
    throw Error(Errc::corrupt_file, manifest.string() + ": empty shape");
  }

  fs::path bin = manifest;
  bin.replace_extension(".bin");
  const std::string payload = read_text(bin);
  const std::size_t expected = v.slices * v.height * v.width * 4;
  if (payload.size() < expected) {
    throw Error(Errc::corrupt_file, bin.string() + ": truncated payload (" + std::to_string(payload.size()) +
                                        " of " + std::to_string(expected) + " bytes)");
  }
  if (payload.size() > expected) {
    throw Error(Errc::shape_mismatch, bin.string() + ": payload of " + std::to_string(payload.size()) +
                                          " bytes does not match declared shape (" + std::to_string(expected) +
                                          " bytes)");
  }
  v.voxels.resize(v.slices * v.height * v.width);
  const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = get_f32le(p + 4 * i);
  try {
    v.validate();
  } catch (const Error& e) {
    throw Error(Errc::corrupt_file, manifest.string() + ": " + e.what());
  }
  return v;
}

void save_corpus(const fs::path& dir, const Corpus& corpus, const CorpusSpec& spec) {
  fs::create_directories(dir / "volumes");
  fs::create_directories(dir / "aux");
  json index;
  index["version"] = kCorpusFormatVersion;
  index["spec"] = spec_to_json(spec);
  auto list = [](const fs::path& sub, const std::vector<Volume>& vols, const fs::path& root) {
    json arr = json::array();
    for (const auto& v : vols) {
      save_volume(root / sub, v);
      json e;
      e["case_id"] = v.case_id;
      e["manifest"] = (sub / (v.case_id + ".json")).generic_string();
      e["y_app"] = v.y_app;
      e["y_type"] = v.y_type;
      arr.push_back(e);
    }
    return arr;
  };
  index["cases"] = list("volumes", corpus.volumes, dir);
  index["aux_cases"] = list("aux", corpus.aux_volumes, dir);
  write_text(dir / "corpus.json", index.dump(2) + "\n");
}

CorpusOnDisk load_corpus(const fs::path& dir) {
  const fs::path index_path = dir / "corpus.json";
  if (!fs::exists(index_path)) throw Error(Errc::io, "no corpus at " + dir.string() + " (missing corpus.json)");
  json index;
  try {
    index = json::parse(read_text(index_path));
  } catch (const json::exception& e) {
    throw Error(Errc::corrupt_file, index_path.string() + ": " + e.what());
  }
  CorpusOnDisk out;
  try {
    if (index.at("version").get<int>() != kCorpusFormatVersion) {
      throw Error(Errc::unsupported_version, index_path.string() + ": unsupported corpus version");
    }
    out.spec = spec_from_json(index.at("spec"));
    for (const auto& e : index.at("cases")) {
      out.volumes.push_back(load_volume(dir / e.at("manifest").get<std::string>()));
    }
    for (const auto& e : index.at("aux_cases")) {
      out.aux_volumes.push_back(load_volume(dir / e.at("manifest").get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::corrupt_file, index_path.string() + ": " + e.what());
  }
  return out;
}

std::string format_split(const SplitManifest& m) {
  std::ostringstream os;
  char buf[128];
  os << "# slicehier split manifest v1\n";
  std::snprintf(buf, sizeof buf, "fractions %.17g %.17g %.17g\n", m.fractions[0], m.fractions[1], m.fractions[2]);
  os << buf;
  os << "seed " << m.seed << "\n";
  auto section = [&](const char* name, const std::vector<std::string>& ids) {
    os << "[" << name << "]\n";
    for (const auto& id : ids) os << id << "\n";
  };
  section("train", m.train);
  section("val", m.val);
  section("test", m.test);
  return os.str();
}

SplitManifest parse_split(const std::string& text) {
  SplitManifest m;
  std::istringstream in(text);
  std::string line;
  std::vector<std::string>* current = nullptr;
  bool have_fractions = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (line == "[train]") {
      current = &m.train;
    } else if (line == "[val]") {
      current = &m.val;
    } else if (line == "[test]") {
      current = &m.test;
    } else if (line.rfind("fractions ", 0) == 0) {
      std::istringstream fs_(line.substr(10));
      if (!(fs_ >> m.fractions[0] >> m.fractions[1] >> m.fractions[2])) {
        throw Error(Errc::corrupt_file, "split manifest: bad fractions line");
      }
      have_fractions = true;
    } else if (line.rfind("seed ", 0) == 0) {
      m.seed = std::stoull(line.substr(5));
    } else if (current != nullptr) {
      current->push_back(line);
    } else {
      throw Error(Errc::corrupt_file, "split manifest: unexpected line '" + line + "'");
    }
  }
  if (!have_fractions) throw Error(Errc::corrupt_file, "split manifest: missing fractions");
  return m;
}

void save_split(const fs::path& path, const SplitManifest& m) { write_text(path, format_split(m)); }

SplitManifest load_split(const fs::path& path) { return parse_split(read_text(path)); }

std::string split_hash(const SplitManifest& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : format_split(m)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace slicehier
