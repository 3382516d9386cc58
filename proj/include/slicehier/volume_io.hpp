#ifndef SLICEHIER_VOLUME_IO_HPP
#define SLICEHIER_VOLUME_IO_HPP

#include <cstdint>
#include <filesystem>
#include <string>

#include "slicehier/data.hpp"

namespace slicehier {

inline constexpr int kVolumeFormatVersion = 1;
inline constexpr int kCorpusFormatVersion = 1;

/// Writes `<dir>/<case_id>.json` (manifest) and `<dir>/<case_id>.bin`
/// (little-endian f32 payload, slice-major). Returns the manifest path.
std::filesystem::path save_volume(const std::filesystem::path& dir, const Volume& v);

/// Loads a volume from its manifest path; the payload is the sibling `.bin`.
/// Errors: Errc::corrupt_file (bad header, truncated payload),
/// Errc::shape_mismatch (payload longer than declared), Errc::unsupported_version.
Volume load_volume(const std::filesystem::path& manifest);

struct CorpusOnDisk {
  CorpusSpec spec;
  std::vector<Volume> volumes;
  std::vector<Volume> aux_volumes;
};

/// Corpus layout: `corpus.json` index, `volumes/`, `aux/`.
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus, const CorpusSpec& spec);
CorpusOnDisk load_corpus(const std::filesystem::path& dir);

std::string format_split(const SplitManifest& m);
SplitManifest parse_split(const std::string& text);
void save_split(const std::filesystem::path& path, const SplitManifest& m);
SplitManifest load_split(const std::filesystem::path& path);

/// FNV-1a 64 of the serialized manifest, printed as 16 hex digits.
std::string split_hash(const SplitManifest& m);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace slicehier

#endif  // SLICEHIER_VOLUME_IO_HPP
