#ifndef SLICEHIER_ERROR_HPP
#define SLICEHIER_ERROR_HPP

#include <stdexcept>
#include <string>

namespace slicehier {

enum class Errc {
  invalid_argument,
  shape_mismatch,
  corrupt_file,
  unsupported_version,
  undefined_metric,
  numeric,
  io,
};

/// Single exception type for the library; the code tells callers (and the
/// CLI exit-code mapping) what went wrong.
class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

private:
  Errc code_;
};

inline const char* to_string(Errc code) {
  switch (code) {
    case Errc::invalid_argument: return "invalid argument";
    case Errc::shape_mismatch: return "shape mismatch";
    case Errc::corrupt_file: return "corrupt file";
    case Errc::unsupported_version: return "unsupported version";
    case Errc::undefined_metric: return "undefined metric";
    case Errc::numeric: return "numeric error";
    case Errc::io: return "i/o error";
  }
  return "unknown";
}

}  // namespace slicehier

#endif  // SLICEHIER_ERROR_HPP
