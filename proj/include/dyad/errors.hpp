#pragma once

#include <stdexcept>
#include <string>

namespace dyad {

/// Base class for every error raised by the library. `code()` is a stable
/// snake_case identifier used by the CLI exit messages and the wire protocol.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define DYAD_DEFINE_ERROR(Name, code_str)                              \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(code_str, what) {} \
  };

DYAD_DEFINE_ERROR(ShapeError, "shape_error")
DYAD_DEFINE_ERROR(ValidationError, "validation_error")
DYAD_DEFINE_ERROR(DegenerateGeometryError, "degenerate_geometry")
DYAD_DEFINE_ERROR(DegenerateFacingError, "degenerate_facing")
DYAD_DEFINE_ERROR(CoincidentPointsError, "coincident_points")
DYAD_DEFINE_ERROR(InvalidMaskError, "invalid_mask")
DYAD_DEFINE_ERROR(FormatError, "format_error")
DYAD_DEFINE_ERROR(VersionError, "version_error")
DYAD_DEFINE_ERROR(TruncationError, "truncated")
DYAD_DEFINE_ERROR(LengthError, "length_mismatch")
DYAD_DEFINE_ERROR(IoError, "io_error")
DYAD_DEFINE_ERROR(ConfigError, "config_error")
DYAD_DEFINE_ERROR(DependencyError, "missing_dependency")
DYAD_DEFINE_ERROR(NumericError, "numeric_error")
DYAD_DEFINE_ERROR(StreamError, "stream_error")

#undef DYAD_DEFINE_ERROR

}  // namespace dyad
