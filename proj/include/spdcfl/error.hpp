#pragma once

#include <stdexcept>
#include <string>

namespace spdcfl {

/// Base of every error raised by the library. `kind()` is a stable
/// lowercase token used by the CLI for machine-parsable diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define SPDCFL_DEFINE_ERROR(Name, token)                                   \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(token, what) {}         \
  };

SPDCFL_DEFINE_ERROR(ShapeError, "shape")
SPDCFL_DEFINE_ERROR(ParameterError, "parameter")
SPDCFL_DEFINE_ERROR(InputError, "input")
SPDCFL_DEFINE_ERROR(ProtocolError, "protocol")
SPDCFL_DEFINE_ERROR(NumericError, "numeric")
SPDCFL_DEFINE_ERROR(InvariantError, "invariant")
SPDCFL_DEFINE_ERROR(UndefinedMetricError, "undefined-metric")
SPDCFL_DEFINE_ERROR(FormatError, "format")

#undef SPDCFL_DEFINE_ERROR

}  // namespace spdcfl
