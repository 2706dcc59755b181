#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace store3d {

// Error codes map to CLI exit codes: config=2, data=3, check=4.
enum class ErrorKind { Config, Data, Check };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& what)
      : std::runtime_error(what), kind_(kind), code_(std::move(code)) {}
  ErrorKind kind() const { return kind_; }
  const std::string& code() const { return code_; }

 private:
  ErrorKind kind_;
  std::string code_;
};

#define STORE3D_ERROR_TYPE(Name, Kind)                       \
  class Name : public Error {                                \
   public:                                                   \
    explicit Name(const std::string& what)                   \
        : Error(ErrorKind::Kind, #Name, #Name ": " + what) {} \
  }

STORE3D_ERROR_TYPE(DegenerateInput, Data);
STORE3D_ERROR_TYPE(InsufficientTrack, Data);
STORE3D_ERROR_TYPE(EmptyDistribution, Data);
STORE3D_ERROR_TYPE(NonFiniteCost, Data);
STORE3D_ERROR_TYPE(ShapeMismatch, Data);
STORE3D_ERROR_TYPE(KTooLarge, Data);
STORE3D_ERROR_TYPE(EmptyTopK, Data);
STORE3D_ERROR_TYPE(IndexCollision, Data);
STORE3D_ERROR_TYPE(MissingLabels, Data);
STORE3D_ERROR_TYPE(NoGroundTruth, Data);
STORE3D_ERROR_TYPE(DomainError, Data);
STORE3D_ERROR_TYPE(ConfigError, Config);
STORE3D_ERROR_TYPE(CheckFailure, Check);

#undef STORE3D_ERROR_TYPE

constexpr double kPi = 3.14159265358979323846;

// Normalizes an angle to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

inline bool is_finite(double v) { return std::isfinite(v); }

}  // namespace store3d
