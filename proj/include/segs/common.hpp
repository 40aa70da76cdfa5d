#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace segs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;  // quaternions are stored (w, x, y, z)
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

// Error hierarchy. CLI maps UsageError/ConfigError to exit code 2, the rest to 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data violates a documented precondition (non-finite values, bad shapes).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Inconsistent configuration or dimensions.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. a backward pass without a matching forward cache.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. `what()` carries the line or byte offset.
class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

inline bool all_finite(const Vec3& v) { return v.allFinite(); }

// splitmix64 finalizer; used to derive independent, stateless RNG streams
// from (seed, tag, counter) so that runs can resume without saving RNG state.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t counter = 0) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1) + 0xbf58476d1ce4e5b9ULL * (counter + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace segs
