#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace flowfit {

constexpr int kNumJoints = 24;
constexpr int kNumShape = 10;
constexpr int kNumCamera = 3;
constexpr int kPoseDim = kNumJoints * 3;
constexpr int kParamDim = kPoseDim + kNumShape + kNumCamera;  // 85

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using Mat3 = Eigen::Matrix<T, 3, 3>;
template <typename T>
using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T>
using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T>
using Points3 = Eigen::Matrix<T, Eigen::Dynamic, 3, Eigen::RowMajor>;
template <typename T>
using Points2 = Eigen::Matrix<T, Eigen::Dynamic, 2, Eigen::RowMajor>;

using Faces = Eigen::Matrix<int32_t, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct ImageSize {
  int height = 64;
  int width = 64;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

// Base class of all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid numeric input; the message names the offending field.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace flowfit
