#pragma once

#include <Eigen/Core>

#include <bit>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace tensel {

static_assert(std::endian::native == std::endian::little,
              "tensel assumes a little-endian host");

/// Raised on tensor shape mismatches; maps to CLI exit code 1.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised on invalid configuration values; maps to CLI exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised on file/serialization failures; maps to CLI exit code 2.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised on numerical failures (NaN loss, failed gradient check,
/// nondeterminism); maps to CLI exit code 3.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Logical shape of a rank-4 tensor laid out as (batch, channel, height, width).
struct Dims {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Dims&) const = default;
  bool same_spatial(const Dims& o) const { return h == o.h && w == o.w; }

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

/// Dense rank-4 tensor over a flat row-major buffer.
///
/// Flat index of (n,c,h,w) is ((n*C + c)*H + h)*W + w. Dims are fixed at
/// construction; the buffer is an Eigen array so elementwise expressions
/// compose without copies.
template <typename Scalar>
class Tensor {
 public:
  using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Dims d, Scalar fill = Scalar(0))
      : dims_(d), data_(Buffer::Constant(d.numel(), fill)) {
    require(d.n > 0 && d.c > 0 && d.h > 0 && d.w > 0,
            "tensor dims must be positive, got " + d.str());
  }

  static Tensor zeros(Dims d) { return Tensor(d, Scalar(0)); }
  static Tensor full(Dims d, Scalar v) { return Tensor(d, v); }

  const Dims& dims() const { return dims_; }
  std::int64_t size() const { return data_.size(); }

  std::int64_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::int64_t>(n) * dims_.c + c) * dims_.h + h) *
               dims_.w + w;
  }

  Scalar& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  const Scalar& at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }

  Scalar& operator[](std::int64_t i) { return data_[i]; }
  const Scalar& operator[](std::int64_t i) const { return data_[i]; }

  Buffer& array() { return data_; }
  const Buffer& array() const { return data_; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  /// Scalar value of a (1,1,1,1) tensor.
  Scalar item() const {
    require(size() == 1, "item() on non-scalar tensor " + dims_.str());
    return data_[0];
  }

  bool all_finite() const { return data_.isFinite().all(); }

  void set_zero() { data_.setZero(); }
  void fill(Scalar v) { data_.setConstant(v); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(dims_);
    out.array() = data_.template cast<Other>();
    return out;
  }

 private:
  Dims dims_{};
  Buffer data_;
};

using Tensor64 = Tensor<double>;
using Tensor32 = Tensor<float>;

}  // namespace tensel
