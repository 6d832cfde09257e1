#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "dsconv/errors.hpp"
#include "dsconv/half.hpp"

namespace dsconv {

enum class DType : std::uint8_t { f32, f64, f16 };

std::string_view to_string(DType d);
DType parse_dtype(std::string_view s);

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else {
    static_assert(std::is_same_v<T, Half>, "unsupported element type");
    return DType::f16;
  }
}

/// Accumulator type for an element type: binary16 storage accumulates in binary32.
template <class T>
using accum_t = std::conditional_t<std::is_same_v<T, Half>, float, T>;

template <class T>
inline accum_t<T> widen_one(T v) {
  if constexpr (std::is_same_v<T, Half>) return v.to_float();
  else return v;
}

template <class T>
inline T narrow_one(accum_t<T> v) {
  if constexpr (std::is_same_v<T, Half>) return Half(v);
  else return v;
}

struct Extents {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  std::size_t size() const { return n * c * h * w; }
  friend bool operator==(const Extents&, const Extents&) = default;
};

std::string to_string(const Extents& e);

/// Dense NCHW tensor owning a contiguous buffer.
template <class T>
class Tensor4D {
 public:
  using value_type = T;

  Tensor4D() = default;
  explicit Tensor4D(Extents e) : extents_(e), data_(e.size()) {}
  Tensor4D(std::size_t n, std::size_t c, std::size_t h, std::size_t w) : Tensor4D(Extents{n, c, h, w}) {}
  Tensor4D(Extents e, std::vector<T> data) : extents_(e), data_(std::move(data)) {
    if (data_.size() != extents_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match extents " +
                       to_string(extents_));
  }

  const Extents& extents() const { return extents_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * extents_.c + c) * extents_.h + h) * extents_.w + w;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return data_[index(n, c, h, w)]; }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  /// One H×W plane.
  std::span<const T> plane(std::size_t n, std::size_t c) const {
    return std::span<const T>(data_).subspan(index(n, c, 0, 0), extents_.h * extents_.w);
  }
  std::span<T> plane(std::size_t n, std::size_t c) {
    return std::span<T>(data_).subspan(index(n, c, 0, 0), extents_.h * extents_.w);
  }

  /// Copy of samples [first, first + count).
  Tensor4D slice_batch(std::size_t first, std::size_t count) const {
    if (first + count > extents_.n) throw ShapeError("batch slice out of range");
    const std::size_t per = extents_.c * extents_.h * extents_.w;
    Tensor4D out(Extents{count, extents_.c, extents_.h, extents_.w});
    std::copy(data_.begin() + first * per, data_.begin() + (first + count) * per, out.data_.begin());
    return out;
  }

  friend bool operator==(const Tensor4D&, const Tensor4D&) = default;

 private:
  Extents extents_;
  std::vector<T> data_;
};

template <class To, class From>
Tensor4D<To> convert(const Tensor4D<From>& x) {
  if constexpr (std::is_same_v<To, From>) {
    return x;
  } else {
    Tensor4D<To> out(x.extents());
    auto src = x.data();
    auto dst = out.data();
    if constexpr (std::is_same_v<From, Half> && std::is_same_v<To, float>) {
      widen(src, dst);
    } else if constexpr (std::is_same_v<From, float> && std::is_same_v<To, Half>) {
      narrow(src, dst);
    } else {
      for (std::size_t i = 0; i < src.size(); ++i) {
        if constexpr (std::is_same_v<To, Half>) dst[i] = Half(static_cast<float>(src[i]));
        else dst[i] = static_cast<To>(widen_one(src[i]));
      }
    }
    return out;
  }
}

/// Geometry of one convolution layer applied to a batch.
struct ConvShape {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t padded_h() const { return height + 2 * padding; }
  std::size_t padded_w() const { return width + 2 * padding; }
  std::size_t kernel_volume() const { return in_channels * kernel_h * kernel_w; }

  Extents input_extents() const { return {batch, in_channels, height, width}; }
  Extents weight_extents() const { return {out_channels, in_channels, kernel_h, kernel_w}; }
  Extents output_extents() const;

  ConvShape with_batch(std::size_t n) const {
    ConvShape s = *this;
    s.batch = n;
    return s;
  }

  friend bool operator==(const ConvShape&, const ConvShape&) = default;
};

std::string to_string(const ConvShape& s);

struct OutputExtent {
  std::size_t e = 0;  // output height
  std::size_t f = 0;  // output width
  friend bool operator==(const OutputExtent&, const OutputExtent&) = default;
};

/// E = (H + 2p - R)/stride + 1, F likewise. Throws ShapeError when the
/// division is inexact or the result is not positive.
OutputExtent output_shape(const ConvShape& shape);

/// Dense convolution layer parameters. Bias is kept in the accumulation type.
template <class T>
struct ConvLayerDense {
  ConvShape shape;
  Tensor4D<T> weights;              // K×C×R×S
  std::vector<accum_t<T>> bias;     // length K

  void validate() const;
};

/// Zero-bordered copy of `x`; the interior equals `x`.
template <class T>
Tensor4D<T> pad_input(const Tensor4D<T>& x, std::size_t padding);

/// Max-norm relative difference ||a - b||_inf / ||b||_inf (0 when both are zero).
template <class T>
double relative_error(const Tensor4D<T>& a, const Tensor4D<T>& b);

double relative_error(std::span<const float> a, std::span<const float> b);
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace dsconv
