#include "dsconv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dsconv {

std::string_view to_string(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::f16: return "f16";
  }
  return "?";
}

DType parse_dtype(std::string_view s) {
  if (s == "f32" || s == "float") return DType::f32;
  if (s == "f64" || s == "double") return DType::f64;
  if (s == "f16" || s == "half") return DType::f16;
  throw ArgumentError("unknown dtype '" + std::string(s) + "'");
}

std::string to_string(const Extents& e) {
  return std::to_string(e.n) + "x" + std::to_string(e.c) + "x" + std::to_string(e.h) + "x" + std::to_string(e.w);
}

std::string to_string(const ConvShape& s) {
  return "N=" + std::to_string(s.batch) + " C=" + std::to_string(s.in_channels) + " H=" + std::to_string(s.height) +
         " W=" + std::to_string(s.width) + " K=" + std::to_string(s.out_channels) + " R=" + std::to_string(s.kernel_h) +
         " S=" + std::to_string(s.kernel_w) + " stride=" + std::to_string(s.stride) +
         " pad=" + std::to_string(s.padding);
}

OutputExtent output_shape(const ConvShape& s) {
  if (s.stride == 0) throw ShapeError("stride must be >= 1");
  if (s.batch == 0 || s.in_channels == 0 || s.out_channels == 0 || s.height == 0 || s.width == 0 ||
      s.kernel_h == 0 || s.kernel_w == 0)
    throw ShapeError("convolution extents must be positive: " + to_string(s));
  if (s.kernel_h > s.padded_h() || s.kernel_w > s.padded_w())
    throw ShapeError("kernel larger than padded input: " + to_string(s));
  const std::size_t span_h = s.padded_h() - s.kernel_h;
  const std::size_t span_w = s.padded_w() - s.kernel_w;
  if (span_h % s.stride != 0 || span_w % s.stride != 0)
    throw ShapeError("stride does not evenly divide the padded input span: " + to_string(s));
  return {span_h / s.stride + 1, span_w / s.stride + 1};
}

Extents ConvShape::output_extents() const {
  const auto [e, f] = output_shape(*this);
  return {batch, out_channels, e, f};
}

template <class T>
void ConvLayerDense<T>::validate() const {
  output_shape(shape);
  if (weights.extents() != shape.weight_extents())
    throw ShapeError("weight extents " + to_string(weights.extents()) + " do not match layer shape " +
                     to_string(shape));
  if (bias.size() != shape.out_channels)
    throw ShapeError("bias length " + std::to_string(bias.size()) + " != K=" + std::to_string(shape.out_channels));
}

template <class T>
Tensor4D<T> pad_input(const Tensor4D<T>& x, std::size_t padding) {
  if (padding == 0) return x;
  const auto& e = x.extents();
  Tensor4D<T> out(Extents{e.n, e.c, e.h + 2 * padding, e.w + 2 * padding});
  for (std::size_t n = 0; n < e.n; ++n)
    for (std::size_t c = 0; c < e.c; ++c)
      for (std::size_t h = 0; h < e.h; ++h) {
        const T* src = &x(n, c, h, 0);
        std::copy(src, src + e.w, &out(n, c, h + padding, padding));
      }
  return out;
}

namespace {

template <class A>
double rel_err_impl(std::span<const A> a, std::span<const A> b) {
  if (a.size() != b.size()) throw ShapeError("relative_error: size mismatch");
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]);
    const double y = static_cast<double>(b[i]);
    if (std::isnan(x) != std::isnan(y)) return std::numeric_limits<double>::infinity();
    diff = std::max(diff, std::abs(x - y));
    ref = std::max(ref, std::abs(y));
  }
  if (ref == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / ref;
}

}  // namespace

double relative_error(std::span<const float> a, std::span<const float> b) { return rel_err_impl(a, b); }
double relative_error(std::span<const double> a, std::span<const double> b) { return rel_err_impl(a, b); }

template <class T>
double relative_error(const Tensor4D<T>& a, const Tensor4D<T>& b) {
  if (a.extents() != b.extents()) throw ShapeError("relative_error: extents differ");
  if constexpr (std::is_same_v<T, Half>) {
    const auto fa = convert<float>(a);
    const auto fb = convert<float>(b);
    return rel_err_impl<float>(fa.data(), fb.data());
  } else {
    return rel_err_impl<T>(a.data(), b.data());
  }
}

template struct ConvLayerDense<float>;
template struct ConvLayerDense<double>;
template struct ConvLayerDense<Half>;
template Tensor4D<float> pad_input(const Tensor4D<float>&, std::size_t);
template Tensor4D<double> pad_input(const Tensor4D<double>&, std::size_t);
template Tensor4D<Half> pad_input(const Tensor4D<Half>&, std::size_t);
template double relative_error(const Tensor4D<float>&, const Tensor4D<float>&);
template double relative_error(const Tensor4D<double>&, const Tensor4D<double>&);
template double relative_error(const Tensor4D<Half>&, const Tensor4D<Half>&);

}  // namespace dsconv
