#pragma once

#include <algorithm>
#include <cstddef>
#include <type_traits>
#include <vector>

#include "dsconv/tensor.hpp"

namespace dsconv::detail {

int resolve_workers(int requested);

/// Input materialized with its zero border in the accumulation type, so
/// precomputed flattened offsets index it directly.
template <class A>
struct StagedInput {
  std::vector<A> owned;
  const A* data = nullptr;
  std::size_t n = 0, c = 0, hp = 0, wp = 0;

  std::size_t sample_stride() const { return c * hp * wp; }
};

template <class T>
StagedInput<accum_t<T>> stage_input(const Tensor4D<T>& x, std::size_t padding, int workers) {
  using A = accum_t<T>;
  const auto& e = x.extents();
  StagedInput<A> s;
  s.n = e.n;
  s.c = e.c;
  s.hp = e.h + 2 * padding;
  s.wp = e.w + 2 * padding;
  if constexpr (std::is_same_v<T, A>) {
    if (padding == 0) {
      s.data = x.data().data();
      return s;
    }
  }
  s.owned.assign(e.n * e.c * s.hp * s.wp, A(0));
  const long planes = static_cast<long>(e.n * e.c);
#pragma omp parallel for num_threads(workers) schedule(static)
  for (long p = 0; p < planes; ++p) {
    const T* src = x.data().data() + static_cast<std::size_t>(p) * e.h * e.w;
    A* dst = s.owned.data() + static_cast<std::size_t>(p) * s.hp * s.wp;
    for (std::size_t h = 0; h < e.h; ++h) {
      A* row = dst + (h + padding) * s.wp + padding;
      if constexpr (std::is_same_v<T, Half>) {
        widen(std::span<const Half>(src + h * e.w, e.w), std::span<float>(row, e.w));
      } else {
        std::copy(src + h * e.w, src + (h + 1) * e.w, row);
      }
    }
  }
  s.data = s.owned.data();
  return s;
}

/// acc[j] += w * src[j * stride] for j < len.
template <class A>
inline void axpy_strided(A* __restrict acc, const A* __restrict src, A w, std::size_t len, std::size_t stride) {
  if (stride == 1) {
    for (std::size_t j = 0; j < len; ++j) acc[j] += w * src[j];
  } else {
    for (std::size_t j = 0; j < len; ++j) acc[j] += w * src[j * stride];
  }
}

template <class T>
inline void store_row(T* dst, const accum_t<T>* acc, accum_t<T> bias, std::size_t len) {
  for (std::size_t j = 0; j < len; ++j) dst[j] = narrow_one<T>(acc[j] + bias);
}

}  // namespace dsconv::detail
