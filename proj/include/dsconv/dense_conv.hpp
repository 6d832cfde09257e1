#pragma once

#include "dsconv/tensor.hpp"

namespace dsconv {

struct ExecOptions {
  int workers = 0;  // <= 0: use every available hardware thread
};

/// Direct convolution over the zero-padded input. Each output element
/// accumulates its terms in (c, r, s) order, then adds the bias; the result
/// is independent of the worker count.
template <class T>
Tensor4D<T> conv_dense_direct(const Tensor4D<T>& x, const ConvLayerDense<T>& layer, const ExecOptions& opts = {});

/// im2col followed by a BLAS matrix multiply (per sample).
template <class T>
Tensor4D<T> conv_dense_gemm(const Tensor4D<T>& x, const ConvLayerDense<T>& layer, const ExecOptions& opts = {});

/// Multiply-accumulate count of a dense convolution: N·K·E·F·C·R·S.
std::uint64_t dense_macs(const ConvShape& shape);

}  // namespace dsconv
