#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "dsconv/csr_kernel.hpp"
#include "dsconv/tensor.hpp"
#include "dsconv/timing.hpp"

namespace dsconv {

inline constexpr std::array<std::size_t, 5> kSubBatchSizes{1, 2, 4, 8, 16};

/// How conv_sparse splits a layer into work units. One unit computes one
/// output channel for `sub_batch_size` consecutive samples, so the layer has
/// ceil(N / sub_batch_size) · K units.
struct EnginePlan {
  std::size_t sub_batch_size = 4;
  int worker_count = 0;  // <= 0: all hardware threads

  void validate() const;
};

/// Optional instrumentation filled by the engine.
struct EngineStats {
  std::size_t work_units = 0;
  /// Samples the last sub-batch lacks to be full (its work unit runs short).
  std::size_t replicated_samples = 0;
  std::uint64_t total_macs = 0;
  std::vector<std::uint64_t> unit_macs;     // per work unit
  std::vector<std::uint64_t> unit_outputs;  // output elements written per work unit
};

/// Direct sparse convolution over unified-sparsity CSR weights. `bias` may
/// be empty (zero bias). Output is bit-identical for every plan.
template <class T>
Tensor4D<T> conv_sparse(const Tensor4D<T>& x, const CsrKernel<T>& kernel, std::span<const accum_t<T>> bias,
                        const EnginePlan& plan, EngineStats* stats = nullptr);

/// Same contract for H = 1 sequence inputs (N×C×1×W); a single contiguous
/// row per output channel.
template <class T>
Tensor4D<T> conv_sparse_1d(const Tensor4D<T>& x, const CsrKernel<T>& kernel, std::span<const accum_t<T>> bias,
                           const EnginePlan& plan, EngineStats* stats = nullptr);

/// N·K·E·F·sparse_level.
template <class T>
std::uint64_t sparse_macs(const CsrKernel<T>& kernel);

struct TuneOptions {
  std::size_t warmups = 2;
  std::size_t repetitions = 5;
  int workers = 0;
};

struct TuneResult {
  std::size_t best = 0;
  std::map<std::size_t, TimingSummary> timings;
};

/// Times conv_sparse for every candidate sub-batch size and returns the
/// candidate with the smallest median (ties go to the smaller size).
template <class T>
TuneResult tune_sub_batch(const CsrKernel<T>& kernel, const Tensor4D<T>& x, std::span<const accum_t<T>> bias,
                          std::span<const std::size_t> candidates, const TuneOptions& opts = {});

namespace instrumentation {

/// Plain per-channel CSR without sparsity unification: channel k stores
/// only its own non-zeros, so work units run unequal iteration counts.
template <class T>
struct RaggedCsr {
  ConvShape shape;
  std::vector<T> values;
  std::vector<std::uint32_t> colidx;
  std::vector<std::uint32_t> rowptr;
};

template <class T>
RaggedCsr<T> build_ragged_csr(const Tensor4D<T>& weights, const ConvShape& shape);

template <class T>
Tensor4D<T> conv_sparse_ragged(const Tensor4D<T>& x, const RaggedCsr<T>& kernel, std::span<const accum_t<T>> bias,
                               const EnginePlan& plan, EngineStats* stats = nullptr);

}  // namespace instrumentation

}  // namespace dsconv
