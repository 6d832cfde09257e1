#include "dsconv/sparse_engine.hpp"

#include <algorithm>

#include "dsconv/detail/staging.hpp"

namespace dsconv {

void EnginePlan::validate() const {
  if (std::find(kSubBatchSizes.begin(), kSubBatchSizes.end(), sub_batch_size) == kSubBatchSizes.end())
    throw ArgumentError("sub_batch_size must be one of 1, 2, 4, 8, 16 (got " + std::to_string(sub_batch_size) + ")");
}

namespace {

template <class T>
struct ChannelView {
  std::span<const T> values;
  std::span<const std::uint32_t> offsets;
};

template <class T, class ChannelFn>
Tensor4D<T> run_engine(const Tensor4D<T>& x, const ConvShape& s, ChannelFn&& channel,
                       std::span<const accum_t<T>> bias, const EnginePlan& plan, EngineStats* stats, bool one_d) {
  using A = accum_t<T>;
  plan.validate();
  if (x.extents() != s.input_extents())
    throw ShapeError("conv_sparse: input extents " + to_string(x.extents()) + " do not match kernel shape " +
                     to_string(s));
  if (!bias.empty() && bias.size() != s.out_channels)
    throw ShapeError("conv_sparse: bias length " + std::to_string(bias.size()) + " != K");
  if (one_d && (s.height != 1 || s.kernel_h != 1 || s.padding != 0))
    throw ShapeError("conv_sparse_1d: needs H = 1, R = 1 and no padding: " + to_string(s));

  const auto [out_h, out_w] = output_shape(s);
  const int workers = detail::resolve_workers(plan.worker_count);
  const auto in = detail::stage_input(x, s.padding, workers);

  const std::size_t N = s.batch, K = s.out_channels, sb = plan.sub_batch_size;
  const std::size_t groups = (N + sb - 1) / sb;
  const std::size_t units = groups * K;

  // A stride-1 layer whose output row spans the whole padded row (1×W
  // kernels, no padding) reads each plane contiguously: fuse all rows.
  const bool fused = one_d || (s.stride == 1 && out_w == in.wp);
  const std::size_t rows = fused ? 1 : out_h;
  const std::size_t row_len = fused ? out_h * out_w : out_w;
  const std::size_t row_step = s.stride * in.wp;

  Tensor4D<T> out(s.output_extents());
  if (stats) {
    stats->work_units = units;
    stats->replicated_samples = groups * sb - N;
    stats->unit_macs.assign(units, 0);
    stats->unit_outputs.assign(units, 0);
  }

#pragma omp parallel num_threads(workers)
  {
    std::vector<A> vals;
    std::vector<std::uint32_t> offs;
    std::vector<A> acc(row_len);
#pragma omp for schedule(static)
    for (long u = 0; u < static_cast<long>(units); ++u) {
      const std::size_t group = static_cast<std::size_t>(u) / K;
      const std::size_t k = static_cast<std::size_t>(u) % K;
      const ChannelView<T> ch = channel(k);
      // Stage this channel's entries once; reused for every sample of the sub-batch.
      vals.resize(ch.values.size());
      offs.assign(ch.offsets.begin(), ch.offsets.end());
      for (std::size_t t = 0; t < vals.size(); ++t) vals[t] = widen_one(ch.values[t]);
      const A b = bias.empty() ? A(0) : bias[k];
      const std::size_t level = vals.size();
      const std::size_t n_end = std::min(N, (group + 1) * sb);
      std::uint64_t macs = 0, outputs = 0;

      for (std::size_t n = group * sb; n < n_end; ++n) {
        const A* sample = in.data + n * in.sample_stride();
        T* dst = &out(n, k, 0, 0);
        for (std::size_t i = 0; i < rows; ++i) {
          std::fill(acc.begin(), acc.end(), A(0));
          const A* row_base = sample + i * row_step;
          for (std::size_t t = 0; t < level; ++t)
            detail::axpy_strided(acc.data(), row_base + offs[t], vals[t], row_len, s.stride);
          detail::store_row(dst + i * row_len, acc.data(), b, row_len);
        }
        if (stats) {
          macs += static_cast<std::uint64_t>(level) * rows * row_len;
          outputs += static_cast<std::uint64_t>(rows) * row_len;
        }
      }
      if (stats) {
        stats->unit_macs[static_cast<std::size_t>(u)] = macs;
        stats->unit_outputs[static_cast<std::size_t>(u)] = outputs;
      }
    }
  }
  if (stats) {
    stats->total_macs = 0;
    for (auto m : stats->unit_macs) stats->total_macs += m;
  }
  return out;
}

}  // namespace

template <class T>
Tensor4D<T> conv_sparse(const Tensor4D<T>& x, const CsrKernel<T>& kernel, std::span<const accum_t<T>> bias,
                        const EnginePlan& plan, EngineStats* stats) {
  auto channel = [&](std::size_t k) { return ChannelView<T>{kernel.channel_values(k), kernel.channel_offsets(k)}; };
  return run_engine<T>(x, kernel.shape(), channel, bias, plan, stats, false);
}

template <class T>
Tensor4D<T> conv_sparse_1d(const Tensor4D<T>& x, const CsrKernel<T>& kernel, std::span<const accum_t<T>> bias,
                           const EnginePlan& plan, EngineStats* stats) {
  auto channel = [&](std::size_t k) { return ChannelView<T>{kernel.channel_values(k), kernel.channel_offsets(k)}; };
  return run_engine<T>(x, kernel.shape(), channel, bias, plan, stats, true);
}

template <class T>
std::uint64_t sparse_macs(const CsrKernel<T>& kernel) {
  const auto& s = kernel.shape();
  const auto [e, f] = output_shape(s);
  return static_cast<std::uint64_t>(s.batch) * s.out_channels * e * f * kernel.sparse_level();
}

template <class T>
TuneResult tune_sub_batch(const CsrKernel<T>& kernel, const Tensor4D<T>& x, std::span<const accum_t<T>> bias,
                          std::span<const std::size_t> candidates, const TuneOptions& opts) {
  if (candidates.empty()) throw ArgumentError("tune_sub_batch: empty candidate set");
  if (opts.repetitions < 5 || opts.warmups < 2)
    throw ArgumentError("tune_sub_batch: needs >= 5 timed repetitions after >= 2 warm-ups");
  const bool one_d = kernel.shape().height == 1 && kernel.shape().kernel_h == 1 && kernel.shape().padding == 0;
  TuneResult result;
  for (std::size_t sb : candidates) {
    EnginePlan plan{sb, opts.workers};
    plan.validate();
    auto run = [&] {
      auto y = one_d ? conv_sparse_1d(x, kernel, bias, plan) : conv_sparse(x, kernel, bias, plan);
      (void)y;
    };
    result.timings[sb] = time_callable(run, opts.warmups, opts.repetitions);
  }
  // std::map iterates in ascending size, so strict < keeps the smaller size on ties.
  double best = 0.0;
  bool first = true;
  for (const auto& [sb, t] : result.timings) {
    if (first || t.median_ms < best) {
      best = t.median_ms;
      result.best = sb;
      first = false;
    }
  }
  return result;
}

namespace instrumentation {

template <class T>
RaggedCsr<T> build_ragged_csr(const Tensor4D<T>& weights, const ConvShape& shape) {
  if (weights.extents() != shape.weight_extents()) throw ShapeError("build_ragged_csr: weight extents mismatch");
  RaggedCsr<T> k;
  k.shape = shape;
  k.rowptr.assign(shape.out_channels + 1, 0);
  const std::size_t R = shape.kernel_h, S = shape.kernel_w, vol = shape.kernel_volume();
  for (std::size_t oc = 0; oc < shape.out_channels; ++oc) {
    for (std::size_t i = 0; i < vol; ++i) {
      const T v = weights.data()[oc * vol + i];
      if (widen_one(v) == 0) continue;
      k.values.push_back(v);
      k.colidx.push_back(tap_offset(shape, i / (R * S), (i / S) % R, i % S));
    }
    k.rowptr[oc + 1] = static_cast<std::uint32_t>(k.values.size());
  }
  return k;
}

template <class T>
Tensor4D<T> conv_sparse_ragged(const Tensor4D<T>& x, const RaggedCsr<T>& kernel, std::span<const accum_t<T>> bias,
                               const EnginePlan& plan, EngineStats* stats) {
  auto channel = [&](std::size_t k) {
    const std::size_t b = kernel.rowptr[k], e = kernel.rowptr[k + 1];
    return ChannelView<T>{std::span<const T>(kernel.values).subspan(b, e - b),
                          std::span<const std::uint32_t>(kernel.colidx).subspan(b, e - b)};
  };
  return run_engine<T>(x, kernel.shape, channel, bias, plan, stats, false);
}

}  // namespace instrumentation

#define DSCONV_INSTANTIATE(T)                                                                                   \
  template Tensor4D<T> conv_sparse(const Tensor4D<T>&, const CsrKernel<T>&, std::span<const accum_t<T>>,       \
                                   const EnginePlan&, EngineStats*);                                            \
  template Tensor4D<T> conv_sparse_1d(const Tensor4D<T>&, const CsrKernel<T>&, std::span<const accum_t<T>>,    \
                                      const EnginePlan&, EngineStats*);                                         \
  template std::uint64_t sparse_macs(const CsrKernel<T>&);                                                      \
  template TuneResult tune_sub_batch(const CsrKernel<T>&, const Tensor4D<T>&, std::span<const accum_t<T>>,     \
                                     std::span<const std::size_t>, const TuneOptions&);                         \
  template instrumentation::RaggedCsr<T> instrumentation::build_ragged_csr(const Tensor4D<T>&, const ConvShape&); \
  template Tensor4D<T> instrumentation::conv_sparse_ragged(const Tensor4D<T>&, const RaggedCsr<T>&,             \
                                                           std::span<const accum_t<T>>, const EnginePlan&,      \
                                                           EngineStats*);

DSCONV_INSTANTIATE(float)
DSCONV_INSTANTIATE(Half)
DSCONV_INSTANTIATE(double)
#undef DSCONV_INSTANTIATE

}  // namespace dsconv
