#include "dsconv/dense_conv.hpp"

#include <cblas.h>
#include <omp.h>

#include <vector>

#include "dsconv/detail/staging.hpp"

namespace dsconv {

namespace detail {

int resolve_workers(int requested) { return requested > 0 ? requested : omp_get_max_threads(); }

}  // namespace detail

std::uint64_t dense_macs(const ConvShape& shape) {
  const auto [e, f] = output_shape(shape);
  return static_cast<std::uint64_t>(shape.batch) * shape.out_channels * e * f * shape.kernel_volume();
}

template <class T>
Tensor4D<T> conv_dense_direct(const Tensor4D<T>& x, const ConvLayerDense<T>& layer, const ExecOptions& opts) {
  using A = accum_t<T>;
  layer.validate();
  const ConvShape& s = layer.shape;
  if (x.extents() != s.input_extents())
    throw ShapeError("input extents " + to_string(x.extents()) + " do not match layer " + to_string(s));
  const auto [out_h, out_w] = output_shape(s);
  const int workers = detail::resolve_workers(opts.workers);

  const auto in = detail::stage_input(x, s.padding, workers);
  std::vector<A> w(layer.weights.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = widen_one(layer.weights.data()[i]);

  Tensor4D<T> out(s.output_extents());
  const std::size_t plane = in.hp * in.wp;
  const std::size_t R = s.kernel_h, S = s.kernel_w, C = s.in_channels, K = s.out_channels;
  const long units = static_cast<long>(s.batch * K);

#pragma omp parallel num_threads(workers)
  {
    std::vector<A> acc(out_h * out_w);
#pragma omp for schedule(static)
    for (long u = 0; u < units; ++u) {
      const std::size_t n = static_cast<std::size_t>(u) / K;
      const std::size_t k = static_cast<std::size_t>(u) % K;
      std::fill(acc.begin(), acc.end(), A(0));
      const A* sample = in.data + n * in.sample_stride();
      const A* wk = w.data() + k * C * R * S;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t q = 0; q < S; ++q) {
            const A wv = wk[(c * R + r) * S + q];
            const A* base = sample + c * plane + r * in.wp + q;
            for (std::size_t i = 0; i < out_h; ++i)
              detail::axpy_strided(acc.data() + i * out_w, base + i * s.stride * in.wp, wv, out_w, s.stride);
          }
      detail::store_row(&out(n, k, 0, 0), acc.data(), layer.bias[k], out_h * out_w);
    }
  }
  return out;
}

namespace {

inline void gemm_rowmajor(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0f, a, static_cast<int>(k), b, static_cast<int>(n), 0.0f, c,
              static_cast<int>(n));
}

inline void gemm_rowmajor(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, static_cast<int>(k), b, static_cast<int>(n), 0.0, c, static_cast<int>(n));
}

}  // namespace

template <class T>
Tensor4D<T> conv_dense_gemm(const Tensor4D<T>& x, const ConvLayerDense<T>& layer, const ExecOptions& opts) {
  using A = accum_t<T>;
  layer.validate();
  const ConvShape& s = layer.shape;
  if (x.extents() != s.input_extents())
    throw ShapeError("input extents " + to_string(x.extents()) + " do not match layer " + to_string(s));
  const auto [out_h, out_w] = output_shape(s);
  const int workers = detail::resolve_workers(opts.workers);

  const auto in = detail::stage_input(x, s.padding, workers);
  const std::size_t rows = s.kernel_volume();
  const std::size_t cols = out_h * out_w;
  const std::size_t K = s.out_channels;
  const std::size_t plane = in.hp * in.wp;

  std::vector<A> w(layer.weights.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = widen_one(layer.weights.data()[i]);

  // 1x1, stride 1, no padding: the input plane already is the column matrix.
  const bool direct_columns = s.kernel_h == 1 && s.kernel_w == 1 && s.stride == 1 && s.padding == 0;
  std::vector<A> col(direct_columns ? 0 : rows * cols);
  std::vector<A> res(K * cols);
  Tensor4D<T> out(s.output_extents());

  for (std::size_t n = 0; n < s.batch; ++n) {
    const A* sample = in.data + n * in.sample_stride();
    const A* colmat = sample;
    if (!direct_columns) {
      const long nrows = static_cast<long>(rows);
#pragma omp parallel for num_threads(workers) schedule(static)
      for (long row = 0; row < nrows; ++row) {
        const std::size_t c = static_cast<std::size_t>(row) / (s.kernel_h * s.kernel_w);
        const std::size_t r = (static_cast<std::size_t>(row) / s.kernel_w) % s.kernel_h;
        const std::size_t q = static_cast<std::size_t>(row) % s.kernel_w;
        const A* base = sample + c * plane + r * in.wp + q;
        A* dst = col.data() + static_cast<std::size_t>(row) * cols;
        for (std::size_t i = 0; i < out_h; ++i) {
          const A* src = base + i * s.stride * in.wp;
          for (std::size_t j = 0; j < out_w; ++j) dst[i * out_w + j] = src[j * s.stride];
        }
      }
      colmat = col.data();
    }
    gemm_rowmajor(K, cols, rows, w.data(), colmat, res.data());
    for (std::size_t k = 0; k < K; ++k) detail::store_row(&out(n, k, 0, 0), res.data() + k * cols, layer.bias[k], cols);
  }
  return out;
}

template Tensor4D<float> conv_dense_direct(const Tensor4D<float>&, const ConvLayerDense<float>&, const ExecOptions&);
template Tensor4D<double> conv_dense_direct(const Tensor4D<double>&, const ConvLayerDense<double>&,
                                            const ExecOptions&);
template Tensor4D<Half> conv_dense_direct(const Tensor4D<Half>&, const ConvLayerDense<Half>&, const ExecOptions&);
template Tensor4D<float> conv_dense_gemm(const Tensor4D<float>&, const ConvLayerDense<float>&, const ExecOptions&);
template Tensor4D<double> conv_dense_gemm(const Tensor4D<double>&, const ConvLayerDense<double>&, const ExecOptions&);
template Tensor4D<Half> conv_dense_gemm(const Tensor4D<Half>&, const ConvLayerDense<Half>&, const ExecOptions&);

}  // namespace dsconv
