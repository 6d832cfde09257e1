#include "dsconv/csr_kernel.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace dsconv {

namespace {

template <class T>
bool is_nonzero(T v) {
  if constexpr (std::is_same_v<T, Half>) return (v.bits & 0x7fffu) != 0;
  else return v != T(0);
}

constexpr std::size_t kMaxOffset = std::size_t{1} << 31;

}  // namespace

template <class T>
SparsityReport analyze_sparsity(const Tensor4D<T>& weights) {
  if (weights.empty()) throw ShapeError("analyze_sparsity: empty weight tensor");
  const auto& e = weights.extents();
  const std::size_t vol = e.c * e.h * e.w;
  SparsityReport rep;
  rep.per_channel_nnz.resize(e.n);
  std::size_t zeros = 0;
  for (std::size_t k = 0; k < e.n; ++k) {
    auto ch = weights.data().subspan(k * vol, vol);
    const auto nnz = static_cast<std::size_t>(std::count_if(ch.begin(), ch.end(), [](T v) { return is_nonzero(v); }));
    rep.per_channel_nnz[k] = nnz;
    zeros += vol - nnz;
  }
  rep.unified_nnz = *std::max_element(rep.per_channel_nnz.begin(), rep.per_channel_nnz.end());
  for (auto nnz : rep.per_channel_nnz) rep.padded_zero_count += rep.unified_nnz - nnz;
  rep.layer_sparsity = static_cast<double>(zeros) / static_cast<double>(weights.size());
  return rep;
}

std::vector<std::size_t> select_padding_zeros(std::span<const std::uint8_t> nz, std::size_t deficit) {
  const std::size_t n = nz.size();
  const auto nnz = static_cast<std::size_t>(std::count_if(nz.begin(), nz.end(), [](std::uint8_t f) { return f != 0; }));
  if (deficit > n - nnz)
    throw ArgumentError("select_padding_zeros: deficit " + std::to_string(deficit) + " exceeds " +
                        std::to_string(n - nnz) + " available zeros");
  std::vector<std::size_t> chosen;
  if (deficit == 0) return chosen;

  if (nnz == 0) {
    chosen.resize(deficit);
    std::iota(chosen.begin(), chosen.end(), std::size_t{0});
    return chosen;
  }

  // Distance of every position to its nearest non-zero (two sweeps).
  constexpr std::size_t inf = std::numeric_limits<std::size_t>::max() / 2;
  std::vector<std::size_t> dist(n, inf);
  std::size_t last = inf;
  for (std::size_t i = 0; i < n; ++i) {
    if (nz[i]) last = i;
    if (last != inf) dist[i] = i - last;
  }
  last = inf;
  for (std::size_t i = n; i-- > 0;) {
    if (nz[i]) last = i;
    if (last != inf) dist[i] = std::min(dist[i], last - i);
  }

  std::vector<std::size_t> zeros;
  zeros.reserve(n - nnz);
  for (std::size_t i = 0; i < n; ++i)
    if (!nz[i]) zeros.push_back(i);
  std::stable_sort(zeros.begin(), zeros.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  chosen.assign(zeros.begin(), zeros.begin() + static_cast<std::ptrdiff_t>(deficit));
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

template <class T>
std::vector<std::size_t> select_padding_zeros(std::span<const T> channel_weights, std::size_t deficit) {
  std::vector<std::uint8_t> flags(channel_weights.size());
  for (std::size_t i = 0; i < flags.size(); ++i) flags[i] = is_nonzero(channel_weights[i]) ? 1 : 0;
  return select_padding_zeros(std::span<const std::uint8_t>(flags), deficit);
}

std::uint32_t tap_offset(const ConvShape& shape, std::size_t c, std::size_t r, std::size_t s) {
  return static_cast<std::uint32_t>(c * shape.padded_h() * shape.padded_w() + r * shape.padded_w() + s);
}

template <class T>
CsrKernel<T>::CsrKernel(ConvShape shape, std::vector<T> values, std::vector<std::uint32_t> colidx,
                        std::vector<std::uint32_t> rowptr)
    : shape_(shape), values_(std::move(values)), colidx_(std::move(colidx)), rowptr_(std::move(rowptr)) {
  if (rowptr_.size() == shape_.out_channels + 1 && shape_.out_channels > 0)
    sparse_level_ = rowptr_[1] - rowptr_[0];
  validate();
}

template <class T>
KernelTap CsrKernel<T>::decode(std::uint32_t offset) const {
  const std::size_t plane = shape_.padded_h() * shape_.padded_w();
  const std::size_t rem = offset % plane;
  return {offset / plane, rem / shape_.padded_w(), rem % shape_.padded_w()};
}

template <class T>
void CsrKernel<T>::validate() const {
  try {
    output_shape(shape_);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("csr: invalid shape: ") + e.what());
  }
  const std::size_t K = shape_.out_channels;
  if (shape_.in_channels * shape_.padded_h() * shape_.padded_w() >= kMaxOffset)
    throw FormatError("csr: padded input plane exceeds 32-bit offset range");
  if (rowptr_.size() != K + 1)
    throw FormatError("csr: rowptr has " + std::to_string(rowptr_.size()) + " entries, expected K+1=" +
                      std::to_string(K + 1));
  if (rowptr_[0] != 0) throw FormatError("csr: rowptr[0] must be 0");
  for (std::size_t k = 0; k < K; ++k) {
    if (rowptr_[k + 1] < rowptr_[k]) throw FormatError("csr: rowptr decreases at channel " + std::to_string(k));
    if (rowptr_[k + 1] - rowptr_[k] != sparse_level_)
      throw FormatError("csr: channel " + std::to_string(k) + " holds " + std::to_string(rowptr_[k + 1] - rowptr_[k]) +
                        " entries, expected uniform sparse_level " + std::to_string(sparse_level_));
  }
  if (rowptr_[K] != K * sparse_level_) throw FormatError("csr: rowptr[K] != K*sparse_level");
  if (values_.size() != rowptr_[K] || colidx_.size() != rowptr_[K])
    throw FormatError("csr: values/colidx length must equal rowptr[K]=" + std::to_string(rowptr_[K]));
  if (sparse_level_ > shape_.kernel_volume()) throw FormatError("csr: sparse_level exceeds kernel volume");
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t t = rowptr_[k]; t < rowptr_[k + 1]; ++t) {
      const auto tap = decode(colidx_[t]);
      if (tap.c >= shape_.in_channels || tap.r >= shape_.kernel_h || tap.s >= shape_.kernel_w)
        throw FormatError("csr: colidx[" + std::to_string(t) + "]=" + std::to_string(colidx_[t]) +
                          " lies outside the kernel volume");
      if (t > rowptr_[k] && colidx_[t] <= colidx_[t - 1])
        throw FormatError("csr: colidx not strictly increasing in channel " + std::to_string(k) + " at entry " +
                          std::to_string(t) + (colidx_[t] == colidx_[t - 1] ? " (duplicate)" : ""));
    }
  }
}

template <class T>
void CsrKernel<T>::set_values(std::vector<T> values) {
  if (values.size() != values_.size()) throw FormatError("csr: replacement values have the wrong length");
  values_ = std::move(values);
}

template <class T>
CsrKernel<T> build_csr(const Tensor4D<T>& weights, const ConvShape& shape) {
  if (weights.extents() != shape.weight_extents())
    throw ShapeError("build_csr: weight extents " + to_string(weights.extents()) + " do not match " + to_string(shape));
  output_shape(shape);
  const auto rep = analyze_sparsity(weights);
  const std::size_t K = shape.out_channels, R = shape.kernel_h, S = shape.kernel_w;
  const std::size_t vol = shape.kernel_volume();
  const std::size_t level = rep.unified_nnz;

  std::vector<T> values;
  std::vector<std::uint32_t> colidx, rowptr(K + 1, 0);
  values.reserve(K * level);
  colidx.reserve(K * level);
  for (std::size_t k = 0; k < K; ++k) {
    auto ch = weights.data().subspan(k * vol, vol);
    const auto promoted = select_padding_zeros<T>(ch, level - rep.per_channel_nnz[k]);
    auto next = promoted.begin();
    for (std::size_t i = 0; i < vol; ++i) {
      const bool take_promoted = next != promoted.end() && *next == i;
      if (take_promoted) ++next;
      if (!take_promoted && !is_nonzero(ch[i])) continue;
      const std::size_t c = i / (R * S), r = (i / S) % R, s = i % S;
      values.push_back(take_promoted ? T(0.0f) : ch[i]);
      colidx.push_back(tap_offset(shape, c, r, s));
    }
    rowptr[k + 1] = static_cast<std::uint32_t>(values.size());
  }
  return CsrKernel<T>(shape, std::move(values), std::move(colidx), std::move(rowptr));
}

template <class T>
Tensor4D<T> decompress(const CsrKernel<T>& kernel) {
  const ConvShape& s = kernel.shape();
  Tensor4D<T> out(s.weight_extents());
  for (std::size_t k = 0; k < s.out_channels; ++k) {
    auto vals = kernel.channel_values(k);
    auto offs = kernel.channel_offsets(k);
    for (std::size_t t = 0; t < vals.size(); ++t) {
      const auto tap = kernel.decode(offs[t]);
      out(k, tap.c, tap.r, tap.s) = vals[t];
    }
  }
  return out;
}

#define DSCONV_INSTANTIATE(T)                                                                \
  template SparsityReport analyze_sparsity(const Tensor4D<T>&);                              \
  template std::vector<std::size_t> select_padding_zeros(std::span<const T>, std::size_t);   \
  template class CsrKernel<T>;                                                               \
  template CsrKernel<T> build_csr(const Tensor4D<T>&, const ConvShape&);                     \
  template Tensor4D<T> decompress(const CsrKernel<T>&);

DSCONV_INSTANTIATE(float)
DSCONV_INSTANTIATE(double)
DSCONV_INSTANTIATE(Half)
#undef DSCONV_INSTANTIATE

}  // namespace dsconv
