#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dsconv/tensor.hpp"

namespace dsconv {

/// Zero statistics of a K×C×R×S weight tensor.
struct SparsityReport {
  std::vector<std::size_t> per_channel_nnz;
  std::size_t unified_nnz = 0;        // max over channels
  std::size_t padded_zero_count = 0;  // zeros promoted to stored entries
  double layer_sparsity = 0.0;        // zeros / (K·C·R·S)
};

template <class T>
SparsityReport analyze_sparsity(const Tensor4D<T>& weights);

/// Picks `deficit` zero positions of one flattened output channel to be
/// stored as explicit entries. Zeros nearest to an existing non-zero come
/// first (ties: lower index); an all-zero channel takes its leading
/// positions. Result is sorted ascending. Negative zeros count as zeros.
std::vector<std::size_t> select_padding_zeros(std::span<const std::uint8_t> is_nonzero, std::size_t deficit);

template <class T>
std::vector<std::size_t> select_padding_zeros(std::span<const T> channel_weights, std::size_t deficit);

/// Decoded position of one stored entry inside the kernel volume.
struct KernelTap {
  std::size_t c = 0, r = 0, s = 0;
  friend bool operator==(const KernelTap&, const KernelTap&) = default;
};

/// Per-output-channel CSR weights with a uniform number of stored entries
/// per channel (`sparse_level`). `colidx` holds flattened offsets
/// c·Hp·Wp + r·Wp + s into the zero-padded input of one sample.
///
/// Construction always validates; a CsrKernel that exists is well formed.
template <class T>
class CsrKernel {
 public:
  CsrKernel() = default;

  /// Throws FormatError describing the first violated invariant.
  CsrKernel(ConvShape shape, std::vector<T> values, std::vector<std::uint32_t> colidx,
            std::vector<std::uint32_t> rowptr);

  const ConvShape& shape() const { return shape_; }
  std::span<const T> values() const { return values_; }
  std::span<const std::uint32_t> colidx() const { return colidx_; }
  std::span<const std::uint32_t> rowptr() const { return rowptr_; }
  std::size_t sparse_level() const { return sparse_level_; }
  std::size_t out_channels() const { return shape_.out_channels; }

  std::span<const T> channel_values(std::size_t k) const {
    return std::span<const T>(values_).subspan(rowptr_[k], sparse_level_);
  }
  std::span<const std::uint32_t> channel_offsets(std::size_t k) const {
    return std::span<const std::uint32_t>(colidx_).subspan(rowptr_[k], sparse_level_);
  }

  KernelTap decode(std::uint32_t offset) const;

  /// Replace stored values (e.g. after quantization). Structure is unchanged.
  void set_values(std::vector<T> values);

  /// Same geometry, different batch size; offsets are batch independent.
  CsrKernel with_batch(std::size_t n) const {
    CsrKernel k = *this;
    k.shape_.batch = n;
    return k;
  }

 private:
  void validate() const;

  ConvShape shape_;
  std::vector<T> values_;
  std::vector<std::uint32_t> colidx_;
  std::vector<std::uint32_t> rowptr_;
  std::size_t sparse_level_ = 0;
};

/// Flattened padded-input offset of tap (c, r, s).
std::uint32_t tap_offset(const ConvShape& shape, std::size_t c, std::size_t r, std::size_t s);

template <class T>
CsrKernel<T> build_csr(const Tensor4D<T>& weights, const ConvShape& shape);

template <class T>
Tensor4D<T> decompress(const CsrKernel<T>& kernel);

}  // namespace dsconv
