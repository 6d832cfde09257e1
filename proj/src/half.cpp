#include "dsconv/half.hpp"

#include <bit>
#include <cassert>

#if defined(__F16C__)
#include <immintrin.h>
#endif

namespace dsconv {

std::uint16_t float_to_half_bits_soft(float value) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::uint32_t abs = x & 0x7fffffffu;

  if (abs >= 0x7f800000u) {
    // inf or nan; keep nan quiet and non-zero
    const std::uint32_t mant = abs & 0x007fffffu;
    return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? (0x0200u | (mant >> 13)) : 0u));
  }
  if (abs >= 0x477ff000u) {
    // rounds to >= 65520 -> overflow to inf
    return static_cast<std::uint16_t>(sign | 0x7c00u);
  }
  if (abs < 0x38800000u) {
    // result is subnormal or zero: value = abs * 2^24 in half-ulp units
    if (abs < 0x33000000u) return static_cast<std::uint16_t>(sign);  // < 2^-25 rounds to 0
    const std::uint32_t exp = abs >> 23;
    const std::uint32_t mant = (abs & 0x007fffffu) | 0x00800000u;
    const std::uint32_t shift = 126u - exp;  // value / 2^-24 = mant * 2^(exp - 126)
    std::uint32_t h = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1u);
    if (rem > halfway || (rem == halfway && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
  }
  // normal range
  std::uint32_t h = ((abs - 0x38000000u) >> 13);
  const std::uint32_t rem = abs & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
  return static_cast<std::uint16_t>(sign | h);
}

float half_bits_to_float_soft(std::uint16_t bits) {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  const std::uint32_t exp = (bits >> 10) & 0x1fu;
  std::uint32_t mant = bits & 0x3ffu;
  std::uint32_t out;
  if (exp == 0) {
    if (mant == 0) {
      out = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      out = sign | (static_cast<std::uint32_t>(112 - e) << 23) | ((mant & 0x3ffu) << 13);
    }
  } else if (exp == 0x1f) {
    out = sign | 0x7f800000u | (mant << 13);
  } else {
    out = sign | ((exp + 112u) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(out);
}

Half::Half(float value) {
#if defined(__F16C__)
  bits = _cvtss_sh(value, _MM_FROUND_TO_NEAREST_INT);
#else
  bits = float_to_half_bits_soft(value);
#endif
}

Half::operator float() const {
#if defined(__F16C__)
  return _cvtsh_ss(bits);
#else
  return half_bits_to_float_soft(bits);
#endif
}

void widen(std::span<const Half> src, std::span<float> dst) {
  assert(src.size() == dst.size());
  std::size_t i = 0;
#if defined(__F16C__)
  for (; i + 8 <= src.size(); i += 8) {
    const __m128i h = _mm_loadu_si128(reinterpret_cast<const __m128i*>(src.data() + i));
    _mm256_storeu_ps(dst.data() + i, _mm256_cvtph_ps(h));
  }
#endif
  for (; i < src.size(); ++i) dst[i] = src[i].to_float();
}

void narrow(std::span<const float> src, std::span<Half> dst) {
  assert(src.size() == dst.size());
  std::size_t i = 0;
#if defined(__F16C__)
  for (; i + 8 <= src.size(); i += 8) {
    const __m128i h = _mm256_cvtps_ph(_mm256_loadu_ps(src.data() + i), _MM_FROUND_TO_NEAREST_INT);
    _mm_storeu_si128(reinterpret_cast<__m128i*>(dst.data() + i), h);
  }
#endif
  for (; i < src.size(); ++i) dst[i] = Half(src[i]);
}

}  // namespace dsconv
