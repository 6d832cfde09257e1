#pragma once

#include <cstdint>
#include <span>

namespace dsconv {

/// IEEE 754 binary16 storage type. Arithmetic is never done in half: values
/// are widened to float, computed, and rounded back (round-to-nearest-even).
struct Half {
  std::uint16_t bits = 0;

  Half() = default;
  explicit Half(float value);

  static constexpr Half from_bits(std::uint16_t b) {
    Half h;
    h.bits = b;
    return h;
  }

  explicit operator float() const;
  float to_float() const { return static_cast<float>(*this); }

  friend bool operator==(Half a, Half b) { return a.bits == b.bits; }
};

/// Portable bit-level conversions. These are the reference used to check
/// the hardware (F16C) path.
std::uint16_t float_to_half_bits_soft(float value);
float half_bits_to_float_soft(std::uint16_t bits);

void widen(std::span<const Half> src, std::span<float> dst);
void narrow(std::span<const float> src, std::span<Half> dst);

/// Round a float through binary16 and back.
inline float round_to_half(float v) { return Half(v).to_float(); }

}  // namespace dsconv
