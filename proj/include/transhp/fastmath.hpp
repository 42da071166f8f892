#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

// Scalar-type-dispatched transcendentals. The double overloads call libm and
// are the ones exercised by the fp64 oracle tests; the float overloads are
// polynomial approximations (~1 ulp of float) written so the surrounding
// loops auto-vectorize, which keeps the fp32 training path off scalar libm.

namespace transhp::fastmath {

inline double exp_approx(double x) { return std::exp(x); }
inline double tanh_approx(double x) { return std::tanh(x); }

inline float exp_approx(float x) {
  // Cephes-style: x = n*ln2 + r, exp(r) by degree-5 polynomial, scale by 2^n.
  constexpr float log2e = 1.442695040f;
  constexpr float c1 = 0.693359375f;        // ln2 high part
  constexpr float c2 = -2.12194440e-4f;     // ln2 low part
  x = x < 88.0f ? x : 88.0f;
  x = x > -87.0f ? x : -87.0f;
  float nf = std::floor(log2e * x + 0.5f);
  x -= nf * c1;
  x -= nf * c2;
  float z = x * x;
  float p = 1.9875691500e-4f;
  p = p * x + 1.3981999507e-3f;
  p = p * x + 8.3334519073e-3f;
  p = p * x + 4.1665795894e-2f;
  p = p * x + 1.6666665459e-1f;
  p = p * x + 5.0000001201e-1f;
  p = p * z + x + 1.0f;
  int32_t n = static_cast<int32_t>(nf);
  float scale = std::bit_cast<float>((n + 127) << 23);
  return p * scale;
}

inline float tanh_approx(float x) {
  // tanh(x) = 1 - 2/(exp(2x)+1); odd and saturating, branchless clamp.
  float ax = x < 9.0f ? x : 9.0f;
  ax = ax > -9.0f ? ax : -9.0f;
  float e = exp_approx(2.0f * ax);
  return (e - 1.0f) / (e + 1.0f);
}

}  // namespace transhp::fastmath
