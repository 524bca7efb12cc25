#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>

namespace suggest::num {

/// exp for float, written so that loops over it auto-vectorise. Range
/// reduction to [-ln2/2, ln2/2] plus a degree-6 polynomial; relative error
/// below 2e-7 over the clamped range [-87, 88].
inline float fast_exp(float x) {
  // min before max: the reverse order if-converts into masked blends
  // inside fused loops and runs several times slower
  x = std::min(x, 88.0f);
  x = std::max(x, -87.0f);
  // round to nearest via the 1.5 * 2^23 trick; exact for |t| < 2^22
  const float t = x * 1.44269504f;
  const float n = (t + 12582912.0f) - 12582912.0f;
  const float r = (x - n * 0.693145752f) - n * 1.42860677e-6f;
  float p = 1.0f / 720.0f;
  p = p * r + 1.0f / 120.0f;
  p = p * r + 1.0f / 24.0f;
  p = p * r + 1.0f / 6.0f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  const std::int32_t e = (static_cast<std::int32_t>(n) + 127) << 23;
  return p * std::bit_cast<float>(e);
}

inline double fast_exp(double x) { return std::exp(x); }

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + fast_exp(-x));
}

template <typename T>
inline T tanh(T x) {
  if constexpr (sizeof(T) == 4) {
    return T(1) - T(2) / (fast_exp(T(2) * x) + T(1));
  } else {
    return std::tanh(x);
  }
}

}  // namespace suggest::num
