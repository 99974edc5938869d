#pragma once

#include <cmath>
#include <limits>

#include "dpsplit/common.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit {

struct MetricsRecord {
  double mse = 0.0;
  double ssim = 0.0;
  double psnr = 0.0;
};

// Mean squared error between two (c, h, w) images on the [0, 255] scale.
// Each pixel contributes the squared Euclidean norm of its channel vector;
// the average is over pixels, not over pixel-channel elements.
template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.rank() == 3 && b.rank() == 3, "mse expects (c, h, w) images");
  check(a.same_shape(b), "mse operands must share a shape");
  const std::int64_t pixels = static_cast<std::int64_t>(a.dim(1)) * a.dim(2);
  double total = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    total += d * d;
  }
  return total / static_cast<double>(pixels);
}

// Structural similarity with a single global window per channel and the
// standard stabilizers for 8-bit data (C1 = (0.01*255)^2, C2 = (0.03*255)^2).
// Variances are population moments over the whole channel plane; the channel
// scores are averaged. The value is reported as computed, so anticorrelated
// images can go negative.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.rank() == 3 && b.rank() == 3, "ssim expects (c, h, w) images");
  check(a.same_shape(b), "ssim operands must share a shape");
  constexpr double kC1 = 6.5025;
  constexpr double kC2 = 58.5225;
  const int c = a.dim(0);
  const std::int64_t plane = static_cast<std::int64_t>(a.dim(1)) * a.dim(2);
  double acc = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    const T* pa = a.data() + static_cast<std::int64_t>(ch) * plane;
    const T* pb = b.data() + static_cast<std::int64_t>(ch) * plane;
    double sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) {
      const double x = pa[i], y = pb[i];
      sa += x;
      sb += y;
      saa += x * x;
      sbb += y * y;
      sab += x * y;
    }
    const double n = static_cast<double>(plane);
    const double ma = sa / n, mb = sb / n;
    const double va = saa / n - ma * ma;
    const double vb = sbb / n - mb * mb;
    const double cov = sab / n - ma * mb;
    acc += ((2.0 * ma * mb + kC1) * (2.0 * cov + kC2)) /
           ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
  }
  return acc / c;
}

// Peak signal-to-noise ratio in dB against the 255 peak, derived from the
// channel-vector MSE above. Identical images map to +inf.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  const double e = mse(a, b);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / e);
}

template <typename T>
MetricsRecord compute_metrics(const Tensor<T>& reference, const Tensor<T>& candidate) {
  MetricsRecord r;
  r.mse = mse(reference, candidate);
  r.ssim = ssim(reference, candidate);
  r.psnr = psnr(reference, candidate);
  return r;
}

}  // namespace dpsplit
