#pragma once

#include <cmath>

#include "dpsplit/common.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit {

// Bilinear interpolation with half-pixel-centered sampling: output pixel o
// samples source coordinate (o + 0.5) * (src / dst) - 0.5, clamped to the
// source grid. An identical source and target size reproduces the input
// exactly, and outputs stay inside the input value range.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& img, int out_h, int out_w) {
  check(img.rank() == 3, "resize expects (c, h, w)");
  check(img.dim(0) == 3, "resize expects 3-channel images");
  check(out_h > 0 && out_w > 0, "resize target must be positive");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<T> out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int ox = 0; ox < out_w; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const T* p = img.data() + (static_cast<std::int64_t>(ch) * h) * w;
        const double v00 = p[static_cast<std::int64_t>(y0) * w + x0];
        const double v01 = p[static_cast<std::int64_t>(y0) * w + x1];
        const double v10 = p[static_cast<std::int64_t>(y1) * w + x0];
        const double v11 = p[static_cast<std::int64_t>(y1) * w + x1];
        const double top = v00 + (v01 - v00) * wx;
        const double bot = v10 + (v11 - v10) * wx;
        out.at3(ch, oy, ox) = static_cast<T>(top + (bot - top) * wy);
      }
    }
  }
  return out;
}

}  // namespace dpsplit
