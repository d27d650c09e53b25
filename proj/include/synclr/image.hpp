#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "synclr/error.hpp"

namespace synclr {

inline constexpr int kMinImageSide = 8;

/// H x W x 3, row-major, channels interleaved, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0.0f) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  bool operator==(const Image&) const = default;
};

inline void validate_image(const Image& img) {
  require(img.height >= 1 && img.width >= 1 &&
              img.pixels.size() == static_cast<std::size_t>(img.height) * img.width * 3,
          ErrorCode::data, "image buffer does not match its dimensions");
  for (float v : img.pixels)
    require(v >= 0.0f && v <= 1.0f, ErrorCode::data, "pixel value outside [0,1]");
}

/// Bilinear resampling with pixel-centre alignment; same-size resize is exact.
inline Image resize_bilinear(const Image& src, int out_h, int out_w, int y0 = 0, int x0 = 0,
                             int crop_h = -1, int crop_w = -1) {
  if (crop_h < 0) crop_h = src.height;
  if (crop_w < 0) crop_w = src.width;
  Image out(out_h, out_w);
  const double sy = static_cast<double>(crop_h) / out_h;
  const double sx = static_cast<double>(crop_w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, crop_h - 1.0);
    const int iy = static_cast<int>(fy);
    const int iy1 = std::min(iy + 1, crop_h - 1);
    const double wy = fy - iy;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, crop_w - 1.0);
      const int ix = static_cast<int>(fx);
      const int ix1 = std::min(ix + 1, crop_w - 1);
      const double wx = fx - ix;
      for (int c = 0; c < 3; ++c) {
        const double v00 = src.at(y0 + iy, x0 + ix, c), v01 = src.at(y0 + iy, x0 + ix1, c);
        const double v10 = src.at(y0 + iy1, x0 + ix, c), v11 = src.at(y0 + iy1, x0 + ix1, c);
        const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

}  // namespace synclr
