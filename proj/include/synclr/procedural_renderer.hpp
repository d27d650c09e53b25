#pragma once

// Deterministic geometric image generator. All geometry and colour math is
// integer, so output is bit-identical on every platform; the only floating
// point step is the final division by 255.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>

#include "synclr/image.hpp"
#include "synclr/random.hpp"
#include "synclr/text.hpp"

namespace synclr {

/// Stable signature of a concept name (case and whitespace insensitive).
inline std::uint64_t concept_signature(const std::string& concept_name) {
  return stable_hash(text::to_lower(text::normalize_whitespace(concept_name)));
}

struct PrimitiveFamily {
  int hue_band = 0;   // 12 bands of 30 degrees
  int shape = 0;      // 0 disc, 1 square, 2 triangle, 3 ring
  int count = 1;      // primitives per image
  int position_band = 0;  // vertical band of the layout: top, middle, bottom

  bool operator==(const PrimitiveFamily&) const = default;
};

inline PrimitiveFamily primitive_family(std::uint64_t signature) {
  const std::uint64_t h = splitmix64(signature);
  PrimitiveFamily f;
  f.hue_band = static_cast<int>(h % 12);
  f.shape = static_cast<int>((h >> 8) % 4);
  f.count = 1 + static_cast<int>((h >> 16) % 3);
  f.position_band = static_cast<int>((h >> 24) % 3);
  return f;
}

struct RenderParams {
  int noise_amplitude = 20;  // additive uniform noise, in 1/255 units
  int hue_jitter = 10;       // degrees, keeps hue inside its band
  int position_jitter = 40;  // in 1/256 of the image side
  int size_jitter = 12;      // in 1/256 of the image side
  int contrast = 256;        // primitive colour = bg + (colour - bg) * contrast / 256
};

struct Rgb8 {
  int r, g, b;
};

/// Integer HSV -> RGB; hue in degrees, s and v in [0, 255].
inline Rgb8 hsv_to_rgb(int hue, int s, int v) {
  hue = ((hue % 360) + 360) % 360;
  const int region = hue / 60;
  const int rem = (hue - region * 60) * 255 / 60;
  const int p = v * (255 - s) / 255;
  const int q = v * (255 - s * rem / 255) / 255;
  const int t = v * (255 - s * (255 - rem) / 255) / 255;
  switch (region) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

namespace detail {

// Membership test in a 256-unit virtual frame centred at (cx, cy) with
// half-size r.
inline bool inside(int shape, int px, int py, int cx, int cy, int r) {
  const int dx = px - cx, dy = py - cy;
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= r * 4 / 5 && std::abs(dy) <= r * 4 / 5;
    case 2: {
      // Upward triangle: apex (0,-r), base y = r*3/5.
      if (dy > r * 3 / 5 || dy < -r) return false;
      return 2 * std::abs(dx) * 8 <= (dy + r) * 9;
    }
    default: {
      const int d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= (r * 11 / 20) * (r * 11 / 20);
    }
  }
}

}  // namespace detail

/// Background tone, independent of the family.
inline Rgb8 scene_background(std::uint64_t scene) {
  Rng rng(derive_seed(scene, 0x5343454E));
  const int hue = static_cast<int>(rng.uniform_int(0, 359));
  const int sat = static_cast<int>(rng.uniform_int(20, 90));
  const int val = static_cast<int>(rng.uniform_int(60, 190));
  return hsv_to_rgb(hue, sat, val);
}

/// Renders a size x size image of the family selected by `signature`.
/// `scene` fixes the background; without it the background is drawn from
/// `noise_seed` like the rest of the instance variation.
inline Image procedural_render(std::uint64_t signature, std::uint64_t noise_seed, int size,
                               const RenderParams& params = {}, std::optional<std::uint64_t> scene = {}) {
  require(size >= kMinImageSide, ErrorCode::invalid_argument, "render size must be >= 8");
  const PrimitiveFamily fam = primitive_family(signature);
  Rng rng(derive_seed(noise_seed, 0x52454E44));
  auto jitter = [&](int amplitude) {
    return amplitude > 0 ? static_cast<int>(rng.uniform_int(-amplitude, amplitude)) : 0;
  };

  const Rgb8 bg = scene_background(scene ? *scene : derive_seed(noise_seed, 0x42474E44));

  struct Primitive {
    int cx, cy, r;
    Rgb8 color;
  };
  Primitive prims[3];
  const int band_centre = 64 + fam.position_band * 64;
  for (int i = 0; i < fam.count; ++i) {
    const int slot_x = (2 * i + 1) * 256 / (2 * fam.count);
    Primitive& p = prims[i];
    p.cx = slot_x + jitter(params.position_jitter) / fam.count;
    p.cy = band_centre + jitter(params.position_jitter);
    p.r = std::max(12, 70 / fam.count + 18 + jitter(params.size_jitter));
    const int hue = fam.hue_band * 30 + 15 + jitter(std::min(params.hue_jitter, 14));
    const Rgb8 full = hsv_to_rgb(hue, 200 + jitter(30), 215 + jitter(30));
    p.color = {bg.r + (full.r - bg.r) * params.contrast / 256, bg.g + (full.g - bg.g) * params.contrast / 256,
               bg.b + (full.b - bg.b) * params.contrast / 256};
  }

  Image img(size, size);
  for (int y = 0; y < size; ++y) {
    const int py = (2 * y + 1) * 128 / size;
    for (int x = 0; x < size; ++x) {
      const int px = (2 * x + 1) * 128 / size;
      Rgb8 c = bg;
      for (int i = 0; i < fam.count; ++i)
        if (detail::inside(fam.shape, px, py, prims[i].cx, prims[i].cy, prims[i].r)) c = prims[i].color;
      const int rgb[3] = {c.r, c.g, c.b};
      for (int ch = 0; ch < 3; ++ch) {
        const int v = std::clamp(rgb[ch] + jitter(params.noise_amplitude), 0, 255);
        img.at(y, x, ch) = static_cast<float>(v) / 255.0f;
      }
    }
  }
  return img;
}

}  // namespace synclr
