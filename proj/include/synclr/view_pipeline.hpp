#pragma once

// Multi-crop views (one global, n local per image) and the masking plan for
// the masked patch-prediction objective.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "synclr/error.hpp"
#include "synclr/image.hpp"
#include "synclr/random.hpp"

namespace synclr {

struct CropParams {
  int global_size = 32;
  int local_size = 16;  // half the global side
  int local_count = 4;
  double global_area_min = 0.4, global_area_max = 1.0;
  double local_area_min = 0.05, local_area_max = 0.4;
  double aspect_min = 3.0 / 4.0, aspect_max = 4.0 / 3.0;
  double flip_probability = 0.5;
  double brightness = 0.2;  // multiplicative jitter, uniform in [1-b, 1+b]

  void validate() const {
    require(global_size >= kMinImageSide && local_size >= 1 && local_count >= 0, ErrorCode::invalid_argument,
            "invalid crop sizes");
    require(0 < global_area_min && global_area_min <= global_area_max && global_area_max <= 1 &&
                0 < local_area_min && local_area_min <= local_area_max && local_area_max <= 1,
            ErrorCode::invalid_argument, "crop area ranges must satisfy 0 < min <= max <= 1");
    require(0 < aspect_min && aspect_min <= aspect_max, ErrorCode::invalid_argument, "invalid aspect range");
    require(flip_probability >= 0 && flip_probability <= 1 && brightness >= 0 && brightness < 1,
            ErrorCode::invalid_argument, "invalid flip/brightness parameters");
  }
};

struct CropSet {
  Image global_crop;
  std::vector<Image> local_crops;
  std::uint64_t caption_id = 0;
};

struct CropWindow {
  int y = 0, x = 0, h = 0, w = 0;
};

/// Random-resized-crop window: area fraction and log-uniform aspect ratio,
/// ten tries, then the centred largest window of the clamped aspect.
inline CropWindow random_window(int height, int width, double area_min, double area_max, double aspect_min,
                                double aspect_max, Rng& rng) {
  const double area = static_cast<double>(height) * width;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(area_min, area_max);
    const double log_ratio = rng.uniform(std::log(aspect_min), std::log(aspect_max));
    const double ratio = std::exp(log_ratio);
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w >= 1 && h >= 1 && w <= width && h <= height) {
      const int y = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(height - h + 1)));
      const int x = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(width - w + 1)));
      return {y, x, h, w};
    }
  }
  const double in_ratio = static_cast<double>(width) / height;
  int w = width, h = height;
  if (in_ratio < aspect_min) {
    h = static_cast<int>(std::lround(w / aspect_min));
  } else if (in_ratio > aspect_max) {
    w = static_cast<int>(std::lround(h * aspect_max));
  }
  return {(height - h) / 2, (width - w) / 2, h, w};
}

inline void flip_horizontal(Image& img) {
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width / 2; ++x)
      for (int c = 0; c < 3; ++c) std::swap(img.at(y, x, c), img.at(y, img.width - 1 - x, c));
}

inline void scale_brightness(Image& img, double factor) {
  for (float& v : img.pixels) v = static_cast<float>(std::clamp(v * factor, 0.0, 1.0));
}

inline Image augment_view(const Image& image, int out_size, double area_min, double area_max,
                          const CropParams& p, Rng& rng) {
  const CropWindow win = random_window(image.height, image.width, area_min, area_max, p.aspect_min, p.aspect_max, rng);
  Image view = resize_bilinear(image, out_size, out_size, win.y, win.x, win.h, win.w);
  if (rng.bernoulli(p.flip_probability)) flip_horizontal(view);
  if (p.brightness > 0) scale_brightness(view, rng.uniform(1.0 - p.brightness, 1.0 + p.brightness));
  return view;
}

inline CropSet make_crops(const Image& image, const CropParams& p, Rng& rng, std::uint64_t caption_id = 0) {
  p.validate();
  require(image.height >= p.global_size && image.width >= p.global_size, ErrorCode::invalid_argument,
          "image smaller than the global crop size");
  CropSet set;
  set.caption_id = caption_id;
  set.global_crop = augment_view(image, p.global_size, p.global_area_min, p.global_area_max, p, rng);
  for (int i = 0; i < p.local_count; ++i)
    set.local_crops.push_back(augment_view(image, p.local_size, p.local_area_min, p.local_area_max, p, rng));
  return set;
}

struct MaskPlan {
  std::vector<bool> masked_image_flags;                 // one per global crop
  std::vector<std::vector<std::size_t>> masked_tokens;  // per image; empty when unflagged, sorted

  std::size_t flagged_count() const {
    return static_cast<std::size_t>(std::count(masked_image_flags.begin(), masked_image_flags.end(), true));
  }
};

/// floor(ratio * images) images, each with floor(ratio * P) masked patches.
inline MaskPlan plan_masks(std::size_t images, std::size_t patches, Rng& rng, double image_ratio = 0.5,
                           double token_ratio = 0.5) {
  require(patches >= 2, ErrorCode::invalid_argument, "mask plan needs at least two patches per image");
  MaskPlan plan;
  plan.masked_image_flags.assign(images, false);
  plan.masked_tokens.assign(images, {});
  const auto n_images = static_cast<std::size_t>(std::floor(image_ratio * static_cast<double>(images)));
  const auto n_tokens = static_cast<std::size_t>(std::floor(token_ratio * static_cast<double>(patches)));
  for (std::size_t i : rng.sample_without_replacement(images, n_images)) plan.masked_image_flags[i] = true;
  for (std::size_t i = 0; i < images; ++i) {
    if (!plan.masked_image_flags[i]) continue;
    auto tokens = rng.sample_without_replacement(patches, n_tokens);
    std::sort(tokens.begin(), tokens.end());
    plan.masked_tokens[i] = std::move(tokens);
  }
  return plan;
}

}  // namespace synclr
