#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "synclr/procedural_renderer.hpp"
#include "synclr/view_pipeline.hpp"

using namespace synclr;

namespace {

Image sample_image(int size = 32) { return procedural_render(concept_signature("teapot"), 3, size); }

CropParams identity_params() {
  CropParams p;
  p.global_area_min = p.global_area_max = 1.0;
  p.aspect_min = p.aspect_max = 1.0;
  p.flip_probability = 0.0;
  p.brightness = 0.0;
  return p;
}

}  // namespace

TEST(Crops, OneGlobalFourLocal) {
  Rng rng(1);
  const auto set = make_crops(sample_image(), CropParams{}, rng, 17);
  EXPECT_EQ(set.caption_id, 17u);
  EXPECT_EQ(set.global_crop.height, 32);
  EXPECT_EQ(set.global_crop.width, 32);
  ASSERT_EQ(set.local_crops.size(), 4u);
  for (const auto& l : set.local_crops) {
    EXPECT_EQ(l.height, 16);
    EXPECT_EQ(l.width, 16);
  }
}

TEST(Crops, IdentityAugmentationReturnsOriginal) {
  Rng rng(2);
  const Image img = sample_image();
  EXPECT_EQ(make_crops(img, identity_params(), rng).global_crop, img);
}

TEST(Crops, IdentityAugmentationResizesLargerImage) {
  Rng rng(2);
  const Image img = sample_image(64);
  EXPECT_EQ(make_crops(img, identity_params(), rng).global_crop, resize_bilinear(img, 32, 32));
}

TEST(Crops, DeterministicForSeed) {
  const Image img = sample_image();
  Rng a(9), b(9), c(10);
  const auto x = make_crops(img, CropParams{}, a), y = make_crops(img, CropParams{}, b), z = make_crops(img, CropParams{}, c);
  EXPECT_EQ(x.global_crop, y.global_crop);
  EXPECT_EQ(x.local_crops, y.local_crops);
  EXPECT_NE(x.global_crop, z.global_crop);
}

TEST(Crops, PixelsStayInUnitInterval) {
  CropParams p;
  p.brightness = 0.9;
  Rng rng(4);
  const Image img = sample_image();
  for (int i = 0; i < 50; ++i) {
    const auto set = make_crops(img, p, rng);
    EXPECT_NO_THROW(validate_image(set.global_crop));
    for (const auto& l : set.local_crops) EXPECT_NO_THROW(validate_image(l));
  }
}

TEST(Crops, WindowAreaWithinRange) {
  Rng rng(5);
  for (int i = 0; i < 2000; ++i) {
    const auto w = random_window(32, 32, 0.05, 0.4, 0.75, 4.0 / 3.0, rng);
    ASSERT_GE(w.y, 0);
    ASSERT_GE(w.x, 0);
    ASSERT_LE(w.y + w.h, 32);
    ASSERT_LE(w.x + w.w, 32);
    const double frac = w.h * w.w / 1024.0;
    // Rounding each side to whole pixels moves the area by at most one row and column.
    EXPECT_GE(frac, 0.05 - (w.h + w.w + 1) / 1024.0);
    EXPECT_LE(frac, 0.4 + (w.h + w.w + 1) / 1024.0);
  }
}

TEST(Crops, FlipAlwaysMirrors) {
  CropParams p = identity_params();
  p.flip_probability = 1.0;
  Rng rng(6);
  const Image img = sample_image();
  const auto set = make_crops(img, p, rng);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) ASSERT_EQ(set.global_crop.at(y, x, c), img.at(y, 31 - x, c));
}

TEST(Crops, Errors) {
  Rng rng(7);
  EXPECT_THROW(make_crops(sample_image(16), CropParams{}, rng), Error);
  CropParams bad;
  bad.global_area_min = 0.0;
  EXPECT_THROW(make_crops(sample_image(), bad, rng), Error);
  bad = CropParams{};
  bad.local_area_min = 0.5;
  EXPECT_THROW(make_crops(sample_image(), bad, rng), Error);
}

TEST(Masks, EightImagesSixteenPatches) {
  Rng rng(8);
  const auto plan = plan_masks(8, 16, rng);
  EXPECT_EQ(plan.flagged_count(), 4u);
  for (std::size_t i = 0; i < 8; ++i) {
    if (plan.masked_image_flags[i]) {
      EXPECT_EQ(plan.masked_tokens[i].size(), 8u);
      std::set<std::size_t> uniq(plan.masked_tokens[i].begin(), plan.masked_tokens[i].end());
      EXPECT_EQ(uniq.size(), 8u);
      EXPECT_LT(*uniq.rbegin(), 16u);
    } else {
      EXPECT_TRUE(plan.masked_tokens[i].empty());
    }
  }
}

TEST(Masks, FloorBoundary) {
  Rng rng(9);
  EXPECT_EQ(plan_masks(1, 2, rng).flagged_count(), 0u);
  const auto odd = plan_masks(7, 5, rng);
  EXPECT_EQ(odd.flagged_count(), 3u);
  for (std::size_t i = 0; i < 7; ++i)
    if (odd.masked_image_flags[i]) EXPECT_EQ(odd.masked_tokens[i].size(), 2u);
  EXPECT_THROW(plan_masks(4, 1, rng), Error);
}

TEST(Masks, TokenFrequencyQuarter) {
  Rng rng(10);
  const std::size_t images = 8, patches = 16;
  std::vector<std::vector<int>> hits(images, std::vector<int>(patches, 0));
  const int n = 10000;
  for (int t = 0; t < n; ++t) {
    const auto plan = plan_masks(images, patches, rng);
    for (std::size_t i = 0; i < images; ++i)
      for (auto p : plan.masked_tokens[i]) ++hits[i][p];
  }
  const double cell_sigma = std::sqrt(0.25 * 0.75 / n);
  for (std::size_t p = 0; p < patches; ++p) {
    int pooled = 0;
    for (std::size_t i = 0; i < images; ++i) {
      pooled += hits[i][p];
      EXPECT_NEAR(hits[i][p] / double(n), 0.25, 5 * cell_sigma);
    }
    EXPECT_NEAR(pooled / double(n * images), 0.25, 0.01) << p;
  }
}

TEST(Masks, ReproducibleFromSeed) {
  Rng a(11), b(11);
  const auto x = plan_masks(16, 16, a), y = plan_masks(16, 16, b);
  EXPECT_EQ(x.masked_image_flags, y.masked_image_flags);
  EXPECT_EQ(x.masked_tokens, y.masked_tokens);
}
