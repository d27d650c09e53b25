#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "synclr/error.hpp"
#include "synclr/random.hpp"
#include "synclr/text.hpp"

using namespace synclr;

TEST(Random, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Random, KnownEngineOutput) {
  // mt19937_64 reference: the 10000th output for the default seed.
  std::mt19937_64 ref;
  ref.discard(9999);
  EXPECT_EQ(ref(), 9981545732273789042ULL);
}

TEST(Random, DeriveSeedSeparatesIds) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(7, i));
  EXPECT_EQ(seen.size(), 1000u);
  EXPECT_EQ(derive_seed(7, 1, 2), derive_seed(7, 1, 2));
  EXPECT_NE(derive_seed(7, 1, 2), derive_seed(7, 2, 1));
}

TEST(Random, StableHashIsFnv1a) {
  EXPECT_EQ(stable_hash(""), 0xCBF29CE484222325ULL);
  EXPECT_EQ(stable_hash("a"), 0xAF63DC4C8601EC8CULL);
  EXPECT_EQ(stable_hash("foobar"), 0x85944171F73967E8ULL);
}

TEST(Random, UniformIndexInRangeAndUnbiased) {
  Rng rng(1);
  std::vector<int> counts(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) {
    const auto k = rng.uniform_index(7);
    ASSERT_LT(k, 7u);
    ++counts[k];
  }
  for (int c : counts) EXPECT_NEAR(c, n / 7.0, 5 * std::sqrt(n / 7.0));
}

TEST(Random, UniformIntInclusiveBounds) {
  Rng rng(2);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = rng.uniform_int(-2, 2);
    ASSERT_GE(v, -2);
    ASSERT_LE(v, 2);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 5u);
}

TEST(Random, UniformDoubleMoments) {
  Rng rng(3);
  double sum = 0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 100000, 0.5, 0.005);
}

TEST(Random, NormalMoments) {
  Rng rng(4);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Random, TruncatedNormalWithinTwoSigma) {
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    const double v = rng.truncated_normal(0.02);
    ASSERT_LE(std::abs(v), 0.04);
  }
}

TEST(Random, WeightedIndexFrequencies) {
  Rng rng(6);
  const std::vector<double> w = {0.1, 0.0, 0.6, 0.3};
  std::vector<int> counts(4, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[rng.weighted_index(w)];
  EXPECT_EQ(counts[1], 0);
  for (std::size_t k : {0u, 2u, 3u}) {
    const double sd = std::sqrt(n * w[k] * (1 - w[k]));
    EXPECT_NEAR(counts[k], n * w[k], 5 * sd);
  }
}

TEST(Random, SampleWithoutReplacementDistinct) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const auto s = rng.sample_without_replacement(16, 8);
    ASSERT_EQ(s.size(), 8u);
    std::set<std::size_t> u(s.begin(), s.end());
    ASSERT_EQ(u.size(), 8u);
    ASSERT_LT(*u.rbegin(), 16u);
  }
  EXPECT_TRUE(rng.sample_without_replacement(5, 0).empty());
  EXPECT_EQ(rng.sample_without_replacement(5, 5).size(), 5u);
}

TEST(Random, ShuffleIsPermutation) {
  Rng rng(8);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  rng.shuffle(w);
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

TEST(Text, DedupKeyNormalizes) {
  EXPECT_EQ(text::dedup_key("  Two Tigers,   running!  "), "two tigers running");
  EXPECT_EQ(text::dedup_key("A\tcat.\nSleeps"), "a cat sleeps");
}

TEST(Text, DedupKeyIdempotent) {
  for (const char* s : {"Hello,  World!", "  x  ", "...", "A-b_c d"}) {
    const auto k = text::dedup_key(s);
    EXPECT_EQ(text::dedup_key(k), k);
  }
}

TEST(Text, TrimSplitSlug) {
  EXPECT_EQ(text::trim("  a b \t"), "a b");
  EXPECT_EQ(text::split("a\tb\t", '\t'), (std::vector<std::string>{"a", "b", ""}));
  EXPECT_EQ(text::slug("Red Fox"), "red_fox");
  EXPECT_EQ(text::slug("general-object"), "general_object");
  EXPECT_TRUE(text::contains("abcdef", "cde"));
  EXPECT_FALSE(text::contains("abc", "abcd"));
}

TEST(ErrorCodes, RetryableKinds) {
  EXPECT_TRUE(Error(ErrorCode::transport, "x").retryable());
  EXPECT_TRUE(Error(ErrorCode::timeout, "x").retryable());
  EXPECT_TRUE(Error(ErrorCode::quota, "x").retryable());
  EXPECT_FALSE(Error(ErrorCode::data, "x").retryable());
  EXPECT_THROW(require(false, ErrorCode::data, "boom"), Error);
  try {
    fail(ErrorCode::checksum, "bad");
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::checksum);
    EXPECT_STREQ(e.what(), "bad");
  }
}
