#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "modlab/random.hpp"

using modlab::Philox4x32;
using modlab::Rng;

// Known-answer vectors published with the Random123 reference implementation.
TEST(Philox, KnownAnswerZero) {
    const Philox4x32 p(0);
    const auto out = p({0, 0, 0, 0});
    EXPECT_EQ(out, (Philox4x32::Block{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
}

TEST(Philox, KnownAnswerOnes) {
    const Philox4x32 p(0xffffffffffffffffULL);
    const auto out = p({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu});
    EXPECT_EQ(out, (Philox4x32::Block{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
}

TEST(Philox, KnownAnswerPi) {
    const Philox4x32 p(0x299f31d0a4093822ULL);
    const auto out = p({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u});
    EXPECT_EQ(out, (Philox4x32::Block{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(SplitMix, ReferenceSequence) {
    // First outputs of splitmix64 seeded with 0.
    std::uint64_t s = 0;
    EXPECT_EQ(modlab::splitmix64(s), 0xe220a8397b1dcdafULL);
    EXPECT_EQ(modlab::splitmix64(s), 0x6e789e6aa1b965f4ULL);
    EXPECT_EQ(modlab::splitmix64(s), 0x06c45d188009454fULL);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, SubstreamsDiffer) {
    Rng a = Rng::substream(7, {1, 0});
    Rng b = Rng::substream(7, {1, 1});
    Rng c = Rng::substream(7, {2, 0});
    Rng d(7);
    std::set<std::uint64_t> firsts = {a.next_u64(), b.next_u64(), c.next_u64(), d.next_u64()};
    EXPECT_EQ(firsts.size(), 4u);
}

TEST(Rng, UniformIntInRangeAndUnbiased) {
    Rng rng(3);
    const std::uint64_t bound = 7;
    std::vector<int> counts(bound, 0);
    const int draws = 700000;
    for (int i = 0; i < draws; ++i) {
        const auto v = rng.uniform_int(bound);
        ASSERT_LT(v, bound);
        ++counts[v];
    }
    const double expected = draws / 7.0;
    double chi2 = 0;
    for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // 6 degrees of freedom, alpha = 0.001 critical value 22.46
    EXPECT_LT(chi2, 22.46);
}

TEST(Rng, Uniform01Moments) {
    Rng rng(11);
    const int n = 1000000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform01();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
        s2 += u * u;
    }
    const double mean = s / n;
    EXPECT_NEAR(mean, 0.5, 3 * std::sqrt(1.0 / 12.0 / n));
    EXPECT_NEAR(s2 / n - mean * mean, 1.0 / 12.0, 1e-3);
}

TEST(Rng, NormalMoments) {
    Rng rng(5);
    const int n = 1000000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        s += z;
        s2 += z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 3.0 / std::sqrt(n));
    EXPECT_NEAR(s2 / n, 1.0, 5e-3);
}

TEST(Rng, ShuffleIsPermutation) {
    Rng rng(9);
    std::vector<int> v(100);
    std::iota(v.begin(), v.end(), 0);
    auto w = v;
    rng.shuffle(std::span<int>(w));
    EXPECT_NE(v, w);
    std::sort(w.begin(), w.end());
    EXPECT_EQ(v, w);
}

TEST(Rng, BernoulliEdges) {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_FALSE(rng.bernoulli(0.0));
        EXPECT_TRUE(rng.bernoulli(1.0));
    }
}
