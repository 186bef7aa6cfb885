#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "modlab/analytics.hpp"
#include "modlab/sampling.hpp"

namespace sp = modlab::sampling;
namespace an = modlab::analytics;
using modlab::Rng;

TEST(Uniform, CoordinateMeans) {
    Rng rng(1);
    const int draws = 1000000;
    std::vector<double> sums(4, 0.0);
    for (int i = 0; i < draws; ++i) {
        const auto x = sp::sample_uniform(4, 2, rng);
        for (int j = 0; j < 4; ++j) sums[static_cast<std::size_t>(j)] += static_cast<double>(x.entries[static_cast<std::size_t>(j)]);
    }
    const double se = std::sqrt(0.25 / draws);
    for (double s : sums) EXPECT_NEAR(s / draws, 0.5, 3 * se);
}

TEST(Uniform, RejectsQOne) {
    Rng rng(1);
    EXPECT_THROW((void)sp::sample_uniform(4, 1, rng), modlab::InvalidArgument);
}

TEST(Uniform, ZeroFreeRate) {
    Rng rng(2);
    const int draws = 1000000;
    int zero_free = 0;
    for (int i = 0; i < draws; ++i) zero_free += sp::sample_uniform(8, 31, rng).zero_count() == 0;
    const double p = an::gap_lower_bound({31, 8, 1.0, 0.0}).prefactor;
    EXPECT_NEAR(p, 0.769, 5e-4);
    EXPECT_NEAR(static_cast<double>(zero_free) / draws, p, 3 * std::sqrt(p * (1 - p) / draws));
}

TEST(Sparse, SingleCoordinate) {
    Rng rng(3);
    const sp::SparseCountSampler counts(1);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_EQ(counts(rng), 1);
        const auto x = sp::sample_sparse(1, 7, rng, counts);
        ASSERT_EQ(x.size(), 1u);
        EXPECT_LT(x.entries[0], 7);
    }
}

namespace {

// Recovers z by drawing with strict fill, where populated means non-zero.
std::vector<double> z_histogram(int n, int draws, std::uint64_t seed) {
    Rng rng(seed);
    const sp::SparseCountSampler counts(n);
    std::vector<double> h(static_cast<std::size_t>(n) + 1, 0.0);
    for (int i = 0; i < draws; ++i) {
        const auto x = sp::sample_sparse(n, 31, rng, counts, true);
        h[static_cast<std::size_t>(n - x.zero_count())] += 1;
    }
    return h;
}

}  // namespace

TEST(Sparse, ZHistogramTotalVariation) {
    const int n = 8, draws = 1000000;
    const auto h = z_histogram(n, draws, 4);
    double norm = 0;
    for (int z = 1; z <= n; ++z) norm += 1 / std::sqrt(n - z + 1.0);
    double tv = h[0] / draws;
    for (int z = 1; z <= n; ++z) tv += std::fabs(h[static_cast<std::size_t>(z)] / draws - 1 / std::sqrt(n - z + 1.0) / norm);
    EXPECT_LT(tv / 2, 0.005);
}

TEST(Sparse, ZChiSquare) {
    // Critical values of chi-square at alpha = 0.001 for N - 1 degrees of freedom.
    const std::vector<std::pair<int, double>> cases = {{4, 16.266}, {8, 24.322}, {16, 37.697}};
    for (const auto& [n, crit] : cases) {
        const int draws = 1000000;
        const auto h = z_histogram(n, draws, 50 + static_cast<std::uint64_t>(n));
        EXPECT_EQ(h[0], 0.0);
        double norm = 0;
        for (int z = 1; z <= n; ++z) norm += 1 / std::sqrt(n - z + 1.0);
        double chi2 = 0;
        for (int z = 1; z <= n; ++z) {
            const double e = draws / std::sqrt(n - z + 1.0) / norm;
            chi2 += (h[static_cast<std::size_t>(z)] - e) * (h[static_cast<std::size_t>(z)] - e) / e;
        }
        EXPECT_LT(chi2, crit) << n;
    }
}

TEST(Sparse, MeanMatchesExpectedX2) {
    Rng rng(5);
    const sp::SparseCountSampler counts(8);
    const int draws = 1000000;
    double s = 0, s2 = 0;
    for (int i = 0; i < draws; ++i) {
        const double v = static_cast<double>(sp::sample_sparse(8, 31, rng, counts).sum()) / 31.0;
        s += v;
        s2 += v * v;
    }
    const double mean = s / draws;
    const double se = std::sqrt((s2 / draws - mean * mean) / draws);
    EXPECT_NEAR(mean, an::expected_x2_exact(8, 31, 1), 3 * se);
}

TEST(Sparse, DefaultFillMayContainZeros) {
    Rng rng(6);
    const sp::SparseCountSampler counts(1);
    int zeros = 0;
    for (int i = 0; i < 10000; ++i) zeros += sp::sample_sparse(1, 5, rng, counts).entries[0] == 0;
    EXPECT_NEAR(zeros / 10000.0, 0.2, 0.03);
}

TEST(Labels, Examples) {
    const auto a = sp::make_labels({std::vector<std::int64_t>(8, 0)}, 31);
    EXPECT_EQ(a.y_q, 0);
    EXPECT_EQ(a.quotient, 0);
    const auto b = sp::make_labels({std::vector<std::int64_t>(8, 30)}, 31);
    EXPECT_EQ(b.y_q, 23);
    EXPECT_EQ(b.quotient, 7);
    EXPECT_EQ(b.total(31), 240);
    const auto c = sp::make_labels({{96, 1}}, 97);
    EXPECT_EQ(c.y_q, 0);
    EXPECT_EQ(c.quotient, 1);
    EXPECT_THROW((void)sp::make_labels({{31, 0}}, 31), modlab::InvalidArgument);
}

TEST(Labels, AuxLabel) {
    const auto b = sp::make_labels({std::vector<std::int64_t>(8, 30)}, 31);
    EXPECT_EQ(sp::aux_label(b, 31, 5), 85);
    const auto small = sp::make_labels({{3, 4}}, 31);
    EXPECT_EQ(sp::aux_label(small, 31, 5), small.y_q);
}

TEST(Labels, ReconstructionAndCongruence) {
    for (auto dist : {sp::Distribution::uniform, sp::Distribution::sparse}) {
        const auto ds = sp::generate_dataset(16, 97, dist, 20000, 7);
        for (const auto& e : ds.examples) {
            ASSERT_EQ(e.quotient * 97 + e.y_q, e.x.sum());
            ASSERT_LE(e.quotient, 16 * 96 / 97);
            for (int k = 2; k <= 9; ++k) ASSERT_EQ(sp::aux_label(e, 97, k) % 97, e.y_q);
        }
    }
}

TEST(SelectTarget, Frequencies) {
    const auto e = sp::make_labels({std::vector<std::int64_t>(8, 30)}, 31);
    Rng rng(8);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_EQ(sp::select_target(e, {8, 31, 5, 0.0}, rng).kind, sp::ModulusKind::primary_q);
        const auto t = sp::select_target(e, {8, 31, 5, 1.0}, rng);
        EXPECT_EQ(t.kind, sp::ModulusKind::auxiliary_kq);
        EXPECT_EQ(t.value, 85);
    }
    const int calls = 1000000;
    int aux = 0;
    for (int i = 0; i < calls; ++i) aux += sp::select_target(e, {8, 31, 5, 0.3}, rng).kind == sp::ModulusKind::auxiliary_kq;
    EXPECT_NEAR(static_cast<double>(aux) / calls, 0.3, 3 * std::sqrt(0.21 / calls));
}

TEST(Dataset, Deterministic) {
    const auto a = sp::generate_dataset(8, 31, sp::Distribution::sparse, 5000, 11);
    const auto b = sp::generate_dataset(8, 31, sp::Distribution::sparse, 5000, 11);
    const auto c = sp::generate_dataset(8, 31, sp::Distribution::sparse, 5000, 12);
    EXPECT_EQ(a.examples, b.examples);
    EXPECT_NE(a.examples, c.examples);
    const auto prefix = sp::generate_dataset(8, 31, sp::Distribution::sparse, 100, 11);
    for (std::size_t i = 0; i < prefix.size(); ++i) EXPECT_EQ(prefix.examples[i], a.examples[i]);
}

TEST(Distribution, Names) {
    EXPECT_EQ(sp::parse_distribution("uniform"), sp::Distribution::uniform);
    EXPECT_EQ(sp::to_string(sp::Distribution::sparse), "sparse");
    EXPECT_THROW((void)sp::parse_distribution("dense"), modlab::InvalidArgument);
}
