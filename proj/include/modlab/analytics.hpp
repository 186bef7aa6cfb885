#pragma once

// Closed-form and Monte Carlo quantities for the wrap-count analysis of
// modular addition with uniform inputs x_i ~ U{0..q-1}, S_N = sum x_i.
//
// Exact results are rationals with denominators dividing q^N.  Sums with
// square roots are evaluated in 50-digit binary floating point.

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "modlab/error.hpp"
#include "modlab/problem_spec.hpp"
#include "modlab/random.hpp"

namespace modlab::analytics {

using BigInt = boost::multiprecision::cpp_int;
using Rational = boost::multiprecision::cpp_rational;
using BigFloat = boost::multiprecision::cpp_bin_float_50;

/// Guideline limits for exact (enumerative) computations.
inline constexpr std::int64_t kExactMaxN = 64;
inline constexpr std::int64_t kExactMaxQ = 1024;

[[nodiscard]] inline bool exact_mode_feasible(std::int64_t n, std::int64_t q) noexcept {
    return n >= 1 && q >= 2 && n <= kExactMaxN && q <= kExactMaxQ;
}

/// C(n, k); zero outside 0 <= k <= n.
[[nodiscard]] inline BigInt binomial(std::int64_t n, std::int64_t k) {
    if (n < 0 || k < 0 || k > n) return 0;
    k = std::min(k, n - k);
    BigInt result = 1;
    for (std::int64_t i = 1; i <= k; ++i) {
        result *= n - k + i;
        result /= i;
    }
    return result;
}

[[nodiscard]] inline double to_double(const Rational& r) { return r.convert_to<double>(); }

/// Nearest rational on a 1e-12 grid, so decimal inputs like 0.4 map to 2/5.
[[nodiscard]] inline Rational to_rational(double v) {
    constexpr std::int64_t kScale = 1'000'000'000'000;
    return Rational(BigInt(std::llround(v * static_cast<double>(kScale))), BigInt(kScale));
}

/// Exact decimal literal such as "0.35" or "-2.5e-1" as a rational.
[[nodiscard]] inline Rational parse_decimal(const std::string& text) {
    std::string mantissa = text;
    std::int64_t exponent = 0;
    if (const auto e = text.find_first_of("eE"); e != std::string::npos) {
        mantissa = text.substr(0, e);
        exponent = std::stoll(text.substr(e + 1));
    }
    bool negative = false;
    std::size_t i = 0;
    if (i < mantissa.size() && (mantissa[i] == '+' || mantissa[i] == '-')) negative = mantissa[i++] == '-';
    BigInt digits = 0;
    bool seen_digit = false, seen_point = false;
    for (; i < mantissa.size(); ++i) {
        const char c = mantissa[i];
        if (c == '.' && !seen_point) {
            seen_point = true;
        } else if (c >= '0' && c <= '9') {
            digits = digits * 10 + (c - '0');
            seen_digit = true;
            if (seen_point) --exponent;
        } else {
            throw InvalidArgument("parse_decimal: not a decimal number: '" + text + "'");
        }
    }
    if (!seen_digit) throw InvalidArgument("parse_decimal: not a decimal number: '" + text + "'");
    Rational value(digits);
    const BigInt ten_pow = boost::multiprecision::pow(BigInt(10), static_cast<unsigned>(std::abs(exponent)));
    if (exponent >= 0)
        value *= ten_pow;
    else
        value /= ten_pow;
    return negative ? -value : value;
}

namespace detail {

inline void check_nq(std::int64_t n, std::int64_t q) {
    modlab::detail::require(n >= 1, "analytics: N must be >= 1, got " + std::to_string(n));
    modlab::detail::require(q >= 2, "analytics: q must be >= 2, got " + std::to_string(q));
}

}  // namespace detail

/// Exact distribution of S_N.  counts[s] is the number of tuples in
/// {0..q-1}^N summing to s; the mass is counts[s] / q^N.
struct ExactPMF {
    std::int64_t n = 0;
    std::int64_t q = 0;
    BigInt denominator;
    std::vector<BigInt> counts;

    [[nodiscard]] std::int64_t max_sum() const noexcept { return n * (q - 1); }
    [[nodiscard]] Rational mass(std::int64_t s) const {
        if (s < 0 || s > max_sum()) return 0;
        return Rational(counts[static_cast<std::size_t>(s)], denominator);
    }
    [[nodiscard]] Rational total() const {
        BigInt acc = 0;
        for (const auto& c : counts) acc += c;
        return Rational(acc, denominator);
    }
};

/// Inclusion-exclusion form of the N-fold convolution of U_q:
///   q^N P(S_N = s) = sum_{k=0}^{floor(s/q)} (-1)^k C(N,k) C(s - qk + N - 1, N - 1).
/// Only the lower half of the support is evaluated; the rest is mirrored.
[[nodiscard]] inline ExactPMF exact_sum_pmf(std::int64_t n, std::int64_t q) {
    detail::check_nq(n, q);
    ExactPMF pmf;
    pmf.n = n;
    pmf.q = q;
    pmf.denominator = boost::multiprecision::pow(BigInt(q), static_cast<unsigned>(n));
    const std::int64_t top = n * (q - 1);
    const std::int64_t half = top / 2;
    std::vector<BigInt> counts(static_cast<std::size_t>(top + 1));
    for (std::int64_t k = 0; k <= n && q * k <= half; ++k) {
        const BigInt outer = binomial(n, k);
        // binom tracks C(m, N-1) for m = s - qk + N - 1, starting at m = N - 1.
        BigInt binom = 1;
        for (std::int64_t s = q * k; s <= half; ++s) {
            if (s > q * k) {
                const std::int64_t m = s - q * k + n - 1;
                binom *= m;
                binom /= (m - n + 1);
            }
            if (k % 2 == 0) counts[static_cast<std::size_t>(s)] += outer * binom;
            else counts[static_cast<std::size_t>(s)] -= outer * binom;
        }
    }
    for (std::int64_t s = half + 1; s <= top; ++s)
        counts[static_cast<std::size_t>(s)] = counts[static_cast<std::size_t>(top - s)];
    pmf.counts = std::move(counts);
    return pmf;
}

/// P(D_Kq = 0) in closed form,
///   q^-N sum_{i=0}^{K-1} (-1)^i C(N,i) C((K-i)q + N - 1, N).
/// The upper binomial keeps lower index N, which is what the hockey-stick
/// identity gives for sum_{s<M} C(s+N-1, N-1).
[[nodiscard]] inline Rational prob_zero_wraps(std::int64_t n, std::int64_t q, std::int64_t k) {
    detail::check_nq(n, q);
    modlab::detail::require(k >= 1, "prob_zero_wraps: K must be >= 1, got " + std::to_string(k));
    BigInt acc = 0;
    for (std::int64_t i = 0; i <= std::min(k - 1, n); ++i) {
        const BigInt term = binomial(n, i) * binomial((k - i) * q + n - 1, n);
        if (i % 2 == 0) acc += term;
        else acc -= term;
    }
    return Rational(acc, boost::multiprecision::pow(BigInt(q), static_cast<unsigned>(n)));
}

/// P(D_Kq = 0) as the partial sum of the PMF over s <= Kq - 1.
[[nodiscard]] inline Rational prob_zero_wraps(const ExactPMF& pmf, std::int64_t k) {
    modlab::detail::require(k >= 1, "prob_zero_wraps: K must be >= 1, got " + std::to_string(k));
    BigInt acc = 0;
    const std::int64_t last = std::min(k * pmf.q - 1, pmf.max_sum());
    for (std::int64_t s = 0; s <= last; ++s) acc += pmf.counts[static_cast<std::size_t>(s)];
    return Rational(acc, pmf.denominator);
}

/// E[X0] = N(q-1)/(2q).
[[nodiscard]] inline Rational expected_x0(std::int64_t n, std::int64_t q) {
    detail::check_nq(n, q);
    return Rational(BigInt(n) * (q - 1), BigInt(2 * q));
}

/// E[X1] = ((1-r) + r/K) E[X0].
[[nodiscard]] inline Rational expected_x1(std::int64_t n, std::int64_t q, std::int64_t k, const Rational& r) {
    modlab::detail::require(k >= 1, "expected_x1: K must be >= 1");
    modlab::detail::require(r >= 0 && r <= 1, "expected_x1: r must lie in [0,1]");
    return ((1 - r) + r / k) * expected_x0(n, q);
}

[[nodiscard]] inline Rational expected_x1(std::int64_t n, std::int64_t q, std::int64_t k, double r) {
    return expected_x1(n, q, k, to_rational(r));
}

/// Sparse-input weights g(z) proportional to 1/sqrt(N - z + 1) on
/// {z_min..N}, normalized; index i holds g(z_min + i).
[[nodiscard]] inline std::vector<double> sparse_z_weights(std::int64_t n, int z_min = 1) {
    modlab::detail::require(n >= 1, "sparse_z_weights: N must be >= 1");
    modlab::detail::require(z_min == 0 || z_min == 1, "sparse_z_weights: z_min must be 0 or 1");
    std::vector<BigFloat> raw;
    BigFloat total = 0;
    for (std::int64_t z = z_min; z <= n; ++z) {
        raw.push_back(1 / boost::multiprecision::sqrt(BigFloat(n - z + 1)));
        total += raw.back();
    }
    std::vector<double> out;
    out.reserve(raw.size());
    for (const auto& w : raw) out.push_back(static_cast<double>(w / total));
    return out;
}

/// E[X2] = ((q-1)/(2q)) (sum z w(z)) / (sum w(z)), w(z) = 1/sqrt(N-z+1),
/// with z running over {z_min..N}.
[[nodiscard]] inline double expected_x2_exact(std::int64_t n, std::int64_t q, int z_min = 1) {
    detail::check_nq(n, q);
    modlab::detail::require(z_min == 0 || z_min == 1, "expected_x2_exact: z_min must be 0 or 1");
    BigFloat num = 0, den = 0;
    for (std::int64_t z = z_min; z <= n; ++z) {
        const BigFloat w = 1 / boost::multiprecision::sqrt(BigFloat(n - z + 1));
        num += z * w;
        den += w;
    }
    return static_cast<double>(BigFloat(q - 1) / BigFloat(2 * q) * num / den);
}

/// E[D_Kq] = sum_s floor(s/(Kq)) P(S_N = s).
[[nodiscard]] inline Rational expected_wraps_exact(const ExactPMF& pmf, std::int64_t k) {
    modlab::detail::require(k >= 1, "expected_wraps_exact: K must be >= 1");
    const std::int64_t kq = k * pmf.q;
    BigInt acc = 0;
    for (std::int64_t s = kq; s <= pmf.max_sum(); ++s) acc += pmf.counts[static_cast<std::size_t>(s)] * (s / kq);
    return Rational(acc, pmf.denominator);
}

[[nodiscard]] inline Rational expected_wraps_exact(std::int64_t n, std::int64_t q, std::int64_t k) {
    return expected_wraps_exact(exact_sum_pmf(n, q), k);
}

struct WrapBounds {
    Rational lo;
    Rational hi;
};

/// max(0, N(q-1)/(2qK) - 1) <= E[D_Kq] <= N(q-1)/(2qK).
[[nodiscard]] inline WrapBounds expected_wraps_bounds(std::int64_t n, std::int64_t q, std::int64_t k) {
    modlab::detail::require(k >= 1, "expected_wraps_bounds: K must be >= 1");
    const Rational hi = expected_x0(n, q) / k;
    Rational lo = hi - 1;
    if (lo < 0) lo = 0;
    return {lo, hi};
}

/// rho = ((1-r) + r/K) / (2/3).
[[nodiscard]] inline double rho(std::int64_t k, double r) {
    modlab::detail::require(k >= 1, "rho: K must be >= 1");
    modlab::detail::require(r >= 0.0 && r <= 1.0, "rho: r must lie in [0,1]");
    return ((1.0 - r) + r / static_cast<double>(k)) * 1.5;
}

[[nodiscard]] inline Rational rho_exact(std::int64_t k, const Rational& r) {
    return ((1 - r) + r / k) * Rational(3, 2);
}

struct GapBoundInput {
    std::int64_t q = 2;
    std::int64_t n = 1;
    double eps = 1.0;
    double delta = 0.0;
};

struct GapBound {
    double prefactor;  ///< (1 - 1/q)^N, the zero-free mass under uniform inputs
    double bound;      ///< eps * prefactor - delta; may be negative
};

[[nodiscard]] inline GapBound gap_lower_bound(const GapBoundInput& in) {
    modlab::detail::require(in.q >= 2, "gap_lower_bound: q must be >= 2");
    modlab::detail::require(in.n >= 0, "gap_lower_bound: N must be >= 0");
    modlab::detail::require(in.eps >= 0.0 && in.delta >= 0.0, "gap_lower_bound: eps and delta must be >= 0");
    const double prefactor = std::pow(1.0 - 1.0 / static_cast<double>(in.q), static_cast<double>(in.n));
    return {prefactor, in.eps * prefactor - in.delta};
}

struct RhoCell {
    std::int64_t k;
    double r;
    double rho;
    bool in_band;  ///< 0.8 <= rho <= 1.2
};

inline constexpr double kRhoBandLo = 0.8;
inline constexpr double kRhoBandHi = 1.2;

/// Row-major grid over Ks (rows) and rs (columns).
[[nodiscard]] inline std::vector<RhoCell> rho_heatmap(const std::vector<std::int64_t>& ks,
                                                      const std::vector<double>& rs) {
    modlab::detail::require(!ks.empty() && !rs.empty(), "rho_heatmap: axes must be non-empty");
    std::vector<RhoCell> grid;
    grid.reserve(ks.size() * rs.size());
    for (auto k : ks)
        for (double r : rs) {
            const double v = rho(k, r);
            // Tolerance keeps decimal grid points such as rho = 1.2 inside.
            grid.push_back({k, r, v, v >= kRhoBandLo - 1e-12 && v <= kRhoBandHi + 1e-12});
        }
    return grid;
}

struct MonteCarloEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::int64_t samples = 0;
    std::uint64_t seed = 0;
};

/// Sample mean of D_Kq = floor(S_N/(Kq)) under uniform inputs.  Samples are
/// split into fixed shards of 65536, each drawn from substream (seed, shard),
/// and reduced in shard order.
[[nodiscard]] inline MonteCarloEstimate monte_carlo_wraps(const ProblemSpec& spec, std::int64_t samples,
                                                          std::uint64_t seed) {
    detail::check_nq(spec.n, spec.q);
    modlab::detail::require(spec.k >= 1, "monte_carlo_wraps: K must be >= 1");
    modlab::detail::require(samples >= 1, "monte_carlo_wraps: samples must be >= 1");
    constexpr std::int64_t kShard = 65536;
    const std::int64_t kq = spec.k * spec.q;
    double sum = 0.0, sum_sq = 0.0;
    for (std::int64_t start = 0, shard = 0; start < samples; start += kShard, ++shard) {
        Rng rng = Rng::substream(seed, {0x3C5A0001ULL, static_cast<std::uint64_t>(shard)});
        const std::int64_t stop = std::min(samples, start + kShard);
        for (std::int64_t i = start; i < stop; ++i) {
            std::int64_t s = 0;
            for (std::int64_t j = 0; j < spec.n; ++j) s += static_cast<std::int64_t>(rng.uniform_int(spec.q));
            const auto d = static_cast<double>(s / kq);
            sum += d;
            sum_sq += d * d;
        }
    }
    const auto n = static_cast<double>(samples);
    const double mean = sum / n;
    const double var = samples > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0)) : 0.0;
    return {mean, std::sqrt(var / n), samples, seed};
}

/// Every wrap quantity for one (N, q, K, r).
struct WrapSummary {
    ProblemSpec spec;
    Rational e_x0;
    Rational e_x1;
    double e_x2 = 0.0;
    Rational e_dkq_exact;
    WrapBounds e_dkq_bounds;
    Rational p_zero_wraps;
};

/// Exact summary; requires exact_mode_feasible(N, q).  spec.k may be 1 here.
[[nodiscard]] inline WrapSummary summarize(const ProblemSpec& spec, int z_min = 1) {
    detail::check_nq(spec.n, spec.q);
    modlab::detail::require(spec.k >= 1, "summarize: K must be >= 1");
    modlab::detail::require(exact_mode_feasible(spec.n, spec.q),
                            "summarize: (N, q) exceeds exact-mode limits N <= 64, q <= 1024");
    const ExactPMF pmf = exact_sum_pmf(spec.n, spec.q);
    WrapSummary w;
    w.spec = spec;
    w.e_x0 = expected_x0(spec.n, spec.q);
    w.e_x1 = expected_x1(spec.n, spec.q, spec.k, spec.r);
    w.e_x2 = expected_x2_exact(spec.n, spec.q, z_min);
    w.e_dkq_exact = expected_wraps_exact(pmf, spec.k);
    w.e_dkq_bounds = expected_wraps_bounds(spec.n, spec.q, spec.k);
    w.p_zero_wraps = prob_zero_wraps(spec.n, spec.q, spec.k);
    return w;
}

}  // namespace modlab::analytics
