#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "modlab/analytics.hpp"
#include "modlab/error.hpp"
#include "modlab/problem_spec.hpp"
#include "modlab/random.hpp"

namespace modlab::sampling {

/// x = [x_1, ..., x_N] with entries in {0..q-1}.
struct InputVector {
    std::vector<std::int64_t> entries;

    [[nodiscard]] std::size_t size() const noexcept { return entries.size(); }
    [[nodiscard]] std::int64_t sum() const noexcept {
        return std::accumulate(entries.begin(), entries.end(), std::int64_t{0});
    }
    /// n0(x), the number of zero entries.
    [[nodiscard]] std::int64_t zero_count() const noexcept {
        return std::count(entries.begin(), entries.end(), std::int64_t{0});
    }

    void validate(std::int64_t n, std::int64_t q) const {
        if (static_cast<std::int64_t>(entries.size()) != n)
            throw InvalidArgument("InputVector: length " + std::to_string(entries.size()) + " != N = " +
                                  std::to_string(n));
        for (std::size_t i = 0; i < entries.size(); ++i)
            if (entries[i] < 0 || entries[i] >= q)
                throw InvalidArgument("InputVector: entry " + std::to_string(i) + " = " + std::to_string(entries[i]) +
                                      " outside [0, " + std::to_string(q) + ")");
    }

    friend bool operator==(const InputVector&, const InputVector&) = default;
};

/// An input with y_q = sum mod q and quotient c = floor(sum / q).
struct LabeledExample {
    InputVector x;
    std::int64_t y_q = 0;
    std::int64_t quotient = 0;

    [[nodiscard]] std::int64_t total(std::int64_t q) const noexcept { return quotient * q + y_q; }

    friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

enum class ModulusKind { primary_q, auxiliary_kq };

struct TrainingTarget {
    std::int64_t value = 0;
    ModulusKind kind = ModulusKind::primary_q;
};

enum class Distribution { uniform, sparse };

[[nodiscard]] inline std::string_view to_string(Distribution d) noexcept {
    return d == Distribution::uniform ? "uniform" : "sparse";
}

[[nodiscard]] inline Distribution parse_distribution(std::string_view s) {
    if (s == "uniform") return Distribution::uniform;
    if (s == "sparse") return Distribution::sparse;
    throw InvalidArgument("unknown distribution '" + std::string(s) + "' (expected uniform|sparse)");
}

namespace detail {

inline void check_nq(std::int64_t n, std::int64_t q) {
    modlab::detail::require(n >= 1, "sampler: N must be >= 1, got " + std::to_string(n));
    modlab::detail::require(q >= 2, "sampler: q must be >= 2, got " + std::to_string(q));
}

}  // namespace detail

/// Each entry i.i.d. uniform on {0..q-1}.
[[nodiscard]] inline InputVector sample_uniform(std::int64_t n, std::int64_t q, Rng& rng) {
    detail::check_nq(n, q);
    InputVector x;
    x.entries.resize(static_cast<std::size_t>(n));
    for (auto& e : x.entries) e = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(q)));
    return x;
}

[[nodiscard]] inline InputVector sample_uniform(const ProblemSpec& spec, Rng& rng) {
    return sample_uniform(spec.n, spec.q, rng);
}

/// Inverse-CDF sampler for the number of populated positions z in {1..N},
/// g(z) proportional to 1/sqrt(N - z + 1).
class SparseCountSampler {
public:
    explicit SparseCountSampler(std::int64_t n) : n_(n) {
        const auto w = analytics::sparse_z_weights(n, 1);
        cdf_.resize(w.size());
        std::partial_sum(w.begin(), w.end(), cdf_.begin());
        cdf_.back() = 1.0;
    }

    [[nodiscard]] std::int64_t n() const noexcept { return n_; }

    std::int64_t operator()(Rng& rng) const {
        const double u = rng.uniform01();
        const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        return 1 + static_cast<std::int64_t>(std::min<std::ptrdiff_t>(it - cdf_.begin(),
                                                                      static_cast<std::ptrdiff_t>(cdf_.size()) - 1));
    }

private:
    std::int64_t n_;
    std::vector<double> cdf_;
};

/// Sparse construction: draw z ~ g, choose z positions uniformly without
/// replacement and fill them i.i.d. uniform on {0..q-1} (or {1..q-1} with
/// strict_nonzero_fill); the other N - z positions are zero.
[[nodiscard]] inline InputVector sample_sparse(std::int64_t n, std::int64_t q, Rng& rng,
                                               const SparseCountSampler& counts, bool strict_nonzero_fill = false) {
    detail::check_nq(n, q);
    if (counts.n() != n) throw InvalidArgument("sample_sparse: count sampler built for a different N");
    const std::int64_t z = counts(rng);
    std::vector<std::int64_t> positions(static_cast<std::size_t>(n));
    std::iota(positions.begin(), positions.end(), std::int64_t{0});
    // Partial Fisher-Yates: the first z slots become a uniform z-subset.
    for (std::int64_t i = 0; i < z; ++i) {
        const auto j = i + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
        std::swap(positions[static_cast<std::size_t>(i)], positions[static_cast<std::size_t>(j)]);
    }
    InputVector x;
    x.entries.assign(static_cast<std::size_t>(n), 0);
    for (std::int64_t i = 0; i < z; ++i) {
        const std::int64_t v = strict_nonzero_fill
                                   ? 1 + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(q - 1)))
                                   : static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(q)));
        x.entries[static_cast<std::size_t>(positions[static_cast<std::size_t>(i)])] = v;
    }
    return x;
}

[[nodiscard]] inline InputVector sample_sparse(const ProblemSpec& spec, Rng& rng, bool strict_nonzero_fill = false) {
    detail::check_nq(spec.n, spec.q);
    return sample_sparse(spec.n, spec.q, rng, SparseCountSampler(spec.n), strict_nonzero_fill);
}

[[nodiscard]] inline LabeledExample make_labels(InputVector x, std::int64_t q) {
    modlab::detail::require(q >= 2, "make_labels: q must be >= 2");
    x.validate(static_cast<std::int64_t>(x.size()), q);
    const std::int64_t s = x.sum();
    return {std::move(x), s % q, s / q};
}

/// f_Kq(x), reconstructed from the stored labels as (c q + y_q) mod Kq.
[[nodiscard]] inline std::int64_t aux_label(const LabeledExample& e, std::int64_t q, std::int64_t k) {
    return (e.quotient * q + e.y_q) % (k * q);
}

/// Primary f_q with probability 1 - r, auxiliary f_Kq with probability r.
[[nodiscard]] inline TrainingTarget select_target(const LabeledExample& e, const ProblemSpec& spec, Rng& rng) {
    if (rng.bernoulli(spec.r)) {
        const std::int64_t v = aux_label(e, spec.q, spec.k);
        assert(v % spec.q == e.y_q);
        return {v, ModulusKind::auxiliary_kq};
    }
    return {e.y_q, ModulusKind::primary_q};
}

struct DatasetMeta {
    std::int64_t n = 0;
    std::int64_t q = 0;
    Distribution distribution = Distribution::uniform;
    std::uint64_t seed = 0;
    std::int64_t count = 0;
    bool strict_nonzero_fill = false;
    std::string manifest_hash;

    friend bool operator==(const DatasetMeta&, const DatasetMeta&) = default;
};

struct Dataset {
    DatasetMeta meta;
    std::vector<LabeledExample> examples;

    [[nodiscard]] std::size_t size() const noexcept { return examples.size(); }
};

/// Example i is drawn from substream (seed, i), so any prefix or shard can
/// be regenerated independently.
[[nodiscard]] inline Dataset generate_dataset(std::int64_t n, std::int64_t q, Distribution dist, std::int64_t count,
                                              std::uint64_t seed, bool strict_nonzero_fill = false) {
    detail::check_nq(n, q);
    modlab::detail::require(count >= 0, "generate_dataset: count must be >= 0");
    Dataset ds;
    ds.meta = {n, q, dist, seed, count, strict_nonzero_fill, {}};
    ds.examples.reserve(static_cast<std::size_t>(count));
    std::optional<SparseCountSampler> zs;
    if (dist == Distribution::sparse) zs.emplace(n);
    const std::uint64_t tag = dist == Distribution::uniform ? 0x55AA0001ULL : 0x55AA0002ULL;
    for (std::int64_t i = 0; i < count; ++i) {
        Rng rng = Rng::substream(seed, {tag, static_cast<std::uint64_t>(i)});
        InputVector x = dist == Distribution::uniform ? sample_uniform(n, q, rng)
                                                      : sample_sparse(n, q, rng, *zs, strict_nonzero_fill);
        ds.examples.push_back(make_labels(std::move(x), q));
    }
    return ds;
}

}  // namespace modlab::sampling
