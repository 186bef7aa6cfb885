#pragma once

// Encoder-only transformer for modular addition.
//
// Two input/output schemes share one encoder:
//   token_extended  inputs index a Kq-row embedding table (only rows < q are
//                   ever read by inputs); the head emits Kq logits and
//                   inference uses the first q of them.
//   dual_angular    each scalar x becomes (cos 2pi x/q, sin 2pi x/q,
//                   cos 2pi x/Kq, sin 2pi x/Kq) followed by a learned linear
//                   lift; the head emits the same 4-vector layout.
// There are no positional embeddings, so with mean pooling the network is
// invariant to permutations of the input sequence.

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "modlab/autodiff.hpp"
#include "modlab/error.hpp"
#include "modlab/problem_spec.hpp"
#include "modlab/random.hpp"
#include "modlab/sampling.hpp"

namespace modlab::model {

using ad::Parameter;
using ad::Tape;
using ad::Var;
using sampling::InputVector;
using sampling::ModulusKind;
using sampling::TrainingTarget;

enum class EmbeddingKind { token_extended, dual_angular };
enum class NormPlacement { pre, post };
enum class InitScheme { sigma_002, default_kaiming };
enum class Pooling { mean, last_token };

NLOHMANN_JSON_SERIALIZE_ENUM(EmbeddingKind, {{EmbeddingKind::token_extended, "token_extended"},
                                             {EmbeddingKind::dual_angular, "dual_angular"}})
NLOHMANN_JSON_SERIALIZE_ENUM(NormPlacement, {{NormPlacement::pre, "pre"}, {NormPlacement::post, "post"}})
NLOHMANN_JSON_SERIALIZE_ENUM(InitScheme, {{InitScheme::sigma_002, "sigma_002"},
                                          {InitScheme::default_kaiming, "default_kaiming"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Pooling, {{Pooling::mean, "mean"}, {Pooling::last_token, "last_token"}})

struct ModelConfig {
    EmbeddingKind embedding_kind = EmbeddingKind::token_extended;
    std::int64_t layers = 4;
    std::int64_t heads = 4;
    std::int64_t d_model = 256;
    std::int64_t d_ffn = 2048;
    NormPlacement norm_placement = NormPlacement::pre;
    bool bias = true;
    InitScheme init_scheme = InitScheme::default_kaiming;
    double dropout = 0.0;
    Pooling pooling = Pooling::mean;
    /// Angular mode only: an auxiliary target also supervises the primary
    /// pair with f_q = f_Kq mod q.
    bool supervise_both_pairs = false;
    ProblemSpec spec;

    void validate() const {
        spec.validate();
        detail::require(layers >= 1, "ModelConfig: layers must be >= 1");
        detail::require(heads >= 1, "ModelConfig: heads must be >= 1");
        detail::require(d_model >= 1 && d_ffn >= 1, "ModelConfig: widths must be >= 1");
        detail::require(d_model % heads == 0, "ModelConfig: d_model must be divisible by heads");
        detail::require(dropout >= 0.0 && dropout < 1.0, "ModelConfig: dropout must lie in [0,1)");
    }

    /// The sweeps of the architecture study use only 0.0 and 0.1.
    [[nodiscard]] bool dropout_is_standard() const noexcept { return dropout == 0.0 || dropout == 0.1; }

    [[nodiscard]] std::int64_t output_dim() const noexcept {
        return embedding_kind == EmbeddingKind::token_extended ? spec.aux_modulus() : 4;
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"embedding_kind", c.embedding_kind},
                       {"layers", c.layers},
                       {"heads", c.heads},
                       {"d_model", c.d_model},
                       {"d_ffn", c.d_ffn},
                       {"norm_placement", c.norm_placement},
                       {"bias", c.bias},
                       {"init_scheme", c.init_scheme},
                       {"dropout", c.dropout},
                       {"pooling", c.pooling},
                       {"supervise_both_pairs", c.supervise_both_pairs},
                       {"spec", c.spec}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("embedding_kind").get_to(c.embedding_kind);
    j.at("layers").get_to(c.layers);
    j.at("heads").get_to(c.heads);
    j.at("d_model").get_to(c.d_model);
    j.at("d_ffn").get_to(c.d_ffn);
    j.at("norm_placement").get_to(c.norm_placement);
    j.at("bias").get_to(c.bias);
    j.at("init_scheme").get_to(c.init_scheme);
    j.at("dropout").get_to(c.dropout);
    j.at("pooling").get_to(c.pooling);
    c.supervise_both_pairs = j.value("supervise_both_pairs", false);
    j.at("spec").get_to(c.spec);
}

/// 64-bit FNV-1a, hex encoded.
[[nodiscard]] inline std::string fnv1a_hex(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = kDigits[h & 0xF];
    return out;
}

[[nodiscard]] inline std::string config_hash(const ModelConfig& c) { return fnv1a_hex(nlohmann::json(c).dump()); }

/// Number of trainable scalars implied by a configuration.
[[nodiscard]] inline std::int64_t parameter_count(const ModelConfig& c) {
    const std::int64_t d = c.d_model, f = c.d_ffn, b = c.bias ? 1 : 0;
    const std::int64_t norm = d * (1 + b);
    const std::int64_t per_layer = 4 * (d * d + b * d) + (d * f + b * f) + (f * d + b * d) + 2 * norm;
    const std::int64_t embed =
        c.embedding_kind == EmbeddingKind::token_extended ? c.spec.aux_modulus() * d : 4 * d + b * d;
    const std::int64_t head = d * c.output_dim() + b * c.output_dim();
    const std::int64_t final_norm = c.norm_placement == NormPlacement::pre ? norm : 0;
    return embed + c.layers * per_layer + final_norm + head;
}

/// (cos phi, sin phi, cos phi', sin phi') with phi = 2 pi x/q, phi' = 2 pi x/(Kq).
[[nodiscard]] inline std::array<double, 4> dual_angular_features(std::int64_t x, std::int64_t q, std::int64_t k) {
    const double phi = 2.0 * std::numbers::pi * static_cast<double>(x) / static_cast<double>(q);
    const double phi_aux = 2.0 * std::numbers::pi * static_cast<double>(x) / static_cast<double>(k * q);
    return {std::cos(phi), std::sin(phi), std::cos(phi_aux), std::sin(phi_aux)};
}

/// Argmax over the first q logits; ties go to the lowest index.
template <class T>
[[nodiscard]] std::int64_t decode_token(std::span<const T> logits, std::int64_t q) {
    if (static_cast<std::int64_t>(logits.size()) < q) throw InvalidArgument("decode_token: fewer than q logits");
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < q; ++i)
        if (logits[static_cast<std::size_t>(i)] > logits[static_cast<std::size_t>(best)]) best = i;
    return best;
}

struct AngularDecode {
    double s_hat;          ///< in [0, q)
    std::int64_t s_round;  ///< round(s_hat) mod q
};

/// Maps the primary pair (cos, sin) back to an angle in [0, 2pi) and then to
/// the continuous and rounded residue.
[[nodiscard]] inline AngularDecode decode_angular(double cos_v, double sin_v, std::int64_t q) {
    if (cos_v == 0.0 && sin_v == 0.0) throw InvalidArgument("decode_angular: degenerate (0, 0) output pair");
    double phi = std::atan2(sin_v, cos_v);
    if (phi < 0.0) phi += 2.0 * std::numbers::pi;
    double s_hat = phi * static_cast<double>(q) / (2.0 * std::numbers::pi);
    if (s_hat >= static_cast<double>(q)) s_hat = 0.0;
    auto s_round = static_cast<std::int64_t>(std::llround(s_hat)) % q;
    return {s_hat, s_round};
}

template <class T>
[[nodiscard]] AngularDecode decode_angular(std::span<const T> output, std::int64_t q) {
    if (output.size() < 2) throw InvalidArgument("decode_angular: output needs at least 2 dims");
    return decode_angular(static_cast<double>(output[0]), static_cast<double>(output[1]), q);
}

/// Inputs of a forward pass: batch rows of N entries, flattened row-major.
struct Batch {
    std::vector<std::int64_t> entries;
    std::size_t batch = 0;
    std::size_t seq = 0;
};

[[nodiscard]] inline Batch make_batch(std::span<const InputVector> xs) {
    Batch b;
    b.batch = xs.size();
    b.seq = xs.empty() ? 0 : xs.front().size();
    b.entries.reserve(b.batch * b.seq);
    for (const auto& x : xs) {
        if (x.size() != b.seq) throw ShapeError("make_batch: ragged input lengths");
        b.entries.insert(b.entries.end(), x.entries.begin(), x.entries.end());
    }
    return b;
}

struct ForwardOptions {
    bool training = false;
    Rng* dropout_rng = nullptr;
};

template <class T>
class Model {
public:
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

    /// Builds and initializes every parameter; parameter i draws from
    /// substream (seed, i).
    Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
        config_.validate();
        layout();
        initialize(seed);
    }

    /// Builds the layout only; values are zero until assigned.
    explicit Model(ModelConfig config) : config_(std::move(config)) {
        config_.validate();
        layout();
    }

    [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
    [[nodiscard]] std::vector<Parameter<T>>& parameters() noexcept { return params_; }
    [[nodiscard]] const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }

    [[nodiscard]] Parameter<T>* find(std::string_view name) {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    [[nodiscard]] std::int64_t parameter_count() const noexcept {
        std::int64_t n = 0;
        for (const auto& p : params_) n += static_cast<std::int64_t>(p.value.size());
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    /// Token embedding of every position: [len x d_model].
    Var<T> embed_token_extended(Tape<T>& tape, std::span<const std::int64_t> entries) {
        const auto& s = config_.spec;
        for (auto e : entries)
            if (e < 0 || e >= s.q)
                throw InvalidArgument("embed_token_extended: entry " + std::to_string(e) + " outside [0, " +
                                      std::to_string(s.q) + ")");
        return ad::embedding_lookup(tape.param(params_[idx_.token_table]), entries);
    }

    /// Dual angular features lifted to d_model: [len x d_model].
    Var<T> embed_dual_angular(Tape<T>& tape, std::span<const std::int64_t> entries) {
        return ad::linear(tape.constant(angular_inputs(entries)), tape.param(params_[idx_.lift_w]),
                          maybe(tape, idx_.lift_b));
    }

    /// Raw 4-vectors of every entry: [len x 4].
    [[nodiscard]] Tensor<T> angular_inputs(std::span<const std::int64_t> entries) const {
        const auto& s = config_.spec;
        Tensor<T> feats({entries.size(), 4});
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i] < 0 || entries[i] >= s.q)
                throw InvalidArgument("embed_dual_angular: entry " + std::to_string(entries[i]) + " outside [0, " +
                                      std::to_string(s.q) + ")");
            const auto f = dual_angular_features(entries[i], s.q, s.k);
            for (std::size_t c = 0; c < 4; ++c) feats.at(i, c) = static_cast<T>(f[c]);
        }
        return feats;
    }

    /// [batch x output_dim]: Kq logits or the 4-vector angular read-out.
    Var<T> forward(Tape<T>& tape, const Batch& in, ForwardOptions opt = {}) {
        if (in.seq != static_cast<std::size_t>(config_.spec.n))
            throw ShapeError("forward: sequence length " + std::to_string(in.seq) + " != N = " +
                             std::to_string(config_.spec.n));
        const double rate = opt.training ? config_.dropout : 0.0;
        if (rate > 0.0 && opt.dropout_rng == nullptr) throw InvalidArgument("forward: dropout requires an rng");
        auto drop = [&](Var<T> v) { return rate > 0.0 ? ad::dropout(v, rate, *opt.dropout_rng) : v; };

        Var<T> h = config_.embedding_kind == EmbeddingKind::token_extended ? embed_token_extended(tape, in.entries)
                                                                           : embed_dual_angular(tape, in.entries);
        h = drop(h);
        for (const auto& L : idx_.layers) {
            if (config_.norm_placement == NormPlacement::pre) {
                h = ad::add(h, drop(attention_block(tape, norm(tape, h, L.norm1_g, L.norm1_b), L, in)));
                h = ad::add(h, drop(ffn_block(tape, norm(tape, h, L.norm2_g, L.norm2_b), L)));
            } else {
                h = norm(tape, ad::add(h, drop(attention_block(tape, h, L, in))), L.norm1_g, L.norm1_b);
                h = norm(tape, ad::add(h, drop(ffn_block(tape, h, L))), L.norm2_g, L.norm2_b);
            }
        }
        if (config_.norm_placement == NormPlacement::pre) h = norm(tape, h, idx_.final_g, idx_.final_b);
        Var<T> pooled = config_.pooling == Pooling::mean ? ad::mean_pool(h, in.batch, in.seq)
                                                         : ad::last_token(h, in.batch, in.seq);
        return ad::linear(pooled, tape.param(params_[idx_.head_w]), maybe(tape, idx_.head_b));
    }

    Var<T> forward(Tape<T>& tape, std::span<const InputVector> xs, ForwardOptions opt = {}) {
        return forward(tape, make_batch(xs), opt);
    }

private:
    struct LayerIdx {
        std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
        std::size_t norm1_g, norm1_b, w1, b1, w2, b2, norm2_g, norm2_b;
    };
    struct Index {
        std::size_t token_table = npos, lift_w = npos, lift_b = npos;
        std::vector<LayerIdx> layers;
        std::size_t final_g = npos, final_b = npos, head_w = npos, head_b = npos;
    };

    enum class Role { embedding, linear_weight, bias, norm_gain, norm_bias };

    std::size_t add_param(std::string name, std::vector<std::size_t> shape, Role role) {
        Parameter<T> p;
        p.name = std::move(name);
        p.value = Tensor<T>(std::move(shape));
        p.decay = role == Role::embedding || role == Role::linear_weight;
        params_.push_back(std::move(p));
        roles_.push_back(role);
        return params_.size() - 1;
    }

    void layout() {
        params_.clear();
        roles_.clear();
        const auto d = static_cast<std::size_t>(config_.d_model);
        const auto f = static_cast<std::size_t>(config_.d_ffn);
        const auto out = static_cast<std::size_t>(config_.output_dim());
        const bool b = config_.bias;
        if (config_.embedding_kind == EmbeddingKind::token_extended) {
            idx_.token_table = add_param("embed.token", {static_cast<std::size_t>(config_.spec.aux_modulus()), d},
                                         Role::embedding);
        } else {
            idx_.lift_w = add_param("embed.lift.weight", {4, d}, Role::linear_weight);
            if (b) idx_.lift_b = add_param("embed.lift.bias", {d}, Role::bias);
        }
        for (std::int64_t l = 0; l < config_.layers; ++l) {
            const std::string pre = "layers." + std::to_string(l) + ".";
            LayerIdx L{};
            auto lin = [&](const std::string& name, std::size_t in, std::size_t o, std::size_t& w, std::size_t& bias) {
                w = add_param(pre + name + ".weight", {in, o}, Role::linear_weight);
                bias = b ? add_param(pre + name + ".bias", {o}, Role::bias) : npos;
            };
            auto ln = [&](const std::string& name, std::size_t& g, std::size_t& bias) {
                g = add_param(pre + name + ".gain", {d}, Role::norm_gain);
                bias = b ? add_param(pre + name + ".bias", {d}, Role::norm_bias) : npos;
            };
            if (config_.norm_placement == NormPlacement::pre) ln("norm1", L.norm1_g, L.norm1_b);
            lin("attn.q", d, d, L.wq, L.bq);
            lin("attn.k", d, d, L.wk, L.bk);
            lin("attn.v", d, d, L.wv, L.bv);
            lin("attn.out", d, d, L.wo, L.bo);
            if (config_.norm_placement == NormPlacement::post) ln("norm1", L.norm1_g, L.norm1_b);
            if (config_.norm_placement == NormPlacement::pre) ln("norm2", L.norm2_g, L.norm2_b);
            lin("ffn.in", d, f, L.w1, L.b1);
            lin("ffn.out", f, d, L.w2, L.b2);
            if (config_.norm_placement == NormPlacement::post) ln("norm2", L.norm2_g, L.norm2_b);
            idx_.layers.push_back(L);
        }
        if (config_.norm_placement == NormPlacement::pre) {
            idx_.final_g = add_param("final_norm.gain", {d}, Role::norm_gain);
            if (b) idx_.final_b = add_param("final_norm.bias", {d}, Role::norm_bias);
        }
        idx_.head_w = add_param("head.weight", {d, out}, Role::linear_weight);
        if (b) idx_.head_b = add_param("head.bias", {out}, Role::bias);
        for (auto& p : params_) p.zero_grad();
    }

    void initialize(std::uint64_t seed) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Rng rng = Rng::substream(seed, {0x1A17ULL, i});
            auto& v = params_[i].value;
            switch (roles_[i]) {
                case Role::embedding: {
                    const double sd = config_.init_scheme == InitScheme::sigma_002 ? 0.02 : 1.0;
                    for (auto& x : v.values()) x = static_cast<T>(rng.normal(0.0, sd));
                    break;
                }
                case Role::linear_weight: {
                    if (config_.init_scheme == InitScheme::sigma_002) {
                        for (auto& x : v.values()) x = static_cast<T>(rng.normal(0.0, 0.02));
                    } else {
                        // Kaiming-uniform with a = sqrt(5): bound 1/sqrt(fan_in).
                        const double bound = 1.0 / std::sqrt(static_cast<double>(v.shape()[0]));
                        for (auto& x : v.values()) x = static_cast<T>((2.0 * rng.uniform01() - 1.0) * bound);
                    }
                    break;
                }
                case Role::norm_gain: v.fill(T(1)); break;
                case Role::bias:
                case Role::norm_bias: v.fill(T(0)); break;
            }
        }
    }

    std::optional<Var<T>> maybe(Tape<T>& tape, std::size_t i) {
        if (i == npos) return std::nullopt;
        return tape.param(params_[i]);
    }

    Var<T> norm(Tape<T>& tape, Var<T> x, std::size_t g, std::size_t b) {
        return ad::layer_norm(x, maybe(tape, g), maybe(tape, b));
    }

    Var<T> attention_block(Tape<T>& tape, Var<T> x, const LayerIdx& L, const Batch& in) {
        Var<T> q = ad::linear(x, tape.param(params_[L.wq]), maybe(tape, L.bq));
        Var<T> k = ad::linear(x, tape.param(params_[L.wk]), maybe(tape, L.bk));
        Var<T> v = ad::linear(x, tape.param(params_[L.wv]), maybe(tape, L.bv));
        Var<T> o = ad::attention(q, k, v, in.batch, in.seq, static_cast<std::size_t>(config_.heads));
        return ad::linear(o, tape.param(params_[L.wo]), maybe(tape, L.bo));
    }

    Var<T> ffn_block(Tape<T>& tape, Var<T> x, const LayerIdx& L) {
        Var<T> hidden = ad::gelu(ad::linear(x, tape.param(params_[L.w1]), maybe(tape, L.b1)));
        return ad::linear(hidden, tape.param(params_[L.w2]), maybe(tape, L.b2));
    }

    ModelConfig config_;
    std::vector<Parameter<T>> params_;
    std::vector<Role> roles_;
    Index idx_;
};

/// Training loss: cross-entropy over the Kq classes (token mode) or masked
/// MSE on the angular pair selected by each target's modulus.
template <class T>
Var<T> loss(Var<T> output, std::span<const TrainingTarget> targets, const ModelConfig& config) {
    const auto& s = config.spec;
    const std::size_t batch = output.value().rows();
    if (targets.size() != batch) throw ShapeError("loss: target count != batch");
    for (const auto& t : targets) {
        const std::int64_t limit = t.kind == ModulusKind::primary_q ? s.q : s.aux_modulus();
        if (t.value < 0 || t.value >= limit)
            throw InvalidArgument("loss: target " + std::to_string(t.value) + " outside [0, " + std::to_string(limit) +
                                  ")");
    }
    if (config.embedding_kind == EmbeddingKind::token_extended) {
        std::vector<std::int64_t> classes;
        classes.reserve(batch);
        for (const auto& t : targets) classes.push_back(t.value);
        return ad::cross_entropy(output, std::span<const std::int64_t>(classes));
    }
    Tensor<T> target(output.value().shape());
    Tensor<T> mask(output.value().shape());
    for (std::size_t b = 0; b < batch; ++b) {
        const auto& t = targets[b];
        auto set_pair = [&](std::size_t col, std::int64_t y, std::int64_t modulus) {
            const double phi = 2.0 * std::numbers::pi * static_cast<double>(y) / static_cast<double>(modulus);
            target.at(b, col) = static_cast<T>(std::cos(phi));
            target.at(b, col + 1) = static_cast<T>(std::sin(phi));
            mask.at(b, col) = mask.at(b, col + 1) = T(1);
        };
        if (t.kind == ModulusKind::primary_q) {
            set_pair(0, t.value, s.q);
        } else {
            set_pair(2, t.value, s.aux_modulus());
            if (config.supervise_both_pairs) set_pair(0, t.value % s.q, s.q);
        }
    }
    return ad::mse(output, target, mask);
}

}  // namespace modlab::model
