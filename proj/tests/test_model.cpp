#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "modlab/checkpoint.hpp"
#include "modlab/model.hpp"

namespace md = modlab::model;
namespace sp = modlab::sampling;
using modlab::Rng;
using modlab::ad::Tape;

namespace {

md::ModelConfig small(md::EmbeddingKind kind = md::EmbeddingKind::token_extended) {
    md::ModelConfig c;
    c.embedding_kind = kind;
    c.layers = 2;
    c.heads = 2;
    c.d_model = 16;
    c.d_ffn = 32;
    c.spec = {8, 31, 5, 0.2};
    return c;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("modlab_test_" + name);
}

}  // namespace

TEST(Config, Validation) {
    auto c = small();
    c.heads = 3;
    EXPECT_THROW(c.validate(), modlab::InvalidArgument);
    c = small();
    c.dropout = 1.0;
    EXPECT_THROW(c.validate(), modlab::InvalidArgument);
    c = small();
    c.dropout = 0.1;
    EXPECT_TRUE(c.dropout_is_standard());
    c.dropout = 0.3;
    EXPECT_FALSE(c.dropout_is_standard());
}

TEST(Config, JsonRoundTripAndHash) {
    auto c = small(md::EmbeddingKind::dual_angular);
    c.norm_placement = md::NormPlacement::post;
    c.init_scheme = md::InitScheme::sigma_002;
    const nlohmann::json j = c;
    const auto back = j.get<md::ModelConfig>();
    EXPECT_EQ(md::config_hash(back), md::config_hash(c));
    c.spec.q = 37;
    EXPECT_NE(md::config_hash(back), md::config_hash(c));
}

TEST(Build, ReferenceScaleParameterCount) {
    md::ModelConfig c;
    c.spec = {8, 31, 5, 0.2};
    const md::Model<float> m(c);
    // 155*256 embedding, 4 layers of attention/FFN/norms, final norm, head.
    const std::int64_t d = 256, f = 2048;
    const std::int64_t expect = 155 * d + 4 * (4 * (d * d + d) + 2 * d * f + f + d + 4 * d) + 2 * d + d * 155 + 155;
    EXPECT_EQ(md::parameter_count(c), expect);
    EXPECT_EQ(m.parameter_count(), expect);
}

TEST(Build, VariantStudyConfigurationsMatchFormula) {
    for (auto norm : {md::NormPlacement::pre, md::NormPlacement::post})
        for (bool bias : {true, false})
            for (auto init : {md::InitScheme::default_kaiming, md::InitScheme::sigma_002})
                for (double drop : {0.0, 0.1})
                    for (auto kind : {md::EmbeddingKind::token_extended, md::EmbeddingKind::dual_angular}) {
                        auto c = small(kind);
                        c.norm_placement = norm;
                        c.bias = bias;
                        c.init_scheme = init;
                        c.dropout = drop;
                        const md::Model<float> m(c, 1);
                        const auto path = temp_path("appb.ckpt");
                        modlab::checkpoint::save_model(path, m);
                        const auto contents = modlab::checkpoint::read(path);
                        std::int64_t stored = 0;
                        for (const auto& [name, t] : contents.tensors) stored += static_cast<std::int64_t>(t.size());
                        EXPECT_EQ(stored, md::parameter_count(c));
                        const auto bytes = std::filesystem::file_size(path);
                        std::ifstream in(path, std::ios::binary);
                        std::string header;
                        std::getline(in, header);
                        EXPECT_EQ(bytes - header.size() - 1, static_cast<std::uintmax_t>(stored) * 4);
                        bool has_bias = false;
                        for (const auto& n : contents.order) has_bias |= n.find(".bias") != std::string::npos;
                        EXPECT_EQ(has_bias, bias);
                        std::filesystem::remove(path);
                    }
}

TEST(Build, Sigma002StdDev) {
    md::ModelConfig c;
    c.init_scheme = md::InitScheme::sigma_002;
    c.spec = {8, 31, 5, 0.2};
    md::Model<float> m(c, 3);
    const auto* w = m.find("layers.0.ffn.in.weight");
    ASSERT_NE(w, nullptr);
    ASSERT_EQ(w->value.shape(), (std::vector<std::size_t>{256, 2048}));
    double s = 0, s2 = 0;
    for (float v : w->value.values()) {
        s += v;
        s2 += static_cast<double>(v) * v;
    }
    const double n = static_cast<double>(w->value.size());
    const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
    EXPECT_NEAR(sd, 0.02, 0.002);
}

TEST(Build, DefaultInitRanges) {
    md::Model<double> m(small(), 4);
    const auto* w = m.find("layers.0.ffn.out.weight");
    const double bound = 1 / std::sqrt(32.0);
    for (double v : w->value.values()) EXPECT_LE(std::fabs(v), bound);
    for (double v : m.find("layers.0.norm1.gain")->value.values()) EXPECT_EQ(v, 1.0);
    for (double v : m.find("layers.0.attn.q.bias")->value.values()) EXPECT_EQ(v, 0.0);
    EXPECT_FALSE(m.find("layers.0.norm1.gain")->decay);
    EXPECT_FALSE(m.find("head.bias")->decay);
    EXPECT_TRUE(m.find("head.weight")->decay);
    EXPECT_TRUE(m.find("embed.token")->decay);
}

TEST(Build, SameSeedSameWeights) {
    md::Model<float> a(small(), 9), b(small(), 9), c(small(), 10);
    for (std::size_t i = 0; i < a.parameters().size(); ++i)
        EXPECT_EQ(a.parameters()[i].value.storage(), b.parameters()[i].value.storage());
    EXPECT_NE(a.find("embed.token")->value.storage(), c.find("embed.token")->value.storage());
}

TEST(Embedding, TokenTable) {
    md::Model<double> m(small(), 1);
    EXPECT_EQ(m.find("embed.token")->value.rows(), 155u);
    Tape<double> tape;
    const std::vector<std::int64_t> e = {3, 7, 3};
    const auto h = m.embed_token_extended(tape, e);
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(h.value().at(0, c), h.value().at(2, c));
    const std::vector<std::int64_t> bad = {31};
    EXPECT_THROW(m.embed_token_extended(tape, bad), modlab::InvalidArgument);
}

TEST(Embedding, DualAngularFeatures) {
    const auto z = md::dual_angular_features(0, 97, 5);
    EXPECT_EQ(z, (std::array<double, 4>{1, 0, 1, 0}));
    const auto f = md::dual_angular_features(2, 4, 2);
    EXPECT_NEAR(f[0], -1, 1e-15);
    EXPECT_NEAR(f[1], 0, 1e-15);
    EXPECT_NEAR(f[2], 0, 1e-15);
    EXPECT_NEAR(f[3], 1, 1e-15);
    for (std::int64_t x = 0; x < 97; ++x) {
        const auto g = md::dual_angular_features(x, 97, 5);
        EXPECT_NEAR(g[0] * g[0] + g[1] * g[1], 1.0, 1e-6);
        EXPECT_NEAR(g[2] * g[2] + g[3] * g[3], 1.0, 1e-6);
    }
    md::Model<double> m(small(md::EmbeddingKind::dual_angular), 1);
    Tape<double> tape;
    const std::vector<std::int64_t> bad = {31};
    EXPECT_THROW(m.embed_dual_angular(tape, bad), modlab::InvalidArgument);
}

TEST(Forward, OutputShapes) {
    Rng rng(2);
    std::vector<sp::InputVector> xs;
    for (int i = 0; i < 5; ++i) xs.push_back(sp::sample_uniform(8, 31, rng));
    for (auto kind : {md::EmbeddingKind::token_extended, md::EmbeddingKind::dual_angular}) {
        md::Model<float> m(small(kind), 3);
        Tape<float> tape;
        const auto out = m.forward(tape, std::span<const sp::InputVector>(xs));
        EXPECT_EQ(out.value().rows(), 5u);
        EXPECT_EQ(out.value().cols(), kind == md::EmbeddingKind::token_extended ? 155u : 4u);
        EXPECT_TRUE(out.value().all_finite());
    }
}

TEST(Forward, PermutationInvariance) {
    Rng rng(3);
    for (auto kind : {md::EmbeddingKind::token_extended, md::EmbeddingKind::dual_angular})
        for (auto norm : {md::NormPlacement::pre, md::NormPlacement::post}) {
            auto c = small(kind);
            c.norm_placement = norm;
            md::Model<float> m(c, 5);
            std::vector<sp::InputVector> xs, ps;
            for (int i = 0; i < 20; ++i) {
                auto x = sp::sample_uniform(8, 31, rng);
                auto p = x;
                rng.shuffle(std::span<std::int64_t>(p.entries));
                xs.push_back(x);
                ps.push_back(p);
            }
            Tape<float> t1, t2;
            const auto a = m.forward(t1, std::span<const sp::InputVector>(xs));
            const auto b = m.forward(t2, std::span<const sp::InputVector>(ps));
            for (std::size_t i = 0; i < a.value().size(); ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-5);
        }
}

TEST(Loss, TokenUniformLogits) {
    auto c = small();
    Tape<double> tape;
    const auto out = tape.constant(modlab::Tensor<double>({2, 155}, 0.0));
    const std::vector<sp::TrainingTarget> ts = {{3, sp::ModulusKind::primary_q}, {120, sp::ModulusKind::auxiliary_kq}};
    EXPECT_NEAR(md::loss(out, std::span<const sp::TrainingTarget>(ts), c).value()[0], std::log(155.0), 1e-12);
    const std::vector<sp::TrainingTarget> bad = {{31, sp::ModulusKind::primary_q}};
    const auto one = tape.constant(modlab::Tensor<double>({1, 155}, 0.0));
    EXPECT_THROW(md::loss(one, std::span<const sp::TrainingTarget>(bad), c), modlab::InvalidArgument);
}

TEST(Loss, AngularExactTargetIsZeroAndMasksOtherPair) {
    auto c = small(md::EmbeddingKind::dual_angular);
    const double phi = 2 * std::numbers::pi * 5 / 31.0;
    const double phi_aux = 2 * std::numbers::pi * 100 / 155.0;
    Tape<double> tape;
    auto out = tape.input(modlab::Tensor<double>(
        {2, 4}, std::vector<double>{std::cos(phi), std::sin(phi), 9.0, -4.0, 7.0, 3.0, std::cos(phi_aux), std::sin(phi_aux)}));
    const std::vector<sp::TrainingTarget> ts = {{5, sp::ModulusKind::primary_q}, {100, sp::ModulusKind::auxiliary_kq}};
    const auto l = md::loss(out, std::span<const sp::TrainingTarget>(ts), c);
    EXPECT_NEAR(l.value()[0], 0.0, 1e-15);

    Tape<double> t2;
    auto o2 = t2.input(modlab::Tensor<double>({2, 4}, std::vector<double>{0.3, 0.1, 9.0, -4.0, 7.0, 3.0, 0.2, 0.5}));
    t2.backward(md::loss(o2, std::span<const sp::TrainingTarget>(ts), c));
    const auto& g = t2.grad(o2.id);
    EXPECT_EQ(g.at(0, 2), 0.0);
    EXPECT_EQ(g.at(0, 3), 0.0);
    EXPECT_EQ(g.at(1, 0), 0.0);
    EXPECT_EQ(g.at(1, 1), 0.0);
    EXPECT_NE(g.at(0, 0), 0.0);
    EXPECT_NE(g.at(1, 3), 0.0);

    c.supervise_both_pairs = true;
    Tape<double> t3;
    auto o3 = t3.input(o2.value());
    t3.backward(md::loss(o3, std::span<const sp::TrainingTarget>(ts), c));
    EXPECT_NE(t3.grad(o3.id).at(1, 0), 0.0);
}

TEST(Loss, AngularPrimaryZeroTarget) {
    auto c = small(md::EmbeddingKind::dual_angular);
    Tape<double> tape;
    auto out = tape.constant(modlab::Tensor<double>({1, 4}, std::vector<double>{1.0, 0.0, 0.0, 0.0}));
    const std::vector<sp::TrainingTarget> ts = {{0, sp::ModulusKind::primary_q}};
    EXPECT_EQ(md::loss(out, std::span<const sp::TrainingTarget>(ts), c).value()[0], 0.0);
}

TEST(Decode, Token) {
    std::vector<float> logits(155, 0.0f);
    logits[3] = 2.0f;
    EXPECT_EQ(md::decode_token(std::span<const float>(logits), 31), 3);
    logits[33] = 9.0f;
    logits[5] = 4.0f;
    EXPECT_EQ(md::decode_token(std::span<const float>(logits), 31), 5);
    std::vector<double> tie(40, 0.0);
    tie[2] = tie[7] = 1.0;
    EXPECT_EQ(md::decode_token(std::span<const double>(tie), 31), 2);
}

TEST(Decode, Angular) {
    const auto a = md::decode_angular(1.0, 0.0, 97);
    EXPECT_EQ(a.s_hat, 0.0);
    EXPECT_EQ(a.s_round, 0);
    const double phi = 2 * std::numbers::pi * 50 / 97.0;
    EXPECT_EQ(md::decode_angular(std::cos(phi), std::sin(phi), 97).s_round, 50);
    const double near = 2 * std::numbers::pi * 96.7 / 97.0;
    const auto n = md::decode_angular(std::cos(near), std::sin(near), 97);
    EXPECT_NEAR(n.s_hat, 96.7, 1e-9);
    EXPECT_EQ(n.s_round, 0);
    EXPECT_THROW((void)md::decode_angular(0.0, 0.0, 97), modlab::InvalidArgument);
}

TEST(Decode, AngularRoundTripAllModuli) {
    for (std::int64_t q = 2; q <= 1024; ++q)
        for (std::int64_t y = 0; y < q; ++y) {
            const auto f = md::dual_angular_features(y, q, 2);
            ASSERT_EQ(md::decode_angular(f[0], f[1], q).s_round, y) << q << " " << y;
        }
}
