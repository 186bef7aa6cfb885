#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>

#include "modlab/trainer.hpp"

namespace tr = modlab::trainer;
namespace md = modlab::model;
namespace sp = modlab::sampling;
using modlab::Tensor;
using modlab::ad::Parameter;

namespace {

Parameter<double> scalar_param(double v, double g, bool decay = true) {
    Parameter<double> p;
    p.name = "theta";
    p.value = Tensor<double>({1}, std::vector<double>{v});
    p.grad = Tensor<double>({1}, std::vector<double>{g});
    p.decay = decay;
    return p;
}

md::ModelConfig tiny() {
    md::ModelConfig c;
    c.layers = 1;
    c.heads = 2;
    c.d_model = 16;
    c.d_ffn = 32;
    c.spec = {4, 7, 3, 0.3};
    return c;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Schedule, HandValues) {
    tr::TrainConfig cfg;
    cfg.peak_lr = 3e-5;
    EXPECT_EQ(tr::lr_at(0, 1000, cfg), 0.0);
    EXPECT_EQ(tr::warmup_steps(1000, cfg), 50);
    EXPECT_EQ(tr::lr_at(50, 1000, cfg), 3e-5);
    EXPECT_NEAR(tr::lr_at(525, 1000, cfg), 0.5 * 3e-5, 1e-12);
    EXPECT_NEAR(tr::lr_at(25, 1000, cfg), 1.5e-5, 1e-12);
    EXPECT_EQ(tr::lr_at(1000, 1000, cfg), 0.0);
    EXPECT_THROW((void)tr::lr_at(1001, 1000, cfg), modlab::InvalidArgument);
}

TEST(Schedule, ShapeProperties) {
    tr::TrainConfig cfg;
    cfg.peak_lr = 1.0;
    for (std::int64_t total : {1, 7, 400, 4000}) {
        int at_peak = 0;
        double prev = -1;
        bool rising = true;
        for (std::int64_t s = 0; s <= total; ++s) {
            const double v = tr::lr_at(s, total, cfg);
            EXPECT_GE(v, 0.0);
            if (v == 1.0) ++at_peak;
            if (v < prev) rising = false;
            if (!rising) {
                EXPECT_LE(v, prev);
            }
            prev = v;
        }
        EXPECT_EQ(at_peak, 1) << total;
        EXPECT_EQ(tr::lr_at(total, total, cfg), total == tr::warmup_steps(total, cfg) ? 1.0 : 0.0);
    }
}

TEST(AdamW, FirstStepHandValue) {
    tr::TrainConfig cfg;
    std::vector<Parameter<double>> ps = {scalar_param(1.0, 1.0)};
    tr::OptimizerState<double> st;
    tr::adamw_step(ps, st, 0.1, cfg);
    EXPECT_NEAR(ps[0].value[0], 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.1), 1e-15);
    EXPECT_NEAR(ps[0].value[0], 0.89, 1e-8);
    EXPECT_EQ(st.step, 1);
}

TEST(AdamW, ZeroGradient) {
    tr::TrainConfig cfg;
    cfg.weight_decay = 0.0;
    std::vector<Parameter<double>> ps = {scalar_param(2.5, 0.0)};
    tr::OptimizerState<double> st;
    tr::adamw_step(ps, st, 0.1, cfg);
    EXPECT_EQ(ps[0].value[0], 2.5);
    cfg.weight_decay = 0.1;
    tr::adamw_step(ps, st, 0.1, cfg);
    EXPECT_NEAR(ps[0].value[0], 2.5 * (1 - 0.01), 1e-15);
}

TEST(AdamW, NoDecayForFlaggedParameters) {
    tr::TrainConfig cfg;
    std::vector<Parameter<double>> ps = {scalar_param(2.0, 0.0, false)};
    tr::OptimizerState<double> st;
    tr::adamw_step(ps, st, 0.1, cfg);
    EXPECT_EQ(ps[0].value[0], 2.0);
    cfg.decay_norm_and_bias = true;
    tr::adamw_step(ps, st, 0.1, cfg);
    EXPECT_NEAR(ps[0].value[0], 2.0 * 0.99, 1e-15);
}

TEST(AdamW, BiasCorrectionSecondStep) {
    tr::TrainConfig cfg;
    cfg.weight_decay = 0.0;
    std::vector<Parameter<double>> ps = {scalar_param(0.0, 1.0)};
    tr::OptimizerState<double> st;
    tr::adamw_step(ps, st, 1.0, cfg);
    ps[0].grad[0] = -2.0;
    tr::adamw_step(ps, st, 1.0, cfg);
    const double m = 0.9 * 0.1 + 0.1 * -2.0, v = 0.999 * 0.001 + 0.001 * 4.0;
    const double expect = -1.0 / (1.0 + 1e-8) - (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
    EXPECT_NEAR(ps[0].value[0], expect, 1e-12);
}

TEST(AdamW, NonFiniteAborts) {
    tr::TrainConfig cfg;
    std::vector<Parameter<double>> ps = {scalar_param(1.0, NAN)};
    tr::OptimizerState<double> st;
    EXPECT_THROW(tr::adamw_step(ps, st, 0.1, cfg), modlab::NonFiniteError);
    EXPECT_EQ(ps[0].value[0], 1.0);
    EXPECT_EQ(st.step, 0);
}

TEST(Train, AuxFrequencyZeroWhenRIsZero) {
    auto c = tiny();
    c.spec.r = 0.0;
    md::Model<float> m(c, 1);
    const auto ds = sp::generate_dataset(4, 7, sp::Distribution::uniform, 300, 2);
    tr::TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 64;
    cfg.peak_lr = 1e-3;
    const auto h = tr::train(m, ds, cfg);
    for (const auto& e : h.epochs) EXPECT_EQ(e.aux_frequency, 0.0);
    EXPECT_EQ(h.total_steps, 3 * 5);
    EXPECT_EQ(h.lr_trace.size(), 15u);
    EXPECT_EQ(h.lr_trace.front(), 0.0);
}

TEST(Train, AuxFrequencyTracksR) {
    auto c = tiny();
    md::Model<float> m(c, 1);
    const auto ds = sp::generate_dataset(4, 7, sp::Distribution::uniform, 2000, 2);
    tr::TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 500;
    const auto h = tr::train(m, ds, cfg);
    const double n = static_cast<double>(h.targets_drawn);
    EXPECT_EQ(h.targets_drawn, 8000);
    EXPECT_NEAR(h.aux_frequency(), 0.3, 3 * std::sqrt(0.21 / n));
}

TEST(Train, DeterministicAndLossDecreases) {
    const auto ds = sp::generate_dataset(4, 7, sp::Distribution::uniform, 1000, 3);
    tr::TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 50;
    cfg.peak_lr = 2e-3;
    cfg.seed = 4;
    md::Model<float> a(tiny(), 5), b(tiny(), 5);
    const auto ha = tr::train(a, ds, cfg);
    const auto hb = tr::train(b, ds, cfg);
    EXPECT_EQ(tr::history_csv(ha), tr::history_csv(hb));
    EXPECT_EQ(ha.batch_losses, hb.batch_losses);
    for (std::size_t i = 0; i < a.parameters().size(); ++i)
        EXPECT_EQ(a.parameters()[i].value.storage(), b.parameters()[i].value.storage());
    EXPECT_LT(ha.epochs.back().mean_loss, ha.epochs.front().mean_loss);
}

TEST(Train, IndependentOfHeapLayout) {
    const auto ds = sp::generate_dataset(8, 31, sp::Distribution::uniform, 1000, 1);
    md::ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.d_model = 64;
    c.d_ffn = 256;
    c.spec = {8, 31, 5, 0.2};
    tr::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 50;
    cfg.peak_lr = 1e-3;
    cfg.seed = 5;
    md::Model<float> a(c, 3);
    const auto ha = tr::train(a, ds, cfg);
    std::vector<std::unique_ptr<char[]>> hold;
    for (int i = 0; i < 37; ++i) hold.push_back(std::make_unique<char[]>(24 + 8 * i));
    md::Model<float> b(c, 3);
    const auto hb = tr::train(b, ds, cfg);
    EXPECT_EQ(ha.batch_losses, hb.batch_losses);
    for (std::size_t i = 0; i < a.parameters().size(); ++i)
        EXPECT_EQ(a.parameters()[i].value.storage(), b.parameters()[i].value.storage());
}

TEST(Train, ResumeReproducesUninterruptedRun) {
    const auto ds = sp::generate_dataset(4, 7, sp::Distribution::uniform, 400, 3);
    tr::TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 64;
    cfg.peak_lr = 2e-3;
    auto c = tiny();
    c.dropout = 0.1;
    const auto dir = std::filesystem::temp_directory_path() / "modlab_resume";
    std::filesystem::remove_all(dir);
    md::Model<float> full(c, 5);
    tr::TrainOptions opt;
    opt.checkpoint_dir = dir;
    const auto h_full = tr::train(full, ds, cfg, opt);
    EXPECT_TRUE(std::filesystem::exists(dir / "epoch_2.ckpt"));

    md::Model<float> resumed(c, 99);
    tr::TrainOptions opt2;
    opt2.resume_from = dir / "epoch_2.ckpt";
    const auto h_res = tr::train(resumed, ds, cfg, opt2);
    EXPECT_EQ(tr::history_csv(h_full), tr::history_csv(h_res));
    for (std::size_t i = 0; i < full.parameters().size(); ++i)
        EXPECT_EQ(full.parameters()[i].value.storage(), resumed.parameters()[i].value.storage());
    std::filesystem::remove_all(dir);
}

TEST(Train, CheckpointsBitIdentical) {
    const auto ds = sp::generate_dataset(4, 7, sp::Distribution::uniform, 200, 3);
    tr::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 64;
    const auto base = std::filesystem::temp_directory_path();
    for (const char* d : {"modlab_ck_a", "modlab_ck_b"}) {
        std::filesystem::remove_all(base / d);
        md::Model<float> m(tiny(), 5);
        tr::TrainOptions opt;
        opt.checkpoint_dir = base / d;
        (void)tr::train(m, ds, cfg, opt);
    }
    EXPECT_EQ(slurp(base / "modlab_ck_a" / "epoch_2.ckpt"), slurp(base / "modlab_ck_b" / "epoch_2.ckpt"));
    std::filesystem::remove_all(base / "modlab_ck_a");
    std::filesystem::remove_all(base / "modlab_ck_b");
}

TEST(Train, StopAfterEpochIsPrefixOfFullRun) {
    const auto ds = sp::generate_dataset(4, 7, sp::Distribution::uniform, 300, 3);
    tr::TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 64;
    cfg.peak_lr = 2e-3;
    const auto base = std::filesystem::temp_directory_path();
    std::filesystem::remove_all(base / "modlab_pre_full");
    std::filesystem::remove_all(base / "modlab_pre_part");
    md::Model<float> full(tiny(), 5);
    tr::TrainOptions a;
    a.checkpoint_dir = base / "modlab_pre_full";
    const auto h_full = tr::train(full, ds, cfg, a);
    md::Model<float> part(tiny(), 5);
    tr::TrainOptions b;
    b.checkpoint_dir = base / "modlab_pre_part";
    b.stop_after_epoch = 1;
    const auto h_part = tr::train(part, ds, cfg, b);
    ASSERT_EQ(h_part.epochs.size(), 1u);
    EXPECT_EQ(h_part.total_steps, h_full.total_steps);
    EXPECT_EQ(h_part.epochs[0].mean_loss, h_full.epochs[0].mean_loss);
    EXPECT_FALSE(std::filesystem::exists(base / "modlab_pre_part" / "epoch_2.ckpt"));
    EXPECT_TRUE(slurp(base / "modlab_pre_full" / "epoch_1.ckpt") == slurp(base / "modlab_pre_part" / "epoch_1.ckpt"));
    std::filesystem::remove_all(base / "modlab_pre_full");
    std::filesystem::remove_all(base / "modlab_pre_part");
}

TEST(Train, RejectsMismatchedDataset) {
    md::Model<float> m(tiny(), 1);
    const auto ds = sp::generate_dataset(4, 11, sp::Distribution::uniform, 10, 2);
    EXPECT_THROW((void)tr::train(m, ds, tr::TrainConfig{}), modlab::InvalidArgument);
}

TEST(Train, DefaultsFollowProtocol) {
    const tr::TrainConfig cfg;
    EXPECT_EQ(cfg.epochs, 10);
    EXPECT_EQ(cfg.batch_size, 250);
    EXPECT_EQ(cfg.peak_lr, 3e-5);
    EXPECT_EQ(cfg.warmup_ratio, 0.05);
    EXPECT_EQ(cfg.weight_decay, 0.1);
    EXPECT_EQ(cfg.beta1, 0.9);
    EXPECT_EQ(cfg.beta2, 0.999);
    EXPECT_EQ(cfg.adam_eps, 1e-8);
}
