// Small end-to-end run: closed-form statistics, a dataset, a short
// training run and its evaluation.  Finishes in well under a minute.

#include <cstdio>

#include "modlab/analytics.hpp"
#include "modlab/evaluator.hpp"
#include "modlab/model.hpp"
#include "modlab/sampling.hpp"
#include "modlab/trainer.hpp"

using namespace modlab;

int main() {
    const ProblemSpec spec = make_spec(4, 11, 3, 0.3);

    const auto w = analytics::summarize(spec);
    std::printf("N=%lld q=%lld K=%lld r=%.2f\n", static_cast<long long>(spec.n), static_cast<long long>(spec.q),
                static_cast<long long>(spec.k), spec.r);
    std::printf("  E[X0] %.4f  E[X1] %.4f  E[X2] %.4f\n", analytics::to_double(w.e_x0), analytics::to_double(w.e_x1),
                w.e_x2);
    std::printf("  E[D_Kq] %.4f in [%.4f, %.4f], P(D_Kq = 0) %.4f\n", analytics::to_double(w.e_dkq_exact),
                analytics::to_double(w.e_dkq_bounds.lo), analytics::to_double(w.e_dkq_bounds.hi),
                analytics::to_double(w.p_zero_wraps));
    std::printf("  rho(K, r) %.3f, gap prefactor %.4f\n", analytics::rho(spec.k, spec.r),
                analytics::gap_lower_bound({spec.q, spec.n, 1.0, 0.0}).prefactor);

    const auto train = sampling::generate_dataset(spec.n, spec.q, sampling::Distribution::uniform, 4000, 1);
    const auto test = sampling::generate_dataset(spec.n, spec.q, sampling::Distribution::uniform, 2000, 2);

    model::ModelConfig mc;
    mc.layers = 2;
    mc.heads = 2;
    mc.d_model = 32;
    mc.d_ffn = 64;
    mc.spec = spec;
    model::Model<float> net(mc, 1);

    trainer::TrainConfig tc;
    tc.epochs = 15;
    tc.batch_size = 50;
    tc.peak_lr = 2e-3;
    tc.seed = 1;
    trainer::TrainOptions opt;
    opt.on_epoch = [](const trainer::EpochRecord& e) {
        std::printf("epoch %2lld  loss %.4f  aux %.3f\n", static_cast<long long>(e.epoch), e.mean_loss, e.aux_frequency);
    };
    (void)trainer::train(net, train, tc, opt);

    const auto report = evaluator::evaluate(net, test);
    std::printf("test match accuracy %.4f, tau=0.05 %.4f, tau=0.1 %.4f\n", report.match_accuracy,
                report.tau_accuracy[0], report.tau_accuracy[1]);
    for (const auto& [n0, s] : report.stratified)
        std::printf("  %lld zeros: %lld examples, accuracy %.4f\n", static_cast<long long>(n0),
                    static_cast<long long>(s.count), s.accuracy());
}
