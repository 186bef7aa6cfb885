#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "modlab/autodiff.hpp"
#include "modlab/checkpoint.hpp"
#include "modlab/error.hpp"
#include "modlab/model.hpp"
#include "modlab/random.hpp"
#include "modlab/sampling.hpp"

namespace modlab::trainer {

enum class Precision { f32, f64 };
NLOHMANN_JSON_SERIALIZE_ENUM(Precision, {{Precision::f32, "f32"}, {Precision::f64, "f64"}})

struct TrainConfig {
    std::int64_t epochs = 10;
    std::int64_t batch_size = 250;
    double peak_lr = 3e-5;
    double warmup_ratio = 0.05;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    Precision precision = Precision::f32;
    /// When false, layer-norm gains and biases are excluded from weight decay.
    bool decay_norm_and_bias = false;

    void validate() const {
        detail::require(epochs >= 1, "TrainConfig: epochs must be >= 1");
        detail::require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
        detail::require(peak_lr > 0.0, "TrainConfig: peak_lr must be > 0");
        detail::require(warmup_ratio >= 0.0 && warmup_ratio < 1.0, "TrainConfig: warmup_ratio must lie in [0,1)");
        detail::require(weight_decay >= 0.0, "TrainConfig: weight_decay must be >= 0");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, peak_lr, warmup_ratio, weight_decay,
                                                beta1, beta2, adam_eps, seed, precision, decay_norm_and_bias)

[[nodiscard]] inline std::int64_t warmup_steps(std::int64_t total_steps, const TrainConfig& cfg) {
    return static_cast<std::int64_t>(std::ceil(cfg.warmup_ratio * static_cast<double>(total_steps)));
}

/// Linear warmup from 0 to peak over ceil(ratio * total) steps, then linear
/// decay to 0 at total.
[[nodiscard]] inline double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
    detail::require(total_steps >= 1, "lr_at: total_steps must be >= 1");
    detail::require(step >= 0 && step <= total_steps, "lr_at: step outside [0, total_steps]");
    const std::int64_t warm = warmup_steps(total_steps, cfg);
    if (step < warm) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warm);
    if (warm == total_steps) return cfg.peak_lr;
    return cfg.peak_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warm);
}

template <class T>
struct OptimizerState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::int64_t step = 0;

    void init(const std::vector<ad::Parameter<T>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p.value.shape());
            v.emplace_back(p.value.shape());
        }
        step = 0;
    }
};

/// One decoupled AdamW update:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta).
/// Decay applies only to parameters flagged for it unless
/// cfg.decay_norm_and_bias.  Non-finite gradients abort before any write.
template <class T>
void adamw_step(std::vector<ad::Parameter<T>>& params, OptimizerState<T>& state, double lr, const TrainConfig& cfg) {
    if (state.m.size() != params.size()) state.init(params);
    for (const auto& p : params) {
        if (p.grad.shape() != p.value.shape()) throw ShapeError("adamw_step: gradient shape mismatch for " + p.name);
        if (!p.grad.all_finite()) throw NonFiniteError("adamw_step: non-finite gradient in '" + p.name + "'; step aborted");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        const double wd = (p.decay || cfg.decay_norm_and_bias) ? cfg.weight_decay : 0.0;
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad[j];
            const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.adam_eps) + wd * p.value[j];
            p.value[j] = static_cast<T>(p.value[j] - lr * update);
        }
    }
}

struct EpochRecord {
    std::int64_t epoch = 0;
    double mean_loss = 0.0;
    double lr_last = 0.0;
    double aux_frequency = 0.0;
};

struct History {
    std::vector<EpochRecord> epochs;
    std::vector<double> lr_trace;
    std::vector<double> batch_losses;
    std::int64_t total_steps = 0;
    std::int64_t aux_selected = 0;
    std::int64_t targets_drawn = 0;
    std::string target_redraw = "per_epoch";

    [[nodiscard]] double aux_frequency() const {
        return targets_drawn == 0 ? 0.0 : static_cast<double>(aux_selected) / static_cast<double>(targets_drawn);
    }
};

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// epoch,mean_loss,lr_last,aux_frequency with round-trippable decimals.
inline std::string history_csv(const History& h) {
    std::string out = "epoch,mean_loss,lr_last,aux_frequency\n";
    for (const auto& e : h.epochs)
        out += std::to_string(e.epoch) + "," + format_double(e.mean_loss) + "," + format_double(e.lr_last) + "," +
               format_double(e.aux_frequency) + "\n";
    return out;
}

inline nlohmann::json history_json(const History& h) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : h.epochs)
        epochs.push_back(
            {{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"lr_last", e.lr_last}, {"aux_frequency", e.aux_frequency}});
    return {{"epochs", epochs},
            {"lr_trace", h.lr_trace},
            {"total_steps", h.total_steps},
            {"aux_selected", h.aux_selected},
            {"targets_drawn", h.targets_drawn},
            {"aux_frequency", h.aux_frequency()},
            {"target_redraw", h.target_redraw}};
}

struct TrainOptions {
    /// Directory for per-epoch checkpoints; empty disables them.
    std::filesystem::path checkpoint_dir;
    std::int64_t checkpoint_every = 1;
    /// Resume from a checkpoint written by an earlier call with the same
    /// dataset and configuration.
    std::optional<std::filesystem::path> resume_from;
    /// Called after each epoch with the record just appended.
    std::function<void(const EpochRecord&)> on_epoch;
    /// Return once this many epochs are complete; the schedule still spans
    /// cfg.epochs, so the run is a prefix of the full one.
    std::optional<std::int64_t> stop_after_epoch;
    nlohmann::json stamp = nlohmann::json::object();
};

namespace detail {

inline constexpr std::uint64_t kShuffleStream = 0x5401;
inline constexpr std::uint64_t kTargetStream = 0x5402;
inline constexpr std::uint64_t kDropoutStream = 0x5403;

template <class T>
void save_training_checkpoint(const std::filesystem::path& path, const model::Model<T>& m,
                              const OptimizerState<T>& opt, const History& h, std::int64_t next_epoch,
                              const TrainConfig& cfg, const nlohmann::json& stamp) {
    std::vector<checkpoint::NamedTensor<T>> list;
    for (const auto& p : m.parameters()) list.push_back({p.name, &p.value});
    for (std::size_t i = 0; i < opt.m.size(); ++i) {
        list.push_back({"adam.m/" + m.parameters()[i].name, &opt.m[i]});
        list.push_back({"adam.v/" + m.parameters()[i].name, &opt.v[i]});
    }
    nlohmann::json extra = stamp;
    extra["train_config"] = cfg;
    extra["train_state"] = {{"next_epoch", next_epoch}, {"optimizer_step", opt.step}, {"history", history_json(h)}};
    checkpoint::write(path, m.config(), list, extra);
}

}  // namespace detail

/// Trains in place.  Every epoch reshuffles the example order and redraws
/// every target (primary with probability 1-r, auxiliary with probability r)
/// from substreams keyed by (seed, epoch); the last partial batch is kept.
/// The schedule horizon is epochs * ceil(|dataset| / batch_size) steps and
/// update k uses lr_at(k).
template <class T>
History train(model::Model<T>& net, const sampling::Dataset& data, const TrainConfig& cfg,
              const TrainOptions& options = {}) {
    cfg.validate();
    const auto& spec = net.config().spec;
    if (data.meta.n != spec.n || data.meta.q != spec.q)
        throw InvalidArgument("train: dataset (N=" + std::to_string(data.meta.n) + ", q=" + std::to_string(data.meta.q) +
                              ") does not match model spec (N=" + std::to_string(spec.n) + ", q=" +
                              std::to_string(spec.q) + ")");
    if (data.examples.empty()) throw InvalidArgument("train: empty dataset");

    const auto count = static_cast<std::int64_t>(data.size());
    const std::int64_t batches_per_epoch = (count + cfg.batch_size - 1) / cfg.batch_size;
    History history;
    history.total_steps = cfg.epochs * batches_per_epoch;
    OptimizerState<T> opt;
    opt.init(net.parameters());
    std::int64_t first_epoch = 0;

    if (options.resume_from) {
        const auto c = checkpoint::read(*options.resume_from);
        if (model::config_hash(c.config) != model::config_hash(net.config()))
            throw InvalidArgument("train: resume checkpoint has a different model configuration");
        checkpoint::restore(net, c);
        for (std::size_t i = 0; i < net.parameters().size(); ++i) {
            const auto& name = net.parameters()[i].name;
            const auto& m = c.tensors.at("adam.m/" + name);
            const auto& v = c.tensors.at("adam.v/" + name);
            for (std::size_t j = 0; j < m.size(); ++j) {
                opt.m[i][j] = static_cast<T>(m[j]);
                opt.v[i][j] = static_cast<T>(v[j]);
            }
        }
        const auto& st = c.manifest.at("train_state");
        first_epoch = st.at("next_epoch");
        opt.step = st.at("optimizer_step");
        const auto& hj = st.at("history");
        for (const auto& e : hj.at("epochs"))
            history.epochs.push_back({e.at("epoch"), e.at("mean_loss"), e.at("lr_last"), e.at("aux_frequency")});
        history.lr_trace = hj.at("lr_trace").get<std::vector<double>>();
        history.aux_selected = hj.at("aux_selected");
        history.targets_drawn = hj.at("targets_drawn");
    }

    std::vector<std::size_t> order(data.size());
    std::vector<sampling::InputVector> batch_inputs;
    std::vector<sampling::TrainingTarget> batch_targets;
    for (std::int64_t epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng = Rng::substream(cfg.seed, {detail::kShuffleStream, static_cast<std::uint64_t>(epoch)});
        shuffle_rng.shuffle(std::span<std::size_t>(order));
        Rng target_rng = Rng::substream(cfg.seed, {detail::kTargetStream, static_cast<std::uint64_t>(epoch)});
        Rng dropout_rng = Rng::substream(cfg.seed, {detail::kDropoutStream, static_cast<std::uint64_t>(epoch)});

        double loss_sum = 0.0;
        std::int64_t aux_in_epoch = 0;
        double lr = 0.0;
        for (std::int64_t b = 0; b < batches_per_epoch; ++b) {
            const std::size_t lo = static_cast<std::size_t>(b * cfg.batch_size);
            const std::size_t hi = std::min(data.size(), lo + static_cast<std::size_t>(cfg.batch_size));
            batch_inputs.clear();
            batch_targets.clear();
            for (std::size_t i = lo; i < hi; ++i) {
                const auto& ex = data.examples[order[i]];
                batch_inputs.push_back(ex.x);
                batch_targets.push_back(sampling::select_target(ex, spec, target_rng));
                if (batch_targets.back().kind == sampling::ModulusKind::auxiliary_kq) ++aux_in_epoch;
            }

            net.zero_grad();
            ad::Tape<T> tape;
            const auto out = net.forward(tape, std::span<const sampling::InputVector>(batch_inputs),
                                         {.training = true, .dropout_rng = &dropout_rng});
            const auto loss = model::loss(out, std::span<const sampling::TrainingTarget>(batch_targets), net.config());
            if (tape.nonfinite())
                throw NonFiniteError("train: non-finite forward value at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(b));
            tape.backward(loss);

            lr = lr_at(opt.step, history.total_steps, cfg);
            adamw_step(net.parameters(), opt, lr, cfg);
            const double l = static_cast<double>(loss.value()[0]);
            history.lr_trace.push_back(lr);
            history.batch_losses.push_back(l);
            loss_sum += l * static_cast<double>(hi - lo);
        }
        history.aux_selected += aux_in_epoch;
        history.targets_drawn += count;
        history.epochs.push_back({epoch + 1, loss_sum / static_cast<double>(count), lr,
                                  static_cast<double>(aux_in_epoch) / static_cast<double>(count)});
        if (options.on_epoch) options.on_epoch(history.epochs.back());

        const bool stop = options.stop_after_epoch && epoch + 1 >= *options.stop_after_epoch;
        const bool last = epoch + 1 == cfg.epochs || stop;
        if (!options.checkpoint_dir.empty() && (last || (epoch + 1) % options.checkpoint_every == 0)) {
            std::filesystem::create_directories(options.checkpoint_dir);
            const auto path = options.checkpoint_dir / ("epoch_" + std::to_string(epoch + 1) + ".ckpt");
            detail::save_training_checkpoint(path, net, opt, history, epoch + 1, cfg, options.stamp);
        }
        if (stop) break;
    }
    return history;
}

}  // namespace modlab::trainer
