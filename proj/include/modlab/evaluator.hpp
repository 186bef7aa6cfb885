#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "modlab/autodiff.hpp"
#include "modlab/error.hpp"
#include "modlab/model.hpp"
#include "modlab/sampling.hpp"

namespace modlab::evaluator {

inline const std::vector<double> kDefaultTaus = {0.05, 0.1};

/// min(|a - b|, q - |a - b|) for a, b in [0, q).
[[nodiscard]] inline double wrap_distance(double a, double b, std::int64_t q) {
    const auto qd = static_cast<double>(q);
    if (!(a >= 0.0 && a < qd) || !(b >= 0.0 && b < qd))
        throw InvalidArgument("wrap_distance: inputs must lie in [0, q)");
    const double d = std::fabs(a - b);
    return std::min(d, qd - d);
}

[[nodiscard]] inline std::int64_t tau_hits(std::span<const double> preds, std::span<const std::int64_t> labels,
                                           std::int64_t q, double tau) {
    if (tau < 0.0) throw InvalidArgument("tau_accuracy: tau must be >= 0");
    if (preds.size() != labels.size()) throw InvalidArgument("tau_accuracy: length mismatch");
    const double margin = tau * static_cast<double>(q);
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (wrap_distance(preds[i], static_cast<double>(labels[i]), q) <= margin) ++hits;
    return hits;
}

[[nodiscard]] inline double tau_accuracy(std::span<const double> preds, std::span<const std::int64_t> labels,
                                         std::int64_t q, double tau) {
    const auto hits = tau_hits(preds, labels, q, tau);
    return preds.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(preds.size());
}

[[nodiscard]] inline double match_accuracy(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels) {
    if (preds.size() != labels.size()) throw InvalidArgument("match_accuracy: length mismatch");
    if (preds.empty()) return 0.0;
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

struct Stratum {
    std::int64_t count = 0;
    std::int64_t correct = 0;

    [[nodiscard]] double accuracy() const noexcept {
        return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count);
    }
};

/// Buckets by exact zero count n0(x).
[[nodiscard]] inline std::map<std::int64_t, Stratum> stratified_accuracy(std::span<const std::int64_t> preds,
                                                                         std::span<const std::int64_t> labels,
                                                                         std::span<const sampling::InputVector> inputs) {
    if (preds.size() != labels.size() || preds.size() != inputs.size())
        throw InvalidArgument("stratified_accuracy: length mismatch");
    std::map<std::int64_t, Stratum> out;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        auto& s = out[inputs[i].zero_count()];
        ++s.count;
        s.correct += preds[i] == labels[i];
    }
    return out;
}

/// Decoded predictions for a whole set: the integer class and the
/// continuous residue (equal to the class for token models).
struct Predictions {
    std::vector<std::int64_t> classes;
    std::vector<double> continuous;
};

template <class T>
[[nodiscard]] Predictions predict(model::Model<T>& net, std::span<const sampling::InputVector> inputs,
                                  std::size_t batch_size = 1000) {
    const auto& cfg = net.config();
    const std::int64_t q = cfg.spec.q;
    const auto out_dim = static_cast<std::size_t>(cfg.output_dim());
    Predictions p;
    p.classes.reserve(inputs.size());
    p.continuous.reserve(inputs.size());
    for (std::size_t lo = 0; lo < inputs.size(); lo += batch_size) {
        const std::size_t hi = std::min(inputs.size(), lo + batch_size);
        ad::Tape<T> tape;
        tape.set_grad_enabled(false);
        const auto out = net.forward(tape, inputs.subspan(lo, hi - lo));
        const auto& v = out.value();
        for (std::size_t b = 0; b < hi - lo; ++b) {
            std::span<const T> row(v.data() + b * out_dim, out_dim);
            if (cfg.embedding_kind == model::EmbeddingKind::token_extended) {
                const auto c = model::decode_token(row, q);
                p.classes.push_back(c);
                p.continuous.push_back(static_cast<double>(c));
            } else {
                const auto d = model::decode_angular(row, q);
                p.classes.push_back(d.s_round);
                p.continuous.push_back(d.s_hat);
            }
        }
    }
    return p;
}

struct ReportMeta {
    ProblemSpec spec;
    std::string config_hash;
    std::string dataset_id;
    std::string embedding_kind;
    std::string tau_decode;
};

struct MetricsReport {
    std::int64_t count = 0;
    std::int64_t correct = 0;
    double match_accuracy = 0.0;
    std::vector<double> taus;
    std::vector<std::int64_t> tau_hits;
    std::vector<double> tau_accuracy;
    std::map<std::int64_t, Stratum> stratified;
    ReportMeta meta;

    /// Overall correct count equals the sum over strata, as integers.
    [[nodiscard]] bool decomposition_holds() const {
        std::int64_t n = 0;
        std::int64_t c = 0;
        for (const auto& [k, s] : stratified) {
            n += s.count;
            c += s.correct;
        }
        return n == count && c == correct;
    }
};

[[nodiscard]] inline MetricsReport make_report(const Predictions& p, std::span<const sampling::LabeledExample> examples,
                                               std::int64_t q, const std::vector<double>& taus = kDefaultTaus) {
    if (p.classes.size() != examples.size()) throw InvalidArgument("make_report: length mismatch");
    std::vector<std::int64_t> labels;
    std::vector<sampling::InputVector> inputs;
    labels.reserve(examples.size());
    inputs.reserve(examples.size());
    for (const auto& e : examples) {
        labels.push_back(e.y_q);
        inputs.push_back(e.x);
    }
    MetricsReport r;
    r.count = static_cast<std::int64_t>(examples.size());
    for (std::size_t i = 0; i < labels.size(); ++i) r.correct += p.classes[i] == labels[i];
    r.match_accuracy = match_accuracy(p.classes, labels);
    r.taus = taus;
    for (double tau : taus) {
        const auto hits = tau_hits(p.continuous, labels, q, tau);
        r.tau_hits.push_back(hits);
        r.tau_accuracy.push_back(r.count == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(r.count));
    }
    r.stratified = stratified_accuracy(p.classes, labels, inputs);
    return r;
}

template <class T>
[[nodiscard]] MetricsReport evaluate(model::Model<T>& net, const sampling::Dataset& data,
                                     const std::vector<double>& taus = kDefaultTaus) {
    const auto& spec = net.config().spec;
    if (data.meta.n != spec.n || data.meta.q != spec.q)
        throw InvalidArgument("evaluate: test set (N=" + std::to_string(data.meta.n) + ", q=" +
                              std::to_string(data.meta.q) + ") does not match model spec (N=" +
                              std::to_string(spec.n) + ", q=" + std::to_string(spec.q) + ")");
    std::vector<sampling::InputVector> inputs;
    inputs.reserve(data.size());
    for (const auto& e : data.examples) inputs.push_back(e.x);
    auto r = make_report(predict(net, std::span<const sampling::InputVector>(inputs)), data.examples, spec.q, taus);
    const bool token = net.config().embedding_kind == model::EmbeddingKind::token_extended;
    r.meta = {spec, model::config_hash(net.config()), data.meta.manifest_hash, token ? "token_extended" : "dual_angular",
              token ? "integer argmax cast to real" : "continuous s_hat"};
    return r;
}

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json taus = nlohmann::json::array();
    for (std::size_t i = 0; i < r.taus.size(); ++i)
        taus.push_back({{"tau", r.taus[i]}, {"hits", r.tau_hits[i]}, {"accuracy", r.tau_accuracy[i]}});
    nlohmann::json strata = nlohmann::json::array();
    for (const auto& [n0, s] : r.stratified)
        strata.push_back({{"n0", n0}, {"count", s.count}, {"correct", s.correct}, {"accuracy", s.accuracy()}});
    return {{"count", r.count},
            {"correct", r.correct},
            {"match_accuracy", r.match_accuracy},
            {"tau_accuracy", taus},
            {"stratified", strata},
            {"meta",
             {{"spec", r.meta.spec},
              {"config_hash", r.meta.config_hash},
              {"dataset_id", r.meta.dataset_id},
              {"embedding_kind", r.meta.embedding_kind},
              {"tau_decode", r.meta.tau_decode}}}};
}

/// Two sections: a one-row summary keyed by metric, then the strata.
inline std::string to_csv(const MetricsReport& r) {
    std::string out = "metric,value\ncount," + std::to_string(r.count) + "\nmatch_accuracy," + fmt(r.match_accuracy) + "\n";
    for (std::size_t i = 0; i < r.taus.size(); ++i)
        out += "tau_accuracy@" + fmt(r.taus[i]) + "," + fmt(r.tau_accuracy[i]) + "\n";
    out += "\nn0,count,correct,accuracy\n";
    for (const auto& [n0, s] : r.stratified)
        out += std::to_string(n0) + "," + std::to_string(s.count) + "," + std::to_string(s.correct) + "," +
               fmt(s.accuracy()) + "\n";
    return out;
}

struct GapReport {
    double train_risk = 0.0;
    double test_risk = 0.0;
    /// Error on the zero-free test stratum; absent when the stratum is empty.
    std::optional<double> zero_free_error;
    double zero_free_weight = 0.0;
    bool bound_check = true;
};

/// 0/1-loss decomposition: test_risk >= weight(n0 = 0) * error(n0 = 0).
/// predictor maps a set of inputs to predicted classes.
template <class Predictor>
[[nodiscard]] GapReport empirical_gap(Predictor&& predictor, std::span<const sampling::LabeledExample> train_set,
                                      std::span<const sampling::LabeledExample> test_set) {
    auto risk_and_strata = [&](std::span<const sampling::LabeledExample> set) {
        std::vector<sampling::InputVector> xs;
        std::vector<std::int64_t> labels;
        for (const auto& e : set) {
            xs.push_back(e.x);
            labels.push_back(e.y_q);
        }
        const std::vector<std::int64_t> preds = predictor(std::span<const sampling::InputVector>(xs));
        const double risk = set.empty() ? 0.0 : 1.0 - match_accuracy(preds, labels);
        return std::pair{risk, stratified_accuracy(preds, labels, xs)};
    };
    GapReport g;
    g.train_risk = risk_and_strata(train_set).first;
    const auto [test_risk, strata] = risk_and_strata(test_set);
    g.test_risk = test_risk;
    const auto it = strata.find(0);
    if (it != strata.end() && it->second.count > 0) {
        g.zero_free_error = 1.0 - it->second.accuracy();
        g.zero_free_weight = static_cast<double>(it->second.count) / static_cast<double>(test_set.size());
        std::int64_t wrong_all = 0;
        for (const auto& [n0, s] : strata) wrong_all += s.count - s.correct;
        g.bound_check = wrong_all >= it->second.count - it->second.correct;
    }
    return g;
}

inline nlohmann::json to_json(const GapReport& g) {
    nlohmann::json j = {{"train_risk", g.train_risk},
                        {"test_risk", g.test_risk},
                        {"zero_free_weight", g.zero_free_weight},
                        {"bound_check", g.bound_check}};
    j["zero_free_error"] = g.zero_free_error ? nlohmann::json(*g.zero_free_error) : nlohmann::json(nullptr);
    return j;
}

/// One row of the method x sample size x (N, q) comparison layout.
struct ComparisonRow {
    std::string method;
    std::int64_t train_samples = 0;
    std::int64_t n = 0;
    std::int64_t q = 0;
    double match_accuracy = 0.0;
    std::vector<double> tau_accuracy;
};

/// Rows are methods; columns are (N, q, samples) triples in first-seen order.
inline std::string comparison_table_csv(const std::vector<ComparisonRow>& rows, const std::vector<double>& taus = {}) {
    std::vector<std::tuple<std::int64_t, std::int64_t, std::int64_t>> cols;
    std::vector<std::string> methods;
    for (const auto& r : rows) {
        const auto c = std::make_tuple(r.n, r.q, r.train_samples);
        if (std::find(cols.begin(), cols.end(), c) == cols.end()) cols.push_back(c);
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    }
    std::string out = "method";
    for (const auto& [n, q, s] : cols) {
        const std::string tag = "N" + std::to_string(n) + "_q" + std::to_string(q) + "_" + std::to_string(s);
        out += "," + tag + "_match";
        for (double t : taus) out += "," + tag + "_tau" + fmt(t);
    }
    out += "\n";
    for (const auto& m : methods) {
        out += m;
        for (const auto& c : cols) {
            const auto it = std::find_if(rows.begin(), rows.end(), [&](const ComparisonRow& r) {
                return r.method == m && std::make_tuple(r.n, r.q, r.train_samples) == c;
            });
            if (it == rows.end()) {
                out += ",";
                for (std::size_t i = 0; i < taus.size(); ++i) out += ",";
                continue;
            }
            out += "," + fmt(it->match_accuracy);
            for (std::size_t i = 0; i < taus.size(); ++i)
                out += "," + (i < it->tau_accuracy.size() ? fmt(it->tau_accuracy[i]) : std::string{});
        }
        out += "\n";
    }
    return out;
}

}  // namespace modlab::evaluator
