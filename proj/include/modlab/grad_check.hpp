#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "modlab/autodiff.hpp"

namespace modlab::ad {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    bool nonfinite = false;
    bool passed = false;
};

/// A scalar-valued function of several tensors, recorded on a tape.
using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

namespace detail {

inline double evaluate(const ScalarFn& fn, const std::vector<Tensor<double>>& point) {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    std::vector<Var<double>> inputs;
    inputs.reserve(point.size());
    for (const auto& p : point) inputs.push_back(tape.constant(p));
    return fn(tape, inputs).value()[0];
}

}  // namespace detail

/// Compares reverse-mode gradients of fn at point against central finite
/// differences with step 1e-5 * max(1, |x|).  The relative error of one
/// entry is |g_ad - g_fd| / max(|g_ad|, |g_fd|, floor); the report passes iff
/// the largest one is <= tol and every value is finite.
inline GradCheckReport grad_check(const ScalarFn& fn, std::vector<Tensor<double>> point, double tol,
                                  double floor = 1e-4) {
    GradCheckReport report;
    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        std::vector<Var<double>> inputs;
        for (const auto& p : point) inputs.push_back(tape.input(p));
        const Var<double> out = fn(tape, inputs);
        if (out.value().size() != 1) throw ShapeError("grad_check: function must be scalar-valued");
        report.nonfinite = tape.nonfinite();
        tape.backward(out);
        for (const auto& in : inputs) analytic.push_back(tape.grad(in.id));
    }

    for (std::size_t a = 0; a < point.size(); ++a) {
        for (std::size_t i = 0; i < point[a].size(); ++i) {
            const double x0 = point[a][i];
            const double h = 1e-5 * std::max(1.0, std::abs(x0));
            point[a][i] = x0 + h;
            const double fp = detail::evaluate(fn, point);
            point[a][i] = x0 - h;
            const double fm = detail::evaluate(fn, point);
            point[a][i] = x0;
            const double numeric = (fp - fm) / (2.0 * h);
            const double exact = analytic[a].empty() ? 0.0 : analytic[a][i];
            if (!std::isfinite(numeric) || !std::isfinite(exact)) {
                report.nonfinite = true;
                continue;
            }
            const double err =
                std::abs(exact - numeric) / std::max({std::abs(exact), std::abs(numeric), floor});
            ++report.checked;
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_input = a;
                report.worst_index = i;
            }
        }
    }
    report.passed = !report.nonfinite && report.max_rel_error <= tol;
    return report;
}

/// Same check with respect to parameters bound on the tape.  loss_fn must
/// record the loss on the given tape and read parameters through
/// Tape::param; every entry of every parameter is perturbed in place.
inline GradCheckReport grad_check_parameters(std::vector<Parameter<double>>& params,
                                             const std::function<Var<double>(Tape<double>&)>& loss_fn, double tol,
                                             double floor = 1e-4) {
    GradCheckReport report;
    for (auto& p : params) p.zero_grad();
    {
        Tape<double> tape;
        const Var<double> out = loss_fn(tape);
        if (out.value().size() != 1) throw ShapeError("grad_check_parameters: loss must be scalar-valued");
        report.nonfinite = tape.nonfinite();
        tape.backward(out);
    }
    auto eval = [&] {
        Tape<double> tape;
        tape.set_grad_enabled(false);
        return loss_fn(tape).value()[0];
    };
    for (std::size_t a = 0; a < params.size(); ++a) {
        auto& value = params[a].value;
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double x0 = value[i];
            const double h = 1e-5 * std::max(1.0, std::abs(x0));
            value[i] = x0 + h;
            const double fp = eval();
            value[i] = x0 - h;
            const double fm = eval();
            value[i] = x0;
            const double numeric = (fp - fm) / (2.0 * h);
            const double exact = params[a].grad[i];
            if (!std::isfinite(numeric) || !std::isfinite(exact)) {
                report.nonfinite = true;
                continue;
            }
            const double err =
                std::abs(exact - numeric) / std::max({std::abs(exact), std::abs(numeric), floor});
            ++report.checked;
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_input = a;
                report.worst_index = i;
            }
        }
    }
    report.passed = !report.nonfinite && report.max_rel_error <= tol;
    return report;
}

}  // namespace modlab::ad
