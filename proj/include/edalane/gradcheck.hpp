#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "edalane/rng.hpp"
#include "edalane/tensor.hpp"

namespace edalane {

// Finite-difference verification harness. Runs in 64-bit precision only:
// float32 round-off would swamp the 1e-4 step size.
struct GradCheckReport {
    std::vector<double> max_rel_err; // one entry per checked input

    double overall() const {
        double m = 0.0;
        for (double e : max_rel_err) m = std::max(m, e);
        return m;
    }
    bool pass(double tol) const { return overall() < tol; }
};

using GradCheckForward = std::function<DTensor(const std::vector<DTensor>&)>;
// Given the inputs and an upstream gradient, return d(input_i) for every input.
using GradCheckBackward = std::function<std::vector<DTensor>(const std::vector<DTensor>&, const DTensor&)>;

// Compares analytic gradients against central finite differences of the scalar
// J = <projection, f(inputs)>. Step h = 1e-4 * max(1, |x|) per element;
// relative error |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport grad_check(const GradCheckForward& f, const GradCheckBackward& b, std::vector<DTensor> inputs,
                                  std::uint64_t seed = 0x9d5f) {
    const DTensor y0 = f(inputs);

    Rng rng(seed);
    DTensor projection(y0.shape);
    for (auto& v : projection.data) {
        v = (0.5 + rng.uniform()) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    }

    const std::vector<DTensor> analytic = b(inputs, projection);

    const auto objective = [&](const std::vector<DTensor>& in) {
        const DTensor y = f(in);
        double j = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i) j += y.data[i] * projection.data[i];
        return j;
    };

    GradCheckReport report;
    report.max_rel_err.assign(inputs.size(), 0.0);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t e = 0; e < inputs[i].data.size(); ++e) {
            const double x0 = inputs[i].data[e];
            const double h = 1e-4 * std::max(1.0, std::fabs(x0));
            inputs[i].data[e] = x0 + h;
            const double jp = objective(inputs);
            inputs[i].data[e] = x0 - h;
            const double jm = objective(inputs);
            inputs[i].data[e] = x0;

            const double numeric = (jp - jm) / (2.0 * h);
            const double a = analytic[i].data[e];
            const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            report.max_rel_err[i] = std::max(report.max_rel_err[i], rel);
        }
    }
    return report;
}

} // namespace edalane
