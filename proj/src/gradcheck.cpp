#include "contraseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace contraseg::ad {

namespace {

double evaluate(const ScalarFn& f, std::span<const GradCheckInput> inputs) {
    Tape<double> tape;
    std::vector<Tensor<double>> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) leaves.push_back(tape.constant(in.shape, in.values));
    return f(tape, leaves).item();
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::span<const GradCheckInput> inputs, double eps,
                           std::size_t max_coords) {
    Tape<double> tape;
    std::vector<Tensor<double>> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in.shape, in.values, true));
    const Tensor<double> out = f(tape, leaves);
    tape.backward(out);

    std::vector<std::vector<double>> analytic;
    std::size_t total = 0;
    for (const auto& leaf : leaves) {
        const auto g = leaf.grad();
        analytic.emplace_back(g.begin(), g.end());
        analytic.back().resize(leaf.numel(), 0.0);
        total += leaf.numel();
    }

    std::size_t stride = 1;
    if (max_coords != 0 && total > max_coords) stride = (total + max_coords - 1) / max_coords;

    std::vector<GradCheckInput> probe(inputs.begin(), inputs.end());
    GradCheckResult result;
    std::size_t flat = 0;
    for (std::size_t k = 0; k < probe.size(); ++k) {
        for (std::size_t i = 0; i < probe[k].values.size(); ++i, ++flat) {
            if (flat % stride != 0) continue;
            const double x = inputs[k].values[i];
            const double h = eps * std::max(1.0, std::abs(x));
            probe[k].values[i] = x + h;
            const double fp = evaluate(f, probe);
            probe[k].values[i] = x - h;
            const double fm = evaluate(f, probe);
            probe[k].values[i] = x;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[k][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
            ++result.coordinates;
        }
    }
    return result;
}

}  // namespace contraseg::ad
