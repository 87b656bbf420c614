#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "contraseg/autodiff.hpp"

namespace contraseg::ad {

struct GradCheckInput {
    Shape shape;
    std::vector<double> values;
};

using ScalarFn = std::function<Tensor<double>(Tape<double>&, std::span<const Tensor<double>>)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;  // number of coordinates probed
};

// Compares reverse-mode gradients of `f` against central differences, in
// float64. The step for coordinate i is eps * max(1, |x_i|); the error is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
// When `max_coords` is nonzero and smaller than the total coordinate count,
// an evenly strided subset is probed.
GradCheckResult grad_check(const ScalarFn& f, std::span<const GradCheckInput> inputs, double eps = 1e-4,
                           std::size_t max_coords = 0);

}  // namespace contraseg::ad
