#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "contraseg/gradcheck.hpp"

namespace contraseg {

// A named gradient check over randomly drawn float64 inputs.
struct NamedGradCheck {
    std::string name;
    std::function<ad::GradCheckResult(std::uint64_t seed)> run;
};

// One entry per autodiff primitive and one per loss.
const std::vector<NamedGradCheck>& gradcheck_registry();

// nullptr when no check has that name.
const NamedGradCheck* find_gradcheck(const std::string& name);

// A two-level backbone with a handful of channels, checked end to end on a
// 4x4x4 input with 160 probed coordinates. ReLU and max-pool kinks make
// isolated seeds land on non-differentiable points.
ad::GradCheckResult backbone_gradcheck(std::uint64_t seed, double eps = 1e-4);

}  // namespace contraseg
