#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include "contraseg/volume.hpp"

namespace testing {

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("contraseg_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline contraseg::ImageVolume random_image(const contraseg::Dims& d, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    contraseg::ImageVolume v(d);
    for (auto& x : v.data()) x = u(rng);
    return v;
}

inline contraseg::MaskVolume random_mask(const contraseg::Dims& d, std::mt19937_64& rng, double p = 0.5) {
    std::bernoulli_distribution b(p);
    contraseg::MaskVolume v(d);
    for (auto& x : v.data()) x = b(rng) ? 1 : 0;
    return v;
}

}  // namespace testing
