#pragma once

#include <compare>
#include <cstddef>

namespace contraseg {

// Integer (z, y, x) position. Ordering is z-major, matching linear indices.
struct Voxel {
    std::size_t z = 0;
    std::size_t y = 0;
    std::size_t x = 0;

    auto operator<=>(const Voxel&) const = default;
};

}  // namespace contraseg
