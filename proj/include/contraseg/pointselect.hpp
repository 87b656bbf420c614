#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "contraseg/volume.hpp"

namespace contraseg {

struct PointSet {
    std::vector<Voxel> uncertain;
    std::vector<Voxel> certain;

    std::size_t size() const { return uncertain.size() + certain.size(); }
};

struct ClassPartition {
    std::vector<Voxel> certain_fg;    // certain and labelled foreground
    std::vector<Voxel> uncertain_fg;  // uncertain and labelled foreground
    std::vector<Voxel> background;    // everything else
};

struct SelectOptions {
    // Restrict selection to a random candidate pool of oversample_ratio * N
    // voxels before ranking. Off by default; the only use of the rng.
    bool oversample = false;
    double oversample_ratio = 3.0;
};

// |P_m - M| per voxel.
ImageVolume prediction_error(const ImageVolume& mask_prob, const MaskVolume& mask);

// floor(beta * n)
std::size_t uncertain_count(std::size_t n, double beta);

// Uncertain: the floor(beta*N) voxels with the largest prediction error.
// Certain: the remaining voxels with the largest mask probability among the
// unselected ones. Ties go to the smaller z-major index. Both lists come back
// in rank order.
PointSet select_points(const ImageVolume& mask_prob, const MaskVolume& mask, std::size_t n, double beta,
                       std::mt19937_64& rng, const SelectOptions& options = {});

ClassPartition partition_by_class(const PointSet& points, const MaskVolume& mask);

}  // namespace contraseg
