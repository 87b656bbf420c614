#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "contraseg/volume.hpp"

namespace contraseg {

struct WatershedParams {
    double marker_mask_threshold = 0.9;      // markers need P_m above this
    double marker_boundary_threshold = 0.5;  // ... and P_b below this
    double foreground_threshold = 0.8;       // growth region is P_m above this
    int connectivity = 6;
    std::size_t min_instance_size = 8;

    void validate() const;
};

struct InstanceSeg {
    LabelVolume labels;         // ids 1..K, 0 background
    std::vector<double> scores;  // scores[k - 1] = mean P_m over instance k
};

// Components ordered by their smallest z-major index.
LabelVolume connected_components(const MaskVolume& mask, int connectivity);

// Drops instances below min_size, compacts ids to 1..K (keeping relative
// order) and scores each with its mean mask probability.
InstanceSeg relabel_and_score(const LabelVolume& labels, const ImageVolume& mask_prob, std::size_t min_size);

// Markers are the size-filtered components of (P_m > t_m and P_b < t_b).
// They are grown over (P_m > t_f) by priority flood on 1 - P_m, lowest first,
// ties broken by z-major index.
InstanceSeg marker_watershed(const ImageVolume& mask_prob, const ImageVolume& boundary_prob,
                             const WatershedParams& params);

// Neighbour offsets for 6- or 26-connectivity; throws ConfigError otherwise.
std::vector<std::array<int, 3>> neighbor_offsets(int connectivity);

}  // namespace contraseg
