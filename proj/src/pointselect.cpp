#include "contraseg/pointselect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace contraseg {

namespace {

void check_same(const Dims& a, const Dims& b, const char* op) {
    if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

// Moves the top `k` of `candidates` by (score desc, index asc) to the front, sorted.
void top_k(std::vector<std::size_t>& candidates, std::size_t k, const std::vector<float>& score) {
    auto better = [&](std::size_t a, std::size_t b) {
        if (score[a] != score[b]) return score[a] > score[b];
        return a < b;
    };
    k = std::min(k, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                      better);
}

}  // namespace

ImageVolume prediction_error(const ImageVolume& mask_prob, const MaskVolume& mask) {
    check_same(mask_prob.dims(), mask.dims(), "prediction_error");
    ImageVolume err(mask_prob.dims());
    for (std::size_t i = 0; i < err.size(); ++i) {
        err[i] = std::abs(mask_prob[i] - static_cast<float>(mask[i]));
    }
    return err;
}

std::size_t uncertain_count(std::size_t n, double beta) {
    // Small slack so that e.g. 0.29 * 100 counts as 29.
    return static_cast<std::size_t>(std::floor(beta * static_cast<double>(n) + 1e-9));
}

PointSet select_points(const ImageVolume& mask_prob, const MaskVolume& mask, std::size_t n, double beta,
                       std::mt19937_64& rng, const SelectOptions& options) {
    check_same(mask_prob.dims(), mask.dims(), "select_points");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
    const std::size_t voxels = mask_prob.size();
    if (n > voxels) {
        throw ConfigError("cannot select " + std::to_string(n) + " points from " + std::to_string(voxels) +
                          " voxels");
    }

    std::vector<std::size_t> candidates;
    if (options.oversample) {
        const auto pool = std::min<std::size_t>(
            voxels, std::max<std::size_t>(n, static_cast<std::size_t>(options.oversample_ratio * static_cast<double>(n))));
        std::vector<std::size_t> all(voxels);
        std::iota(all.begin(), all.end(), std::size_t{0});
        // Partial Fisher-Yates keeps the draw deterministic for a given rng state.
        for (std::size_t i = 0; i < pool; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, voxels - 1);
            std::swap(all[i], all[pick(rng)]);
        }
        candidates.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(pool));
        std::sort(candidates.begin(), candidates.end());
    } else {
        candidates.resize(voxels);
        std::iota(candidates.begin(), candidates.end(), std::size_t{0});
    }

    const std::size_t n_uncertain = uncertain_count(n, beta);
    const std::size_t n_certain = n - n_uncertain;

    const ImageVolume err = prediction_error(mask_prob, mask);
    top_k(candidates, n_uncertain, err.data());

    PointSet out;
    out.uncertain.reserve(n_uncertain);
    for (std::size_t i = 0; i < n_uncertain; ++i) out.uncertain.push_back(mask_prob.voxel(candidates[i]));

    std::vector<std::size_t> rest(candidates.begin() + static_cast<std::ptrdiff_t>(n_uncertain), candidates.end());
    top_k(rest, n_certain, mask_prob.data());
    out.certain.reserve(n_certain);
    for (std::size_t i = 0; i < n_certain; ++i) out.certain.push_back(mask_prob.voxel(rest[i]));
    return out;
}

ClassPartition partition_by_class(const PointSet& points, const MaskVolume& mask) {
    auto fg = [&](const Voxel& v) {
        if (v.z >= mask.dims().d || v.y >= mask.dims().h || v.x >= mask.dims().w) {
            throw ShapeError("partition_by_class: point outside mask " + to_string(mask.dims()));
        }
        return mask(v.z, v.y, v.x) != 0;
    };
    ClassPartition out;
    for (const auto& v : points.certain) (fg(v) ? out.certain_fg : out.background).push_back(v);
    for (const auto& v : points.uncertain) (fg(v) ? out.uncertain_fg : out.background).push_back(v);
    return out;
}

}  // namespace contraseg
