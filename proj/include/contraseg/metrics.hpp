#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "contraseg/postprocess.hpp"
#include "contraseg/volume.hpp"

namespace contraseg {

// Instance size classes in voxels: small <= small_max < medium < large_min <= large.
struct SizeBins {
    std::size_t small_max = 5000;
    std::size_t large_min = 30000;

    enum Bin { kSmall = 0, kMedium = 1, kLarge = 2 };

    void validate() const;
    Bin bin_of(std::size_t voxels) const;
};

inline constexpr std::size_t kAll = 3;  // index of the "all" entry next to the three size bins
inline constexpr std::array<const char*, 4> kBinNames{"small", "medium", "large", "all"};

struct BinCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::size_t gt = 0;

    bool operator==(const BinCounts&) const = default;
};

struct EvalReport {
    double jaccard = 0.0;
    std::array<double, 4> ap75{};  // small, medium, large, all
    std::array<BinCounts, 4> counts{};

    std::string to_json() const;
    bool operator==(const EvalReport&) const = default;
};

struct JaccardCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;

    // 1 when all counts are zero.
    double value() const;
};

JaccardCounts jaccard_counts(const MaskVolume& pred, const MaskVolume& gt);
double jaccard(const MaskVolume& pred, const MaskVolume& gt);

struct IouEntry {
    std::uint32_t pred = 0;
    std::uint32_t gt = 0;
    std::size_t intersection = 0;
    double iou = 0.0;
};

// Overlapping (pred, gt) pairs only, sorted by (pred, gt).
std::vector<IouEntry> instance_iou_matrix(const LabelVolume& pred, const LabelVolume& gt);

struct ApResult {
    std::array<double, 4> ap{};
    std::array<BinCounts, 4> counts{};
};

// Area under the interpolated precision/recall curve at IoU >= 0.75.
// Predictions are ranked by descending score (ties by id) and matched to the
// unmatched ground-truth instance of largest IoU. A bin with no ground truth
// reports AP 0.
ApResult ap75(const InstanceSeg& pred, const LabelVolume& gt, const SizeBins& bins);

struct EvalSample {
    const InstanceSeg* pred = nullptr;
    const LabelVolume* gt = nullptr;
};
// Pools predictions from several volumes into one ranking.
ApResult ap75(std::span<const EvalSample> samples, const SizeBins& bins);

inline constexpr double kApIouThreshold = 0.75;

}  // namespace contraseg
