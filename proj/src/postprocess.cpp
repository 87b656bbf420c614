#include "contraseg/postprocess.hpp"

#include <array>
#include <cstdint>
#include <deque>
#include <queue>
#include <tuple>

namespace contraseg {

void WatershedParams::validate() const {
    if (!(foreground_threshold > 0 && foreground_threshold <= marker_mask_threshold && marker_mask_threshold <= 1)) {
        throw ConfigError("watershed thresholds need 0 < foreground <= marker_mask <= 1");
    }
    if (!(marker_boundary_threshold >= 0 && marker_boundary_threshold <= 1)) {
        throw ConfigError("marker_boundary_threshold must lie in [0, 1]");
    }
    neighbor_offsets(connectivity);
}

std::vector<std::array<int, 3>> neighbor_offsets(int connectivity) {
    std::vector<std::array<int, 3>> out;
    if (connectivity == 6) {
        out = {{-1, 0, 0}, {0, -1, 0}, {0, 0, -1}, {0, 0, 1}, {0, 1, 0}, {1, 0, 0}};
    } else if (connectivity == 26) {
        for (int dz = -1; dz <= 1; ++dz) {
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dz || dy || dx) out.push_back({dz, dy, dx});
                }
            }
        }
    } else {
        throw ConfigError("connectivity must be 6 or 26, got " + std::to_string(connectivity));
    }
    return out;
}

namespace {

template <typename Visit>
void for_each_neighbor(const Dims& d, std::size_t idx, const std::vector<std::array<int, 3>>& offsets,
                       Visit&& visit) {
    const auto x = static_cast<long>(idx % d.w);
    const auto y = static_cast<long>((idx / d.w) % d.h);
    const auto z = static_cast<long>(idx / (d.w * d.h));
    for (const auto& o : offsets) {
        const long nz = z + o[0];
        const long ny = y + o[1];
        const long nx = x + o[2];
        if (nz < 0 || ny < 0 || nx < 0 || nz >= static_cast<long>(d.d) || ny >= static_cast<long>(d.h) ||
            nx >= static_cast<long>(d.w)) {
            continue;
        }
        visit((static_cast<std::size_t>(nz) * d.h + static_cast<std::size_t>(ny)) * d.w + static_cast<std::size_t>(nx));
    }
}

}  // namespace

LabelVolume connected_components(const MaskVolume& mask, int connectivity) {
    const auto offsets = neighbor_offsets(connectivity);
    const Dims d = mask.dims();
    LabelVolume labels(d, 0);
    std::uint32_t next = 0;
    std::deque<std::size_t> queue;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i] || labels[i]) continue;
        labels[i] = ++next;
        queue.push_back(i);
        while (!queue.empty()) {
            const std::size_t cur = queue.front();
            queue.pop_front();
            for_each_neighbor(d, cur, offsets, [&](std::size_t n) {
                if (mask[n] && !labels[n]) {
                    labels[n] = next;
                    queue.push_back(n);
                }
            });
        }
    }
    return labels;
}

InstanceSeg relabel_and_score(const LabelVolume& labels, const ImageVolume& mask_prob, std::size_t min_size) {
    if (labels.dims() != mask_prob.dims()) {
        throw ShapeError("relabel_and_score: shape mismatch " + to_string(labels.dims()) + " vs " +
                         to_string(mask_prob.dims()));
    }
    std::uint32_t max_id = 0;
    for (auto v : labels.data()) max_id = std::max(max_id, v);
    std::vector<std::size_t> sizes(max_id + 1, 0);
    std::vector<double> sums(max_id + 1, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        ++sizes[labels[i]];
        sums[labels[i]] += mask_prob[i];
    }
    std::vector<std::uint32_t> remap(max_id + 1, 0);
    InstanceSeg out;
    std::uint32_t next = 0;
    for (std::uint32_t id = 1; id <= max_id; ++id) {
        if (sizes[id] == 0 || sizes[id] < min_size) continue;
        remap[id] = ++next;
        out.scores.push_back(sums[id] / static_cast<double>(sizes[id]));
    }
    out.labels = LabelVolume(labels.dims(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) out.labels[i] = remap[labels[i]];
    return out;
}

InstanceSeg marker_watershed(const ImageVolume& mask_prob, const ImageVolume& boundary_prob,
                             const WatershedParams& params) {
    params.validate();
    if (mask_prob.dims() != boundary_prob.dims()) {
        throw ShapeError("marker_watershed: shape mismatch " + to_string(mask_prob.dims()) + " vs " +
                         to_string(boundary_prob.dims()));
    }
    const Dims d = mask_prob.dims();
    MaskVolume seeds(d, 0);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        seeds[i] = mask_prob[i] > params.marker_mask_threshold && boundary_prob[i] < params.marker_boundary_threshold;
    }
    LabelVolume labels = relabel_and_score(connected_components(seeds, params.connectivity), mask_prob,
                                           params.min_instance_size)
                             .labels;

    using Entry = std::tuple<float, std::size_t>;  // (elevation, index), min-heap
    std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i]) heap.emplace(1.0f - mask_prob[i], i);
    }
    const auto offsets = neighbor_offsets(params.connectivity);
    while (!heap.empty()) {
        const std::size_t cur = std::get<1>(heap.top());
        heap.pop();
        for_each_neighbor(d, cur, offsets, [&](std::size_t n) {
            if (!labels[n] && mask_prob[n] > params.foreground_threshold) {
                labels[n] = labels[cur];
                heap.emplace(1.0f - mask_prob[n], n);
            }
        });
    }
    return relabel_and_score(labels, mask_prob, 0);
}

}  // namespace contraseg
