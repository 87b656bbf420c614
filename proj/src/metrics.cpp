#include "contraseg/metrics.hpp"

#include <algorithm>
#include <map>

#include <json.hpp>

namespace contraseg {

void SizeBins::validate() const {
    if (!(small_max > 0 && small_max < large_min)) throw ConfigError("size bins need 0 < small_max < large_min");
}

SizeBins::Bin SizeBins::bin_of(std::size_t voxels) const {
    if (voxels <= small_max) return kSmall;
    if (voxels >= large_min) return kLarge;
    return kMedium;
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["jaccard"] = jaccard;
    for (std::size_t b = 0; b < 4; ++b) j["ap75"][kBinNames[b]] = ap75[b];
    for (std::size_t b = 0; b < 4; ++b) {
        j["counts"][kBinNames[b]] = {
            {"tp", counts[b].tp}, {"fp", counts[b].fp}, {"fn", counts[b].fn}, {"gt", counts[b].gt}};
    }
    return j.dump(2);
}

double JaccardCounts::value() const {
    const std::size_t denom = tp + fp + fn;
    if (denom == 0) return 1.0;
    return static_cast<double>(tp) / static_cast<double>(denom);
}

JaccardCounts jaccard_counts(const MaskVolume& pred, const MaskVolume& gt) {
    if (pred.dims() != gt.dims()) {
        throw ShapeError("jaccard: shape mismatch " + to_string(pred.dims()) + " vs " + to_string(gt.dims()));
    }
    JaccardCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0;
        const bool g = gt[i] != 0;
        c.tp += p && g;
        c.fp += p && !g;
        c.fn += !p && g;
    }
    return c;
}

double jaccard(const MaskVolume& pred, const MaskVolume& gt) { return jaccard_counts(pred, gt).value(); }

namespace {

std::vector<std::size_t> instance_sizes(const LabelVolume& labels) {
    std::uint32_t max_id = 0;
    for (auto v : labels.data()) max_id = std::max(max_id, v);
    std::vector<std::size_t> sizes(max_id + 1, 0);
    for (auto v : labels.data()) ++sizes[v];
    return sizes;
}

}  // namespace

std::vector<IouEntry> instance_iou_matrix(const LabelVolume& pred, const LabelVolume& gt) {
    if (pred.dims() != gt.dims()) {
        throw ShapeError("instance_iou_matrix: shape mismatch " + to_string(pred.dims()) + " vs " +
                         to_string(gt.dims()));
    }
    const auto psize = instance_sizes(pred);
    const auto gsize = instance_sizes(gt);
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> overlap;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] && gt[i]) ++overlap[{pred[i], gt[i]}];
    }
    std::vector<IouEntry> out;
    out.reserve(overlap.size());
    for (const auto& [key, inter] : overlap) {
        const std::size_t uni = psize[key.first] + gsize[key.second] - inter;
        out.push_back({key.first, key.second, inter, static_cast<double>(inter) / static_cast<double>(uni)});
    }
    return out;
}

namespace {

struct RankedPrediction {
    double score;
    std::size_t sample;
    std::uint32_t id;
    bool tp;
    SizeBins::Bin bin;
};

double average_precision(const std::vector<RankedPrediction>& ranked, std::size_t gt_count,
                         std::size_t bin_filter, const std::vector<bool>& in_bin) {
    if (gt_count == 0) return 0.0;
    std::vector<double> precision;
    std::vector<bool> is_tp;
    std::size_t tp = 0;
    std::size_t seen = 0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (bin_filter != kAll && !in_bin[i]) continue;
        ++seen;
        tp += ranked[i].tp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
        is_tp.push_back(ranked[i].tp);
    }
    // Monotone envelope from the right, then one recall step of 1/G per TP.
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        if (is_tp[i]) sum += precision[i];
    }
    return sum / static_cast<double>(gt_count);
}

}  // namespace

ApResult ap75(std::span<const EvalSample> samples, const SizeBins& bins) {
    bins.validate();
    ApResult result;
    std::vector<RankedPrediction> ranked;

    for (std::size_t s = 0; s < samples.size(); ++s) {
        const InstanceSeg& pred = *samples[s].pred;
        const LabelVolume& gt = *samples[s].gt;
        const auto psize = instance_sizes(pred.labels);
        const auto gsize = instance_sizes(gt);
        const auto ious = instance_iou_matrix(pred.labels, gt);

        std::vector<std::vector<IouEntry>> by_pred(psize.size());
        for (const auto& e : ious) by_pred[e.pred].push_back(e);

        for (std::uint32_t g = 1; g < gsize.size(); ++g) {
            if (gsize[g] == 0) continue;
            ++result.counts[bins.bin_of(gsize[g])].gt;
            ++result.counts[kAll].gt;
        }

        std::vector<std::uint32_t> order;
        for (std::uint32_t p = 1; p < psize.size(); ++p) {
            if (psize[p] > 0) order.push_back(p);
        }
        auto score_of = [&](std::uint32_t p) { return p - 1 < pred.scores.size() ? pred.scores[p - 1] : 0.0; };
        std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
            if (score_of(a) != score_of(b)) return score_of(a) > score_of(b);
            return a < b;
        });

        std::vector<bool> matched(gsize.size(), false);
        for (std::uint32_t p : order) {
            const IouEntry* best = nullptr;
            for (const auto& e : by_pred[p]) {
                if (matched[e.gt]) continue;
                if (!best || e.iou > best->iou) best = &e;  // entries sorted by gt id, so ties keep the smaller id
            }
            RankedPrediction rp{score_of(p), s, p, false, bins.bin_of(psize[p])};
            if (best && best->iou >= kApIouThreshold) {
                matched[best->gt] = true;
                rp.tp = true;
                rp.bin = bins.bin_of(gsize[best->gt]);
            }
            ranked.push_back(rp);
        }
    }

    std::stable_sort(ranked.begin(), ranked.end(), [](const RankedPrediction& a, const RankedPrediction& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.sample != b.sample) return a.sample < b.sample;
        return a.id < b.id;
    });

    for (const auto& rp : ranked) {
        BinCounts& c = result.counts[rp.bin];
        BinCounts& all = result.counts[kAll];
        (rp.tp ? c.tp : c.fp) += 1;
        (rp.tp ? all.tp : all.fp) += 1;
    }
    for (auto& c : result.counts) c.fn = c.gt - c.tp;

    for (std::size_t b = 0; b < 4; ++b) {
        std::vector<bool> in_bin(ranked.size());
        for (std::size_t i = 0; i < ranked.size(); ++i) in_bin[i] = static_cast<std::size_t>(ranked[i].bin) == b;
        result.ap[b] = average_precision(ranked, result.counts[b].gt, b, in_bin);
    }
    return result;
}

ApResult ap75(const InstanceSeg& pred, const LabelVolume& gt, const SizeBins& bins) {
    const EvalSample sample{&pred, &gt};
    return ap75(std::span<const EvalSample>(&sample, 1), bins);
}

}  // namespace contraseg
