#include "contraseg/contrastive.hpp"

#include <algorithm>

namespace contraseg {

const char* to_string(ConsistencySign sign) {
    return sign == ConsistencySign::kAsWritten ? "as-written" : "goal-consistent";
}

ConsistencySign parse_consistency_sign(const std::string& s) {
    if (s == "as-written") return ConsistencySign::kAsWritten;
    if (s == "goal-consistent") return ConsistencySign::kGoalConsistent;
    throw ConfigError("consistency_sign must be 'as-written' or 'goal-consistent', got '" + s + "'");
}

void LossConfig::validate() const {
    if (lambda_sim < 0 || lambda_con < 0) throw ConfigError("lambda weights must be >= 0");
    if (!(eps > 0)) throw ConfigError("eps must be > 0");
}

template <typename T>
std::size_t PointFeatures<T>::row_of(const Voxel& v) const {
    const auto it = std::lower_bound(points.begin(), points.end(), v);
    if (it == points.end() || *it != v) {
        throw ShapeError("no feature row for point (" + std::to_string(v.z) + "," + std::to_string(v.y) + "," +
                         std::to_string(v.x) + ")");
    }
    return static_cast<std::size_t>(it - points.begin());
}

std::vector<Voxel> feature_points(const PointSet& points, const PairSets& pairs) {
    std::vector<Voxel> out(points.uncertain.begin(), points.uncertain.end());
    out.insert(out.end(), points.certain.begin(), points.certain.end());
    for (const auto* list : {&pairs.positives, &pairs.negatives}) {
        for (const auto& p : *list) {
            out.push_back(p.point);
            out.push_back(p.previous);
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

double cosine_sim(std::span<const double> p, std::span<const double> q, double eps) {
    if (p.size() != q.size()) throw ShapeError("cosine_sim: length mismatch");
    double pq = 0;
    double pp = 0;
    double qq = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        pq += p[i] * q[i];
        pp += p[i] * p[i];
        qq += q[i] * q[i];
    }
    return pq / (std::max(std::sqrt(pp), eps) * std::max(std::sqrt(qq), eps));
}

template <typename T>
ad::Tensor<T> cosine_sim(const ad::Tensor<T>& p, const ad::Tensor<T>& q, double eps) {
    const auto norms = ad::mul(ad::l2_norm(p, eps), ad::l2_norm(q, eps));
    return ad::div(ad::dot(p, q), norms, eps * eps);
}

double z_weight(double rz, double sz, double alpha) {
    const double dz = rz - sz;
    return std::exp(alpha * dz * dz);
}

namespace {

template <typename T>
ad::Tensor<T> zero(const PointFeatures<T>& feats) {
    return feats.rows.tape().scalar(T(0));
}

template <typename T>
std::vector<std::size_t> rows_for(const PointFeatures<T>& feats, std::span<const Voxel> points) {
    std::vector<std::size_t> rows;
    rows.reserve(points.size());
    for (const auto& v : points) rows.push_back(feats.row_of(v));
    return rows;
}

template <typename T>
ad::Tensor<T> normalized(const PointFeatures<T>& feats, std::span<const Voxel> points, double eps) {
    const auto rows = rows_for(feats, points);
    return ad::normalize_rows(ad::select_rows(feats.rows, rows), eps);
}

// Mean over columns of w(r, s) * exp(Sim(p_r, p_s)), one value per anchor r.
template <typename T>
ad::Tensor<T> weighted_affinity(const ad::Tensor<T>& anchors, std::span<const Voxel> anchor_pts,
                                const ad::Tensor<T>& others, std::span<const Voxel> other_pts,
                                const PointFeatures<T>& feats, const LossConfig& cfg) {
    const double depth = static_cast<double>(feats.depth);
    std::vector<T> w(anchor_pts.size() * other_pts.size());
    for (std::size_t r = 0; r < anchor_pts.size(); ++r) {
        for (std::size_t s = 0; s < other_pts.size(); ++s) {
            w[r * other_pts.size() + s] = static_cast<T>(
                z_weight(static_cast<double>(anchor_pts[r].z) / depth, static_cast<double>(other_pts[s].z) / depth,
                         cfg.alpha));
        }
    }
    const auto weights = feats.rows.tape().constant({anchor_pts.size(), other_pts.size()}, std::move(w));
    return ad::mean_last_axis(ad::mul(weights, ad::exp(ad::matmul_nt(anchors, others))));
}

std::vector<Voxel> sorted(std::vector<Voxel> v) {
    std::sort(v.begin(), v.end());
    return v;
}

std::vector<PointPair> sorted(std::vector<PointPair> v) {
    std::sort(v.begin(), v.end(), [](const PointPair& a, const PointPair& b) {
        if (a.point != b.point) return a.point < b.point;
        return a.previous < b.previous;
    });
    return v;
}

template <typename T>
ad::Tensor<T> mean_pair_affinity(const std::vector<PointPair>& pairs, const PointFeatures<T>& feats,
                                 double eps) {
    std::vector<Voxel> first;
    std::vector<Voxel> second;
    for (const auto& p : pairs) {
        first.push_back(p.point);
        second.push_back(p.previous);
    }
    const auto sims = ad::sum_last_axis(ad::mul(normalized(feats, first, eps), normalized(feats, second, eps)));
    return ad::reduce_mean(ad::exp(sims));
}

}  // namespace

template <typename T>
ad::Tensor<T> similarity_loss(const ClassPartition& part, const PointFeatures<T>& feats, const LossConfig& cfg) {
    if (part.certain_fg.empty() || part.uncertain_fg.empty() || part.background.empty()) return zero(feats);
    const auto cf = sorted(part.certain_fg);
    const auto uf = sorted(part.uncertain_fg);
    const auto bg = sorted(part.background);

    const auto ncf = normalized(feats, cf, cfg.eps);
    const auto pos = weighted_affinity<T>(ncf, cf, normalized(feats, uf, cfg.eps), uf, feats, cfg);
    const auto neg = weighted_affinity<T>(ncf, cf, normalized(feats, bg, cfg.eps), bg, feats, cfg);
    const auto term = ad::log(ad::add_scalar(ad::div(pos, neg, cfg.eps), 1.0), cfg.eps);
    return ad::add_scalar(ad::scale(ad::reduce_mean(term), -1.0), cfg.gamma);
}

PairSets build_consistency_pairs(const PointSet& points, const MaskVolume& mask) {
    PairSets out;
    auto visit = [&](const Voxel& v) {
        if (v.z >= mask.dims().d || v.y >= mask.dims().h || v.x >= mask.dims().w) {
            throw ShapeError("build_consistency_pairs: point outside mask " + to_string(mask.dims()));
        }
        if (v.z == 0) return;
        const Voxel prev{v.z - 1, v.y, v.x};
        const bool same = (mask(v.z, v.y, v.x) != 0) == (mask(prev.z, prev.y, prev.x) != 0);
        (same ? out.positives : out.negatives).push_back({v, prev});
    };
    for (const auto& v : points.uncertain) visit(v);
    for (const auto& v : points.certain) visit(v);
    return out;
}

template <typename T>
ad::Tensor<T> consistency_loss(const PairSets& pairs, const PointFeatures<T>& feats, const LossConfig& cfg) {
    if (pairs.positives.empty() || pairs.negatives.empty()) return zero(feats);
    const auto pos = mean_pair_affinity(sorted(pairs.positives), feats, cfg.eps);
    const auto neg = mean_pair_affinity(sorted(pairs.negatives), feats, cfg.eps);
    const auto value = ad::log(ad::add_scalar(ad::div(pos, neg, cfg.eps), 1.0), cfg.eps);
    if (cfg.consistency_sign == ConsistencySign::kAsWritten) return value;
    return ad::add_scalar(ad::scale(value, -1.0), cfg.gamma);
}

template <typename T>
CrossEntropy<T> cross_entropy_loss(const ad::Tensor<T>& mask_prob, const MaskVolume& mask,
                                   const ad::Tensor<T>& boundary_prob, const MaskVolume& boundary, double eps) {
    const Dims d = mask.dims();
    const ad::Shape shape{1, d.d, d.h, d.w};
    if (mask_prob.shape() != shape || boundary_prob.shape() != shape || boundary.dims() != d) {
        throw ShapeError("cross_entropy_loss: shape mismatch between " + ad::to_string(mask_prob.shape()) + ", " +
                         ad::to_string(boundary_prob.shape()) + " and labels " + to_string(d));
    }
    auto& tape = mask_prob.tape();
    auto bce = [&](const ad::Tensor<T>& p, const MaskVolume& label) {
        std::vector<T> pos(label.size());
        std::vector<T> neg(label.size());
        for (std::size_t i = 0; i < label.size(); ++i) {
            pos[i] = label[i] ? T(1) : T(0);
            neg[i] = T(1) - pos[i];
        }
        const auto tp = tape.constant(shape, std::move(pos));
        const auto tn = tape.constant(shape, std::move(neg));
        const auto log_p = ad::log(p, eps);
        const auto log_q = ad::log(ad::add_scalar(ad::scale(p, -1.0), 1.0), eps);
        return ad::reduce_sum(ad::add(ad::mul(tp, log_p), ad::mul(tn, log_q)));
    };
    CrossEntropy<T> out;
    out.sum = ad::scale(ad::add(bce(mask_prob, mask), bce(boundary_prob, boundary)), -1.0);
    out.mean = ad::scale(out.sum, 1.0 / static_cast<double>(d.voxels()));
    return out;
}

template <typename T>
ad::Tensor<T> total_loss(const ad::Tensor<T>& ce, const ad::Tensor<T>& sim, const ad::Tensor<T>& con,
                         const LossConfig& cfg) {
    return ad::add(ce, ad::add(ad::scale(sim, cfg.lambda_sim), ad::scale(con, cfg.lambda_con)));
}

double total_loss(double ce, double sim, double con, const LossConfig& cfg) {
    return ce + (cfg.lambda_sim * sim + cfg.lambda_con * con);
}

#define CONTRASEG_INSTANTIATE(T)                                                                          \
    template struct PointFeatures<T>;                                                                     \
    template ad::Tensor<T> cosine_sim(const ad::Tensor<T>&, const ad::Tensor<T>&, double);                \
    template ad::Tensor<T> similarity_loss(const ClassPartition&, const PointFeatures<T>&, const LossConfig&); \
    template ad::Tensor<T> consistency_loss(const PairSets&, const PointFeatures<T>&, const LossConfig&);  \
    template CrossEntropy<T> cross_entropy_loss(const ad::Tensor<T>&, const MaskVolume&, const ad::Tensor<T>&, \
                                                const MaskVolume&, double);                               \
    template ad::Tensor<T> total_loss(const ad::Tensor<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,    \
                                      const LossConfig&);

CONTRASEG_INSTANTIATE(float)
CONTRASEG_INSTANTIATE(double)

#undef CONTRASEG_INSTANTIATE

}  // namespace contraseg
