#include "contraseg/gradcheck_suite.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "contraseg/backbone.hpp"
#include "contraseg/contrastive.hpp"

namespace contraseg {

namespace {

using ad::GradCheckInput;
using ad::GradCheckResult;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using Inputs = std::span<const Tensor<double>>;

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

// Magnitudes in [0.1, 1] with random sign, keeping clear of the ReLU kink.
std::vector<double> off_zero(std::mt19937_64& rng, std::size_t n) {
    auto v = uniform(rng, n, 0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (auto& x : v) {
        if (sign(rng)) x = -x;
    }
    return v;
}

// Distinct values spaced at least 0.05 apart in random order, for max-pooling.
std::vector<double> distinct(std::mt19937_64& rng, std::size_t n) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = 0.05 * static_cast<double>(i) + 0.01 * uniform(rng, 1, 0, 1)[0];
    std::shuffle(v.begin(), v.end(), rng);
    return v;
}

GradCheckInput input(Shape shape, std::vector<double> values) { return {std::move(shape), std::move(values)}; }

// sum(w * x) for a fixed random w, so every output element carries a distinct weight.
struct Weigher {
    std::vector<std::vector<double>> weights;

    Tensor<double> operator()(const Tensor<double>& x, std::size_t slot) const {
        auto& tape = x.tape();
        const auto w = tape.constant(x.shape(), weights.at(slot));
        return ad::reduce_sum(ad::mul(x, w));
    }
};

Weigher weigher(std::mt19937_64& rng, std::initializer_list<std::size_t> sizes) {
    Weigher w;
    for (std::size_t n : sizes) w.weights.push_back(uniform(rng, n, -1.0, 1.0));
    return w;
}

GradCheckResult check(const ad::ScalarFn& f, std::vector<GradCheckInput> inputs, std::size_t max_coords = 0,
                      double eps = 1e-4) {
    return ad::grad_check(f, inputs, eps, max_coords);
}

GradCheckResult unary_check(std::uint64_t seed, Tensor<double> (*op)(const Tensor<double>&),
                            std::vector<double> (*draw)(std::mt19937_64&, std::size_t)) {
    std::mt19937_64 rng(seed);
    const Shape shape{3, 4};
    auto x = draw(rng, 12);
    const auto w = weigher(rng, {12});
    return check([=](Tape<double>&, Inputs in) { return w(op(in[0]), 0); }, {input(shape, std::move(x))});
}

std::vector<double> in_pm2(std::mt19937_64& rng, std::size_t n) { return uniform(rng, n, -2.0, 2.0); }
std::vector<double> in_positive(std::mt19937_64& rng, std::size_t n) { return uniform(rng, n, 0.1, 3.0); }

Tensor<double> relu_op(const Tensor<double>& x) { return ad::relu(x); }
Tensor<double> sigmoid_op(const Tensor<double>& x) { return ad::sigmoid(x); }
Tensor<double> exp_op(const Tensor<double>& x) { return ad::exp(x); }
Tensor<double> log_op(const Tensor<double>& x) { return ad::log(x); }
Tensor<double> scale_op(const Tensor<double>& x) { return ad::scale(x, -1.7); }
Tensor<double> add_scalar_op(const Tensor<double>& x) { return ad::add_scalar(x, 0.3); }

// Elementwise form plus both scalar-broadcast forms.
GradCheckResult binary_check(std::uint64_t seed,
                             Tensor<double> (*op)(const Tensor<double>&, const Tensor<double>&), bool positive_rhs) {
    std::mt19937_64 rng(seed);
    auto a = uniform(rng, 12, -2.0, 2.0);
    auto b = positive_rhs ? uniform(rng, 12, 0.5, 2.0) : uniform(rng, 12, -2.0, 2.0);
    auto s = positive_rhs ? uniform(rng, 1, 0.5, 2.0) : uniform(rng, 1, -2.0, 2.0);
    const auto w = weigher(rng, {12, 12, 12});
    return check(
        [=](Tape<double>&, Inputs in) {
            const auto full = w(op(in[0], in[1]), 0);
            const auto right = w(op(in[0], in[2]), 1);
            const auto left = w(op(in[2], in[1]), 2);
            return ad::add(full, ad::add(right, left));
        },
        {input({3, 4}, std::move(a)), input({3, 4}, std::move(b)), input({1}, std::move(s))});
}

Tensor<double> add_op(const Tensor<double>& a, const Tensor<double>& b) { return ad::add(a, b); }
Tensor<double> sub_op(const Tensor<double>& a, const Tensor<double>& b) { return ad::sub(a, b); }
Tensor<double> mul_op(const Tensor<double>& a, const Tensor<double>& b) { return ad::mul(a, b); }
Tensor<double> div_op(const Tensor<double>& a, const Tensor<double>& b) { return ad::div(a, b); }

std::vector<Voxel> random_voxels(std::mt19937_64& rng, std::size_t count, const Dims& dims, std::size_t min_z = 0) {
    std::vector<std::size_t> idx;
    for (std::size_t i = min_z * dims.h * dims.w; i < dims.voxels(); ++i) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(count, idx.size()));
    std::vector<Voxel> out;
    for (std::size_t i : idx) out.push_back({i / (dims.h * dims.w), (i / dims.w) % dims.h, i % dims.w});
    return out;
}

MaskVolume random_mask(std::mt19937_64& rng, const Dims& dims) {
    MaskVolume m(dims);
    std::bernoulli_distribution on(0.4);
    for (auto& v : m.data()) v = on(rng) ? 1 : 0;
    return m;
}

LossConfig random_loss_config(std::mt19937_64& rng) {
    LossConfig cfg;
    cfg.alpha = uniform(rng, 1, -6.0, -1.0)[0];
    cfg.lambda_sim = uniform(rng, 1, 0.1, 1.0)[0];
    cfg.lambda_con = uniform(rng, 1, 0.1, 1.0)[0];
    cfg.consistency_sign = (rng() & 1) ? ConsistencySign::kAsWritten : ConsistencySign::kGoalConsistent;
    return cfg;
}

// Three nonempty classes over `count` distinct voxels.
ClassPartition random_partition(std::mt19937_64& rng, std::vector<Voxel> pts) {
    ClassPartition part;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const std::size_t cls = i < 3 ? i : rng() % 3;
        (cls == 0 ? part.certain_fg : cls == 1 ? part.uncertain_fg : part.background).push_back(pts[i]);
    }
    return part;
}

PairSets random_pairs(std::mt19937_64& rng, const Dims& dims, std::size_t count) {
    PairSets pairs;
    const auto pts = random_voxels(rng, count, dims, 1);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const PointPair p{pts[i], {pts[i].z - 1, pts[i].y, pts[i].x}};
        const bool positive = i == 0 || (i != 1 && (rng() & 1));
        (positive ? pairs.positives : pairs.negatives).push_back(p);
    }
    return pairs;
}

std::vector<Voxel> all_points(const ClassPartition& part, const PairSets& pairs) {
    PointSet ps;
    ps.certain = part.certain_fg;
    ps.certain.insert(ps.certain.end(), part.uncertain_fg.begin(), part.uncertain_fg.end());
    ps.certain.insert(ps.certain.end(), part.background.begin(), part.background.end());
    return feature_points(ps, pairs);
}

constexpr std::size_t kFeatureCols = 5;

std::vector<NamedGradCheck> build_registry() {
    std::vector<NamedGradCheck> r;
    r.push_back({"relu", [](std::uint64_t s) { return unary_check(s, relu_op, off_zero); }});
    r.push_back({"sigmoid", [](std::uint64_t s) { return unary_check(s, sigmoid_op, in_pm2); }});
    r.push_back({"exp", [](std::uint64_t s) { return unary_check(s, exp_op, in_pm2); }});
    r.push_back({"log", [](std::uint64_t s) { return unary_check(s, log_op, in_positive); }});
    r.push_back({"scale", [](std::uint64_t s) { return unary_check(s, scale_op, in_pm2); }});
    r.push_back({"add_scalar", [](std::uint64_t s) { return unary_check(s, add_scalar_op, in_pm2); }});
    r.push_back({"add", [](std::uint64_t s) { return binary_check(s, add_op, false); }});
    r.push_back({"sub", [](std::uint64_t s) { return binary_check(s, sub_op, false); }});
    r.push_back({"mul", [](std::uint64_t s) { return binary_check(s, mul_op, false); }});
    r.push_back({"div", [](std::uint64_t s) { return binary_check(s, div_op, true); }});

    r.push_back({"reduce_sum", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return check([](Tape<double>&, Inputs in) {
                         const auto s = ad::reduce_sum(in[0]);
                         return ad::mul(s, s);
                     }, {input({3, 4}, uniform(rng, 12, -1, 1))});
                 }});
    r.push_back({"reduce_mean", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return check([](Tape<double>&, Inputs in) {
                         const auto s = ad::reduce_mean(in[0]);
                         return ad::mul(s, s);
                     }, {input({3, 4}, uniform(rng, 12, -1, 1))});
                 }});
    r.push_back({"sum_last_axis", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = uniform(rng, 15, -1, 1);
                     const auto w = weigher(rng, {3});
                     return check([=](Tape<double>&, Inputs in) { return w(ad::sum_last_axis(in[0]), 0); },
                                  {input({3, 5}, std::move(x))});
                 }});
    r.push_back({"mean_last_axis", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = uniform(rng, 15, -1, 1);
                     const auto w = weigher(rng, {3});
                     return check([=](Tape<double>&, Inputs in) { return w(ad::mean_last_axis(in[0]), 0); },
                                  {input({3, 5}, std::move(x))});
                 }});
    r.push_back({"dot", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return check([](Tape<double>&, Inputs in) { return ad::dot(in[0], in[1]); },
                                  {input({6}, uniform(rng, 6, -1, 1)), input({6}, uniform(rng, 6, -1, 1))});
                 }});
    r.push_back({"l2_norm", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return check([](Tape<double>&, Inputs in) { return ad::l2_norm(in[0]); },
                                  {input({6}, uniform(rng, 6, -1, 1))});
                 }});
    r.push_back({"normalize_rows", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = uniform(rng, 20, -1, 1);
                     const auto w = weigher(rng, {20});
                     return check([=](Tape<double>&, Inputs in) { return w(ad::normalize_rows(in[0]), 0); },
                                  {input({4, 5}, std::move(x))});
                 }});
    r.push_back({"matmul_nt", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto a = uniform(rng, 12, -1, 1);
                     auto b = uniform(rng, 20, -1, 1);
                     const auto w = weigher(rng, {15});
                     return check([=](Tape<double>&, Inputs in) { return w(ad::matmul_nt(in[0], in[1]), 0); },
                                  {input({3, 4}, std::move(a)), input({5, 4}, std::move(b))});
                 }});
    r.push_back({"select_rows", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = uniform(rng, 15, -1, 1);
                     std::vector<std::size_t> rows{4, 0, 2, 0};
                     std::shuffle(rows.begin(), rows.end(), rng);
                     const auto w = weigher(rng, {12});
                     return check([=](Tape<double>&, Inputs in) { return w(ad::select_rows(in[0], rows), 0); },
                                  {input({5, 3}, std::move(x))});
                 }});
    r.push_back({"conv3d", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = uniform(rng, 2 * 4 * 5 * 5, -1, 1);
                     auto w1 = uniform(rng, 3 * 2 * 27, -0.5, 0.5);
                     auto b1 = uniform(rng, 3, -0.5, 0.5);
                     auto w2 = uniform(rng, 2 * 2 * 1 * 3 * 3, -0.5, 0.5);
                     // Output sizes: (3,4,5,5) with padding 1, and (2,4,3,2) with stride (1,2,2), padding (0,1,0).
                     const auto w = weigher(rng, {3 * 4 * 5 * 5, 2 * 4 * 3 * 2});
                     return check(
                         [=](Tape<double>&, Inputs in) {
                             const auto same = ad::conv3d(in[0], in[1], in[2], {1, 1, 1}, {1, 1, 1});
                             const auto strided = ad::conv3d(in[0], in[3], Tensor<double>(), {1, 2, 2}, {0, 1, 0});
                             return ad::add(w(same, 0), w(strided, 1));
                         },
                         {input({2, 4, 5, 5}, std::move(x)), input({3, 2, 3, 3, 3}, std::move(w1)),
                          input({3}, std::move(b1)), input({2, 2, 1, 3, 3}, std::move(w2))});
                 }});
    r.push_back({"maxpool3d", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = distinct(rng, 2 * 4 * 6 * 6);
                     const auto w = weigher(rng, {2 * 4 * 3 * 3, 2 * 2 * 3 * 3});
                     return check(
                         [=](Tape<double>&, Inputs in) {
                             const auto xy = ad::maxpool3d(in[0], {1, 2, 2}, {1, 2, 2});
                             const auto cube = ad::maxpool3d(in[0], {2, 2, 2}, {2, 2, 2});
                             return ad::add(w(xy, 0), w(cube, 1));
                         },
                         {input({2, 4, 6, 6}, std::move(x))});
                 }});
    r.push_back({"upsample_trilinear", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = uniform(rng, 2 * 3 * 4 * 4, -1, 1);
                     const auto w = weigher(rng, {2 * 3 * 8 * 8, 2 * 6 * 8 * 8});
                     return check(
                         [=](Tape<double>&, Inputs in) {
                             const auto xy = ad::upsample_trilinear(in[0], {1, 2, 2});
                             const auto cube = ad::upsample_trilinear(in[0], {2, 2, 2});
                             return ad::add(w(xy, 0), w(cube, 1));
                         },
                         {input({2, 3, 4, 4}, std::move(x))});
                 }});
    r.push_back({"concat_channels", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto a = uniform(rng, 2 * 8, -1, 1);
                     auto b = uniform(rng, 3 * 8, -1, 1);
                     const auto w = weigher(rng, {5 * 8});
                     return check([=](Tape<double>&, Inputs in) { return w(ad::concat_channels(in[0], in[1]), 0); },
                                  {input({2, 2, 2, 2}, std::move(a)), input({3, 2, 2, 2}, std::move(b))});
                 }});
    r.push_back({"slice_channels", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = uniform(rng, 4 * 8, -1, 1);
                     const auto w = weigher(rng, {2 * 8});
                     return check([=](Tape<double>&, Inputs in) { return w(ad::slice_channels(in[0], 1, 3), 0); },
                                  {input({4, 2, 2, 2}, std::move(x))});
                 }});
    r.push_back({"gather_points", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = uniform(rng, 3 * 4 * 5 * 5, -1, 1);
                     auto pts = random_voxels(rng, 6, {4, 5, 5});
                     pts.push_back(pts.front());
                     const auto w = weigher(rng, {pts.size() * 3});
                     return check([=](Tape<double>&, Inputs in) { return w(ad::gather_points(in[0], pts), 0); },
                                  {input({3, 4, 5, 5}, std::move(x))});
                 }});

    const Dims loss_dims{4, 4, 4};
    r.push_back({"loss_ce", [=](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const auto m = random_mask(rng, loss_dims);
                     const auto b = random_mask(rng, loss_dims);
                     return check(
                         [=](Tape<double>&, Inputs in) {
                             const auto ce = cross_entropy_loss(in[0], m, in[1], b);
                             return ad::add(ce.sum, ce.mean);
                         },
                         {input({1, 4, 4, 4}, uniform(rng, 64, 0.05, 0.95)),
                          input({1, 4, 4, 4}, uniform(rng, 64, 0.05, 0.95))});
                 }});
    r.push_back({"loss_sim", [=](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const auto cfg = random_loss_config(rng);
                     const auto part = random_partition(rng, random_voxels(rng, 3 + rng() % 10, loss_dims));
                     const auto pts = all_points(part, {});
                     return check(
                         [=](Tape<double>&, Inputs in) {
                             return similarity_loss(part, PointFeatures<double>{pts, in[0], loss_dims.d}, cfg);
                         },
                         {input({pts.size(), kFeatureCols}, uniform(rng, pts.size() * kFeatureCols, -1, 1))});
                 }});
    r.push_back({"loss_con", [=](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const auto cfg = random_loss_config(rng);
                     const auto pairs = random_pairs(rng, loss_dims, 2 + rng() % 8);
                     const auto pts = all_points({}, pairs);
                     return check(
                         [=](Tape<double>&, Inputs in) {
                             return consistency_loss(pairs, PointFeatures<double>{pts, in[0], loss_dims.d}, cfg);
                         },
                         {input({pts.size(), kFeatureCols}, uniform(rng, pts.size() * kFeatureCols, -1, 1))});
                 }});
    r.push_back({"loss_total", [=](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const auto cfg = random_loss_config(rng);
                     const auto m = random_mask(rng, loss_dims);
                     const auto b = random_mask(rng, loss_dims);
                     const auto part = random_partition(rng, random_voxels(rng, 3 + rng() % 8, loss_dims));
                     const auto pairs = random_pairs(rng, loss_dims, 2 + rng() % 6);
                     const auto pts = all_points(part, pairs);
                     return check(
                         [=](Tape<double>&, Inputs in) {
                             const PointFeatures<double> feats{pts, in[2], loss_dims.d};
                             const auto ce = cross_entropy_loss(in[0], m, in[1], b).mean;
                             return total_loss(ce, similarity_loss(part, feats, cfg), consistency_loss(pairs, feats, cfg),
                                               cfg);
                         },
                         {input({1, 4, 4, 4}, uniform(rng, 64, 0.05, 0.95)),
                          input({1, 4, 4, 4}, uniform(rng, 64, 0.05, 0.95)),
                          input({pts.size(), kFeatureCols}, uniform(rng, pts.size() * kFeatureCols, -1, 1))});
                 }});

    return r;
}

}  // namespace

const std::vector<NamedGradCheck>& gradcheck_registry() {
    static const std::vector<NamedGradCheck> registry = build_registry();
    return registry;
}

ad::GradCheckResult backbone_gradcheck(std::uint64_t seed, double eps) {
    std::mt19937_64 rng(seed);
    BackboneConfig cfg;
    cfg.widths = {2, 3};
    cfg.levels = 2;
    cfg.feature_channels = 2;
    const auto params = init_params(cfg, seed);
    std::vector<GradCheckInput> inputs{input({1, 4, 4, 4}, uniform(rng, 64, 0, 1))};
    for (const auto& t : params.tensors) {
        auto v = std::vector<double>(t.values.begin(), t.values.end());
        if (t.shape.size() == 1) v = uniform(rng, v.size(), -0.1, 0.1);
        inputs.push_back(input(t.shape, std::move(v)));
    }
    const auto w = weigher(rng, {64, 64, 2 * 4 * 2 * 2});
    return check(
        [=](Tape<double>&, Inputs in) {
            const auto g = forward_graph<double>(cfg, in.subspan(1), in[0]);
            return ad::add(w(g.mask_prob, 0), ad::add(w(g.boundary_prob, 1), w(g.features, 2)));
        },
        std::move(inputs), 160, eps);
}

const NamedGradCheck* find_gradcheck(const std::string& name) {
    for (const auto& c : gradcheck_registry()) {
        if (c.name == name) return &c;
    }
    return nullptr;
}

}  // namespace contraseg
