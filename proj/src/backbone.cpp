#include "contraseg/backbone.hpp"

#include <cmath>
#include <random>

namespace contraseg {

void BackboneConfig::validate() const {
    if (levels < 2) throw ConfigError("backbone needs at least 2 levels");
    if (widths.size() != levels) {
        throw ConfigError("backbone widths has " + std::to_string(widths.size()) + " entries for " +
                          std::to_string(levels) + " levels");
    }
    for (std::size_t i = 0; i < widths.size(); ++i) {
        if (widths[i] == 0) throw ConfigError("backbone widths must be positive");
        if (i > 0 && widths[i] <= widths[i - 1]) throw ConfigError("backbone widths must be strictly increasing");
    }
    if (feature_channels == 0) throw ConfigError("feature_channels must be >= 1");
    if (!(input_std > 0.0)) throw ConfigError("input_std must be > 0");
}

void BackboneConfig::check_input(const Dims& dims) const {
    validate();
    const std::size_t div = std::size_t{1} << (levels - 1);
    const std::size_t zdiv = xy_only_pooling ? 1 : div;
    if (dims.d < 4 || dims.h % div != 0 || dims.w % div != 0 || dims.d % zdiv != 0 || dims.h == 0 ||
        dims.w == 0) {
        throw ConfigError("input dims " + to_string(dims) + " invalid: need D >= 4" +
                          (zdiv > 1 ? " divisible by " + std::to_string(zdiv) : std::string()) +
                          ", H and W divisible by " + std::to_string(div));
    }
}

std::size_t BackboneParams::count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.values.size();
    return n;
}

bool BackboneParams::operator==(const BackboneParams& other) const {
    if (tensors.size() != other.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].name != other.tensors[i].name || tensors[i].shape != other.tensors[i].shape ||
            tensors[i].values != other.tensors[i].values) {
            return false;
        }
    }
    return true;
}

namespace {

void add_conv(std::vector<ParamDecl>& decls, const std::string& name, std::size_t in, std::size_t out,
              std::size_t k) {
    decls.push_back({name + ".weight", {out, in, k, k, k}});
    decls.push_back({name + ".bias", {out}});
}

}  // namespace

std::vector<ParamDecl> param_decls(const BackboneConfig& cfg) {
    cfg.validate();
    std::vector<ParamDecl> decls;
    std::size_t in = 1;
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        const std::string p = "enc" + std::to_string(l);
        add_conv(decls, p + ".conv1", in, cfg.widths[l], 3);
        add_conv(decls, p + ".conv2", cfg.widths[l], cfg.widths[l], 3);
        in = cfg.widths[l];
    }
    for (std::size_t l = cfg.levels - 1; l-- > 1;) {
        const std::string p = "dec" + std::to_string(l);
        add_conv(decls, p + ".conv1", in + cfg.widths[l], cfg.widths[l], 3);
        add_conv(decls, p + ".conv2", cfg.widths[l], cfg.widths[l], 3);
        in = cfg.widths[l];
    }
    add_conv(decls, "feature", in, cfg.feature_channels, 1);
    add_conv(decls, "head_mask", cfg.feature_channels, 1, 1);
    add_conv(decls, "head_boundary", cfg.feature_channels, 1, 1);
    return decls;
}

BackboneParams init_params(const BackboneConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    BackboneParams params;
    for (const auto& decl : param_decls(cfg)) {
        ParamTensor t{decl.name, decl.shape, std::vector<float>(ad::numel(decl.shape), 0.0f)};
        if (decl.shape.size() == 5) {
            const double fan_in = static_cast<double>(decl.shape[1] * decl.shape[2] * decl.shape[3] * decl.shape[4]);
            const bool head = decl.name.rfind("head_", 0) == 0;
            const double stddev = std::sqrt((head ? 1.0 : 2.0) / fan_in);
            for (auto& v : t.values) v = static_cast<float>(normal(rng) * stddev);
        }
        params.tensors.push_back(std::move(t));
    }
    return params;
}

template <typename T>
std::vector<ad::Tensor<T>> param_leaves(ad::Tape<T>& tape, const BackboneParams& params, bool requires_grad) {
    std::vector<ad::Tensor<T>> out;
    out.reserve(params.tensors.size());
    for (const auto& p : params.tensors) {
        out.push_back(tape.leaf(p.shape, std::vector<T>(p.values.begin(), p.values.end()), requires_grad));
    }
    return out;
}

template <typename T>
BackboneGraph<T> forward_graph(const BackboneConfig& cfg, std::span<const ad::Tensor<T>> params,
                               const ad::Tensor<T>& image) {
    const auto decls = param_decls(cfg);
    if (params.size() != decls.size()) {
        throw ConfigError("backbone expects " + std::to_string(decls.size()) + " parameter tensors, got " +
                          std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < decls.size(); ++i) {
        if (params[i].shape() != decls[i].shape) {
            throw ConfigError("parameter " + decls[i].name + " has shape " + ad::to_string(params[i].shape()) +
                              ", expected " + ad::to_string(decls[i].shape));
        }
    }
    const ad::SpatialShape in = ad::spatial_shape(image.shape(), "backbone input");
    if (in.c != 1 || in.batched) throw ShapeError("backbone input must be (1, D, H, W), got " + ad::to_string(image.shape()));
    cfg.check_input({in.d, in.h, in.w});

    std::size_t next = 0;
    auto conv = [&](const ad::Tensor<T>& x, std::size_t pad) {
        const auto& w = params[next++];
        const auto& b = params[next++];
        return ad::conv3d(x, w, b, {1, 1, 1}, {pad, pad, pad});
    };
    auto block = [&](const ad::Tensor<T>& x) {
        auto y = ad::relu(conv(x, 1));
        return ad::relu(conv(y, 1));
    };

    const ad::Triple pool = cfg.pool_factor();
    std::vector<ad::Tensor<T>> skips;
    ad::Tensor<T> x = ad::add_scalar(ad::scale(image, 1.0 / cfg.input_std), -cfg.input_mean / cfg.input_std);
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        if (l > 0) x = ad::maxpool3d(x, pool, pool);
        x = block(x);
        skips.push_back(x);
    }
    for (std::size_t l = cfg.levels - 1; l-- > 1;) {
        x = ad::concat_channels(ad::upsample_trilinear(x, pool), skips[l]);
        x = block(x);
    }
    BackboneGraph<T> out;
    out.features = ad::relu(conv(x, 0));
    const auto mask_logits = conv(out.features, 0);
    const auto boundary_logits = conv(out.features, 0);
    out.mask_prob = ad::sigmoid(ad::upsample_trilinear(mask_logits, pool));
    out.boundary_prob = ad::sigmoid(ad::upsample_trilinear(boundary_logits, pool));
    return out;
}

template <typename T>
ad::Tensor<T> hybrid_point_features(const BackboneGraph<T>& out, std::span<const Voxel> points) {
    const ad::SpatialShape fs = ad::spatial_shape(out.features.shape(), "hybrid features");
    const ad::SpatialShape ms = ad::spatial_shape(out.mask_prob.shape(), "hybrid features");
    if (ms.d % fs.d != 0 || ms.h % fs.h != 0 || ms.w % fs.w != 0) {
        throw ShapeError("feature map " + ad::to_string(out.features.shape()) + " does not tile probability map " +
                         ad::to_string(out.mask_prob.shape()));
    }
    const ad::Triple factor{ms.d / fs.d, ms.h / fs.h, ms.w / fs.w};
    const auto hybrid = ad::concat_channels(ad::upsample_trilinear(out.features, factor), out.mask_prob);
    return ad::gather_points(hybrid, points);
}

BackboneOutput forward(const BackboneConfig& cfg, const BackboneParams& params, const ImageVolume& image) {
    ad::Tape<float> tape;
    const Dims d = image.dims();
    const auto leaves = param_leaves(tape, params, false);
    const auto x = tape.constant({1, d.d, d.h, d.w}, image.data());
    const auto g = forward_graph<float>(cfg, leaves, x);
    BackboneOutput out;
    const auto pm = g.mask_prob.value();
    const auto pb = g.boundary_prob.value();
    out.mask_prob = ImageVolume(d, std::vector<float>(pm.begin(), pm.end()));
    out.boundary_prob = ImageVolume(d, std::vector<float>(pb.begin(), pb.end()));
    out.feature_shape = g.features.shape();
    const auto f = g.features.value();
    out.features.assign(f.begin(), f.end());
    return out;
}

std::vector<std::vector<float>> hybrid_point_features(const BackboneOutput& out, std::span<const Voxel> points) {
    ad::Tape<float> tape;
    const Dims d = out.mask_prob.dims();
    BackboneGraph<float> g;
    g.features = tape.constant(out.feature_shape, out.features);
    g.mask_prob = tape.constant({1, d.d, d.h, d.w}, out.mask_prob.data());
    g.boundary_prob = tape.constant({1, d.d, d.h, d.w}, out.boundary_prob.data());
    const auto rows = hybrid_point_features(g, points);
    const std::size_t cols = rows.shape()[1];
    const auto v = rows.value();
    std::vector<std::vector<float>> result(points.size());
    for (std::size_t p = 0; p < points.size(); ++p) {
        result[p].assign(v.begin() + static_cast<std::ptrdiff_t>(p * cols),
                         v.begin() + static_cast<std::ptrdiff_t>((p + 1) * cols));
    }
    return result;
}

template std::vector<ad::Tensor<float>> param_leaves(ad::Tape<float>&, const BackboneParams&, bool);
template std::vector<ad::Tensor<double>> param_leaves(ad::Tape<double>&, const BackboneParams&, bool);
template BackboneGraph<float> forward_graph(const BackboneConfig&, std::span<const ad::Tensor<float>>,
                                            const ad::Tensor<float>&);
template BackboneGraph<double> forward_graph(const BackboneConfig&, std::span<const ad::Tensor<double>>,
                                             const ad::Tensor<double>&);
template ad::Tensor<float> hybrid_point_features(const BackboneGraph<float>&, std::span<const Voxel>);
template ad::Tensor<double> hybrid_point_features(const BackboneGraph<double>&, std::span<const Voxel>);

}  // namespace contraseg
