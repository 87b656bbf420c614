#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "contraseg/autodiff.hpp"
#include "contraseg/volume.hpp"

namespace contraseg {

// Small 3D encoder-decoder with a mask head and a boundary head.
//
// The input is standardised with a fixed mean and deviation. Encoder level l
// runs two 3x3x3 conv+ReLU blocks at width widths[l] and is pooled into level
// l+1. The decoder climbs back to level 1 (half resolution
// in xy) through upsample + skip concat + two conv blocks, projects to
// `feature_channels` with a 1x1x1 conv+ReLU (the feature map F), and applies
// two 1x1x1 heads. Head logits are trilinearly upsampled to full resolution
// before the sigmoid.
struct BackboneConfig {
    std::vector<std::size_t> widths{8, 16, 32};
    std::size_t levels = 3;
    std::size_t feature_channels = 16;
    bool xy_only_pooling = true;
    // The image enters the network as (x - input_mean) / input_std.
    double input_mean = 0.5;
    double input_std = 0.25;

    // Throws ConfigError.
    void validate() const;
    ad::Triple pool_factor() const { return xy_only_pooling ? ad::Triple{1, 2, 2} : ad::Triple{2, 2, 2}; }
    // Throws ConfigError naming the required divisibility when `dims` cannot be processed.
    void check_input(const Dims& dims) const;
};

struct ParamDecl {
    std::string name;
    ad::Shape shape;
};

struct ParamTensor {
    std::string name;
    ad::Shape shape;
    std::vector<float> values;
};

// Parameters in declaration order.
struct BackboneParams {
    std::vector<ParamTensor> tensors;

    std::size_t count() const;
    bool operator==(const BackboneParams& other) const;
};

std::vector<ParamDecl> param_decls(const BackboneConfig& cfg);

// He fan-in normal init for conv weights, zero biases.
BackboneParams init_params(const BackboneConfig& cfg, std::uint64_t seed);

template <typename T>
struct BackboneGraph {
    ad::Tensor<T> mask_prob;      // (1, D, H, W)
    ad::Tensor<T> boundary_prob;  // (1, D, H, W)
    ad::Tensor<T> features;       // (C, D', H/2, W/2)
};

// `params` must follow param_decls(cfg); `image` is (1, D, H, W).
template <typename T>
BackboneGraph<T> forward_graph(const BackboneConfig& cfg, std::span<const ad::Tensor<T>> params,
                               const ad::Tensor<T>& image);

template <typename T>
std::vector<ad::Tensor<T>> param_leaves(ad::Tape<T>& tape, const BackboneParams& params, bool requires_grad);

// Hybrid per-point features: F upsampled to full resolution, concatenated with
// the mask probability map, sampled at each point -> (P, C + 1).
template <typename T>
ad::Tensor<T> hybrid_point_features(const BackboneGraph<T>& out, std::span<const Voxel> points);

struct BackboneOutput {
    ImageVolume mask_prob;
    ImageVolume boundary_prob;
    ad::Shape feature_shape;  // (C, D', H/2, W/2)
    std::vector<float> features;
};

BackboneOutput forward(const BackboneConfig& cfg, const BackboneParams& params, const ImageVolume& image);

// Rows of length C + 1, one per point.
std::vector<std::vector<float>> hybrid_point_features(const BackboneOutput& out, std::span<const Voxel> points);

}  // namespace contraseg
