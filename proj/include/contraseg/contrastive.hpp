#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "contraseg/autodiff.hpp"
#include "contraseg/pointselect.hpp"
#include "contraseg/volume.hpp"

namespace contraseg {

enum class ConsistencySign {
    kAsWritten,       // log(1 + pos/neg)
    kGoalConsistent,  // gamma - log(1 + pos/neg)
};

const char* to_string(ConsistencySign sign);
ConsistencySign parse_consistency_sign(const std::string& s);

struct LossConfig {
    double alpha = -4.0;
    double gamma = std::log(1.0 + std::exp(2.0));
    double lambda_sim = 0.2;
    double lambda_con = 0.2;
    ConsistencySign consistency_sign = ConsistencySign::kAsWritten;
    double eps = 1e-7;

    void validate() const;
};

struct PointPair {
    Voxel point;
    Voxel previous;  // same (y, x), z - 1
};

struct PairSets {
    std::vector<PointPair> positives;
    std::vector<PointPair> negatives;
};

// Feature rows for a set of points. `rows` is (points.size(), C').
// `depth` is the patch depth used to normalise z.
template <typename T>
struct PointFeatures {
    std::vector<Voxel> points;
    ad::Tensor<T> rows;
    std::size_t depth = 1;

    // Row of `v`; throws ShapeError when absent.
    std::size_t row_of(const Voxel& v) const;
};

// Sorted, de-duplicated union of the point set and the z-1 partners of its pairs.
std::vector<Voxel> feature_points(const PointSet& points, const PairSets& pairs);

double cosine_sim(std::span<const double> p, std::span<const double> q, double eps = ad::kEps);
template <typename T>
ad::Tensor<T> cosine_sim(const ad::Tensor<T>& p, const ad::Tensor<T>& q, double eps = ad::kEps);

// exp(alpha * (rz - sz)^2), rz and sz normalised z in [0, 1).
double z_weight(double rz, double sz, double alpha);

// Zero (with zero gradient) when any of the three sets is empty.
template <typename T>
ad::Tensor<T> similarity_loss(const ClassPartition& part, const PointFeatures<T>& feats, const LossConfig& cfg);

PairSets build_consistency_pairs(const PointSet& points, const MaskVolume& mask);

// Zero (with zero gradient) when either pair list is empty.
template <typename T>
ad::Tensor<T> consistency_loss(const PairSets& pairs, const PointFeatures<T>& feats, const LossConfig& cfg);

template <typename T>
struct CrossEntropy {
    ad::Tensor<T> sum;
    ad::Tensor<T> mean;  // sum / voxel count
};

// Binary cross-entropy of both heads; probabilities are (1, D, H, W) tensors.
template <typename T>
CrossEntropy<T> cross_entropy_loss(const ad::Tensor<T>& mask_prob, const MaskVolume& mask,
                                   const ad::Tensor<T>& boundary_prob, const MaskVolume& boundary,
                                   double eps = ad::kEps);

template <typename T>
ad::Tensor<T> total_loss(const ad::Tensor<T>& ce, const ad::Tensor<T>& sim, const ad::Tensor<T>& con,
                         const LossConfig& cfg);
double total_loss(double ce, double sim, double con, const LossConfig& cfg);

}  // namespace contraseg
