#pragma once

// Minimal reverse-mode differentiation over dense tensors.
//
// A Tape records every primitive application in order. Each record owns its
// forward value and, once backward() reaches it, its gradient. Tensors are
// lightweight handles into a tape. The engine is instantiated for float
// (training) and double (gradient verification).

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "contraseg/errors.hpp"
#include "contraseg/voxel.hpp"

namespace contraseg::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Clamp used for log arguments, divisors and norms.
inline constexpr double kEps = 1e-7;

template <typename T>
class Tape;

template <typename T>
class Tensor {
   public:
    Tensor() = default;
    Tensor(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    const Shape& shape() const;
    std::size_t numel() const;
    std::span<const T> value() const;
    // Empty until backward() has propagated into this tensor.
    std::span<const T> grad() const;
    bool requires_grad() const;
    T item() const;

   private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

template <typename T>
class Tape {
   public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    struct Record {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Tensor<T> leaf(Shape shape, std::vector<T> value, bool requires_grad = true);
    Tensor<T> constant(Shape shape, std::vector<T> value) {
        return leaf(std::move(shape), std::move(value), false);
    }
    Tensor<T> scalar(T v, bool requires_grad = false) { return leaf({1}, {v}, requires_grad); }

    // Appends a computed record. `backward` is dropped when no input needs a gradient.
    Tensor<T> record(Shape shape, std::vector<T> value, bool requires_grad, BackwardFn backward);

    // Seeds d(root)/d(root) = 1 and walks the records in reverse order.
    void backward(const Tensor<T>& root);
    void zero_grad();

    std::size_t size() const { return records_.size(); }
    const Record& at(std::size_t id) const { return records_[id]; }
    Record& at(std::size_t id) { return records_[id]; }

    // Gradient buffer of `id`, allocated to zeros on first access.
    std::vector<T>& grad_buffer(std::size_t id);

   private:
    std::vector<Record> records_;
};

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
// log(max(x, eps))
template <typename T>
Tensor<T> log(const Tensor<T>& x, double eps = kEps);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double offset);

// Binary ops require equal shapes, or one operand with a single element.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
// a / max(b, eps)
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b, double eps = kEps);

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x);
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x);
// (rows, cols) -> (rows)
template <typename T>
Tensor<T> sum_last_axis(const Tensor<T>& x);
template <typename T>
Tensor<T> mean_last_axis(const Tensor<T>& x);
template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b);
// max(||x||_2, eps)
template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x, double eps = kEps);

// ---------------------------------------------------------------------------
// Matrix helpers for point features, all on (rows, cols) tensors.

// Each row divided by max(||row||, eps).
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, double eps = kEps);
// a (m, k) times transpose of b (n, k) -> (m, n)
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> select_rows(const Tensor<T>& x, std::span<const std::size_t> rows);

// ---------------------------------------------------------------------------
// Volumetric ops. Inputs are (C, D, H, W) or (N, C, D, H, W); rank is preserved.

using Triple = std::array<std::size_t, 3>;

// Cross-correlation with zero padding. weights: (Co, Ci, kd, kh, kw); bias: (Co) or invalid.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                 Triple stride = {1, 1, 1}, Triple padding = {0, 0, 0});
template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x, Triple window, Triple stride);
// Integer-factor trilinear resize, align_corners = false.
template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, Triple factor);
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
// Channels [begin, end).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end);
// Channel fibres at integer (z, y, x) of the first batch item -> (P, C).
template <typename T>
Tensor<T> gather_points(const Tensor<T>& x, std::span<const Voxel> points);

// Shape helpers for volumetric tensors.
struct SpatialShape {
    std::size_t n = 1;
    std::size_t c = 0;
    std::size_t d = 0;
    std::size_t h = 0;
    std::size_t w = 0;
    bool batched = false;

    std::size_t plane() const { return d * h * w; }
    Shape shape() const {
        return batched ? Shape{n, c, d, h, w} : Shape{c, d, h, w};
    }
};
SpatialShape spatial_shape(const Shape& shape, const char* op);

}  // namespace contraseg::ad
