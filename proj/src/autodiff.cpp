#include "contraseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Core>

namespace contraseg::ad {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

SpatialShape spatial_shape(const Shape& shape, const char* op) {
    SpatialShape s;
    if (shape.size() == 4) {
        s = {1, shape[0], shape[1], shape[2], shape[3], false};
    } else if (shape.size() == 5) {
        s = {shape[0], shape[1], shape[2], shape[3], shape[4], true};
    } else {
        throw ShapeError(std::string(op) + ": expected (C,D,H,W) or (N,C,D,H,W), got " +
                         to_string(shape));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Tensor / Tape

template <typename T>
const Shape& Tensor<T>::shape() const {
    return tape_->at(id_).shape;
}
template <typename T>
std::size_t Tensor<T>::numel() const {
    return tape_->at(id_).value.size();
}
template <typename T>
std::span<const T> Tensor<T>::value() const {
    return tape_->at(id_).value;
}
template <typename T>
std::span<const T> Tensor<T>::grad() const {
    return tape_->at(id_).grad;
}
template <typename T>
bool Tensor<T>::requires_grad() const {
    return tape_->at(id_).requires_grad;
}
template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return value()[0];
}

template <typename T>
Tensor<T> Tape<T>::leaf(Shape shape, std::vector<T> value, bool requires_grad) {
    if (numel(shape) != value.size()) {
        throw ShapeError("leaf shape " + to_string(shape) + " does not match " +
                         std::to_string(value.size()) + " values");
    }
    records_.push_back({std::move(shape), std::move(value), {}, requires_grad, {}});
    return Tensor<T>(this, records_.size() - 1);
}

template <typename T>
Tensor<T> Tape<T>::record(Shape shape, std::vector<T> value, bool requires_grad,
                          BackwardFn backward) {
    records_.push_back({std::move(shape), std::move(value), {}, requires_grad,
                        requires_grad ? std::move(backward) : BackwardFn{}});
    return Tensor<T>(this, records_.size() - 1);
}

template <typename T>
std::vector<T>& Tape<T>::grad_buffer(std::size_t id) {
    auto& r = records_[id];
    if (r.grad.empty()) r.grad.assign(r.value.size(), T(0));
    return r.grad;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& root) {
    if (root.numel() != 1) {
        throw ShapeError("backward() needs a scalar root, got " + to_string(root.shape()));
    }
    grad_buffer(root.id())[0] = T(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
        auto& r = records_[i];
        if (r.backward && !r.grad.empty()) r.backward(*this, i);
    }
}

template <typename T>
void Tape<T>::zero_grad() {
    for (auto& r : records_) r.grad.clear();
}

namespace {

template <typename T>
void check_same_tape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (&a.tape() != &b.tape()) throw ShapeError(std::string(op) + ": tensors on different tapes");
}

// Unary elementwise op with derivative expressed through (x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
    auto& tape = x.tape();
    const auto in = x.value();
    std::vector<T> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    const std::size_t xid = x.id();
    return tape.record(x.shape(), std::move(out), x.requires_grad(),
                       [xid, df](Tape<T>& t, std::size_t self) {
                           const auto& g = t.at(self).grad;
                           const auto& xv = t.at(xid).value;
                           const auto& yv = t.at(self).value;
                           auto& gx = t.grad_buffer(xid);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
                       });
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op, double eps, const char* name) {
    check_same_tape(a, b, name);
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (a.shape() != b.shape() && !a_scalar && !b_scalar) {
        throw ShapeError(std::string(name) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
    const Shape shape = (a_scalar && !b_scalar) ? b.shape() : a.shape();
    const std::size_t n = numel(shape);
    const auto av = a.value();
    const auto bv = b.value();
    const T clamp = static_cast<T>(eps);
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const T x = av[a_scalar ? 0 : i];
        const T y = bv[b_scalar ? 0 : i];
        switch (op) {
            case BinOp::kAdd:
                out[i] = x + y;
                break;
            case BinOp::kSub:
                out[i] = x - y;
                break;
            case BinOp::kMul:
                out[i] = x * y;
                break;
            case BinOp::kDiv:
                out[i] = x / std::max(y, clamp);
                break;
        }
    }
    const std::size_t aid = a.id();
    const std::size_t bid = b.id();
    const bool ga = a.requires_grad();
    const bool gb = b.requires_grad();
    return a.tape().record(
        shape, std::move(out), ga || gb,
        [=](Tape<T>& t, std::size_t self) {
            const auto& g = t.at(self).grad;
            const auto& xv = t.at(aid).value;
            const auto& yv = t.at(bid).value;
            std::vector<T>* gx = ga ? &t.grad_buffer(aid) : nullptr;
            std::vector<T>* gy = gb ? &t.grad_buffer(bid) : nullptr;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const std::size_t ia = a_scalar ? 0 : i;
                const std::size_t ib = b_scalar ? 0 : i;
                const T x = xv[ia];
                const T y = yv[ib];
                T dx = 0;
                T dy = 0;
                switch (op) {
                    case BinOp::kAdd:
                        dx = 1;
                        dy = 1;
                        break;
                    case BinOp::kSub:
                        dx = 1;
                        dy = -1;
                        break;
                    case BinOp::kMul:
                        dx = y;
                        dy = x;
                        break;
                    case BinOp::kDiv:
                        if (y > clamp) {
                            dx = T(1) / y;
                            dy = -x / (y * y);
                        } else {
                            dx = T(1) / clamp;
                        }
                        break;
                }
                if (gx) (*gx)[ia] += g[i] * dx;
                if (gy) (*gy)[ib] += g[i] * dy;
            }
        });
}

}  // namespace

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary(
        x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary(
        x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return unary(
        x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x, double eps) {
    const T c = static_cast<T>(eps);
    return unary(
        x, [c](T v) { return std::log(std::max(v, c)); },
        [c](T v, T) { return v > c ? T(1) / v : T(0); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
    const T f = static_cast<T>(factor);
    return unary(
        x, [f](T v) { return v * f; }, [f](T, T) { return f; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double offset) {
    const T c = static_cast<T>(offset);
    return unary(
        x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinOp::kAdd, 0.0, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinOp::kSub, 0.0, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinOp::kMul, 0.0, "mul");
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b, double eps) {
    return binary(a, b, BinOp::kDiv, eps, "div");
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
    T s = 0;
    for (T v : x.value()) s += v;
    const std::size_t xid = x.id();
    return x.tape().record({1}, {s}, x.requires_grad(), [xid](Tape<T>& t, std::size_t self) {
        const T g = t.at(self).grad[0];
        for (auto& gx : t.grad_buffer(xid)) gx += g;
    });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("reduce_mean of empty tensor");
    return scale(reduce_sum(x), 1.0 / static_cast<double>(x.numel()));
}

namespace {

template <typename T>
Tensor<T> rows_reduce(const Tensor<T>& x, bool mean) {
    if (x.shape().size() != 2) {
        throw ShapeError("last-axis reduction expects (rows, cols), got " + to_string(x.shape()));
    }
    const std::size_t rows = x.shape()[0];
    const std::size_t cols = x.shape()[1];
    if (cols == 0) throw ShapeError("last-axis reduction over zero columns");
    const T f = mean ? T(1) / static_cast<T>(cols) : T(1);
    const auto v = x.value();
    std::vector<T> out(rows, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
        T s = 0;
        for (std::size_t c = 0; c < cols; ++c) s += v[r * cols + c];
        out[r] = s * f;
    }
    const std::size_t xid = x.id();
    return x.tape().record({rows}, std::move(out), x.requires_grad(),
                           [=](Tape<T>& t, std::size_t self) {
                               const auto& g = t.at(self).grad;
                               auto& gx = t.grad_buffer(xid);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r] * f;
                               }
                           });
}

}  // namespace

template <typename T>
Tensor<T> sum_last_axis(const Tensor<T>& x) {
    return rows_reduce(x, false);
}
template <typename T>
Tensor<T> mean_last_axis(const Tensor<T>& x) {
    return rows_reduce(x, true);
}

template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_tape(a, b, "dot");
    if (a.numel() != b.numel()) {
        throw ShapeError("dot: length mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    const auto av = a.value();
    const auto bv = b.value();
    T s = 0;
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
    const std::size_t aid = a.id();
    const std::size_t bid = b.id();
    const bool ga = a.requires_grad();
    const bool gb = b.requires_grad();
    return a.tape().record({1}, {s}, ga || gb, [=](Tape<T>& t, std::size_t self) {
        const T g = t.at(self).grad[0];
        const auto& xv = t.at(aid).value;
        const auto& yv = t.at(bid).value;
        if (ga) {
            auto& gx = t.grad_buffer(aid);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * yv[i];
        }
        if (gb) {
            auto& gy = t.grad_buffer(bid);
            for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += g * xv[i];
        }
    });
}

template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x, double eps) {
    T ss = 0;
    for (T v : x.value()) ss += v * v;
    const T raw = std::sqrt(ss);
    const T c = static_cast<T>(eps);
    const bool clamped = !(raw > c);
    const std::size_t xid = x.id();
    return x.tape().record({1}, {clamped ? c : raw}, x.requires_grad(),
                           [=](Tape<T>& t, std::size_t self) {
                               if (clamped) return;
                               const T g = t.at(self).grad[0];
                               const auto& xv = t.at(xid).value;
                               auto& gx = t.grad_buffer(xid);
                               for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * xv[i] / raw;
                           });
}

// ---------------------------------------------------------------------------
// Matrix helpers

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, double eps) {
    if (x.shape().size() != 2) throw ShapeError("normalize_rows expects (rows, cols), got " + to_string(x.shape()));
    const std::size_t rows = x.shape()[0];
    const std::size_t cols = x.shape()[1];
    const auto v = x.value();
    const T c = static_cast<T>(eps);
    std::vector<T> norms(rows);
    std::vector<T> out(v.size());
    for (std::size_t r = 0; r < rows; ++r) {
        T ss = 0;
        for (std::size_t k = 0; k < cols; ++k) ss += v[r * cols + k] * v[r * cols + k];
        norms[r] = std::sqrt(ss);
        const T n = std::max(norms[r], c);
        for (std::size_t k = 0; k < cols; ++k) out[r * cols + k] = v[r * cols + k] / n;
    }
    const std::size_t xid = x.id();
    return x.tape().record(x.shape(), std::move(out), x.requires_grad(),
                           [=, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
                               const auto& g = t.at(self).grad;
                               const auto& y = t.at(self).value;
                               auto& gx = t.grad_buffer(xid);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const T* gr = &g[r * cols];
                                   const T* yr = &y[r * cols];
                                   if (norms[r] > c) {
                                       // d(x/|x|) = (g - y (g.y)) / |x|
                                       T gy = 0;
                                       for (std::size_t k = 0; k < cols; ++k) gy += gr[k] * yr[k];
                                       for (std::size_t k = 0; k < cols; ++k) {
                                           gx[r * cols + k] += (gr[k] - yr[k] * gy) / norms[r];
                                       }
                                   } else {
                                       for (std::size_t k = 0; k < cols; ++k) gx[r * cols + k] += gr[k] / c;
                                   }
                               }
                           });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_tape(a, b, "matmul_nt");
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1]) {
        throw ShapeError("matmul_nt: incompatible " + to_string(a.shape()) + " and " + to_string(b.shape()));
    }
    const std::size_t m = a.shape()[0];
    const std::size_t n = b.shape()[0];
    const std::size_t k = a.shape()[1];
    const auto av = a.value();
    const auto bv = b.value();
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T s = 0;
            for (std::size_t q = 0; q < k; ++q) s += av[i * k + q] * bv[j * k + q];
            out[i * n + j] = s;
        }
    }
    const std::size_t aid = a.id();
    const std::size_t bid = b.id();
    const bool ga = a.requires_grad();
    const bool gb = b.requires_grad();
    return a.tape().record({m, n}, std::move(out), ga || gb, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.at(self).grad;
        const auto& x = t.at(aid).value;
        const auto& y = t.at(bid).value;
        if (ga) {
            auto& gx = t.grad_buffer(aid);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const T gij = g[i * n + j];
                    for (std::size_t q = 0; q < k; ++q) gx[i * k + q] += gij * y[j * k + q];
                }
            }
        }
        if (gb) {
            auto& gy = t.grad_buffer(bid);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const T gij = g[i * n + j];
                    for (std::size_t q = 0; q < k; ++q) gy[j * k + q] += gij * x[i * k + q];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> select_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
    if (x.shape().size() != 2) throw ShapeError("select_rows expects (rows, cols), got " + to_string(x.shape()));
    const std::size_t nrows = x.shape()[0];
    const std::size_t cols = x.shape()[1];
    const auto v = x.value();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<T> out(idx.size() * cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= nrows) {
            throw ShapeError("select_rows: row " + std::to_string(idx[r]) + " out of " + std::to_string(nrows));
        }
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(idx[r] * cols), cols, out.begin() + static_cast<std::ptrdiff_t>(r * cols));
    }
    const std::size_t xid = x.id();
    const Shape shape{idx.size(), cols};
    return x.tape().record(shape, std::move(out), x.requires_grad(),
                           [=, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
                               const auto& g = t.at(self).grad;
                               auto& gx = t.grad_buffer(xid);
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                   for (std::size_t c = 0; c < cols; ++c) gx[idx[r] * cols + c] += g[r * cols + c];
                               }
                           });
}

// ---------------------------------------------------------------------------
// Convolution via im2col + GEMM.

namespace {

struct ConvGeometry {
    std::size_t ci, di, hi, wi;
    std::size_t co, kd, kh, kw;
    Triple stride, pad;
    std::size_t d_out, h_out, w_out;

    std::size_t kernel_volume() const { return kd * kh * kw; }
    std::size_t in_plane() const { return di * hi * wi; }
    std::size_t out_plane() const { return d_out * h_out * w_out; }
};

// Output positions o in [lo, hi) whose input index o*s + k - p lies in [0, in).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t s,
                                                       std::size_t p, std::size_t k) {
    const auto ps = static_cast<std::ptrdiff_t>(p);
    const auto ks = static_cast<std::ptrdiff_t>(k);
    const auto ss = static_cast<std::ptrdiff_t>(s);
    std::ptrdiff_t lo = 0;
    if (ps > ks) lo = (ps - ks + ss - 1) / ss;
    std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(in) - 1 + ps - ks);
    hi = hi < 0 ? 0 : hi / ss + 1;
    hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out));
    if (lo > hi) lo = hi;
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// col: (ci * K) x out_plane, row-major.
template <typename T>
void im2col(const T* in, const ConvGeometry& g, T* col) {
    const std::size_t plane = g.out_plane();
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.ci; ++c) {
        const T* src = in + c * g.in_plane();
        for (std::size_t kz = 0; kz < g.kd; ++kz) {
            const auto [z0, z1] = valid_range(g.d_out, g.di, g.stride[0], g.pad[0], kz);
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                const auto [y0, y1] = valid_range(g.h_out, g.hi, g.stride[1], g.pad[1], ky);
                for (std::size_t kx = 0; kx < g.kw; ++kx, ++row) {
                    const auto [x0, x1] = valid_range(g.w_out, g.wi, g.stride[2], g.pad[2], kx);
                    T* dst = col + row * plane;
                    std::fill(dst, dst + plane, T(0));
                    for (std::size_t oz = z0; oz < z1; ++oz) {
                        const std::size_t iz = oz * g.stride[0] + kz - g.pad[0];
                        for (std::size_t oy = y0; oy < y1; ++oy) {
                            const std::size_t iy = oy * g.stride[1] + ky - g.pad[1];
                            const T* srow = src + (iz * g.hi + iy) * g.wi;
                            T* drow = dst + (oz * g.h_out + oy) * g.w_out;
                            if (g.stride[2] == 1) {
                                const std::size_t off = kx - g.pad[2];  // unsigned wrap; ox + off stays in range
                                for (std::size_t ox = x0; ox < x1; ++ox) drow[ox] = srow[ox + off];
                            } else {
                                for (std::size_t ox = x0; ox < x1; ++ox) {
                                    drow[ox] = srow[ox * g.stride[2] + kx - g.pad[2]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* out) {
    const std::size_t plane = g.out_plane();
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.ci; ++c) {
        T* dst = out + c * g.in_plane();
        for (std::size_t kz = 0; kz < g.kd; ++kz) {
            const auto [z0, z1] = valid_range(g.d_out, g.di, g.stride[0], g.pad[0], kz);
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                const auto [y0, y1] = valid_range(g.h_out, g.hi, g.stride[1], g.pad[1], ky);
                for (std::size_t kx = 0; kx < g.kw; ++kx, ++row) {
                    const auto [x0, x1] = valid_range(g.w_out, g.wi, g.stride[2], g.pad[2], kx);
                    const T* src = col + row * plane;
                    for (std::size_t oz = z0; oz < z1; ++oz) {
                        const std::size_t iz = oz * g.stride[0] + kz - g.pad[0];
                        for (std::size_t oy = y0; oy < y1; ++oy) {
                            const std::size_t iy = oy * g.stride[1] + ky - g.pad[1];
                            T* drow = dst + (iz * g.hi + iy) * g.wi;
                            const T* srow = src + (oz * g.h_out + oy) * g.w_out;
                            for (std::size_t ox = x0; ox < x1; ++ox) {
                                drow[ox * g.stride[2] + kx - g.pad[2]] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                 Triple stride, Triple padding) {
    check_same_tape(input, weights, "conv3d");
    const SpatialShape in = spatial_shape(input.shape(), "conv3d input");
    const Shape& ws = weights.shape();
    if (ws.size() != 5) throw ShapeError("conv3d: weights must be (Co,Ci,kd,kh,kw), got " + to_string(ws));
    if (ws[1] != in.c) {
        throw ShapeError("conv3d: input channel axis has " + std::to_string(in.c) +
                         " but weights expect " + std::to_string(ws[1]));
    }
    for (std::size_t a = 0; a < 3; ++a) {
        if (ws[2 + a] % 2 == 0) throw ShapeError("conv3d: kernel axis " + std::to_string(a) + " must be odd");
        if (stride[a] == 0) throw ShapeError("conv3d: stride must be >= 1");
    }
    const bool has_bias = bias.valid();
    if (has_bias) {
        check_same_tape(input, bias, "conv3d");
        if (bias.numel() != ws[0]) {
            throw ShapeError("conv3d: bias has " + std::to_string(bias.numel()) + " entries, output channels " +
                             std::to_string(ws[0]));
        }
    }
    const std::array<std::size_t, 3> in_sp{in.d, in.h, in.w};
    std::array<std::size_t, 3> out_sp{};
    for (std::size_t a = 0; a < 3; ++a) {
        const std::size_t padded = in_sp[a] + 2 * padding[a];
        if (padded < ws[2 + a]) {
            throw ShapeError("conv3d: kernel axis " + std::to_string(a) + " larger than padded input");
        }
        out_sp[a] = (padded - ws[2 + a]) / stride[a] + 1;
    }
    const ConvGeometry g{in.c, in.d, in.h, in.w, ws[0], ws[2], ws[3], ws[4], stride, padding,
                         out_sp[0], out_sp[1], out_sp[2]};
    const std::size_t rows = g.ci * g.kernel_volume();
    const std::size_t plane = g.out_plane();

    SpatialShape out_shape = in;
    out_shape.c = g.co;
    out_shape.d = out_sp[0];
    out_shape.h = out_sp[1];
    out_shape.w = out_sp[2];

    std::vector<T> out(in.n * g.co * plane);
    std::vector<T> col(rows * plane);
    const ConstMatMap<T> w(weights.value().data(), static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(rows));
    for (std::size_t b = 0; b < in.n; ++b) {
        im2col(input.value().data() + b * g.ci * g.in_plane(), g, col.data());
        MatMap<T> o(out.data() + b * g.co * plane, static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(plane));
        o.noalias() = w * ConstMatMap<T>(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(plane));
        if (has_bias) {
            const auto bv = bias.value();
            for (std::size_t c = 0; c < g.co; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bv[c];
        }
    }

    const std::size_t iid = input.id();
    const std::size_t wid = weights.id();
    const std::size_t bid = has_bias ? bias.id() : 0;
    const bool gi = input.requires_grad();
    const bool gw = weights.requires_grad();
    const bool gb = has_bias && bias.requires_grad();
    const std::size_t batch = in.n;
    return input.tape().record(
        out_shape.shape(), std::move(out), gi || gw || gb, [=](Tape<T>& t, std::size_t self) {
            const auto& gout = t.at(self).grad;
            const auto& xv = t.at(iid).value;
            const auto& wv = t.at(wid).value;
            const auto er = static_cast<Eigen::Index>(rows);
            const auto ep = static_cast<Eigen::Index>(plane);
            const auto eco = static_cast<Eigen::Index>(g.co);
            std::vector<T> colbuf(rows * plane);
            for (std::size_t b = 0; b < batch; ++b) {
                const ConstMatMap<T> go(gout.data() + b * g.co * plane, eco, ep);
                if (gw) {
                    im2col(xv.data() + b * g.ci * g.in_plane(), g, colbuf.data());
                    MatMap<T> gwm(t.grad_buffer(wid).data(), eco, er);
                    gwm.noalias() += go * ConstMatMap<T>(colbuf.data(), er, ep).transpose();
                }
                if (gb) {
                    auto& gbv = t.grad_buffer(bid);
                    // Plain loop: Eigen's vectorised sum splits the row by pointer alignment,
                    // which would make the result depend on where the buffer was allocated.
                    for (std::size_t c = 0; c < g.co; ++c) {
                        const T* row = gout.data() + (b * g.co + c) * plane;
                        T acc = 0;
                        for (std::size_t k = 0; k < plane; ++k) acc += row[k];
                        gbv[c] += acc;
                    }
                }
                if (gi) {
                    MatMap<T> gcol(colbuf.data(), er, ep);
                    gcol.noalias() = ConstMatMap<T>(wv.data(), eco, er).transpose() * go;
                    col2im(colbuf.data(), g, t.grad_buffer(iid).data() + b * g.ci * g.in_plane());
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Pooling / resampling / channel ops

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x, Triple window, Triple stride) {
    const SpatialShape in = spatial_shape(x.shape(), "maxpool3d");
    const std::array<std::size_t, 3> in_sp{in.d, in.h, in.w};
    std::array<std::size_t, 3> out_sp{};
    for (std::size_t a = 0; a < 3; ++a) {
        if (window[a] == 0 || stride[a] == 0) throw ShapeError("maxpool3d: window and stride must be >= 1");
        if (window[a] > in_sp[a]) {
            throw ShapeError("maxpool3d: window " + std::to_string(window[a]) + " larger than input axis " +
                             std::to_string(a) + " of size " + std::to_string(in_sp[a]));
        }
        out_sp[a] = (in_sp[a] - window[a]) / stride[a] + 1;
    }
    SpatialShape os = in;
    os.d = out_sp[0];
    os.h = out_sp[1];
    os.w = out_sp[2];
    const auto v = x.value();
    const std::size_t channels = in.n * in.c;
    std::vector<T> out(channels * os.plane());
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t ibase = c * in.plane();
        const std::size_t obase = c * os.plane();
        for (std::size_t oz = 0; oz < os.d; ++oz) {
            for (std::size_t oy = 0; oy < os.h; ++oy) {
                for (std::size_t ox = 0; ox < os.w; ++ox) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t arg = 0;
                    for (std::size_t wz = 0; wz < window[0]; ++wz) {
                        for (std::size_t wy = 0; wy < window[1]; ++wy) {
                            for (std::size_t wx = 0; wx < window[2]; ++wx) {
                                const std::size_t idx = ibase + ((oz * stride[0] + wz) * in.h + oy * stride[1] + wy) * in.w +
                                                        ox * stride[2] + wx;
                                if (v[idx] > best) {
                                    best = v[idx];
                                    arg = idx;
                                }
                            }
                        }
                    }
                    const std::size_t o = obase + (oz * os.h + oy) * os.w + ox;
                    out[o] = best;
                    argmax[o] = arg;
                }
            }
        }
    }
    const std::size_t xid = x.id();
    return x.tape().record(os.shape(), std::move(out), x.requires_grad(),
                           [xid, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
                               const auto& g = t.at(self).grad;
                               auto& gx = t.grad_buffer(xid);
                               for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                           });
}

namespace {

struct AxisInterp {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w1;
};

AxisInterp axis_interp(std::size_t in, std::size_t factor) {
    const std::size_t out = in * factor;
    AxisInterp a;
    a.i0.resize(out);
    a.i1.resize(out);
    a.w1.resize(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        if (src < 0) src = 0;
        std::size_t lo = static_cast<std::size_t>(std::floor(src));
        if (lo > in - 1) lo = in - 1;
        a.i0[o] = lo;
        a.i1[o] = std::min(lo + 1, in - 1);
        a.w1[o] = src - static_cast<double>(lo);
    }
    return a;
}

}  // namespace

template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, Triple factor) {
    const SpatialShape in = spatial_shape(x.shape(), "upsample_trilinear");
    for (std::size_t f : factor) {
        if (f == 0) throw ShapeError("upsample_trilinear: factor must be >= 1");
    }
    if (in.d == 0 || in.h == 0 || in.w == 0) throw ShapeError("upsample_trilinear: empty input");
    SpatialShape os = in;
    os.d = in.d * factor[0];
    os.h = in.h * factor[1];
    os.w = in.w * factor[2];
    const AxisInterp az = axis_interp(in.d, factor[0]);
    const AxisInterp ay = axis_interp(in.h, factor[1]);
    const AxisInterp ax = axis_interp(in.w, factor[2]);

    const auto v = x.value();
    const std::size_t channels = in.n * in.c;
    std::vector<T> out(channels * os.plane());
    for (std::size_t c = 0; c < channels; ++c) {
        const T* src = v.data() + c * in.plane();
        T* dst = out.data() + c * os.plane();
        for (std::size_t z = 0; z < os.d; ++z) {
            const T wz1 = static_cast<T>(az.w1[z]);
            const T wz0 = T(1) - wz1;
            for (std::size_t y = 0; y < os.h; ++y) {
                const T wy1 = static_cast<T>(ay.w1[y]);
                const T wy0 = T(1) - wy1;
                const T* r00 = src + (az.i0[z] * in.h + ay.i0[y]) * in.w;
                const T* r01 = src + (az.i0[z] * in.h + ay.i1[y]) * in.w;
                const T* r10 = src + (az.i1[z] * in.h + ay.i0[y]) * in.w;
                const T* r11 = src + (az.i1[z] * in.h + ay.i1[y]) * in.w;
                T* drow = dst + (z * os.h + y) * os.w;
                for (std::size_t xo = 0; xo < os.w; ++xo) {
                    const T wx1 = static_cast<T>(ax.w1[xo]);
                    const T wx0 = T(1) - wx1;
                    const std::size_t a = ax.i0[xo];
                    const std::size_t b = ax.i1[xo];
                    drow[xo] = wz0 * (wy0 * (wx0 * r00[a] + wx1 * r00[b]) + wy1 * (wx0 * r01[a] + wx1 * r01[b])) +
                               wz1 * (wy0 * (wx0 * r10[a] + wx1 * r10[b]) + wy1 * (wx0 * r11[a] + wx1 * r11[b]));
                }
            }
        }
    }
    const std::size_t xid = x.id();
    return x.tape().record(
        os.shape(), std::move(out), x.requires_grad(), [=](Tape<T>& t, std::size_t self) {
            const auto& g = t.at(self).grad;
            auto& gx = t.grad_buffer(xid);
            for (std::size_t c = 0; c < channels; ++c) {
                T* dst = gx.data() + c * in.plane();
                const T* src = g.data() + c * os.plane();
                for (std::size_t z = 0; z < os.d; ++z) {
                    const T wz1 = static_cast<T>(az.w1[z]);
                    const T wz0 = T(1) - wz1;
                    for (std::size_t y = 0; y < os.h; ++y) {
                        const T wy1 = static_cast<T>(ay.w1[y]);
                        const T wy0 = T(1) - wy1;
                        T* r00 = dst + (az.i0[z] * in.h + ay.i0[y]) * in.w;
                        T* r01 = dst + (az.i0[z] * in.h + ay.i1[y]) * in.w;
                        T* r10 = dst + (az.i1[z] * in.h + ay.i0[y]) * in.w;
                        T* r11 = dst + (az.i1[z] * in.h + ay.i1[y]) * in.w;
                        const T* grow = src + (z * os.h + y) * os.w;
                        for (std::size_t xo = 0; xo < os.w; ++xo) {
                            const T wx1 = static_cast<T>(ax.w1[xo]);
                            const T wx0 = T(1) - wx1;
                            const std::size_t a = ax.i0[xo];
                            const std::size_t b = ax.i1[xo];
                            const T gv = grow[xo];
                            r00[a] += gv * wz0 * wy0 * wx0;
                            r00[b] += gv * wz0 * wy0 * wx1;
                            r01[a] += gv * wz0 * wy1 * wx0;
                            r01[b] += gv * wz0 * wy1 * wx1;
                            r10[a] += gv * wz1 * wy0 * wx0;
                            r10[b] += gv * wz1 * wy0 * wx1;
                            r11[a] += gv * wz1 * wy1 * wx0;
                            r11[b] += gv * wz1 * wy1 * wx1;
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_tape(a, b, "concat_channels");
    const SpatialShape sa = spatial_shape(a.shape(), "concat_channels");
    const SpatialShape sb = spatial_shape(b.shape(), "concat_channels");
    if (sa.batched != sb.batched || sa.n != sb.n || sa.d != sb.d || sa.h != sb.h || sa.w != sb.w) {
        throw ShapeError("concat_channels: non-channel axes differ " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
    SpatialShape os = sa;
    os.c = sa.c + sb.c;
    const std::size_t plane = sa.plane();
    const auto av = a.value();
    const auto bv = b.value();
    std::vector<T> out;
    out.reserve(sa.n * os.c * plane);
    for (std::size_t n = 0; n < sa.n; ++n) {
        out.insert(out.end(), av.begin() + static_cast<std::ptrdiff_t>(n * sa.c * plane),
                   av.begin() + static_cast<std::ptrdiff_t>((n + 1) * sa.c * plane));
        out.insert(out.end(), bv.begin() + static_cast<std::ptrdiff_t>(n * sb.c * plane),
                   bv.begin() + static_cast<std::ptrdiff_t>((n + 1) * sb.c * plane));
    }
    const std::size_t aid = a.id();
    const std::size_t bid = b.id();
    const bool ga = a.requires_grad();
    const bool gb = b.requires_grad();
    return a.tape().record(os.shape(), std::move(out), ga || gb, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.at(self).grad;
        for (std::size_t n = 0; n < sa.n; ++n) {
            const T* base = g.data() + n * os.c * plane;
            if (ga) {
                auto& gx = t.grad_buffer(aid);
                for (std::size_t i = 0; i < sa.c * plane; ++i) gx[n * sa.c * plane + i] += base[i];
            }
            if (gb) {
                auto& gy = t.grad_buffer(bid);
                for (std::size_t i = 0; i < sb.c * plane; ++i) gy[n * sb.c * plane + i] += base[sa.c * plane + i];
            }
        }
    });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    const SpatialShape s = spatial_shape(x.shape(), "slice_channels");
    if (begin >= end || end > s.c) {
        throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + std::to_string(s.c) + " channels");
    }
    SpatialShape os = s;
    os.c = end - begin;
    const std::size_t plane = s.plane();
    const auto v = x.value();
    std::vector<T> out;
    out.reserve(s.n * os.c * plane);
    for (std::size_t n = 0; n < s.n; ++n) {
        const auto first = v.begin() + static_cast<std::ptrdiff_t>((n * s.c + begin) * plane);
        out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(os.c * plane));
    }
    const std::size_t xid = x.id();
    return x.tape().record(os.shape(), std::move(out), x.requires_grad(), [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.at(self).grad;
        auto& gx = t.grad_buffer(xid);
        for (std::size_t n = 0; n < s.n; ++n) {
            for (std::size_t i = 0; i < os.c * plane; ++i) gx[(n * s.c + begin) * plane + i] += g[n * os.c * plane + i];
        }
    });
}

template <typename T>
Tensor<T> gather_points(const Tensor<T>& x, std::span<const Voxel> points) {
    const SpatialShape s = spatial_shape(x.shape(), "gather_points");
    const std::size_t plane = s.plane();
    std::vector<std::size_t> offsets(points.size());
    for (std::size_t p = 0; p < points.size(); ++p) {
        const Voxel& q = points[p];
        if (q.z >= s.d || q.y >= s.h || q.x >= s.w) {
            throw ShapeError("gather_points: point (" + std::to_string(q.z) + "," + std::to_string(q.y) + "," +
                             std::to_string(q.x) + ") outside (" + std::to_string(s.d) + "," + std::to_string(s.h) +
                             "," + std::to_string(s.w) + ")");
        }
        offsets[p] = (q.z * s.h + q.y) * s.w + q.x;
    }
    const auto v = x.value();
    std::vector<T> out(points.size() * s.c);
    for (std::size_t p = 0; p < points.size(); ++p) {
        for (std::size_t c = 0; c < s.c; ++c) out[p * s.c + c] = v[c * plane + offsets[p]];
    }
    const std::size_t xid = x.id();
    const std::size_t channels = s.c;
    return x.tape().record({points.size(), s.c}, std::move(out), x.requires_grad(),
                           [=, offsets = std::move(offsets)](Tape<T>& t, std::size_t self) {
                               const auto& g = t.at(self).grad;
                               auto& gx = t.grad_buffer(xid);
                               for (std::size_t p = 0; p < offsets.size(); ++p) {
                                   for (std::size_t c = 0; c < channels; ++c) {
                                       gx[c * plane + offsets[p]] += g[p * channels + c];
                                   }
                               }
                           });
}

// ---------------------------------------------------------------------------

#define CONTRASEG_INSTANTIATE(T)                                                              \
    template class Tensor<T>;                                                                 \
    template class Tape<T>;                                                                   \
    template Tensor<T> relu(const Tensor<T>&);                                                \
    template Tensor<T> sigmoid(const Tensor<T>&);                                             \
    template Tensor<T> exp(const Tensor<T>&);                                                 \
    template Tensor<T> log(const Tensor<T>&, double);                                         \
    template Tensor<T> scale(const Tensor<T>&, double);                                       \
    template Tensor<T> add_scalar(const Tensor<T>&, double);                                  \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> div(const Tensor<T>&, const Tensor<T>&, double);                       \
    template Tensor<T> reduce_sum(const Tensor<T>&);                                          \
    template Tensor<T> reduce_mean(const Tensor<T>&);                                         \
    template Tensor<T> sum_last_axis(const Tensor<T>&);                                       \
    template Tensor<T> mean_last_axis(const Tensor<T>&);                                      \
    template Tensor<T> dot(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> l2_norm(const Tensor<T>&, double);                                     \
    template Tensor<T> normalize_rows(const Tensor<T>&, double);                              \
    template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> select_rows(const Tensor<T>&, std::span<const std::size_t>);           \
    template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Triple, Triple); \
    template Tensor<T> maxpool3d(const Tensor<T>&, Triple, Triple);                           \
    template Tensor<T> upsample_trilinear(const Tensor<T>&, Triple);                          \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);            \
    template Tensor<T> gather_points(const Tensor<T>&, std::span<const Voxel>);

CONTRASEG_INSTANTIATE(float)
CONTRASEG_INSTANTIATE(double)

#undef CONTRASEG_INSTANTIATE

}  // namespace contraseg::ad
