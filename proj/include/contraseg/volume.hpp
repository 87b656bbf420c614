#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "contraseg/errors.hpp"
#include "contraseg/voxel.hpp"

namespace contraseg {

// Voxel counts along (z, y, x).
struct Dims {
    std::size_t d = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    std::size_t voxels() const { return d * h * w; }
    bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& dims);

// Dense 3D grid stored z-major, then y, then x.
template <typename T>
class Volume {
   public:
    using value_type = T;

    Volume() = default;
    explicit Volume(Dims dims, T fill = T{}) : dims_(dims), data_(dims.voxels(), fill) {}
    Volume(Dims dims, std::vector<T> data) : dims_(dims), data_(std::move(data)) {
        if (data_.size() != dims_.voxels()) {
            throw ShapeError("volume data length " + std::to_string(data_.size()) +
                             " does not match dims " + to_string(dims_));
        }
    }

    const Dims& dims() const { return dims_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
        return (z * dims_.h + y) * dims_.w + x;
    }
    std::size_t index(const Voxel& v) const { return index(v.z, v.y, v.x); }
    Voxel voxel(std::size_t linear) const {
        const std::size_t x = linear % dims_.w;
        const std::size_t y = (linear / dims_.w) % dims_.h;
        return {linear / (dims_.w * dims_.h), y, x};
    }

    T& operator()(std::size_t z, std::size_t y, std::size_t x) { return data_[index(z, y, x)]; }
    const T& operator()(std::size_t z, std::size_t y, std::size_t x) const {
        return data_[index(z, y, x)];
    }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool operator==(const Volume&) const = default;

   private:
    Dims dims_;
    std::vector<T> data_;
};

using ImageVolume = Volume<float>;
using MaskVolume = Volume<std::uint8_t>;
using LabelVolume = Volume<std::uint32_t>;

enum class DType { kF32, kU8, kU32 };

const char* dtype_tag(DType dtype);
DType parse_dtype(const std::string& tag);

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kF32; }
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::kU8; }
template <>
constexpr DType dtype_of<std::uint32_t>() { return DType::kU32; }

struct VolumeHeader {
    Dims dims;
    DType dtype = DType::kF32;
    std::array<double, 3> voxel_nm{1.0, 1.0, 1.0};  // informational only
};

// Writes `<path>.json` (header) and `<path>.raw` (little-endian payload).
template <typename T>
void save_volume(const Volume<T>& v, const std::string& path,
                 std::array<double, 3> voxel_nm = {1.0, 1.0, 1.0});

VolumeHeader load_volume_header(const std::string& path);

// Throws FormatError when the stored dtype differs from T, the dims are
// degenerate, or the payload size disagrees with the header.
template <typename T>
Volume<T> load_volume(const std::string& path);

// Foreground voxels that have a differently labelled voxel (background
// included) within Chebyshev distance `thickness` inside the same z-slice.
// Positions outside the slice count as background, so instances touching the
// frame edge get a boundary there.
MaskVolume boundary_from_instances(const LabelVolume& labels, std::size_t thickness = 1);

MaskVolume binarize_instances(const LabelVolume& labels);

}  // namespace contraseg
