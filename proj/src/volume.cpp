#include "contraseg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <json.hpp>

namespace contraseg {

namespace {

using nlohmann::json;

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
        case DType::kF32:
            return 4;
        case DType::kU8:
            return 1;
        case DType::kU32:
            return 4;
    }
    return 0;
}

template <typename T>
void to_little_endian_bytes(const std::vector<T>& values, std::vector<char>& bytes) {
    bytes.resize(values.size() * sizeof(T));
    std::memcpy(bytes.data(), values.data(), bytes.size());
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            std::reverse(bytes.begin() + i * sizeof(T), bytes.begin() + (i + 1) * sizeof(T));
        }
    }
}

template <typename T>
void from_little_endian_bytes(std::vector<char>& bytes, std::vector<T>& values) {
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        for (std::size_t i = 0; i < bytes.size() / sizeof(T); ++i) {
            std::reverse(bytes.begin() + i * sizeof(T), bytes.begin() + (i + 1) * sizeof(T));
        }
    }
    values.resize(bytes.size() / sizeof(T));
    std::memcpy(values.data(), bytes.data(), bytes.size());
}

}  // namespace

std::string to_string(const Dims& dims) {
    return "[" + std::to_string(dims.d) + "," + std::to_string(dims.h) + "," +
           std::to_string(dims.w) + "]";
}

const char* dtype_tag(DType dtype) {
    switch (dtype) {
        case DType::kF32:
            return "f32";
        case DType::kU8:
            return "u8";
        case DType::kU32:
            return "u32";
    }
    return "?";
}

DType parse_dtype(const std::string& tag) {
    if (tag == "f32") return DType::kF32;
    if (tag == "u8") return DType::kU8;
    if (tag == "u32") return DType::kU32;
    throw FormatError(FormatError::Kind::kUnsupported, "unsupported dtype '" + tag + "'");
}

template <typename T>
void save_volume(const Volume<T>& v, const std::string& path, std::array<double, 3> voxel_nm) {
    json header;
    header["dims"] = {v.dims().d, v.dims().h, v.dims().w};
    header["dtype"] = dtype_tag(dtype_of<T>());
    header["voxel_nm"] = {voxel_nm[0], voxel_nm[1], voxel_nm[2]};

    const std::string header_path = path + ".json";
    std::ofstream hout(header_path);
    if (!hout) throw IoError("cannot open '" + header_path + "' for writing");
    hout << header.dump() << "\n";
    if (!hout) throw IoError("failed writing '" + header_path + "'");

    std::vector<char> bytes;
    to_little_endian_bytes(v.data(), bytes);
    const std::string raw_path = path + ".raw";
    std::ofstream rout(raw_path, std::ios::binary);
    if (!rout) throw IoError("cannot open '" + raw_path + "' for writing");
    rout.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!rout) throw IoError("failed writing '" + raw_path + "'");
}

VolumeHeader load_volume_header(const std::string& path) {
    const std::string header_path = path + ".json";
    std::ifstream hin(header_path);
    if (!hin) throw IoError("cannot open '" + header_path + "'");
    json header;
    try {
        hin >> header;
    } catch (const json::exception& e) {
        throw FormatError(FormatError::Kind::kCorrupt,
                          "malformed header '" + header_path + "': " + e.what());
    }

    VolumeHeader out;
    try {
        const auto& dims = header.at("dims");
        if (!dims.is_array() || dims.size() != 3) {
            throw FormatError(FormatError::Kind::kInvalidDims,
                              "header '" + header_path + "' must have 3 dims");
        }
        for (const auto& d : dims) {
            if (!d.is_number_integer() || d.get<long long>() <= 0) {
                throw FormatError(FormatError::Kind::kInvalidDims,
                                  "header '" + header_path + "' has invalid dims " + dims.dump());
            }
        }
        out.dims = {dims[0].get<std::size_t>(), dims[1].get<std::size_t>(),
                    dims[2].get<std::size_t>()};
        out.dtype = parse_dtype(header.at("dtype").get<std::string>());
        if (header.contains("voxel_nm")) {
            const auto& nm = header["voxel_nm"];
            for (std::size_t i = 0; i < 3 && i < nm.size(); ++i) out.voxel_nm[i] = nm[i].get<double>();
        }
    } catch (const json::exception& e) {
        throw FormatError(FormatError::Kind::kCorrupt,
                          "malformed header '" + header_path + "': " + e.what());
    }
    return out;
}

template <typename T>
Volume<T> load_volume(const std::string& path) {
    const VolumeHeader header = load_volume_header(path);
    if (header.dtype != dtype_of<T>()) {
        throw FormatError(FormatError::Kind::kUnsupported,
                          "volume '" + path + "' has dtype " + dtype_tag(header.dtype) +
                              ", expected " + dtype_tag(dtype_of<T>()));
    }

    const std::string raw_path = path + ".raw";
    std::ifstream rin(raw_path, std::ios::binary);
    if (!rin) throw IoError("cannot open '" + raw_path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(rin)), std::istreambuf_iterator<char>());

    const std::size_t expected = header.dims.voxels() * dtype_size(header.dtype);
    if (bytes.size() != expected) {
        throw FormatError(FormatError::Kind::kCorrupt,
                          "payload '" + raw_path + "' has " + std::to_string(bytes.size()) +
                              " bytes, header requires " + std::to_string(expected));
    }
    std::vector<T> values;
    from_little_endian_bytes(bytes, values);
    return Volume<T>(header.dims, std::move(values));
}

template void save_volume(const Volume<float>&, const std::string&, std::array<double, 3>);
template void save_volume(const Volume<std::uint8_t>&, const std::string&, std::array<double, 3>);
template void save_volume(const Volume<std::uint32_t>&, const std::string&, std::array<double, 3>);
template Volume<float> load_volume(const std::string&);
template Volume<std::uint8_t> load_volume(const std::string&);
template Volume<std::uint32_t> load_volume(const std::string&);

MaskVolume boundary_from_instances(const LabelVolume& labels, std::size_t thickness) {
    if (thickness == 0) throw ConfigError("boundary thickness must be >= 1");
    const Dims dims = labels.dims();
    MaskVolume out(dims, 0);
    const auto t = static_cast<std::ptrdiff_t>(thickness);
    const auto h = static_cast<std::ptrdiff_t>(dims.h);
    const auto w = static_cast<std::ptrdiff_t>(dims.w);

    for (std::size_t z = 0; z < dims.d; ++z) {
        for (std::ptrdiff_t y = 0; y < h; ++y) {
            for (std::ptrdiff_t x = 0; x < w; ++x) {
                const std::uint32_t id = labels(z, y, x);
                if (id == 0) continue;
                bool edge = false;
                for (std::ptrdiff_t dy = -t; dy <= t && !edge; ++dy) {
                    for (std::ptrdiff_t dx = -t; dx <= t; ++dx) {
                        const std::ptrdiff_t ny = y + dy;
                        const std::ptrdiff_t nx = x + dx;
                        if (ny < 0 || nx < 0 || ny >= h || nx >= w ||
                            labels(z, static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)) != id) {
                            edge = true;
                            break;
                        }
                    }
                }
                if (edge) out(z, y, x) = 1;
            }
        }
    }
    return out;
}

MaskVolume binarize_instances(const LabelVolume& labels) {
    MaskVolume out(labels.dims(), 0);
    std::transform(labels.data().begin(), labels.data().end(), out.data().begin(),
                   [](std::uint32_t id) { return static_cast<std::uint8_t>(id != 0); });
    return out;
}

}  // namespace contraseg
