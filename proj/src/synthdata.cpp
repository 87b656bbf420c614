#include "contraseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

namespace contraseg {

using nlohmann::json;

void SynthConfig::validate() const {
    if (dims.d < 4 || dims.h < 16 || dims.w < 16) throw ConfigError("synth dims must be at least (4,16,16)");
    auto check = [](auto r, const char* name) {
        if (r.min > r.max) throw ConfigError(std::string(name) + " range is empty");
    };
    check(instances, "instances");
    check(semi_axis_xy, "semi_axis_xy");
    check(semi_axis_z, "semi_axis_z");
    check(distractors, "distractors");
    check(distractor_semi_axis_z, "distractor_semi_axis_z");
    if (semi_axis_xy.min <= 0 || semi_axis_z.min <= 0 || distractor_semi_axis_z.min <= 0) {
        throw ConfigError("semi-axes must be positive");
    }
    if (texture_contrast < 0 || texture_contrast > 1) throw ConfigError("texture_contrast must lie in [0,1]");
    if (membrane_darkness < 0 || membrane_darkness > 1) throw ConfigError("membrane_darkness must lie in [0,1]");
    if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
}

namespace {

template <typename T>
json range_json(const Range<T>& r) {
    return json::array({r.min, r.max});
}

template <typename T>
void read_range(const json& j, const char* key, Range<T>& r) {
    if (!j.contains(key)) return;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != 2) throw ConfigError(std::string(key) + " must be [min, max]");
    r = {a[0].get<T>(), a[1].get<T>()};
}

}  // namespace

void to_json(json& j, const SynthConfig& cfg) {
    j = json{{"dims", {cfg.dims.d, cfg.dims.h, cfg.dims.w}},
             {"instances", range_json(cfg.instances)},
             {"semi_axis_xy", range_json(cfg.semi_axis_xy)},
             {"semi_axis_z", range_json(cfg.semi_axis_z)},
             {"distractors", range_json(cfg.distractors)},
             {"distractor_semi_axis_z", range_json(cfg.distractor_semi_axis_z)},
             {"texture_contrast", cfg.texture_contrast},
             {"membrane_darkness", cfg.membrane_darkness},
             {"noise_sigma", cfg.noise_sigma},
             {"placement_attempts", cfg.placement_attempts},
             {"seed", cfg.seed}};
}

void from_json(const json& j, SynthConfig& cfg) {
    static constexpr const char* kKeys[] = {"dims",
                                            "instances",
                                            "semi_axis_xy",
                                            "semi_axis_z",
                                            "distractors",
                                            "distractor_semi_axis_z",
                                            "texture_contrast",
                                            "membrane_darkness",
                                            "noise_sigma",
                                            "placement_attempts",
                                            "seed"};
    if (!j.is_object()) throw ConfigError("synth config must be a JSON object");
    for (const auto& item : j.items()) {
        if (std::find(std::begin(kKeys), std::end(kKeys), item.key()) == std::end(kKeys)) {
            throw ConfigError("unknown synth config key '" + item.key() + "'");
        }
    }
    try {
        if (j.contains("dims")) {
            const auto& d = j.at("dims");
            if (!d.is_array() || d.size() != 3) throw ConfigError("dims must be [D,H,W]");
            cfg.dims = {d[0].get<std::size_t>(), d[1].get<std::size_t>(), d[2].get<std::size_t>()};
        }
        read_range(j, "instances", cfg.instances);
        read_range(j, "semi_axis_xy", cfg.semi_axis_xy);
        read_range(j, "semi_axis_z", cfg.semi_axis_z);
        read_range(j, "distractors", cfg.distractors);
        read_range(j, "distractor_semi_axis_z", cfg.distractor_semi_axis_z);
        cfg.texture_contrast = j.value("texture_contrast", cfg.texture_contrast);
        cfg.membrane_darkness = j.value("membrane_darkness", cfg.membrane_darkness);
        cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
        cfg.placement_attempts = j.value("placement_attempts", cfg.placement_attempts);
        cfg.seed = j.value("seed", cfg.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid synth config: ") + e.what());
    }
}

namespace {

constexpr float kBackground = 0.62f;
constexpr float kInterior = 0.42f;

struct Shape {
    std::vector<std::size_t> voxels;
    double stripe_dir = 0.0;
    double stripe_freq = 0.2;
    double stripe_phase = 0.0;
};

// Voxels of the rotated ellipsoid, restricted to its largest 6-connected piece.
std::vector<std::size_t> rasterize(const Dims& dims, double cz, double cy, double cx, double az, double a1,
                                   double a2, double theta) {
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double r = std::max(a1, a2);
    auto lo = [](double v) { return static_cast<long>(std::floor(v)); };
    const long z0 = std::max(0L, lo(cz - az));
    const long z1 = std::min(static_cast<long>(dims.d) - 1, lo(cz + az) + 1);
    const long y0 = std::max(0L, lo(cy - r));
    const long y1 = std::min(static_cast<long>(dims.h) - 1, lo(cy + r) + 1);
    const long x0 = std::max(0L, lo(cx - r));
    const long x1 = std::min(static_cast<long>(dims.w) - 1, lo(cx + r) + 1);

    std::vector<std::size_t> inside;
    for (long z = z0; z <= z1; ++z) {
        for (long y = y0; y <= y1; ++y) {
            for (long x = x0; x <= x1; ++x) {
                const double dz = (static_cast<double>(z) - cz) / az;
                const double dx = static_cast<double>(x) - cx;
                const double dy = static_cast<double>(y) - cy;
                const double u = (dx * c + dy * s) / a1;
                const double v = (-dx * s + dy * c) / a2;
                if (dz * dz + u * u + v * v <= 1.0) {
                    inside.push_back((static_cast<std::size_t>(z) * dims.h + static_cast<std::size_t>(y)) * dims.w +
                                     static_cast<std::size_t>(x));
                }
            }
        }
    }
    if (inside.empty()) return inside;

    // Largest 6-connected component, ties to the one found first.
    std::vector<std::size_t> best;
    std::vector<bool> seen(inside.size(), false);
    for (std::size_t start = 0; start < inside.size(); ++start) {
        if (seen[start]) continue;
        std::vector<std::size_t> comp;
        std::deque<std::size_t> queue{start};
        seen[start] = true;
        while (!queue.empty()) {
            const std::size_t k = queue.front();
            queue.pop_front();
            comp.push_back(inside[k]);
            const std::size_t idx = inside[k];
            const std::size_t x = idx % dims.w;
            const std::size_t y = (idx / dims.w) % dims.h;
            const std::size_t z = idx / (dims.w * dims.h);
            const std::size_t plane = dims.w * dims.h;
            std::vector<std::size_t> nbrs;
            if (x > 0) nbrs.push_back(idx - 1);
            if (x + 1 < dims.w) nbrs.push_back(idx + 1);
            if (y > 0) nbrs.push_back(idx - dims.w);
            if (y + 1 < dims.h) nbrs.push_back(idx + dims.w);
            if (z > 0) nbrs.push_back(idx - plane);
            if (z + 1 < dims.d) nbrs.push_back(idx + plane);
            for (std::size_t n : nbrs) {
                const auto it = std::lower_bound(inside.begin(), inside.end(), n);
                if (it != inside.end() && *it == n) {
                    const auto pos = static_cast<std::size_t>(it - inside.begin());
                    if (!seen[pos]) {
                        seen[pos] = true;
                        queue.push_back(pos);
                    }
                }
            }
        }
        if (comp.size() > best.size()) best = std::move(comp);
    }
    std::sort(best.begin(), best.end());
    return best;
}

// Marks `voxels` and their 26-neighbours as blocked.
void block(const Dims& dims, const std::vector<std::size_t>& voxels, std::vector<std::uint8_t>& blocked) {
    for (std::size_t idx : voxels) {
        const long x = static_cast<long>(idx % dims.w);
        const long y = static_cast<long>((idx / dims.w) % dims.h);
        const long z = static_cast<long>(idx / (dims.w * dims.h));
        for (long dz = -1; dz <= 1; ++dz) {
            for (long dy = -1; dy <= 1; ++dy) {
                for (long dx = -1; dx <= 1; ++dx) {
                    const long nz = z + dz, ny = y + dy, nx = x + dx;
                    if (nz < 0 || ny < 0 || nx < 0 || nz >= static_cast<long>(dims.d) ||
                        ny >= static_cast<long>(dims.h) || nx >= static_cast<long>(dims.w)) {
                        continue;
                    }
                    blocked[(static_cast<std::size_t>(nz) * dims.h + static_cast<std::size_t>(ny)) * dims.w +
                            static_cast<std::size_t>(nx)] = 1;
                }
            }
        }
    }
}

}  // namespace

SynthVolume generate_volume(const SynthConfig& cfg) {
    cfg.validate();
    const Dims dims = cfg.dims;
    std::mt19937_64 rng(cfg.seed);
    auto uniform = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    auto count_in = [&](Range<std::size_t> r) { return std::uniform_int_distribution<std::size_t>(r.min, r.max)(rng); };

    const std::size_t n_instances = count_in(cfg.instances);
    const std::size_t n_distractors = count_in(cfg.distractors);

    std::vector<std::uint8_t> blocked(dims.voxels(), 0);
    std::vector<Shape> objects;
    std::size_t placed_instances = 0;

    auto place = [&](std::size_t wanted, Range<double> z_axis) {
        std::size_t placed = 0;
        for (std::size_t attempt = 0; attempt < cfg.placement_attempts && placed < wanted; ++attempt) {
            const double cz = uniform(0.0, static_cast<double>(dims.d - 1));
            const double cy = uniform(0.0, static_cast<double>(dims.h - 1));
            const double cx = uniform(0.0, static_cast<double>(dims.w - 1));
            const double az = uniform(z_axis.min, z_axis.max);
            const double a1 = uniform(cfg.semi_axis_xy.min, cfg.semi_axis_xy.max);
            const double a2 = uniform(cfg.semi_axis_xy.min, cfg.semi_axis_xy.max);
            const double theta = uniform(0.0, std::numbers::pi);
            Shape shape;
            shape.stripe_dir = uniform(0.0, std::numbers::pi);
            shape.stripe_freq = uniform(0.15, 0.3);
            shape.stripe_phase = uniform(0.0, 2.0 * std::numbers::pi);
            shape.voxels = rasterize(dims, cz, cy, cx, az, a1, a2, theta);
            if (shape.voxels.size() < 8) continue;
            const bool clash = std::any_of(shape.voxels.begin(), shape.voxels.end(),
                                           [&](std::size_t i) { return blocked[i] != 0; });
            if (clash) continue;
            block(dims, shape.voxels, blocked);
            objects.push_back(std::move(shape));
            ++placed;
        }
        return placed;
    };
    placed_instances = place(n_instances, cfg.semi_axis_z);
    place(n_distractors, cfg.distractor_semi_axis_z);

    SynthVolume out{ImageVolume(dims, kBackground), LabelVolume(dims, 0), MaskVolume(dims, 0)};
    LabelVolume objects_map(dims, 0);
    for (std::size_t k = 0; k < objects.size(); ++k) {
        const auto id = static_cast<std::uint32_t>(k + 1);
        for (std::size_t i : objects[k].voxels) {
            objects_map[i] = id;
            if (k < placed_instances) {
                out.instances[i] = id;
            } else {
                out.distractors[i] = 1;
            }
        }
    }

    // Slow background undulation.
    const double bphase = uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < out.image.size(); ++i) {
        const Voxel v = out.image.voxel(i);
        out.image[i] = kBackground + 0.04f * static_cast<float>(std::sin(0.11 * static_cast<double>(v.x) +
                                                                         0.07 * static_cast<double>(v.y) + bphase));
    }
    const MaskVolume rim = boundary_from_instances(objects_map, 1);
    const float rim_value = kBackground * static_cast<float>(1.0 - cfg.membrane_darkness);
    for (const auto& shape : objects) {
        const double c = std::cos(shape.stripe_dir);
        const double s = std::sin(shape.stripe_dir);
        for (std::size_t i : shape.voxels) {
            if (rim[i]) {
                out.image[i] = rim_value;
                continue;
            }
            const Voxel v = out.image.voxel(i);
            const double t = std::sin(2.0 * std::numbers::pi * shape.stripe_freq *
                                          (c * static_cast<double>(v.x) + s * static_cast<double>(v.y)) +
                                      shape.stripe_phase);
            out.image[i] = kInterior + static_cast<float>(cfg.texture_contrast * 0.18 * t);
        }
    }

    if (cfg.noise_sigma > 0) {
        std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
        for (auto& v : out.image.data()) v = static_cast<float>(static_cast<double>(v) + noise(rng));
    }
    for (auto& v : out.image.data()) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

std::string Manifest::resolve(const std::string& path) const {
    const std::filesystem::path p(path);
    if (p.is_absolute() || base_dir.empty()) return path;
    return (std::filesystem::path(base_dir) / p).string();
}

std::uint64_t volume_seed(std::uint64_t seed, std::size_t index) {
    // splitmix64 finaliser over (seed, index)
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(index) + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

Manifest generate_dataset(const SynthConfig& cfg, std::size_t count, const std::string& out_dir) {
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create '" + out_dir + "': " + ec.message());

    Manifest manifest;
    manifest.base_dir = out_dir;
    for (std::size_t i = 0; i < count; ++i) {
        SynthConfig vcfg = cfg;
        vcfg.seed = volume_seed(cfg.seed, i);
        const SynthVolume vol = generate_volume(vcfg);
        char stem[32];
        std::snprintf(stem, sizeof(stem), "vol_%04zu", i);
        ManifestEntry e{std::string(stem) + "_image", std::string(stem) + "_labels",
                        std::string(stem) + "_distractors", vcfg.seed};
        save_volume(vol.image, manifest.resolve(e.image));
        save_volume(vol.instances, manifest.resolve(e.labels));
        save_volume(vol.distractors, manifest.resolve(e.distractors));
        manifest.entries.push_back(std::move(e));
    }
    save_manifest(manifest, (std::filesystem::path(out_dir) / "manifest.json").string());
    return manifest;
}

void save_manifest(const Manifest& manifest, const std::string& path) {
    json list = json::array();
    for (const auto& e : manifest.entries) {
        list.push_back({{"image", e.image}, {"labels", e.labels}, {"distractors", e.distractors}, {"seed", e.seed}});
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << list.dump(2) << "\n";
    if (!out) throw IoError("failed writing '" + path + "'");
}

Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path + "'");
    Manifest manifest;
    manifest.base_dir = std::filesystem::path(path).parent_path().string();
    try {
        json list;
        in >> list;
        if (!list.is_array()) throw ConfigError("manifest '" + path + "' must be a JSON list");
        for (const auto& e : list) {
            manifest.entries.push_back({e.at("image").get<std::string>(), e.at("labels").get<std::string>(),
                                        e.value("distractors", std::string()), e.value("seed", std::uint64_t{0})});
        }
    } catch (const json::exception& e) {
        throw ConfigError("malformed manifest '" + path + "': " + e.what());
    }
    return manifest;
}

}  // namespace contraseg
