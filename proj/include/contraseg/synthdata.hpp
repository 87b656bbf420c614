#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "contraseg/volume.hpp"

namespace contraseg {

template <typename T>
struct Range {
    T min{};
    T max{};
};

// Synthetic EM-like volumes: z-elongated ellipsoidal "mitochondria" with a
// dark membrane rim and striped interior, plus distractors that share the
// rim and texture but are flat in z and carry label 0.
struct SynthConfig {
    Dims dims{16, 64, 64};
    Range<std::size_t> instances{6, 12};
    Range<double> semi_axis_xy{4.0, 9.0};
    Range<double> semi_axis_z{4.0, 8.0};
    Range<std::size_t> distractors{2, 5};
    Range<double> distractor_semi_axis_z{0.6, 1.5};
    double texture_contrast = 0.5;   // [0, 1]
    double membrane_darkness = 0.6;  // [0, 1]
    double noise_sigma = 0.05;
    std::size_t placement_attempts = 200;
    std::uint64_t seed = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& cfg);
// Missing keys keep their defaults; unknown keys raise ConfigError.
void from_json(const nlohmann::json& j, SynthConfig& cfg);

struct SynthVolume {
    ImageVolume image;
    LabelVolume instances;
    MaskVolume distractors;
};

SynthVolume generate_volume(const SynthConfig& cfg);

struct ManifestEntry {
    std::string image;
    std::string labels;
    std::string distractors;
    std::uint64_t seed = 0;
};

// Paths are volume prefixes (without .json/.raw), relative to the manifest's directory.
struct Manifest {
    std::string base_dir;
    std::vector<ManifestEntry> entries;

    std::string resolve(const std::string& path) const;
};

// Seed of volume `index` in a dataset generated from `seed`.
std::uint64_t volume_seed(std::uint64_t seed, std::size_t index);

// Writes `count` (image, labels, distractors) triples plus manifest.json into out_dir.
Manifest generate_dataset(const SynthConfig& cfg, std::size_t count, const std::string& out_dir);

void save_manifest(const Manifest& manifest, const std::string& path);
Manifest load_manifest(const std::string& path);

}  // namespace contraseg
