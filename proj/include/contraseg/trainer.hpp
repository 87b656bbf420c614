#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "contraseg/backbone.hpp"
#include "contraseg/contrastive.hpp"
#include "contraseg/metrics.hpp"
#include "contraseg/pointselect.hpp"
#include "contraseg/postprocess.hpp"
#include "contraseg/synthdata.hpp"
#include "contraseg/volume.hpp"

namespace contraseg {

struct AugmentConfig {
    bool flip_x = true;
    bool flip_y = true;
    bool transpose_xy = true;
    bool intensity_jitter = true;
    double jitter_min = 0.9;
    double jitter_max = 1.1;
};

struct TrainConfig {
    // Point selection and losses.
    std::size_t points = 1024;
    double beta = 0.75;
    LossConfig loss;
    SelectOptions select;

    // Optimisation. One patch per step; an epoch visits every training volume once.
    Dims patch{8, 64, 64};
    double learning_rate = 0.02;
    double momentum = 0.9;
    std::size_t warmup_steps = 0;  // linear ramp from lr / warmup_steps up to lr
    std::size_t epochs = 100;
    std::size_t max_steps = 0;  // 0 = epochs * volumes
    std::uint64_t seed = 1;
    std::size_t checkpoint_interval = 0;  // 0 = final checkpoint only

    AugmentConfig augment;
    BackboneConfig backbone;
    WatershedParams watershed;
    SizeBins bins;

    void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
// Missing keys keep the values already in `cfg`. Unknown keys raise ConfigError.
void update_from_json(TrainConfig& cfg, const nlohmann::json& j);
TrainConfig load_train_config(const std::string& path);
// Applies one `key=value` override; nested keys use dots ("augment.flip_x=false",
// "patch=[8,32,32]"). Values are parsed as JSON, falling back to a plain string.
void apply_override(TrainConfig& cfg, const std::string& assignment);
// The nested JSON object a `key=value` override stands for.
nlohmann::json parse_override(const std::string& assignment);

// A training example. `mask` and `boundary` are derived from `instances`.
struct Sample {
    ImageVolume image;
    LabelVolume instances;
    MaskVolume mask;
    MaskVolume boundary;
};

Sample make_sample(ImageVolume image, LabelVolume instances);

template <typename T>
Volume<T> flip_x(const Volume<T>& v);
template <typename T>
Volume<T> flip_y(const Volume<T>& v);
template <typename T>
Volume<T> transpose_xy(const Volume<T>& v);

// Draws the same number of variates whatever the toggles, so enabling one
// transform does not shift the others.
Sample augment(const Sample& sample, std::mt19937_64& rng, const AugmentConfig& cfg);

Sample crop(const Sample& sample, const Dims& origin, const Dims& size);

struct LogRecord {
    std::size_t step = 0;
    double ce = 0;
    double sim = 0;
    double con = 0;
    double total = 0;
    std::size_t certain_fg = 0;
    std::size_t uncertain_fg = 0;
    std::size_t background = 0;
    std::size_t positive_pairs = 0;
    std::size_t negative_pairs = 0;
    double learning_rate = 0;

    bool operator==(const LogRecord&) const = default;
};

struct TrainLog {
    std::vector<LogRecord> records;

    std::string to_csv() const;
    bool operator==(const TrainLog&) const = default;
};

struct Checkpoint {
    TrainConfig config;
    BackboneParams params;
    std::size_t step = 0;
};

// Writes <prefix>.json (config, step, tensor table) and <prefix>.bin (little-endian float32).
void save_checkpoint(const Checkpoint& ckpt, const std::string& prefix);
// Accepts the prefix, the .json path, or a training output directory (its final checkpoint). Throws ConfigError when the tensors do
// not match the stored backbone config.
Checkpoint load_checkpoint(const std::string& path);

struct TrainResult {
    Checkpoint checkpoint;
    TrainLog log;
};

struct TrainOptions {
    // When set, checkpoints, train_log.csv and NaN dumps go here.
    std::string out_dir;
    // Called after each step; returning false stops training early.
    std::function<bool(const LogRecord&)> on_step;
};

TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& data, const TrainOptions& options = {});
TrainResult train(const TrainConfig& cfg, const Manifest& manifest, const TrainOptions& options = {});

std::vector<Sample> load_samples(const Manifest& manifest);

// Tile starts along one axis of length n for tiles of length p overlapping by
// at least `overlap`. A single tile covers the axis when n <= p.
std::vector<std::size_t> tile_starts(std::size_t n, std::size_t p, std::size_t overlap);

struct Tile {
    Dims origin;
    ImageVolume values;
};

// Per-voxel mean of all tiles covering each voxel, accumulated in double.
ImageVolume blend_tiles(const Dims& dims, const std::vector<Tile>& tiles);

struct Prediction {
    ImageVolume mask_prob;
    ImageVolume boundary_prob;
};

using PatchPredictor = std::function<Prediction(const ImageVolume&)>;

// Runs `predictor` on overlapping patches (a quarter of the patch along each
// tiled axis) and blends the results.
Prediction predict_tiled(const ImageVolume& image, const Dims& patch, const PatchPredictor& predictor);

Prediction predict(const Checkpoint& ckpt, const ImageVolume& image);

// Semantic mask of a probability map.
MaskVolume threshold(const ImageVolume& prob, double t = 0.5);

// Jaccard of the thresholded mask map pooled over all volumes, and AP-75 of
// the watershed instances ranked across all volumes.
EvalReport evaluate_predictions(std::span<const Prediction> preds, std::span<const LabelVolume> gts,
                                const WatershedParams& params, const SizeBins& bins);

EvalReport evaluate(const Checkpoint& ckpt, const Manifest& manifest, const WatershedParams& params,
                    const SizeBins& bins);

// Mean pairwise cosine similarity of hybrid point features between the
// certain-foreground set and the uncertain-foreground and background sets,
// pooled over all pairs of all samples. Points are selected with the
// checkpoint's N and beta on whole-volume predictions.
struct FeatureAffinity {
    double certain_uncertain = 0.0;
    double certain_background = 0.0;
    std::size_t certain_fg = 0;
    std::size_t uncertain_fg = 0;
    std::size_t background = 0;
};

FeatureAffinity feature_affinity(const Checkpoint& ckpt, const std::vector<Sample>& samples);

}  // namespace contraseg
