#include "contraseg/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace contraseg {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
    if (points < 1) throw ConfigError("points must be >= 1");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
    loss.validate();
    if (select.oversample && !(select.oversample_ratio >= 1.0)) throw ConfigError("oversample_ratio must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (epochs == 0 && max_steps == 0) throw ConfigError("epochs or max_steps must be positive");
    if (!(augment.jitter_min > 0.0 && augment.jitter_min <= augment.jitter_max)) {
        throw ConfigError("intensity jitter range must satisfy 0 < jitter_min <= jitter_max");
    }
    backbone.check_input(patch);
    watershed.validate();
    bins.validate();
}

ordered_json to_json(const TrainConfig& cfg) {
    ordered_json j;
    j["points"] = cfg.points;
    j["beta"] = cfg.beta;
    j["alpha"] = cfg.loss.alpha;
    j["gamma"] = cfg.loss.gamma;
    j["lambda_sim"] = cfg.loss.lambda_sim;
    j["lambda_con"] = cfg.loss.lambda_con;
    j["consistency_sign"] = to_string(cfg.loss.consistency_sign);
    j["loss_eps"] = cfg.loss.eps;
    j["oversample"] = cfg.select.oversample;
    j["oversample_ratio"] = cfg.select.oversample_ratio;
    j["patch"] = {cfg.patch.d, cfg.patch.h, cfg.patch.w};
    j["learning_rate"] = cfg.learning_rate;
    j["momentum"] = cfg.momentum;
    j["warmup_steps"] = cfg.warmup_steps;
    j["epochs"] = cfg.epochs;
    j["max_steps"] = cfg.max_steps;
    j["seed"] = cfg.seed;
    j["checkpoint_interval"] = cfg.checkpoint_interval;
    j["augment"] = {{"flip_x", cfg.augment.flip_x},
                    {"flip_y", cfg.augment.flip_y},
                    {"transpose_xy", cfg.augment.transpose_xy},
                    {"intensity_jitter", cfg.augment.intensity_jitter},
                    {"jitter_min", cfg.augment.jitter_min},
                    {"jitter_max", cfg.augment.jitter_max}};
    j["backbone"] = {{"widths", cfg.backbone.widths},
                     {"levels", cfg.backbone.levels},
                     {"feature_channels", cfg.backbone.feature_channels},
                     {"xy_only_pooling", cfg.backbone.xy_only_pooling},
                     {"input_mean", cfg.backbone.input_mean},
                     {"input_std", cfg.backbone.input_std}};
    j["watershed"] = {{"marker_mask_threshold", cfg.watershed.marker_mask_threshold},
                      {"marker_boundary_threshold", cfg.watershed.marker_boundary_threshold},
                      {"foreground_threshold", cfg.watershed.foreground_threshold},
                      {"connectivity", cfg.watershed.connectivity},
                      {"min_instance_size", cfg.watershed.min_instance_size}};
    j["bins"] = {{"small_max", cfg.bins.small_max}, {"large_min", cfg.bins.large_min}};
    return j;
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& item : j.items()) {
        const bool ok = std::any_of(known.begin(), known.end(), [&](const char* k) { return item.key() == k; });
        if (!ok) throw ConfigError("unknown config key '" + where + item.key() + "'");
    }
}

}  // namespace

void update_from_json(TrainConfig& cfg, const json& j) {
    try {
        check_keys(j,
                   {"points", "beta", "alpha", "gamma", "lambda_sim", "lambda_con", "consistency_sign", "loss_eps",
                    "oversample", "oversample_ratio", "patch", "learning_rate", "momentum", "warmup_steps", "epochs",
                    "max_steps", "seed", "checkpoint_interval", "augment", "backbone", "watershed", "bins"},
                   "");
        read(j, "points", cfg.points);
        read(j, "beta", cfg.beta);
        read(j, "alpha", cfg.loss.alpha);
        read(j, "gamma", cfg.loss.gamma);
        read(j, "lambda_sim", cfg.loss.lambda_sim);
        read(j, "lambda_con", cfg.loss.lambda_con);
        if (j.contains("consistency_sign")) {
            cfg.loss.consistency_sign = parse_consistency_sign(j.at("consistency_sign").get<std::string>());
        }
        read(j, "loss_eps", cfg.loss.eps);
        read(j, "oversample", cfg.select.oversample);
        read(j, "oversample_ratio", cfg.select.oversample_ratio);
        if (j.contains("patch")) {
            const auto& p = j.at("patch");
            if (!p.is_array() || p.size() != 3) throw ConfigError("patch must be [D, H, W]");
            cfg.patch = {p[0].get<std::size_t>(), p[1].get<std::size_t>(), p[2].get<std::size_t>()};
        }
        read(j, "learning_rate", cfg.learning_rate);
        read(j, "momentum", cfg.momentum);
        read(j, "warmup_steps", cfg.warmup_steps);
        read(j, "epochs", cfg.epochs);
        read(j, "max_steps", cfg.max_steps);
        read(j, "seed", cfg.seed);
        read(j, "checkpoint_interval", cfg.checkpoint_interval);
        if (j.contains("augment")) {
            const auto& a = j.at("augment");
            check_keys(a, {"flip_x", "flip_y", "transpose_xy", "intensity_jitter", "jitter_min", "jitter_max"},
                       "augment.");
            read(a, "flip_x", cfg.augment.flip_x);
            read(a, "flip_y", cfg.augment.flip_y);
            read(a, "transpose_xy", cfg.augment.transpose_xy);
            read(a, "intensity_jitter", cfg.augment.intensity_jitter);
            read(a, "jitter_min", cfg.augment.jitter_min);
            read(a, "jitter_max", cfg.augment.jitter_max);
        }
        if (j.contains("backbone")) {
            const auto& b = j.at("backbone");
            check_keys(b, {"widths", "levels", "feature_channels", "xy_only_pooling", "input_mean", "input_std"},
                       "backbone.");
            read(b, "widths", cfg.backbone.widths);
            read(b, "levels", cfg.backbone.levels);
            read(b, "feature_channels", cfg.backbone.feature_channels);
            read(b, "xy_only_pooling", cfg.backbone.xy_only_pooling);
            read(b, "input_mean", cfg.backbone.input_mean);
            read(b, "input_std", cfg.backbone.input_std);
        }
        if (j.contains("watershed")) {
            const auto& w = j.at("watershed");
            check_keys(w,
                       {"marker_mask_threshold", "marker_boundary_threshold", "foreground_threshold", "connectivity",
                        "min_instance_size"},
                       "watershed.");
            read(w, "marker_mask_threshold", cfg.watershed.marker_mask_threshold);
            read(w, "marker_boundary_threshold", cfg.watershed.marker_boundary_threshold);
            read(w, "foreground_threshold", cfg.watershed.foreground_threshold);
            read(w, "connectivity", cfg.watershed.connectivity);
            read(w, "min_instance_size", cfg.watershed.min_instance_size);
        }
        if (j.contains("bins")) {
            const auto& b = j.at("bins");
            check_keys(b, {"small_max", "large_min"}, "bins.");
            read(b, "small_max", cfg.bins.small_max);
            read(b, "large_min", cfg.bins.large_min);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid train config: ") + e.what());
    }
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    TrainConfig cfg;
    update_from_json(cfg, j);
    return cfg;
}

json parse_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string part; std::getline(ss, part, '.');) {
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        parts.push_back(part);
    }
    if (parts.empty()) throw ConfigError("override key '" + key + "' is empty");
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) value = json{{*it, value}};
    return value;
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
    update_from_json(cfg, parse_override(assignment));
}

// ---------------------------------------------------------------------------
// Samples and augmentation

Sample make_sample(ImageVolume image, LabelVolume instances) {
    if (image.dims() != instances.dims()) {
        throw ShapeError("image " + to_string(image.dims()) + " and labels " + to_string(instances.dims()) +
                         " differ in shape");
    }
    Sample s;
    s.mask = binarize_instances(instances);
    s.boundary = boundary_from_instances(instances, 1);
    s.image = std::move(image);
    s.instances = std::move(instances);
    return s;
}

template <typename T>
Volume<T> flip_x(const Volume<T>& v) {
    const Dims d = v.dims();
    Volume<T> out(d);
    for (std::size_t z = 0; z < d.d; ++z)
        for (std::size_t y = 0; y < d.h; ++y)
            for (std::size_t x = 0; x < d.w; ++x) out(z, y, x) = v(z, y, d.w - 1 - x);
    return out;
}

template <typename T>
Volume<T> flip_y(const Volume<T>& v) {
    const Dims d = v.dims();
    Volume<T> out(d);
    for (std::size_t z = 0; z < d.d; ++z)
        for (std::size_t y = 0; y < d.h; ++y)
            for (std::size_t x = 0; x < d.w; ++x) out(z, y, x) = v(z, d.h - 1 - y, x);
    return out;
}

template <typename T>
Volume<T> transpose_xy(const Volume<T>& v) {
    const Dims d = v.dims();
    Volume<T> out(Dims{d.d, d.w, d.h});
    for (std::size_t z = 0; z < d.d; ++z)
        for (std::size_t y = 0; y < d.h; ++y)
            for (std::size_t x = 0; x < d.w; ++x) out(z, x, y) = v(z, y, x);
    return out;
}

template ImageVolume flip_x(const ImageVolume&);
template MaskVolume flip_x(const MaskVolume&);
template LabelVolume flip_x(const LabelVolume&);
template ImageVolume flip_y(const ImageVolume&);
template MaskVolume flip_y(const MaskVolume&);
template LabelVolume flip_y(const LabelVolume&);
template ImageVolume transpose_xy(const ImageVolume&);
template MaskVolume transpose_xy(const MaskVolume&);
template LabelVolume transpose_xy(const LabelVolume&);

namespace {

template <typename F>
Sample map_sample(const Sample& s, F&& f) {
    return Sample{f(s.image), f(s.instances), f(s.mask), f(s.boundary)};
}

}  // namespace

Sample augment(const Sample& sample, std::mt19937_64& rng, const AugmentConfig& cfg) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const bool fx = unit(rng) < 0.5;
    const bool fy = unit(rng) < 0.5;
    const bool tr = unit(rng) < 0.5;
    const double u = unit(rng);

    Sample out = sample;
    if (cfg.flip_x && fx) out = map_sample(out, [](const auto& v) { return flip_x(v); });
    if (cfg.flip_y && fy) out = map_sample(out, [](const auto& v) { return flip_y(v); });
    if (cfg.transpose_xy && tr) out = map_sample(out, [](const auto& v) { return transpose_xy(v); });
    if (cfg.intensity_jitter) {
        const auto factor = static_cast<float>(cfg.jitter_min + (cfg.jitter_max - cfg.jitter_min) * u);
        for (auto& v : out.image.data()) v *= factor;
    }
    return out;
}

namespace {

template <typename T>
Volume<T> crop_volume(const Volume<T>& v, const Dims& o, const Dims& size) {
    Volume<T> out(size);
    for (std::size_t z = 0; z < size.d; ++z)
        for (std::size_t y = 0; y < size.h; ++y) {
            const auto src = v.data().begin() + static_cast<std::ptrdiff_t>(v.index(o.d + z, o.h + y, o.w));
            std::copy(src, src + static_cast<std::ptrdiff_t>(size.w),
                      out.data().begin() + static_cast<std::ptrdiff_t>(out.index(z, y, 0)));
        }
    return out;
}

}  // namespace

Sample crop(const Sample& sample, const Dims& origin, const Dims& size) {
    const Dims d = sample.image.dims();
    if (origin.d + size.d > d.d || origin.h + size.h > d.h || origin.w + size.w > d.w) {
        throw ShapeError("crop of size " + to_string(size) + " at " + to_string(origin) + " exceeds volume " +
                         to_string(d));
    }
    return map_sample(sample, [&](const auto& v) { return crop_volume(v, origin, size); });
}

std::vector<Sample> load_samples(const Manifest& manifest) {
    std::vector<Sample> out;
    out.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        out.push_back(make_sample(load_volume<float>(manifest.resolve(e.image)),
                                  load_volume<std::uint32_t>(manifest.resolve(e.labels))));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Logs and checkpoints

std::string TrainLog::to_csv() const {
    std::string out =
        "step,l_ce,l_sim,l_con,l_total,n_certain_fg,n_uncertain_fg,n_background,n_pos_pairs,n_neg_pairs,lr\n";
    char line[512];
    for (const auto& r : records) {
        std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g,%.17g,%zu,%zu,%zu,%zu,%zu,%.17g\n", r.step, r.ce,
                      r.sim, r.con, r.total, r.certain_fg, r.uncertain_fg, r.background, r.positive_pairs,
                      r.negative_pairs, r.learning_rate);
        out += line;
    }
    return out;
}

namespace {

std::string strip_json_suffix(const std::string& path) {
    const std::string suffix = ".json";
    if (path.size() > suffix.size() && path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0) {
        return path.substr(0, path.size() - suffix.size());
    }
    return path;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path + "'");
}

std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
    }
    return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& prefix_in) {
    const std::string prefix = strip_json_suffix(prefix_in);
    const std::filesystem::path bin_path(prefix + ".bin");

    ordered_json j;
    j["format"] = "contraseg-checkpoint";
    j["version"] = 1;
    j["step"] = ckpt.step;
    j["config"] = to_json(ckpt.config);
    j["data"] = bin_path.filename().string();
    ordered_json table = ordered_json::array();
    std::size_t offset = 0;
    std::string payload;
    payload.reserve(ckpt.params.count() * 4);
    for (const auto& t : ckpt.params.tensors) {
        table.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.values.size()}});
        for (float f : t.values) {
            const std::uint32_t le = to_le(std::bit_cast<std::uint32_t>(f));
            char bytes[4];
            std::memcpy(bytes, &le, 4);
            payload.append(bytes, 4);
        }
        offset += t.values.size();
    }
    j["tensors"] = table;
    write_text(bin_path.string(), payload);
    write_text(prefix + ".json", j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::string prefix = std::filesystem::is_directory(path)
                                   ? (std::filesystem::path(path) / "final").string()
                                   : strip_json_suffix(path);
    std::ifstream in(prefix + ".json");
    if (!in) throw IoError("cannot open checkpoint '" + prefix + ".json'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError(FormatError::Kind::kCorrupt, "checkpoint header is not valid JSON: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    std::vector<std::pair<ParamDecl, std::size_t>> table;
    std::string data_name;
    try {
        if (j.value("format", std::string()) != "contraseg-checkpoint" || j.value("version", 0) != 1) {
            throw FormatError(FormatError::Kind::kUnsupported, "'" + prefix + ".json' is not a version 1 checkpoint");
        }
        ckpt.step = j.at("step").get<std::size_t>();
        update_from_json(ckpt.config, j.at("config"));
        data_name = j.at("data").get<std::string>();
        for (const auto& t : j.at("tensors")) {
            table.push_back({{t.at("name").get<std::string>(), t.at("shape").get<ad::Shape>()},
                             t.at("offset").get<std::size_t>()});
        }
    } catch (const json::exception& e) {
        throw FormatError(FormatError::Kind::kCorrupt, "malformed checkpoint header: " + std::string(e.what()));
    }
    ckpt.config.validate();

    const auto decls = param_decls(ckpt.config.backbone);
    if (decls.size() != table.size()) {
        throw ConfigError("checkpoint has " + std::to_string(table.size()) + " tensors but its backbone config needs " +
                          std::to_string(decls.size()));
    }
    for (std::size_t i = 0; i < decls.size(); ++i) {
        if (decls[i].name != table[i].first.name || decls[i].shape != table[i].first.shape) {
            throw ConfigError("checkpoint tensor " + table[i].first.name + " " + ad::to_string(table[i].first.shape) +
                              " does not match config tensor " + decls[i].name + " " + ad::to_string(decls[i].shape));
        }
    }

    const auto bin_path = std::filesystem::path(prefix).parent_path() / data_name;
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw IoError("cannot open checkpoint data '" + bin_path.string() + "'");
    const std::string payload((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    std::size_t total = 0;
    for (const auto& s : decls) total += ad::numel(s.shape);
    if (payload.size() != total * 4) {
        throw FormatError(FormatError::Kind::kCorrupt, "checkpoint data holds " + std::to_string(payload.size()) +
                                                           " bytes, expected " + std::to_string(total * 4));
    }
    for (std::size_t i = 0; i < decls.size(); ++i) {
        ParamTensor t{decls[i].name, decls[i].shape, std::vector<float>(ad::numel(decls[i].shape))};
        const std::size_t off = table[i].second;
        if (off + t.values.size() > total) throw FormatError(FormatError::Kind::kCorrupt, "tensor offset out of range");
        for (std::size_t k = 0; k < t.values.size(); ++k) {
            std::uint32_t le;
            std::memcpy(&le, payload.data() + (off + k) * 4, 4);
            t.values[k] = std::bit_cast<float>(to_le(le));
        }
        ckpt.params.tensors.push_back(std::move(t));
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::string step_prefix(const std::string& dir, std::size_t step) {
    char name[32];
    std::snprintf(name, sizeof(name), "step_%06zu", step);
    return (std::filesystem::path(dir) / name).string();
}

[[noreturn]] void abort_non_finite(const TrainOptions& options, const LogRecord& r, std::size_t volume,
                                   const Dims& origin, const Sample& patch) {
    ordered_json dump;
    dump["step"] = r.step;
    dump["volume"] = volume;
    dump["origin"] = {origin.d, origin.h, origin.w};
    dump["l_ce"] = std::isfinite(r.ce) ? json(r.ce) : json(std::to_string(r.ce));
    dump["l_sim"] = std::isfinite(r.sim) ? json(r.sim) : json(std::to_string(r.sim));
    dump["l_con"] = std::isfinite(r.con) ? json(r.con) : json(std::to_string(r.con));
    dump["l_total"] = std::isfinite(r.total) ? json(r.total) : json(std::to_string(r.total));
    dump["sets"] = {{"certain_fg", r.certain_fg}, {"uncertain_fg", r.uncertain_fg}, {"background", r.background}};
    dump["pairs"] = {{"positive", r.positive_pairs}, {"negative", r.negative_pairs}};
    std::string where;
    if (!options.out_dir.empty()) {
        const std::string prefix = (std::filesystem::path(options.out_dir) / "nan_dump").string();
        write_text(prefix + ".json", dump.dump(2) + "\n");
        save_volume(patch.image, prefix + "_image");
        save_volume(patch.instances, prefix + "_labels");
        where = " (batch written to " + prefix + "*)";
    }
    throw NumericError("non-finite loss at step " + std::to_string(r.step) + ": " + dump.dump() + where);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& data, const TrainOptions& options) {
    cfg.validate();
    if (data.empty()) throw ConfigError("training needs at least one volume");
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Dims d = data[i].image.dims();
        if (d.d < cfg.patch.d || d.h < cfg.patch.h || d.w < cfg.patch.w) {
            throw ConfigError("volume " + std::to_string(i) + " " + to_string(d) + " is smaller than patch " +
                              to_string(cfg.patch));
        }
    }
    if (!options.out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(options.out_dir, ec);
        if (ec) throw IoError("cannot create '" + options.out_dir + "': " + ec.message());
    }

    TrainResult result;
    result.checkpoint.config = cfg;
    BackboneParams& params = result.checkpoint.params;
    params = init_params(cfg.backbone, cfg.seed);
    std::vector<std::vector<float>> velocity;
    for (const auto& t : params.tensors) velocity.emplace_back(t.values.size(), 0.0f);

    const std::size_t total_steps = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * data.size();
    std::vector<std::size_t> order(data.size());

    for (std::size_t step = 0; step < total_steps; ++step) {
        if (step % data.size() == 0) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::mt19937_64 shuffle_rng(volume_seed(cfg.seed ^ 0xA5A5A5A5ULL, step / data.size()));
            std::shuffle(order.begin(), order.end(), shuffle_rng);
        }
        const std::size_t volume = order[step % data.size()];
        const Sample& src = data[volume];
        std::mt19937_64 rng(volume_seed(cfg.seed, step));

        const Dims vd = src.image.dims();
        auto pick = [&](std::size_t n, std::size_t p) {
            return std::uniform_int_distribution<std::size_t>(0, n - p)(rng);
        };
        const Dims origin{pick(vd.d, cfg.patch.d), pick(vd.h, cfg.patch.h), pick(vd.w, cfg.patch.w)};
        const Sample patch = augment(crop(src, origin, cfg.patch), rng, cfg.augment);
        const Dims pd = patch.image.dims();

        ad::Tape<float> tape;
        const auto leaves = param_leaves(tape, params, true);
        const auto image = tape.constant({1, pd.d, pd.h, pd.w}, patch.image.data());
        const auto graph = forward_graph<float>(cfg.backbone, leaves, image);
        const auto ce = cross_entropy_loss(graph.mask_prob, patch.mask, graph.boundary_prob, patch.boundary,
                                           cfg.loss.eps)
                            .mean;

        const auto pm_values = graph.mask_prob.value();
        const ImageVolume pm(pd, std::vector<float>(pm_values.begin(), pm_values.end()));
        const PointSet points = select_points(pm, patch.mask, cfg.points, cfg.beta, rng, cfg.select);
        const ClassPartition part = partition_by_class(points, patch.mask);
        const PairSets pairs = build_consistency_pairs(points, patch.mask);
        PointFeatures<float> feats;
        feats.points = feature_points(points, pairs);
        feats.rows = hybrid_point_features(graph, feats.points);
        feats.depth = pd.d;

        const auto sim = similarity_loss(part, feats, cfg.loss);
        const auto con = consistency_loss(pairs, feats, cfg.loss);
        const auto total = total_loss(ce, sim, con, cfg.loss);

        const double lr = cfg.warmup_steps > 0
                              ? cfg.learning_rate * std::min(1.0, static_cast<double>(step + 1) /
                                                                      static_cast<double>(cfg.warmup_steps))
                              : cfg.learning_rate;
        LogRecord rec{step,
                      ce.item(),
                      sim.item(),
                      con.item(),
                      total.item(),
                      part.certain_fg.size(),
                      part.uncertain_fg.size(),
                      part.background.size(),
                      pairs.positives.size(),
                      pairs.negatives.size(),
                      lr};
        if (!std::isfinite(rec.ce) || !std::isfinite(rec.sim) || !std::isfinite(rec.con) ||
            !std::isfinite(rec.total)) {
            abort_non_finite(options, rec, volume, origin, patch);
        }

        tape.backward(total);
        const auto mu = static_cast<float>(cfg.momentum);
        const auto step_lr = static_cast<float>(lr);
        for (std::size_t i = 0; i < params.tensors.size(); ++i) {
            const auto g = leaves[i].grad();
            auto& w = params.tensors[i].values;
            auto& v = velocity[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                const float gk = g.empty() ? 0.0f : g[k];
                v[k] = mu * v[k] + gk;
                w[k] -= step_lr * v[k];
            }
        }
        for (const auto& t : params.tensors) {
            for (float w : t.values) {
                if (!std::isfinite(w)) abort_non_finite(options, rec, volume, origin, patch);
            }
        }

        result.log.records.push_back(rec);
        result.checkpoint.step = step + 1;
        if (!options.out_dir.empty() && cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0) {
            save_checkpoint(result.checkpoint, step_prefix(options.out_dir, step + 1));
        }
        if (options.on_step && !options.on_step(rec)) break;
    }

    if (!options.out_dir.empty()) {
        save_checkpoint(result.checkpoint, (std::filesystem::path(options.out_dir) / "final").string());
        write_text((std::filesystem::path(options.out_dir) / "train_log.csv").string(), result.log.to_csv());
    }
    return result;
}

TrainResult train(const TrainConfig& cfg, const Manifest& manifest, const TrainOptions& options) {
    cfg.validate();
    return train(cfg, load_samples(manifest), options);
}

// ---------------------------------------------------------------------------
// Inference

std::vector<std::size_t> tile_starts(std::size_t n, std::size_t p, std::size_t overlap) {
    if (p == 0) throw ConfigError("tile length must be positive");
    if (n <= p) return {0};
    const std::size_t stride = overlap < p ? p - overlap : 1;
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + p < n; s += stride) starts.push_back(s);
    starts.push_back(n - p);
    return starts;
}

ImageVolume blend_tiles(const Dims& dims, const std::vector<Tile>& tiles) {
    std::vector<double> sum(dims.voxels(), 0.0);
    std::vector<std::uint32_t> count(dims.voxels(), 0);
    for (const auto& t : tiles) {
        const Dims o = t.origin;
        const Dims s = t.values.dims();
        if (o.d + s.d > dims.d || o.h + s.h > dims.h || o.w + s.w > dims.w) {
            throw ShapeError("tile " + to_string(s) + " at " + to_string(o) + " exceeds " + to_string(dims));
        }
        for (std::size_t z = 0; z < s.d; ++z)
            for (std::size_t y = 0; y < s.h; ++y)
                for (std::size_t x = 0; x < s.w; ++x) {
                    const std::size_t i = ((o.d + z) * dims.h + o.h + y) * dims.w + o.w + x;
                    sum[i] += static_cast<double>(t.values(z, y, x));
                    ++count[i];
                }
    }
    ImageVolume out(dims);
    for (std::size_t i = 0; i < sum.size(); ++i) {
        if (count[i] == 0) throw ShapeError("tiles leave voxel " + std::to_string(i) + " uncovered");
        out[i] = static_cast<float>(sum[i] / count[i]);
    }
    return out;
}

Prediction predict_tiled(const ImageVolume& image, const Dims& patch, const PatchPredictor& predictor) {
    const Dims d = image.dims();
    const Dims size{std::min(d.d, patch.d), std::min(d.h, patch.h), std::min(d.w, patch.w)};
    const auto zs = tile_starts(d.d, patch.d, patch.d / 4);
    const auto ys = tile_starts(d.h, patch.h, patch.h / 4);
    const auto xs = tile_starts(d.w, patch.w, patch.w / 4);
    if (zs.size() * ys.size() * xs.size() == 1) return predictor(image);

    std::vector<Tile> pm_tiles;
    std::vector<Tile> pb_tiles;
    for (std::size_t z : zs)
        for (std::size_t y : ys)
            for (std::size_t x : xs) {
                const Dims origin{z, y, x};
                Prediction p = predictor(crop_volume(image, origin, size));
                if (p.mask_prob.dims() != size || p.boundary_prob.dims() != size) {
                    throw ShapeError("predictor returned " + to_string(p.mask_prob.dims()) + " for a " +
                                     to_string(size) + " tile");
                }
                pm_tiles.push_back({origin, std::move(p.mask_prob)});
                pb_tiles.push_back({origin, std::move(p.boundary_prob)});
            }
    return {blend_tiles(d, pm_tiles), blend_tiles(d, pb_tiles)};
}

Prediction predict(const Checkpoint& ckpt, const ImageVolume& image) {
    const TrainConfig& cfg = ckpt.config;
    const auto decls = param_decls(cfg.backbone);
    if (decls.size() != ckpt.params.tensors.size()) throw ConfigError("checkpoint parameters do not match its config");
    return predict_tiled(image, cfg.patch, [&](const ImageVolume& tile) {
        BackboneOutput out = forward(cfg.backbone, ckpt.params, tile);
        return Prediction{std::move(out.mask_prob), std::move(out.boundary_prob)};
    });
}

MaskVolume threshold(const ImageVolume& prob, double t) {
    MaskVolume out(prob.dims());
    for (std::size_t i = 0; i < prob.size(); ++i) out[i] = static_cast<double>(prob[i]) > t ? 1 : 0;
    return out;
}

EvalReport evaluate_predictions(std::span<const Prediction> preds, std::span<const LabelVolume> gts,
                                const WatershedParams& params, const SizeBins& bins) {
    params.validate();
    bins.validate();
    if (preds.size() != gts.size()) throw ShapeError("evaluate: prediction and label counts differ");
    std::vector<InstanceSeg> segs;
    segs.reserve(preds.size());
    JaccardCounts jc;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const Prediction& p = preds[i];
        if (gts[i].dims() != p.mask_prob.dims() || p.boundary_prob.dims() != p.mask_prob.dims()) {
            throw ShapeError("labels " + to_string(gts[i].dims()) + " do not match prediction " +
                             to_string(p.mask_prob.dims()));
        }
        const JaccardCounts c = jaccard_counts(threshold(p.mask_prob), binarize_instances(gts[i]));
        jc.tp += c.tp;
        jc.fp += c.fp;
        jc.fn += c.fn;
        segs.push_back(marker_watershed(p.mask_prob, p.boundary_prob, params));
    }
    std::vector<EvalSample> samples;
    for (std::size_t i = 0; i < segs.size(); ++i) samples.push_back({&segs[i], &gts[i]});
    const ApResult ap = ap75(samples, bins);
    EvalReport report;
    report.jaccard = jc.value();
    report.ap75 = ap.ap;
    report.counts = ap.counts;
    return report;
}

EvalReport evaluate(const Checkpoint& ckpt, const Manifest& manifest, const WatershedParams& params,
                    const SizeBins& bins) {
    params.validate();
    bins.validate();
    std::vector<Prediction> preds;
    std::vector<LabelVolume> gts;
    for (const auto& e : manifest.entries) {
        const ImageVolume image = load_volume<float>(manifest.resolve(e.image));
        LabelVolume gt = load_volume<std::uint32_t>(manifest.resolve(e.labels));
        if (gt.dims() != image.dims()) {
            throw ShapeError("labels " + to_string(gt.dims()) + " do not match image " + to_string(image.dims()));
        }
        preds.push_back(predict(ckpt, image));
        gts.push_back(std::move(gt));
    }
    return evaluate_predictions(preds, gts, params, bins);
}

FeatureAffinity feature_affinity(const Checkpoint& ckpt, const std::vector<Sample>& samples) {
    const TrainConfig& cfg = ckpt.config;
    double cu_sum = 0.0;
    double cb_sum = 0.0;
    std::size_t cu_n = 0;
    std::size_t cb_n = 0;
    FeatureAffinity out;
    std::mt19937_64 rng(cfg.seed);
    for (const auto& s : samples) {
        const BackboneOutput fwd = forward(cfg.backbone, ckpt.params, s.image);
        const PointSet points = select_points(fwd.mask_prob, s.mask, cfg.points, cfg.beta, rng, cfg.select);
        const ClassPartition part = partition_by_class(points, s.mask);
        const auto cf = hybrid_point_features(fwd, part.certain_fg);
        const auto uf = hybrid_point_features(fwd, part.uncertain_fg);
        const auto bg = hybrid_point_features(fwd, part.background);
        auto to_double = [](const std::vector<float>& v) { return std::vector<double>(v.begin(), v.end()); };
        for (const auto& p : cf) {
            const auto pd = to_double(p);
            for (const auto& q : uf) {
                cu_sum += cosine_sim(pd, to_double(q), cfg.loss.eps);
                ++cu_n;
            }
            for (const auto& q : bg) {
                cb_sum += cosine_sim(pd, to_double(q), cfg.loss.eps);
                ++cb_n;
            }
        }
        out.certain_fg += cf.size();
        out.uncertain_fg += uf.size();
        out.background += bg.size();
    }
    out.certain_uncertain = cu_n ? cu_sum / static_cast<double>(cu_n) : 0.0;
    out.certain_background = cb_n ? cb_sum / static_cast<double>(cb_n) : 0.0;
    return out;
}

}  // namespace contraseg
