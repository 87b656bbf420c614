#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "contraseg/errors.hpp"
#include "contraseg/trainer.hpp"
#include "fields.hpp"
#include "helpers.hpp"
#include "instances.hpp"
#include "oracles.hpp"

using namespace contraseg;

namespace {

TrainConfig small_config() {
    TrainConfig cfg;
    cfg.points = 48;
    cfg.patch = {4, 16, 16};
    cfg.backbone.widths = {4, 8};
    cfg.backbone.levels = 2;
    cfg.backbone.feature_channels = 4;
    cfg.max_steps = 6;
    cfg.learning_rate = 0.01;
    return cfg;
}

SynthConfig small_synth(std::uint64_t seed) {
    SynthConfig s;
    s.dims = {8, 24, 24};
    s.instances = {2, 4};
    s.semi_axis_xy = {3.0, 5.0};
    s.semi_axis_z = {2.0, 3.0};
    s.distractors = {0, 1};
    s.seed = seed;
    return s;
}

std::vector<Sample> small_data(std::size_t n) {
    std::vector<Sample> out;
    for (std::size_t i = 0; i < n; ++i) {
        SynthVolume v = generate_volume(small_synth(100 + i));
        out.push_back(make_sample(std::move(v.image), std::move(v.instances)));
    }
    return out;
}

bool same_params(const BackboneParams& a, const BackboneParams& b) {
    if (a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
        if (a.tensors[i].values != b.tensors[i].values) return false;
    }
    return true;
}

LabelVolume separated_cubes(const Dims& d, std::size_t count, std::size_t side) {
    LabelVolume v(d, 0);
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t x0 = 1 + k * (side + 2);
        for (std::size_t z = 1; z < 1 + side; ++z)
            for (std::size_t y = 1; y < 1 + side; ++y)
                for (std::size_t x = x0; x < x0 + side; ++x) v(z, y, x) = static_cast<std::uint32_t>(k + 1);
    }
    return v;
}

}  // namespace

TEST_CASE("default training configuration") {
    const TrainConfig cfg;
    CHECK(cfg.points == 1024);
    CHECK(cfg.beta == 0.75);
    CHECK(cfg.loss.alpha == -4.0);
    CHECK(cfg.loss.gamma == doctest::Approx(std::log(1 + std::exp(2.0))).epsilon(1e-15));
    CHECK(cfg.loss.lambda_sim == 0.2);
    CHECK(cfg.loss.lambda_con == 0.2);
    CHECK(cfg.patch == Dims{8, 64, 64});
    CHECK(cfg.learning_rate == 0.02);
    CHECK(cfg.momentum == 0.9);
    CHECK(cfg.backbone.widths == std::vector<std::size_t>{8, 16, 32});
    CHECK(cfg.backbone.feature_channels == 16);
    CHECK(cfg.watershed.marker_mask_threshold == 0.9);
    CHECK(cfg.watershed.marker_boundary_threshold == 0.5);
    CHECK(cfg.watershed.foreground_threshold == 0.8);
    CHECK(cfg.watershed.connectivity == 6);
    CHECK(cfg.augment.flip_x);
    CHECK(cfg.augment.transpose_xy);
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("config JSON round trip, overrides and unknown keys") {
    TrainConfig cfg = small_config();
    cfg.beta = 0.5;
    cfg.loss.consistency_sign = ConsistencySign::kGoalConsistent;
    cfg.augment.jitter_max = 1.3;
    cfg.watershed.connectivity = 26;
    TrainConfig back;
    update_from_json(back, to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));

    SUBCASE("top-level override") {
        apply_override(back, "points=77");
        CHECK(back.points == 77);
        apply_override(back, "beta=0.25");
        CHECK(back.beta == 0.25);
    }
    SUBCASE("nested override and array value") {
        apply_override(back, "augment.flip_x=false");
        CHECK_FALSE(back.augment.flip_x);
        apply_override(back, "patch=[4,32,32]");
        CHECK(back.patch == Dims{4, 32, 32});
        apply_override(back, "consistency_sign=as-written");
        CHECK(back.loss.consistency_sign == ConsistencySign::kAsWritten);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(apply_override(back, "no_such_key=1"), ConfigError);
        CHECK_THROWS_AS(apply_override(back, "augment.nope=1"), ConfigError);
        CHECK_THROWS_AS(apply_override(back, "points"), ConfigError);
        CHECK_THROWS_AS(apply_override(back, "points=\"many\""), ConfigError);
        CHECK_THROWS_AS(apply_override(back, "a..b=1"), ConfigError);
    }
    SUBCASE("file") {
        const auto dir = testing::scratch_dir("trainer_cfg");
        const auto path = (dir / "cfg.json").string();
        std::ofstream(path) << R"({"points": 12, "backbone": {"levels": 2, "widths": [2, 4]}})";
        const TrainConfig f = load_train_config(path);
        CHECK(f.points == 12);
        CHECK(f.backbone.widths == std::vector<std::size_t>{2, 4});
        CHECK(f.beta == TrainConfig{}.beta);
        std::ofstream(path) << R"({"pionts": 12})";
        CHECK_THROWS_AS(load_train_config(path), ConfigError);
        CHECK_THROWS_AS(load_train_config((dir / "missing.json").string()), IoError);
    }
}

TEST_CASE("config validation") {
    TrainConfig cfg;
    SUBCASE("beta") { cfg.beta = 1.5; }
    SUBCASE("learning rate") { cfg.learning_rate = 0; }
    SUBCASE("momentum") { cfg.momentum = 1.0; }
    SUBCASE("patch not divisible") { cfg.patch = {8, 62, 64}; }
    SUBCASE("jitter") { cfg.augment.jitter_min = 1.2; }
    SUBCASE("no steps") {
        cfg.epochs = 0;
        cfg.max_steps = 0;
    }
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("flips and transpose") {
    std::mt19937_64 rng(31);
    const ImageVolume v = testing::random_image({3, 4, 5}, rng);
    CHECK(flip_x(flip_x(v)).data() == v.data());
    CHECK(flip_y(flip_y(v)).data() == v.data());
    CHECK(transpose_xy(v).dims() == Dims{3, 5, 4});
    CHECK(transpose_xy(transpose_xy(v)).data() == v.data());
    CHECK(flip_x(v)(1, 2, 0) == v(1, 2, 4));
    CHECK(flip_y(v)(1, 0, 3) == v(1, 3, 3));
    CHECK(transpose_xy(v)(2, 4, 1) == v(2, 1, 4));
}

TEST_CASE("augmentation") {
    std::mt19937_64 data(32);
    const Dims d{4, 12, 12};
    const Sample s = make_sample(testing::random_image(d, data), testing::random_boxes(data, d, 4));

    SUBCASE("all toggles off leaves the sample unchanged") {
        AugmentConfig off{false, false, false, false, 0.9, 1.1};
        for (int t = 0; t < 10; ++t) {
            std::mt19937_64 rng(t);
            const Sample a = augment(s, rng, off);
            CHECK(a.image.data() == s.image.data());
            CHECK(a.instances.data() == s.instances.data());
        }
    }
    SUBCASE("labels, mask and boundary move together") {
        for (int t = 0; t < 20; ++t) {
            std::mt19937_64 rng(t);
            const Sample a = augment(s, rng, AugmentConfig{});
            CHECK(a.mask.data() == binarize_instances(a.instances).data());
            CHECK(a.boundary.data() == boundary_from_instances(a.instances, 1).data());
            // Geometry only permutes voxels; jitter scales every intensity by one factor.
            const float ratio = [&] {
                double si = 0, so = 0;
                for (float x : s.image.data()) si += x;
                for (float x : a.image.data()) so += x;
                return static_cast<float>(so / si);
            }();
            CHECK(ratio >= 0.9f - 1e-5f);
            CHECK(ratio <= 1.1f + 1e-5f);
        }
    }
    SUBCASE("toggles do not shift the random stream") {
        std::mt19937_64 a(5), b(5);
        (void)augment(s, a, AugmentConfig{});
        (void)augment(s, b, AugmentConfig{false, false, false, false, 0.9, 1.1});
        CHECK(a == b);
    }
}

TEST_CASE("crop") {
    std::mt19937_64 rng(33);
    const Dims d{4, 10, 12};
    const Sample s = make_sample(testing::random_image(d, rng), testing::random_boxes(rng, d, 3));
    const Sample c = crop(s, {1, 2, 3}, {2, 4, 5});
    CHECK(c.image.dims() == Dims{2, 4, 5});
    CHECK(c.image(1, 3, 4) == s.image(2, 5, 7));
    CHECK(c.instances(0, 0, 0) == s.instances(1, 2, 3));
    CHECK_THROWS_AS(crop(s, {3, 0, 0}, {2, 4, 5}), ShapeError);
    CHECK_THROWS_AS(make_sample(ImageVolume({1, 2, 2}), LabelVolume({1, 2, 3})), ShapeError);
}

TEST_CASE("log records satisfy the loss identity") {
    const auto data = small_data(2);
    TrainConfig cfg = small_config();
    cfg.max_steps = 5;
    const TrainResult r = train(cfg, data);
    REQUIRE(r.log.records.size() == 5);
    for (const auto& rec : r.log.records) {
        const double want = rec.ce + cfg.loss.lambda_sim * rec.sim + cfg.loss.lambda_con * rec.con;
        CHECK(std::abs(rec.total - want) <= 1e-6 * std::max(1.0, std::abs(want)));
        CHECK(rec.certain_fg + rec.uncertain_fg + rec.background == cfg.points);
        CHECK(rec.learning_rate == cfg.learning_rate);
    }

    cfg.loss.lambda_sim = 0;
    cfg.loss.lambda_con = 0;
    const TrainResult ce_only = train(cfg, data);
    for (const auto& rec : ce_only.log.records) CHECK(rec.total == doctest::Approx(rec.ce).epsilon(1e-7));
}

TEST_CASE("warmup ramps the learning rate") {
    TrainConfig cfg = small_config();
    cfg.max_steps = 4;
    cfg.warmup_steps = 4;
    const TrainResult r = train(cfg, small_data(1));
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(r.log.records[i].learning_rate == doctest::Approx(cfg.learning_rate * (i + 1) / 4.0));
    }
}

TEST_CASE("repeated steps on one fixed patch lower the loss") {
    const auto all = small_data(1);
    const std::vector<Sample> data{crop(all[0], {0, 4, 4}, {4, 16, 16})};
    TrainConfig cfg = small_config();
    cfg.augment = {false, false, false, false, 1.0, 1.0};
    cfg.max_steps = 200;
    cfg.learning_rate = 0.01;
    const TrainResult r = train(cfg, data);
    auto mean_total = [&](std::size_t from, std::size_t to) {
        double s = 0;
        for (std::size_t i = from; i < to; ++i) s += r.log.records[i].total;
        return s / static_cast<double>(to - from);
    };
    const double first = mean_total(0, 10);
    const double last = mean_total(190, 200);
    MESSAGE("total loss, first 10 steps " << first << ", last 10 steps " << last);
    CHECK(last < first);
    CHECK(r.log.records.back().ce < 0.5 * r.log.records.front().ce);
}

TEST_CASE("training is deterministic for a fixed seed") {
    const auto data = small_data(3);
    TrainConfig cfg = small_config();
    const TrainResult a = train(cfg, data);
    const TrainResult b = train(cfg, data);
    CHECK(a.log == b.log);
    CHECK(same_params(a.checkpoint.params, b.checkpoint.params));
    cfg.seed = 2;
    const TrainResult c = train(cfg, data);
    CHECK_FALSE(same_params(a.checkpoint.params, c.checkpoint.params));
}

TEST_CASE("on_step can stop training early") {
    TrainConfig cfg = small_config();
    std::size_t calls = 0;
    TrainOptions opt;
    opt.on_step = [&](const LogRecord&) { return ++calls < 3; };
    const TrainResult r = train(cfg, small_data(1), opt);
    CHECK(r.log.records.size() == 3);
    CHECK(r.checkpoint.step == 3);
}

TEST_CASE("training rejects bad inputs") {
    TrainConfig cfg = small_config();
    CHECK_THROWS_AS(train(cfg, std::vector<Sample>{}), ConfigError);
    std::mt19937_64 rng(34);
    const Dims tiny{2, 16, 16};
    const std::vector<Sample> small{make_sample(testing::random_image(tiny, rng), LabelVolume(tiny, 0))};
    CHECK_THROWS_AS(train(cfg, small), ConfigError);
}

TEST_CASE("a diverging run stops with a numeric error and a dump") {
    TrainConfig cfg = small_config();
    cfg.learning_rate = 1e30;
    cfg.momentum = 0;
    cfg.max_steps = 20;
    const auto dir = testing::scratch_dir("trainer_nan");
    TrainOptions opt;
    opt.out_dir = dir.string();
    CHECK_THROWS_AS(train(cfg, small_data(1), opt), NumericError);
    CHECK(std::filesystem::exists(dir / "nan_dump.json"));
    CHECK(std::filesystem::exists(dir / "nan_dump_image.json"));
}

TEST_CASE("checkpoint round trip reproduces predictions bit for bit") {
    TrainConfig cfg = small_config();
    cfg.checkpoint_interval = 2;
    const auto dir = testing::scratch_dir("trainer_ckpt");
    TrainOptions opt;
    opt.out_dir = dir.string();
    const auto data = small_data(2);
    const TrainResult r = train(cfg, data, opt);
    CHECK(std::filesystem::exists(dir / "step_000002.json"));
    CHECK(std::filesystem::exists(dir / "step_000004.bin"));
    CHECK(std::filesystem::exists(dir / "final.json"));

    const std::string csv = testing::slurp(dir / "train_log.csv");
    CHECK(csv == r.log.to_csv());
    CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(cfg.max_steps + 1));
    CHECK(csv.rfind("step,l_ce,l_sim,l_con,l_total", 0) == 0);

    const Checkpoint back = load_checkpoint((dir / "final").string());
    CHECK(back.step == cfg.max_steps);
    CHECK(to_json(back.config) == to_json(cfg));
    CHECK(same_params(back.params, r.checkpoint.params));
    const Checkpoint via_json = load_checkpoint((dir / "final.json").string());
    CHECK(same_params(via_json.params, r.checkpoint.params));
    const Checkpoint via_dir = load_checkpoint(dir.string());
    CHECK(same_params(via_dir.params, r.checkpoint.params));

    const Prediction p1 = predict(r.checkpoint, data[0].image);
    const Prediction p2 = predict(back, data[0].image);
    CHECK(p1.mask_prob.data() == p2.mask_prob.data());
    CHECK(p1.boundary_prob.data() == p2.boundary_prob.data());
    CHECK(p1.mask_prob.dims() == data[0].image.dims());

    SUBCASE("mismatched config is rejected") {
        Checkpoint bad = r.checkpoint;
        bad.config.backbone.feature_channels = 5;
        save_checkpoint(bad, (dir / "bad").string());
        CHECK_THROWS_AS(load_checkpoint((dir / "bad").string()), ConfigError);
    }
    SUBCASE("truncated data is rejected") {
        std::filesystem::resize_file(dir / "final.bin", 16);
        CHECK_THROWS_AS(load_checkpoint((dir / "final").string()), FormatError);
    }
    SUBCASE("missing checkpoint") {
        CHECK_THROWS_AS(load_checkpoint((dir / "none").string()), IoError);
    }
}

TEST_CASE("tile starts cover the axis with the requested overlap") {
    CHECK(tile_starts(10, 16, 4) == std::vector<std::size_t>{0});
    CHECK(tile_starts(16, 16, 4) == std::vector<std::size_t>{0});
    CHECK(tile_starts(64, 32, 8) == std::vector<std::size_t>{0, 24, 32});
    CHECK_THROWS_AS(tile_starts(4, 0, 0), ConfigError);
    for (std::size_t n = 1; n <= 70; ++n) {
        for (std::size_t p : {1, 4, 7, 16}) {
            for (std::size_t ov : {std::size_t{0}, p / 4, p - 1}) {
                const auto s = tile_starts(n, p, ov);
                REQUIRE_FALSE(s.empty());
                CHECK(s.front() == 0);
                CHECK(s.back() + std::min(n, p) == n);
                for (std::size_t i = 1; i < s.size(); ++i) {
                    CHECK(s[i] > s[i - 1]);
                    CHECK(s[i - 1] + p >= s[i] + ov);  // consecutive tiles share at least `ov`
                }
            }
        }
    }
}

TEST_CASE("blending averages overlapping tiles") {
    const Dims d{1, 1, 4};
    std::vector<Tile> tiles{{{0, 0, 0}, ImageVolume({1, 1, 3}, 1.0f)}, {{0, 0, 1}, ImageVolume({1, 1, 3}, 3.0f)}};
    const ImageVolume b = blend_tiles(d, tiles);
    CHECK(b.data() == std::vector<float>{1, 2, 2, 3});
    CHECK_THROWS_AS(blend_tiles({1, 1, 5}, tiles), ShapeError);  // last voxel uncovered
    tiles.push_back({{0, 0, 3}, ImageVolume({1, 1, 3}, 0.0f)});
    CHECK_THROWS_AS(blend_tiles(d, tiles), ShapeError);
}

TEST_CASE("tiled prediction stitches patches exactly") {
    std::mt19937_64 rng(35);
    const Dims d{9, 40, 70};
    const ImageVolume image = testing::random_image(d, rng);
    std::size_t calls = 0;
    const PatchPredictor identity = [&](const ImageVolume& tile) {
        ++calls;
        CHECK(tile.dims() == Dims{8, 32, 32});
        ImageVolume inv = tile;
        for (auto& v : inv.data()) v = 1.0f - v;
        return Prediction{tile, inv};
    };
    const Prediction p = predict_tiled(image, {8, 32, 32}, identity);
    CHECK(calls == tile_starts(9, 8, 2).size() * tile_starts(40, 32, 8).size() * tile_starts(70, 32, 8).size());
    CHECK(p.mask_prob.data() == image.data());
    for (std::size_t i = 0; i < image.size(); ++i) CHECK_EQ(p.boundary_prob[i], 1.0f - image[i]);

    const PatchPredictor constant = [](const ImageVolume& tile) {
        return Prediction{ImageVolume(tile.dims(), 0.25f), ImageVolume(tile.dims(), 0.75f)};
    };
    const Prediction c = predict_tiled(image, {8, 32, 32}, constant);
    CHECK(std::all_of(c.mask_prob.data().begin(), c.mask_prob.data().end(), [](float v) { return v == 0.25f; }));

    const PatchPredictor wrong = [](const ImageVolume&) {
        return Prediction{ImageVolume({1, 1, 1}), ImageVolume({1, 1, 1})};
    };
    CHECK_THROWS_AS(predict_tiled(image, {8, 32, 32}, wrong), ShapeError);
}

TEST_CASE("evaluation of ground truth used as the prediction") {
    const Dims d{6, 8, 30};
    const LabelVolume gt = separated_cubes(d, 3, 4);
    const WatershedParams params;
    const SizeBins bins;

    std::vector<Prediction> perfect{{ImageVolume(d, 0.0f), ImageVolume(d, 0.0f)}};
    for (std::size_t i = 0; i < gt.size(); ++i) perfect[0].mask_prob[i] = gt[i] ? 1.0f : 0.0f;
    const EvalReport good = evaluate_predictions(perfect, std::vector<LabelVolume>{gt}, params, bins);
    CHECK(good.jaccard == 1.0);
    CHECK(good.ap75[kAll] == 1.0);
    CHECK(good.counts[kAll] == BinCounts{3, 0, 0, 3});

    const std::vector<Prediction> empty{{ImageVolume(d, 0.0f), ImageVolume(d, 0.0f)}};
    const EvalReport bad = evaluate_predictions(empty, std::vector<LabelVolume>{gt}, params, bins);
    CHECK(bad.jaccard == 0.0);
    CHECK(bad.ap75[kAll] == 0.0);
    CHECK(bad.counts[kAll].fn == 3);

    CHECK_THROWS_AS(evaluate_predictions(perfect, std::vector<LabelVolume>{}, params, bins), ShapeError);
    CHECK_THROWS_AS(evaluate_predictions(perfect, std::vector<LabelVolume>{LabelVolume({1, 1, 1})}, params, bins),
                    ShapeError);
}

TEST_CASE("evaluation pools volumes like a single stacked volume") {
    std::mt19937_64 rng(36);
    const Dims d{4, 12, 12};
    const SizeBins bins{6, 40};
    for (int t = 0; t < 10; ++t) {
        const std::size_t n = 1 + rng() % 3;
        std::vector<Prediction> preds;
        std::vector<LabelVolume> gts;
        std::vector<InstanceSeg> segs;
        const WatershedParams params = testing::random_params(rng);
        for (std::size_t s = 0; s < n; ++s) {
            Prediction p;
            testing::random_fields(rng, d, p.mask_prob, p.boundary_prob);
            segs.push_back(marker_watershed(p.mask_prob, p.boundary_prob, params));
            preds.push_back(std::move(p));
            gts.push_back(testing::random_boxes(rng, d, 4));
        }
        const EvalReport r = evaluate_predictions(preds, gts, params, bins);

        // Semantic Jaccard over the concatenated voxels.
        const Dims stacked{d.d * n, d.h, d.w};
        MaskVolume pm_all(stacked, 0), gt_all(stacked, 0);
        std::vector<double> scores;
        for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t i = 0; i < d.voxels(); ++i) {
                pm_all[s * d.voxels() + i] = preds[s].mask_prob[i] > 0.5f;
                gt_all[s * d.voxels() + i] = gts[s][i] != 0;
            }
            scores.insert(scores.end(), segs[s].scores.begin(), segs[s].scores.end());
        }
        CHECK(r.jaccard == doctest::Approx(oracle::jaccard(pm_all, gt_all)).epsilon(1e-15));

        auto gt_of = [&](std::size_t s) -> const LabelVolume& { return gts[s]; };
        auto seg_of = [&](std::size_t s) -> const LabelVolume& { return segs[s].labels; };
        const oracle::ApOracle want =
            oracle::ap75(testing::stack_labels(n, d, seg_of), scores, testing::stack_labels(n, d, gt_of), bins);
        for (std::size_t b = 0; b < 4; ++b) {
            CHECK(r.counts[b] == want.counts[b]);
            CHECK(r.ap75[b] == doctest::Approx(want.ap[b]).epsilon(1e-12));
        }
    }
}

TEST_CASE("feature affinity reports pooled pair similarities") {
    TrainConfig cfg = small_config();
    const auto data = small_data(2);
    const TrainResult r = train(cfg, data);
    const FeatureAffinity a = feature_affinity(r.checkpoint, data);
    CHECK(a.certain_fg + a.uncertain_fg + a.background == cfg.points * data.size());
    CHECK(a.certain_uncertain >= -1.0);
    CHECK(a.certain_uncertain <= 1.0);
    CHECK(a.certain_background >= -1.0);
    CHECK(a.certain_background <= 1.0);
    const FeatureAffinity again = feature_affinity(r.checkpoint, data);
    CHECK(again.certain_uncertain == a.certain_uncertain);
    CHECK(again.certain_background == a.certain_background);
}

TEST_CASE("training from a manifest on disk") {
    const auto dir = testing::scratch_dir("trainer_manifest");
    const Manifest m = generate_dataset(small_synth(7), 2, (dir / "data").string());
    TrainConfig cfg = small_config();
    cfg.max_steps = 3;
    const TrainResult from_disk = train(cfg, load_manifest((dir / "data" / "manifest.json").string()));
    const TrainResult from_memory = train(cfg, load_samples(m));
    CHECK(from_disk.log == from_memory.log);
    const EvalReport rep = evaluate(from_disk.checkpoint, m, cfg.watershed, cfg.bins);
    CHECK(rep.jaccard >= 0.0);
    CHECK(rep.jaccard <= 1.0);
}
