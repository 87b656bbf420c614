// Command-line front end: synth, train, predict, watershed, eval, gradcheck.
//
// Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "contraseg/gradcheck_suite.hpp"
#include "contraseg/synthdata.hpp"
#include "contraseg/trainer.hpp"

using namespace contraseg;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr double kGradTolerance = 1e-4;

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("'" + path + "' is not valid JSON");
    return j;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path + "'");
}

TrainConfig train_config(const std::string& path, const std::vector<std::string>& sets) {
    TrainConfig cfg = path.empty() ? TrainConfig{} : load_train_config(path);
    for (const auto& s : sets) apply_override(cfg, s);
    cfg.validate();
    return cfg;
}

WatershedParams watershed_params(const std::string& path, const std::vector<std::string>& sets) {
    TrainConfig holder;
    if (!path.empty()) update_from_json(holder, json{{"watershed", read_json(path)}});
    for (const auto& s : sets) update_from_json(holder, json{{"watershed", parse_override(s)}});
    holder.watershed.validate();
    return holder.watershed;
}

int run_synth(const std::string& config, const std::string& out, std::size_t count,
              const std::vector<std::string>& sets) {
    json j = config.empty() ? json::object() : read_json(config);
    for (const auto& s : sets) j.merge_patch(parse_override(s));
    SynthConfig cfg;
    from_json(j, cfg);
    cfg.validate();
    const Manifest m = generate_dataset(cfg, count, out);
    std::printf("wrote %zu volumes and %s\n", m.entries.size(),
                (std::filesystem::path(out) / "manifest.json").string().c_str());
    return 0;
}

int run_train(const std::string& config, const std::string& data, const std::string& out,
              const std::vector<std::string>& sets) {
    const TrainConfig cfg = train_config(config, sets);
    const Manifest manifest = load_manifest(data);
    TrainOptions options;
    options.out_dir = out;
    options.on_step = [](const LogRecord& r) {
        if (r.step % 50 == 0) {
            std::fprintf(stderr, "step %zu  L_total %.5f  L_CE %.5f  L_sim %.5f  L_con %.5f\n", r.step, r.total, r.ce,
                         r.sim, r.con);
        }
        return true;
    };
    const TrainResult result = train(cfg, manifest, options);
    std::printf("trained %zu steps; checkpoint %s\n", result.checkpoint.step,
                (std::filesystem::path(out) / "final.json").string().c_str());
    return 0;
}

int run_predict(const std::string& ckpt_path, const std::string& image_path, const std::string& out,
                const std::vector<std::string>& sets) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    for (const auto& s : sets) apply_override(ckpt.config, s);
    ckpt.config.validate();
    const Prediction p = predict(ckpt, load_volume<float>(image_path));
    save_volume(p.mask_prob, out + "_pm");
    save_volume(p.boundary_prob, out + "_pb");
    std::printf("wrote %s_pm and %s_pb\n", out.c_str(), out.c_str());
    return 0;
}

int run_watershed(const std::string& pm, const std::string& pb, const std::string& params_path,
                  const std::string& out, const std::vector<std::string>& sets) {
    const WatershedParams params = watershed_params(params_path, sets);
    const InstanceSeg seg = marker_watershed(load_volume<float>(pm), load_volume<float>(pb), params);
    save_volume(seg.labels, out);
    write_file(out + "_scores.json", json(seg.scores).dump() + "\n");
    std::printf("%zu instances written to %s\n", seg.scores.size(), out.c_str());
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data, const std::string& report_path,
             const std::string& params_path, const std::vector<std::string>& sets) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    for (const auto& s : sets) apply_override(ckpt.config, s);
    ckpt.config.validate();
    WatershedParams params = ckpt.config.watershed;
    if (!params_path.empty()) params = watershed_params(params_path, {});
    const EvalReport report = evaluate(ckpt, load_manifest(data), params, ckpt.config.bins);
    const std::string text = report.to_json();
    write_file(report_path, text + "\n");
    std::printf("%s\n", text.c_str());
    return 0;
}

int run_gradcheck(const std::string& op, std::size_t seeds) {
    std::vector<const NamedGradCheck*> checks;
    if (op.empty()) {
        for (const auto& c : gradcheck_registry()) checks.push_back(&c);
    } else {
        const NamedGradCheck* c = find_gradcheck(op);
        if (!c) {
            std::string names;
            for (const auto& k : gradcheck_registry()) names += " " + k.name;
            throw ConfigError("unknown op '" + op + "'; available:" + names);
        }
        checks.push_back(c);
    }
    bool ok = true;
    for (const auto* c : checks) {
        double worst = 0.0;
        std::size_t coords = 0;
        for (std::size_t s = 1; s <= seeds; ++s) {
            const auto r = c->run(s);
            worst = std::max(worst, r.max_rel_error);
            coords += r.coordinates;
        }
        const bool pass = worst <= kGradTolerance;
        ok = ok && pass;
        std::printf("%-20s %s  max_rel_error %.3e  seeds %zu  coordinates %zu\n", c->name.c_str(),
                    pass ? "PASS" : "FAIL", worst, seeds, coords);
    }
    return ok ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Contrastive point-sampling segmentation of 3D EM-like volumes"};
    app.require_subcommand(1);

    std::string config, out, data, ckpt, image, pm, pb, params, report, op;
    std::size_t count = 0;
    std::size_t seeds = 20;
    std::vector<std::string> sets;
    const char* set_help = "Override a config field, e.g. --set learning_rate=0.01 (repeatable)";

    auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled dataset");
    synth->add_option("--config", config, "SynthConfig JSON (defaults when omitted)")->check(CLI::ExistingFile);
    synth->add_option("--out", out, "Output directory")->required();
    synth->add_option("--count", count, "Number of volumes")->required();
    synth->add_option("--set", sets, set_help);

    auto* train_cmd = app.add_subcommand("train", "Train a model");
    train_cmd->add_option("--config", config, "TrainConfig JSON (defaults when omitted)")->check(CLI::ExistingFile);
    train_cmd->add_option("--data", data, "Dataset manifest")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", out, "Checkpoint directory")->required();
    train_cmd->add_option("--set", sets, set_help);

    auto* predict_cmd = app.add_subcommand("predict", "Predict mask and boundary probabilities");
    predict_cmd->add_option("--ckpt", ckpt, "Checkpoint prefix, .json path, or training output directory")->required();
    predict_cmd->add_option("--image", image, "Image volume prefix")->required();
    predict_cmd->add_option("--out", out, "Output prefix; writes <out>_pm and <out>_pb")->required();
    predict_cmd->add_option("--set", sets, set_help);

    auto* ws = app.add_subcommand("watershed", "Marker-controlled watershed on probability maps");
    ws->add_option("--pm", pm, "Mask probability volume")->required();
    ws->add_option("--pb", pb, "Boundary probability volume")->required();
    ws->add_option("--params", params, "Watershed parameters JSON (defaults when omitted)")->check(CLI::ExistingFile);
    ws->add_option("--out", out, "Output label volume prefix")->required();
    ws->add_option("--set", sets, "Override a watershed parameter, e.g. --set foreground_threshold=0.7");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a labelled manifest");
    eval_cmd->add_option("--ckpt", ckpt, "Checkpoint prefix, .json path, or training output directory")->required();
    eval_cmd->add_option("--data", data, "Dataset manifest")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--report", report, "Report JSON path")->required();
    eval_cmd->add_option("--params", params, "Watershed parameters JSON (checkpoint config when omitted)")
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--set", sets, set_help);

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    gc->add_option("--op", op, "Check a single primitive or loss");
    gc->add_option("--seeds", seeds, "Random seeds per check")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*synth) return run_synth(config, out, count, sets);
        if (*train_cmd) return run_train(config, data, out, sets);
        if (*predict_cmd) return run_predict(ckpt, image, out, sets);
        if (*ws) return run_watershed(pm, pb, params, out, sets);
        if (*eval_cmd) return run_eval(ckpt, data, report, params, sets);
        if (*gc) return run_gradcheck(op, seeds);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
    return kExitConfig;
}
