#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <json.hpp>
#include <string>

#include "contraseg/volume.hpp"
#include "helpers.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

Run cli(const std::string& args, const fs::path& dir) {
    const fs::path log = dir / "cli_output.txt";
    const std::string cmd = std::string(CONTRASEG_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.output = testing::slurp(log);
    return r;
}

}  // namespace

TEST_CASE("argument and configuration errors exit with 1") {
    const fs::path dir = testing::scratch_dir("cli_errors");
    CHECK(cli("", dir).code == 1);
    CHECK(cli("frobnicate", dir).code == 1);
    CHECK(cli("gradcheck --op no_such_op", dir).code == 1);
    CHECK(cli("synth --out " + (dir / "d").string(), dir).code == 1);  // --count missing
    CHECK(cli("synth --out " + (dir / "d").string() + " --count 1 --set dims=[2,2,2]", dir).code == 1);
    CHECK(cli("synth --out " + (dir / "d").string() + " --count 1 --set nonsense=3", dir).code == 1);

    const std::string data = (dir / "data").string();
    REQUIRE(cli("synth --out " + data + " --count 1 --set dims=[4,16,16] --set instances=[1,2]", dir).code == 0);
    const std::string manifest = data + "/manifest.json";
    const Run beta = cli("train --data " + manifest + " --out " + (dir / "m").string() + " --set beta=2", dir);
    CHECK(beta.code == 1);
    CHECK(beta.output.find("beta") != std::string::npos);
    CHECK(cli("train --data " + manifest + " --out " + (dir / "m").string() + " --set bogus_key=1", dir).code == 1);
}

TEST_CASE("runtime failures exit with 2") {
    const fs::path dir = testing::scratch_dir("cli_runtime");
    const Run r = cli("predict --ckpt " + (dir / "nothing").string() + " --image " + (dir / "img").string() +
                          " --out " + (dir / "p").string(),
                      dir);
    CHECK(r.code == 2);
    CHECK(r.output.find("error") != std::string::npos);
}

TEST_CASE("help exits cleanly") {
    const fs::path dir = testing::scratch_dir("cli_help");
    const Run r = cli("--help", dir);
    CHECK(r.code == 0);
    for (const char* sub : {"synth", "train", "predict", "watershed", "eval", "gradcheck"}) {
        CHECK(r.output.find(sub) != std::string::npos);
    }
}

TEST_CASE("gradient check of one primitive") {
    const fs::path dir = testing::scratch_dir("cli_gradcheck");
    const Run r = cli("gradcheck --op relu --seeds 3", dir);
    CHECK(r.code == 0);
    CHECK(r.output.find("relu") != std::string::npos);
}

TEST_CASE("synth, train, predict, watershed and eval end to end") {
    const fs::path dir = testing::scratch_dir("cli_flow");
    const std::string data = (dir / "data").string();
    REQUIRE(cli("synth --out " + data + " --count 2 --set dims=[8,32,32] --set instances=[2,3] --set seed=5", dir).code ==
            0);
    CHECK(fs::exists(data + "/manifest.json"));

    const std::string cfg_path = (dir / "train.json").string();
    std::ofstream(cfg_path) << R"({"points": 64, "patch": [4, 16, 16], "max_steps": 4,
        "backbone": {"widths": [4, 8], "levels": 2, "feature_channels": 4}})";
    const std::string model = (dir / "model").string();
    const Run train = cli("train --config " + cfg_path + " --data " + data + "/manifest.json --out " + model +
                              " --set learning_rate=0.01",
                          dir);
    REQUIRE(train.code == 0);
    CHECK(fs::exists(model + "/final.json"));
    CHECK(fs::exists(model + "/final.bin"));
    CHECK(fs::exists(model + "/train_log.csv"));

    const auto manifest = nlohmann::json::parse(testing::slurp(data + "/manifest.json"));
    const std::string image = data + "/" + manifest.at(0).at("image").get<std::string>();
    const std::string pred = (dir / "pred").string();
    REQUIRE(cli("predict --ckpt " + model + "/final.json --image " + image + " --out " + pred, dir).code == 0);
    const auto pm = contraseg::load_volume<float>(pred + "_pm");
    CHECK(pm.dims() == contraseg::Dims{8, 32, 32});
    CHECK(std::all_of(pm.data().begin(), pm.data().end(), [](float v) { return v > 0 && v < 1; }));

    const std::string seg = (dir / "seg").string();
    REQUIRE(cli("watershed --pm " + pred + "_pm --pb " + pred + "_pb --out " + seg + " --set foreground_threshold=0.4",
                dir)
                .code == 0);
    const auto labels = contraseg::load_volume<std::uint32_t>(seg);
    CHECK(labels.dims() == pm.dims());
    const auto scores = nlohmann::json::parse(testing::slurp(seg + "_scores.json"));
    CHECK(scores.is_array());
    CHECK(cli("watershed --pm " + pred + "_pm --pb " + pred + "_pb --out " + seg + " --set connectivity=5", dir).code ==
          1);

    const std::string report = (dir / "report.json").string();
    REQUIRE(cli("eval --ckpt " + model + " --data " + data + "/manifest.json --report " + report, dir).code == 0);
    const auto rep = nlohmann::json::parse(testing::slurp(report));
    CHECK(rep.contains("jaccard"));
    CHECK(rep.at("ap75").contains("all"));
    CHECK(rep.at("counts").at("all").contains("tp"));
}
