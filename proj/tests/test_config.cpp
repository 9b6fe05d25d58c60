#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "fdt/config.hpp"
#include "fdt/errors.hpp"

using namespace fdt;

namespace {

std::string config_dir() { return FDT_CONFIG_DIR; }

std::string error_of(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST_CASE("empty config yields the defaults") {
    const auto c = parse_config("");
    CHECK(c == ExperimentConfig{});
    CHECK(c.model.target_layers == 6);
    CHECK(c.model.growth_parts == 6);
    CHECK(c.fed.rounds == 120);
    CHECK(c.fed.batch_size == 16);
    CHECK(c.fed.mode == Mode::feddt);
    CHECK(c.fed.optimizer == OptimizerKind::adam);
    CHECK(c.fed.beta1 == 0.9);
    CHECK(c.fed.beta2 == 0.999);
    CHECK(c.fed.epsilon == 1e-8);
}

TEST_CASE("shipped configs load and validate") {
    for (const auto& entry : std::filesystem::directory_iterator(config_dir())) {
        if (entry.path().extension() != ".ini") {
            continue;
        }
        CAPTURE(entry.path().string());
        const auto c = load_config(entry.path());
        CHECK_NOTHROW(c.validate());
        CHECK(parse_config(to_ini(c)) == c);
    }
    const auto a = load_config(config_dir() + "/feddt.ini");
    const auto b = load_config(config_dir() + "/fedt.ini");
    CHECK(a.fed.mode == Mode::feddt);
    CHECK(b.fed.mode == Mode::fedt);
    CHECK(a.same_data(b));
}

TEST_CASE("values parse strictly") {
    const auto c = parse_config(
        "[model]\nd_model = 16\n[federated]\nmode = fedt\nlr = 2.5e-3\ncodec = sealed\n"
        "reset_moments_on_growth = true\n[split]\nkind = ratios\nratios = 1, 1, 3\n[scaling]\nliteral_division = true\n");
    CHECK(c.model.d_model == 16);
    CHECK(c.fed.mode == Mode::fedt);
    CHECK(c.fed.lr == 2.5e-3);
    CHECK(c.fed.codec == CodecKind::sealed);
    CHECK(c.fed.reset_moments_on_growth);
    CHECK(c.split.kind == SplitKind::ratios);
    CHECK(c.split.ratios == std::vector<std::size_t>{1, 1, 3});
    CHECK(c.model.literal_division);

    CHECK(error_of("[model]\nd_model = 16x\n").find("model.d_model") != std::string::npos);
    CHECK(error_of("[model]\nd_model = -1\n").find("model.d_model") != std::string::npos);
    CHECK(error_of("[federated]\nmode = fast\n").find("federated.mode") != std::string::npos);
    CHECK(error_of("[federated]\nlr = abc\n").find("federated.lr") != std::string::npos);
    CHECK(error_of("[run]\nverify_growth = maybe\n").find("run.verify_growth") != std::string::npos);
    CHECK(error_of("[split]\nratios = 1,,2\n").find("split.ratios") != std::string::npos);
}

TEST_CASE("unknown keys and sections are rejected") {
    CHECK(error_of("[model]\nd_modle = 16\n").find("d_modle") != std::string::npos);
    CHECK(error_of("[modle]\nd_model = 16\n").find("modle") != std::string::npos);
    CHECK(!error_of("stray = 1\n").empty());
    CHECK(!error_of("[model\n").empty());
}

TEST_CASE("cross-field validation") {
    auto bad = [](const std::string& text) {
        try {
            parse_config(text).validate();
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(!bad("[model]\ngrowth_parts = 4\n").empty());
    CHECK(!bad("[schedule]\nrounds = 121\n").empty());
    CHECK(!bad("[split]\nkind = ratios\nratios = 1,2\n").empty());
    CHECK(!bad("[split]\nkind = ratios\nratios = 1,0,2\n").empty());
    CHECK(!bad("[task]\nmax_len = 40\n").empty());
    CHECK(!bad("[federated]\nclients_per_round = 4\n").empty());
    CHECK(!bad("[model]\nheads = 3\n").empty());
    // FedT does not need a divisible schedule.
    CHECK(bad("[federated]\nmode = fedt\n[schedule]\nrounds = 121\n").empty());
}

TEST_CASE("missing file names the path") {
    const std::string path = "/nonexistent/dir/exp.ini";
    try {
        load_config(path);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find(path) != std::string::npos);
    }
}

TEST_CASE("round trip through text") {
    ExperimentConfig c;
    c.fed.lr = 0.1 + 0.2;
    c.fed.epsilon = 3e-300;
    c.task.seed = std::numeric_limits<std::uint64_t>::max();
    c.split.kind = SplitKind::ratios;
    c.split.ratios = {1, 2, 4};
    c.fed.optimizer = OptimizerKind::sgd;
    CHECK(parse_config(to_ini(c)) == c);
    CHECK(format_double(0.001) == "0.001");
    CHECK(format_double(std::nan("")) == "nan");
}
