#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fdt/harness.hpp"

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        const auto value = std::stoull(item, &used);
        if (used != item.size()) {
            throw std::invalid_argument(item);
        }
        seeds.push_back(value);
    }
    return seeds;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated dynamic transformer simulator"};
    app.require_subcommand(1);

    std::string run_config;
    std::string run_out;
    auto* run = app.add_subcommand("run", "Run one experiment and write its artifacts");
    run->add_option("config", run_config, "Config file")->required();
    run->add_option("--out", run_out, "Output directory")->required();

    std::string cmp_a;
    std::string cmp_b;
    std::string cmp_seeds = "0,1,2";
    std::string cmp_out;
    auto* compare = app.add_subcommand("compare", "Run two configs over several seeds and compare them");
    compare->add_option("config_a", cmp_a, "First config")->required();
    compare->add_option("config_b", cmp_b, "Second config")->required();
    compare->add_option("--seeds", cmp_seeds, "Comma-separated seeds")->capture_default_str();
    compare->add_option("--out", cmp_out, "Output directory")->required();

    fdt::CostInputs cost_in;
    bool cost_json = false;
    auto* cost = app.add_subcommand("cost", "Print closed-form communication totals");
    cost->add_option("--T", cost_in.rounds, "Rounds")->required();
    cost->add_option("--c", cost_in.parts, "Growth parts")->required();
    cost->add_option("--N", cost_in.blocks, "Blocks per stack")->required();
    cost->add_option("--W1", cost_in.w1, "Weights per encoder block")->required();
    cost->add_option("--W2", cost_in.w2, "Weights per decoder block")->required();
    cost->add_flag("--json", cost_json, "Emit JSON");

    std::uint64_t grad_seed = 0;
    std::string grad_fault;
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite on a tiny model");
    gradcheck->add_option("--seed", grad_seed, "Seed")->capture_default_str();
    gradcheck->add_option("--inject-fault", grad_fault, "")->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? fdt::kExitOk : fdt::kExitUsage;
    }

    if (run->parsed()) {
        return fdt::cmd_run(run_config, run_out, std::cout, std::cerr);
    }
    if (compare->parsed()) {
        std::vector<std::uint64_t> seeds;
        try {
            seeds = parse_seeds(cmp_seeds);
        } catch (const std::exception&) {
            std::cerr << "error: --seeds expects comma-separated integers, got \"" << cmp_seeds << "\"\n";
            return fdt::kExitUsage;
        }
        return fdt::cmd_compare(cmp_a, cmp_b, seeds, cmp_out, std::cout, std::cerr);
    }
    if (cost->parsed()) {
        return fdt::cmd_cost(cost_in, cost_json, std::cout, std::cerr);
    }
    std::optional<std::string> fault;
    if (!grad_fault.empty()) {
        fault = grad_fault;
    }
    return fdt::cmd_gradcheck(grad_seed, fault, std::cout, std::cerr);
}
