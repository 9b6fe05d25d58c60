#include "fdt/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "fdt/autograd.hpp"
#include "fdt/errors.hpp"
#include "fdt/gradcheck.hpp"
#include "fdt/rng.hpp"

namespace fdt {

using nlohmann::json;
namespace fs = std::filesystem;

SyntheticTask make_task(const ExperimentConfig& config) {
    const auto& t = config.task;
    return SyntheticTask::create(t.seed, config.model.vocab_size, config.model.frame_dim, t.min_len, t.max_len,
                                 t.frames_per_token, t.position_bias);
}

ExperimentData build_data(const ExperimentConfig& config) {
    ExperimentData data;
    data.corpus = generate(make_task(config), config.task.train_samples + config.task.test_samples);
    const auto idx = holdout_indices(data.corpus.size(), config.task.test_samples, config.task.holdout_seed);
    for (auto i : idx.train) {
        data.train.push_back(data.corpus[i]);
    }
    for (auto i : idx.test) {
        data.test.push_back(data.corpus[i]);
    }
    data.shards = split(data.train, config.split_spec(), config.split.seed);
    return data;
}

CostInputs cost_inputs(const ExperimentConfig& config, const CommLedger& ledger) {
    CostInputs in;
    in.rounds = config.fed.rounds;
    in.parts = config.model.growth_parts;
    in.blocks = config.model.target_layers;
    in.w1 = ledger.per_enc_block;
    in.w2 = ledger.per_dec_block;
    return in;
}

namespace {

json nan_to_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

json verification_json(const LedgerVerification& v) {
    return {{"ok", v.ok},
            {"message", v.message},
            {"measured_units", v.measured_units},
            {"expected_units", v.expected_units.str()},
            {"first_divergent_round", v.first_divergent_round ? json(*v.first_divergent_round) : json(nullptr)},
            {"fixed_bytes", v.fixed_bytes}};
}

json config_json(const ExperimentConfig& config) {
    json out = json::object();
    for (const auto& [section, fields] : describe(config)) {
        json sec = json::object();
        for (const auto& [key, value] : fields) {
            sec[key] = value;
        }
        out[section] = sec;
    }
    return out;
}

std::string summary_json(const ExperimentConfig& config, const TrainingResult& tr, const LedgerVerification& v,
                         const std::string& weights_sha1) {
    const auto& last = tr.reports.back();
    json j = {
        {"schema_version", kSchemaVersion},
        {"mode", to_string(config.fed.mode)},
        {"rounds", tr.reports.size()},
        {"final_layers", tr.final_layers},
        {"final_eval_loss", nan_to_null(last.eval_loss)},
        {"final_train_loss", nan_to_null(last.mean_train_loss)},
        {"total_bytes", tr.ledger.total_bytes()},
        {"total_block_bytes", tr.ledger.total_block_bytes()},
        {"total_fixed_bytes", tr.ledger.total_fixed_bytes()},
        {"total_param_steps", tr.ledger.total_param_steps()},
        {"growth_rounds", tr.growth_rounds},
        {"per_enc_block", tr.ledger.per_enc_block},
        {"per_dec_block", tr.ledger.per_dec_block},
        {"fixed_params", tr.ledger.fixed_params},
        {"rng_version", std::string(kRngVersion)},
        {"ledger_verification", verification_json(v)},
        {"weights_sha1", weights_sha1},
    };
    return j.dump(2) + "\n";
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ConfigError("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw ConfigError("failed writing " + path.string());
    }
}

void write_file(const fs::path& path, const std::string& text) {
    write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void prepare_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw ConfigError("cannot create output directory " + dir.string());
    }
}

}  // namespace

std::string metrics_csv(const std::vector<RoundReport>& reports) {
    std::string out = "t,l_t,mean_train_loss,eval_loss,downlink_bytes,uplink_bytes,cum_bytes\n";
    for (const auto& r : reports) {
        out += std::to_string(r.t) + "," + std::to_string(r.layers) + "," + format_double(r.mean_train_loss) + "," +
               format_double(r.eval_loss) + "," + std::to_string(r.downlink_bytes) + "," +
               std::to_string(r.uplink_bytes) + "," + std::to_string(r.cum_bytes) + "\n";
    }
    return out;
}

std::string git_blob_sha1(std::span<const std::uint8_t> bytes) {
    const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                    EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                    EVP_DigestFinal_ex(ctx, digest, &len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) {
        throw Error("SHA-1 digest failed");
    }
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) {
        hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return hex.str();
}

RunOutput run_experiment(const ExperimentConfig& config) {
    config.validate();
    ExperimentData data = build_data(config);
    RunOutput run;
    run.corpus_bytes = dump_corpus(data.corpus);
    run.training = run_training(config.model, config.fed, std::move(data.shards), std::move(data.test));
    run.verification = verify_ledger(run.training.ledger, cost_inputs(config, run.training.ledger), config.fed.mode);
    run.metrics_csv = metrics_csv(run.training.reports);
    run.summary_json = summary_json(config, run.training, run.verification, git_blob_sha1(run.training.final_weights));
    return run;
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_run(const fs::path& out_dir, const ExperimentConfig& config, const RunOutput& run,
               const std::string& started_at, const std::string& finished_at) {
    prepare_dir(out_dir);
    write_file(out_dir / "metrics.csv", run.metrics_csv);
    write_file(out_dir / "summary.json", run.summary_json);
    write_file(out_dir / "weights.bin", run.training.final_weights);
    write_file(out_dir / "corpus.bin", run.corpus_bytes);
    json manifest = {
        {"schema_version", kSchemaVersion},
        {"config", config_json(config)},
        {"rng_version", std::string(kRngVersion)},
        {"started_at", started_at},
        {"finished_at", finished_at},
        {"files",
         {{"metrics", "metrics.csv"},
          {"summary", "summary.json"},
          {"weights", "weights.bin"},
          {"corpus", "corpus.bin"}}},
        {"hashes",
         {{"corpus", git_blob_sha1(run.corpus_bytes)}, {"weights", git_blob_sha1(run.training.final_weights)}}},
    };
    write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

double median(std::vector<double> values) {
    if (values.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double loss_at_bytes(const std::vector<RoundReport>& reports, std::uint64_t budget) {
    double loss = std::numeric_limits<double>::quiet_NaN();
    for (const auto& r : reports) {
        if (r.cum_bytes > budget) {
            break;
        }
        loss = r.eval_loss;
    }
    return loss;
}

EqualBytesComparison compare_at_equal_bytes(const std::vector<std::vector<RoundReport>>& grown,
                                            const std::vector<std::vector<RoundReport>>& fixed,
                                            double from_fraction) {
    EqualBytesComparison out;
    if (grown.empty() || fixed.empty()) {
        throw ContractError("compare_at_equal_bytes: need at least one run per mode");
    }
    std::uint64_t budget = std::numeric_limits<std::uint64_t>::max();
    for (const auto* runs : {&grown, &fixed}) {
        for (const auto& r : *runs) {
            if (r.empty()) {
                throw ContractError("compare_at_equal_bytes: empty run");
            }
            budget = std::min(budget, r.back().cum_bytes);
        }
    }
    out.to_bytes = budget;
    out.from_bytes = static_cast<std::uint64_t>(std::ceil(from_fraction * static_cast<double>(budget)));
    std::vector<std::uint64_t> points;
    for (const auto* runs : {&grown, &fixed}) {
        for (const auto& run : *runs) {
            for (const auto& r : run) {
                if (r.cum_bytes >= out.from_bytes && r.cum_bytes <= budget) {
                    points.push_back(r.cum_bytes);
                }
            }
        }
    }
    points.push_back(out.from_bytes);
    std::sort(points.begin(), points.end());
    points.erase(std::unique(points.begin(), points.end()), points.end());

    out.holds = true;
    out.worst_gap = -std::numeric_limits<double>::infinity();
    for (auto b : points) {
        std::vector<double> g;
        std::vector<double> f;
        for (const auto& run : grown) {
            g.push_back(loss_at_bytes(run, b));
        }
        for (const auto& run : fixed) {
            f.push_back(loss_at_bytes(run, b));
        }
        const double mg = median(g);
        const double mf = median(f);
        if (std::isnan(mg) || std::isnan(mf)) {
            // A mode with no finished round at this budget cannot be compared.
            if (std::isnan(mg)) {
                out.holds = false;
            }
            continue;
        }
        ++out.points;
        if (mg - mf > out.worst_gap) {
            out.worst_gap = mg - mf;
            out.worst_bytes = b;
        }
        if (mg > mf) {
            out.holds = false;
        }
    }
    return out;
}

namespace {

int report_error(const std::exception& e, std::ostream& err) {
    err << "error: " << e.what() << "\n";
    if (dynamic_cast<const ConfigError*>(&e)) {
        return kExitUsage;
    }
    return kExitVerification;
}

}  // namespace

int cmd_run(const fs::path& config_path, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
    try {
        const ExperimentConfig config = load_config(config_path);
        prepare_dir(out_dir);
        const std::string started = utc_timestamp();
        const RunOutput run = run_experiment(config);
        write_run(out_dir, config, run, started, utc_timestamp());
        const auto& last = run.training.reports.back();
        out << "mode=" << to_string(config.fed.mode) << " rounds=" << last.t << " layers=" << last.layers
            << " eval_loss=" << format_double(last.eval_loss) << " bytes=" << last.cum_bytes << "\n";
        out << "ledger: " << run.verification.message << "\n";
        return kExitOk;
    } catch (const Error& e) {
        return report_error(e, err);
    }
}

int cmd_compare(const fs::path& config_a, const fs::path& config_b, const std::vector<std::uint64_t>& seeds,
                const fs::path& out_dir, std::ostream& out, std::ostream& err) {
    try {
        if (seeds.empty()) {
            throw ConfigError("compare: --seeds must list at least one seed");
        }
        const ExperimentConfig a = load_config(config_a);
        const ExperimentConfig b = load_config(config_b);
        if (!a.same_data(b)) {
            throw ConfigError("compare: " + config_a.string() + " and " + config_b.string() +
                              " differ in [task], [split], federated.num_clients or model vocab/frame_dim");
        }
        prepare_dir(out_dir);

        struct Arm {
            std::string label;
            ExperimentConfig config;
            std::vector<std::vector<RoundReport>> runs;
            std::vector<std::uint64_t> block_bytes;
            std::vector<std::uint64_t> total_bytes;
            std::vector<std::uint64_t> param_steps;
        };
        std::vector<Arm> arms = {{"a", a, {}, {}, {}, {}}, {"b", b, {}, {}, {}, {}}};
        for (auto& arm : arms) {
            for (auto seed : seeds) {
                ExperimentConfig c = arm.config;
                c.fed.seed = seed;
                const std::string started = utc_timestamp();
                const RunOutput run = run_experiment(c);
                write_run(out_dir / arm.label / ("seed-" + std::to_string(seed)), c, run, started, utc_timestamp());
                arm.runs.push_back(run.training.reports);
                arm.block_bytes.push_back(run.training.ledger.total_block_bytes());
                arm.total_bytes.push_back(run.training.ledger.total_bytes());
                arm.param_steps.push_back(run.training.ledger.total_param_steps());
            }
        }

        std::vector<double> finals[2];
        for (std::size_t i = 0; i < 2; ++i) {
            for (const auto& r : arms[i].runs) {
                finals[i].push_back(r.back().eval_loss);
            }
        }
        const double target = std::max(median(finals[0]), median(finals[1]));

        json modes = json::object();
        for (std::size_t i = 0; i < 2; ++i) {
            const Arm& arm = arms[i];
            std::vector<double> to_target;
            json per_seed = json::array();
            bool all_reached = true;
            for (std::size_t s = 0; s < seeds.size(); ++s) {
                std::optional<std::uint64_t> reached;
                for (const auto& r : arm.runs[s]) {
                    if (r.eval_loss <= target) {
                        reached = r.cum_bytes;
                        break;
                    }
                }
                all_reached = all_reached && reached.has_value();
                if (reached) {
                    to_target.push_back(static_cast<double>(*reached));
                }
                per_seed.push_back({{"seed", seeds[s]},
                                    {"final_eval_loss", nan_to_null(arm.runs[s].back().eval_loss)},
                                    {"cum_bytes", arm.total_bytes[s]},
                                    {"cum_block_bytes", arm.block_bytes[s]},
                                    {"param_steps", arm.param_steps[s]},
                                    {"bytes_to_target", reached ? json(*reached) : json(nullptr)}});
            }
            modes[arm.label] = {
                {"config", config_a.string()},
                {"mode", to_string(arm.config.fed.mode)},
                {"final_eval_loss_median", nan_to_null(median(finals[i]))},
                {"cum_block_bytes", arm.block_bytes.front()},
                {"cum_bytes", arm.total_bytes.front()},
                {"bytes_to_target_median",
                 all_reached ? nan_to_null(median(to_target)) : json(nullptr)},
                {"runs", per_seed},
            };
        }
        modes["b"]["config"] = config_b.string();

        const Rational block_ratio = Rational::make(arms[1].block_bytes.front(), arms[0].block_bytes.front());
        json result = {
            {"schema_version", kSchemaVersion},
            {"seeds", seeds},
            {"target_loss", nan_to_null(target)},
            {"modes", modes},
            {"block_bytes_ratio_b_over_a", block_ratio.str()},
            {"block_bytes_ratio_b_over_a_value", block_ratio.value()},
        };
        const bool a_grows = a.fed.mode == Mode::feddt;
        if (a.fed.mode != b.fed.mode) {
            const auto cmp = compare_at_equal_bytes(a_grows ? arms[0].runs : arms[1].runs,
                                                    a_grows ? arms[1].runs : arms[0].runs);
            result["equal_bytes"] = {{"feddt_not_worse", cmp.holds},   {"from_bytes", cmp.from_bytes},
                                     {"to_bytes", cmp.to_bytes},       {"points", cmp.points},
                                     {"worst_gap", cmp.worst_gap},     {"worst_bytes", cmp.worst_bytes}};
        }
        write_file(out_dir / "compare.json", result.dump(2) + "\n");
        out << "a (" << to_string(a.fed.mode) << ") median final eval loss " << format_double(median(finals[0]))
            << ", block bytes " << arms[0].block_bytes.front() << "\n";
        out << "b (" << to_string(b.fed.mode) << ") median final eval loss " << format_double(median(finals[1]))
            << ", block bytes " << arms[1].block_bytes.front() << "\n";
        out << "block bytes b/a = " << block_ratio.str() << "\n";
        return kExitOk;
    } catch (const Error& e) {
        return report_error(e, err);
    }
}

int cmd_cost(const CostInputs& in, bool as_json, std::ostream& out, std::ostream& err) {
    try {
        in.validate();
        const Rational fedt = fedt_total(in);
        const Rational series = feddt_total_series(in);
        const Rational reference = feddt_total_reference(in);
        const ReductionRatio ratio = reduction_ratio(in);
        const Rational factor = series / reference;
        std::ostringstream table;
        auto row = [&](const std::string& label, const std::string& value) {
            table << std::left << std::setw(44) << label << value << "\n";
        };
        auto fixed4 = [](double x) {
            std::ostringstream s;
            s << std::fixed << std::setprecision(4) << x;
            return s.str();
        };
        if (as_json) {
            json j = {
                {"schema_version", kSchemaVersion},
                {"inputs", {{"T", in.rounds}, {"c", in.parts}, {"N", in.blocks}, {"W1", in.w1}, {"W2", in.w2}}},
                {"fedt_total", fedt.str()},
                {"feddt_series_total", series.str()},
                {"feddt_reference_total", reference.str()},
                {"series_ratio", ratio.series.str()},
                {"series_ratio_value", ratio.series.value()},
                {"reference_ratio", ratio.reference.str()},
                {"reference_ratio_value", ratio.reference.value()},
                {"series_over_reference", factor.str()},
                {"note", "the reference formula undercounts the stage sum by N(c+1)/(N+1)"},
            };
            out << j.dump(2) << "\n";
            return kExitOk;
        }
        row("inputs", "T=" + std::to_string(in.rounds) + " c=" + std::to_string(in.parts) +
                          " N=" + std::to_string(in.blocks) + " W1=" + std::to_string(in.w1) +
                          " W2=" + std::to_string(in.w2));
        row("FedT total  T*N*(W1+W2)", fedt.str());
        row("FedDT stage-sum total", series.str());
        row("FedDT reference formula (T/2c)(N+1)(W1+W2)", reference.str());
        row("series ratio (c+1)/(2c)", ratio.series.str() + " = " + fixed4(ratio.series.value()));
        row("reference ratio 1/(2c)+1/(2cN)", ratio.reference.str() + " = " + fixed4(ratio.reference.value()));
        row("stage-sum / reference formula", factor.str());
        out << table.str();
        if (!(series == reference)) {
            out << "note: the reference formula differs from the stage sum by N(c+1)/(N+1); the stage sum is what "
                   "the simulator meters\n";
        }
        return kExitOk;
    } catch (const Error& e) {
        return report_error(e, err);
    }
}

int cmd_gradcheck(std::uint64_t seed, const std::optional<std::string>& fault_op, std::ostream& out,
                  std::ostream& err) {
    try {
        std::optional<ad::ScopedBackwardFault> fault;
        if (fault_op) {
            fault.emplace(*fault_op);
        }
        const GradcheckReport ops = gradcheck_ops(seed);
        const GradcheckReport model = gradcheck_model(seed);
        std::size_t checked = 0;
        for (const auto* r : {&ops, &model}) {
            for (const auto& e : r->entries) {
                checked += e.checked;
            }
        }
        GradcheckReport all = ops;
        all.entries.insert(all.entries.end(), model.entries.begin(), model.entries.end());
        const GradcheckEntry* worst = all.worst();
        out << "ops: " << ops.entries.size() << " inputs, max rel err " << format_double(ops.max_rel_error())
            << "\n";
        out << "model: " << model.entries.size() << " tensors, max rel err " << format_double(model.max_rel_error())
            << "\n";
        out << "checked " << checked << " elements; worst " << worst->name << "[" << worst->worst_index
            << "] rel_err=" << format_double(worst->max_rel_error) << " analytic=" << format_double(worst->analytic)
            << " numeric=" << format_double(worst->numeric) << "\n";
        if (all.passed()) {
            out << "PASS (tolerance " << format_double(kGradcheckTolerance) << ")\n";
            return kExitOk;
        }
        const GradcheckEntry* op_worst = ops.worst();
        out << "FAIL (tolerance " << format_double(kGradcheckTolerance) << ")";
        if (op_worst && !ops.passed()) {
            out << " op " << op_worst->name;
        }
        out << "\n";
        return kExitVerification;
    } catch (const Error& e) {
        return report_error(e, err);
    }
}

}  // namespace fdt
