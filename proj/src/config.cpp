#include "fdt/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "fdt/errors.hpp"

namespace fdt {

std::string format_double(double value) {
    if (std::isnan(value)) {
        return "nan";
    }
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, end);
}

namespace {

struct Field {
    const char* section;
    const char* key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

[[noreturn]] void bad_value(const std::string& where, const std::string& value, const char* expected) {
    throw ConfigError(where + ": expected " + expected + ", got \"" + value + "\"");
}

std::uint64_t parse_u64(const std::string& where, const std::string& s) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
        bad_value(where, s, "a non-negative integer");
    }
    return v;
}

double parse_f64(const std::string& where, const std::string& s) {
    double v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
        bad_value(where, s, "a finite number");
    }
    return v;
}

bool parse_bool(const std::string& where, const std::string& s) {
    if (s == "true") {
        return true;
    }
    if (s == "false") {
        return false;
    }
    bad_value(where, s, "true or false");
}

std::vector<std::size_t> parse_list(const std::string& where, const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        const auto e = item.find_last_not_of(" \t");
        out.push_back(parse_u64(where, b == std::string::npos ? "" : item.substr(b, e - b + 1)));
    }
    return out;
}

std::string join(const std::vector<std::size_t>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out += (i ? "," : "") + std::to_string(xs[i]);
    }
    return out;
}

#define FDT_SIZE(sec, name, member)                                                                   \
    Field {                                                                                           \
        sec, name, [](ExperimentConfig& c, const std::string& s) { c.member = parse_u64(sec "." name, s); }, \
            [](const ExperimentConfig& c) { return std::to_string(c.member); }                       \
    }
#define FDT_REAL(sec, name, member)                                                                   \
    Field {                                                                                           \
        sec, name, [](ExperimentConfig& c, const std::string& s) { c.member = parse_f64(sec "." name, s); }, \
            [](const ExperimentConfig& c) { return format_double(c.member); }                        \
    }
#define FDT_BOOL(sec, name, member)                                                                    \
    Field {                                                                                            \
        sec, name, [](ExperimentConfig& c, const std::string& s) { c.member = parse_bool(sec "." name, s); }, \
            [](const ExperimentConfig& c) { return std::string(c.member ? "true" : "false"); }        \
    }

const std::vector<Field>& schema() {
    static const std::vector<Field> fields = {
        FDT_SIZE("model", "vocab_size", model.vocab_size),
        FDT_SIZE("model", "frame_dim", model.frame_dim),
        FDT_SIZE("model", "d_model", model.d_model),
        FDT_SIZE("model", "heads", model.heads),
        FDT_SIZE("model", "ffn_dim", model.ffn_dim),
        FDT_SIZE("model", "target_layers", model.target_layers),
        FDT_SIZE("model", "growth_parts", model.growth_parts),
        FDT_SIZE("model", "max_seq_len", model.max_seq_len),
        FDT_BOOL("scaling", "literal_division", model.literal_division),
        Field{"federated", "mode",
              [](ExperimentConfig& c, const std::string& s) {
                  if (s == "fedt") {
                      c.fed.mode = Mode::fedt;
                  } else if (s == "feddt") {
                      c.fed.mode = Mode::feddt;
                  } else {
                      bad_value("federated.mode", s, "fedt or feddt");
                  }
              },
              [](const ExperimentConfig& c) { return to_string(c.fed.mode); }},
        FDT_SIZE("federated", "num_clients", fed.num_clients),
        FDT_SIZE("federated", "clients_per_round", fed.clients_per_round),
        FDT_SIZE("federated", "batch_size", fed.batch_size),
        FDT_REAL("federated", "lr", fed.lr),
        Field{"federated", "optimizer",
              [](ExperimentConfig& c, const std::string& s) {
                  if (s == "adam") {
                      c.fed.optimizer = OptimizerKind::adam;
                  } else if (s == "sgd") {
                      c.fed.optimizer = OptimizerKind::sgd;
                  } else {
                      bad_value("federated.optimizer", s, "adam or sgd");
                  }
              },
              [](const ExperimentConfig& c) { return to_string(c.fed.optimizer); }},
        FDT_BOOL("federated", "reset_moments_on_growth", fed.reset_moments_on_growth),
        Field{"federated", "codec",
              [](ExperimentConfig& c, const std::string& s) {
                  if (s == "identity") {
                      c.fed.codec = CodecKind::identity;
                  } else if (s == "sealed") {
                      c.fed.codec = CodecKind::sealed;
                  } else {
                      bad_value("federated.codec", s, "identity or sealed");
                  }
              },
              [](const ExperimentConfig& c) { return to_string(c.fed.codec); }},
        FDT_SIZE("federated", "seed", fed.seed),
        FDT_SIZE("schedule", "rounds", fed.rounds),
        FDT_SIZE("schedule", "local_iters", fed.local_iters),
        FDT_REAL("adam", "beta1", fed.beta1),
        FDT_REAL("adam", "beta2", fed.beta2),
        FDT_REAL("adam", "epsilon", fed.epsilon),
        FDT_SIZE("task", "seed", task.seed),
        FDT_SIZE("task", "min_len", task.min_len),
        FDT_SIZE("task", "max_len", task.max_len),
        FDT_SIZE("task", "frames_per_token", task.frames_per_token),
        FDT_BOOL("task", "position_bias", task.position_bias),
        FDT_SIZE("task", "train_samples", task.train_samples),
        FDT_SIZE("task", "test_samples", task.test_samples),
        FDT_SIZE("task", "holdout_seed", task.holdout_seed),
        Field{"split", "kind",
              [](ExperimentConfig& c, const std::string& s) {
                  if (s == "balanced") {
                      c.split.kind = SplitKind::balanced;
                  } else if (s == "ratios") {
                      c.split.kind = SplitKind::ratios;
                  } else {
                      bad_value("split.kind", s, "balanced or ratios");
                  }
              },
              [](const ExperimentConfig& c) {
                  return std::string(c.split.kind == SplitKind::balanced ? "balanced" : "ratios");
              }},
        Field{"split", "ratios",
              [](ExperimentConfig& c, const std::string& s) { c.split.ratios = parse_list("split.ratios", s); },
              [](const ExperimentConfig& c) { return join(c.split.ratios); }},
        FDT_SIZE("split", "seed", split.seed),
        FDT_BOOL("run", "verify_growth", fed.verify_growth),
        FDT_SIZE("run", "probe_samples", fed.probe_samples),
    };
    return fields;
}

#undef FDT_SIZE
#undef FDT_REAL
#undef FDT_BOOL

}  // namespace

void ExperimentConfig::validate() const {
    model.validate();
    fed.validate();
    if (task.min_len == 0 || task.min_len > task.max_len) {
        throw ConfigError("task.min_len/max_len: need 1 <= min_len <= max_len");
    }
    if (task.frames_per_token == 0) {
        throw ConfigError("task.frames_per_token must be positive");
    }
    if (task.max_len > model.max_seq_len || task.max_len * task.frames_per_token > model.max_seq_len) {
        throw ConfigError("task.max_len: " + std::to_string(task.max_len) + " tokens x " +
                          std::to_string(task.frames_per_token) + " frames exceeds model.max_seq_len=" +
                          std::to_string(model.max_seq_len));
    }
    if (task.test_samples == 0) {
        throw ConfigError("task.test_samples must be positive");
    }
    if (task.train_samples < fed.num_clients) {
        throw ConfigError("task.train_samples must be at least federated.num_clients");
    }
    if (split.kind == SplitKind::ratios) {
        if (split.ratios.size() != fed.num_clients) {
            throw ConfigError("split.ratios has " + std::to_string(split.ratios.size()) +
                              " entries, federated.num_clients is " + std::to_string(fed.num_clients));
        }
        for (auto r : split.ratios) {
            if (r == 0) {
                throw ConfigError("split.ratios entries must be positive");
            }
        }
        for (auto n : split_sizes(task.train_samples, split_spec())) {
            if (n == 0) {
                throw ConfigError("split.ratios leaves a client with no samples");
            }
        }
    } else if (!split.ratios.empty()) {
        throw ConfigError("split.ratios is only allowed with split.kind = ratios");
    }
    if (fed.mode == Mode::feddt) {
        GrowthSchedule::uniform(fed.rounds, model.growth_parts, model.target_layers, fed.local_iters);
    }
}

SplitSpec ExperimentConfig::split_spec() const {
    return split.kind == SplitKind::balanced ? SplitSpec::balanced(fed.num_clients)
                                             : SplitSpec::from_ratios(split.ratios);
}

bool ExperimentConfig::same_data(const ExperimentConfig& other) const {
    return task == other.task && split == other.split && fed.num_clients == other.fed.num_clients &&
           model.vocab_size == other.model.vocab_size && model.frame_dim == other.model.frame_dim;
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(origin + ": line " + std::to_string(e.line()) + ": " + e.message());
    }
    std::map<std::pair<std::string, std::string>, const Field*> index;
    for (const auto& f : schema()) {
        index[{f.section, f.key}] = &f;
    }
    ExperimentConfig config;
    for (const auto& [section, body] : tree) {
        if (!body.data().empty()) {
            throw ConfigError(origin + ": key \"" + section + "\" outside of a section");
        }
        for (const auto& [key, value] : body) {
            auto it = index.find({section, key});
            if (it == index.end()) {
                throw ConfigError(origin + ": unknown key " + section + "." + key);
            }
            it->second->set(config, value.get_value<std::string>());
        }
    }
    config.validate();
    return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read config file " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> describe(
    const ExperimentConfig& config) {
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> out;
    for (const auto& f : schema()) {
        if (out.empty() || out.back().first != f.section) {
            out.push_back({f.section, {}});
        }
        out.back().second.emplace_back(f.key, f.get(config));
    }
    return out;
}

std::string to_ini(const ExperimentConfig& config) {
    std::string out;
    for (const auto& [section, fields] : describe(config)) {
        out += (out.empty() ? "[" : "\n[") + section + "]\n";
        for (const auto& [key, value] : fields) {
            out += key + " = " + value + "\n";
        }
    }
    return out;
}

}  // namespace fdt
