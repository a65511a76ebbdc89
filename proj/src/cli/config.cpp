#include "cllora/cli/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fmt/format.h>
#include <fstream>
#include <functional>
#include <sstream>

#include "cllora/errors.hpp"
#include "cllora/numerics/rng.hpp"

namespace cllora::cli {

namespace {

std::string trim(std::string_view s) {
    std::size_t a = 0;
    std::size_t b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) {
        ++a;
    }
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) {
        --b;
    }
    return std::string(s.substr(a, b - a));
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw UsageError(fmt::format("config key '{}': expected a non-negative integer, got '{}'", key, v));
    }
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size()) {
        throw UsageError(fmt::format("config key '{}': expected a number, got '{}'", key, v));
    }
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        return false;
    }
    throw UsageError(fmt::format("config key '{}': expected true or false, got '{}'", key, v));
}

std::string num(double v) { return fmt::format("{}", v); }
std::string boolean(bool v) { return v ? "true" : "false"; }

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& fmt_one) {
    std::string s;
    for (const auto& x : items) {
        if (!s.empty()) {
            s += ',';
        }
        s += fmt_one(x);
    }
    return s;
}

struct Key {
    std::string name;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<Key>& keys() {
    static const std::vector<Key> k = {
        {"seed", [](auto& c, auto& v) { c.seed = to_u64("seed", v); }, [](auto& c) { return std::to_string(c.seed); }},
        {"out", [](auto& c, auto& v) { c.out = v; }, [](auto& c) { return c.out.string(); }},
        {"corpus.source", [](auto& c, auto& v) { c.corpus.source = v; }, [](auto& c) { return c.corpus.source; }},
        {"corpus.format", [](auto& c, auto& v) { c.corpus.format = parse_corpus_format(v); },
         [](auto& c) { return std::string(to_string(c.corpus.format)); }},
        {"corpus.synth_docs", [](auto& c, auto& v) { c.corpus.synth_docs = to_u64("corpus.synth_docs", v); },
         [](auto& c) { return std::to_string(c.corpus.synth_docs); }},
        {"corpus.synth_seed", [](auto& c, auto& v) { c.corpus.synth_seed = to_u64("corpus.synth_seed", v); },
         [](auto& c) { return std::to_string(c.corpus.synth_seed); }},
        {"corpus.synth_profile", [](auto& c, auto& v) { c.corpus.synth_profile.kind = parse_length_profile(v); },
         [](auto& c) { return std::string(to_string(c.corpus.synth_profile.kind)); }},
        {"corpus.synth_min_length",
         [](auto& c, auto& v) { c.corpus.synth_profile.min_length = to_u64("corpus.synth_min_length", v); },
         [](auto& c) { return std::to_string(c.corpus.synth_profile.min_length); }},
        {"corpus.synth_max_length",
         [](auto& c, auto& v) { c.corpus.synth_profile.max_length = to_u64("corpus.synth_max_length", v); },
         [](auto& c) { return std::to_string(c.corpus.synth_profile.max_length); }},
        {"corpus.test_fraction", [](auto& c, auto& v) { c.corpus.test_fraction = to_double("corpus.test_fraction", v); },
         [](auto& c) { return num(c.corpus.test_fraction); }},
        {"partition.mode", [](auto& c, auto& v) { c.partition.mode = parse_partition_mode(v); },
         [](auto& c) { return std::string(to_string(c.partition.mode)); }},
        {"partition.alpha", [](auto& c, auto& v) { c.partition.alpha = to_double("partition.alpha", v); },
         [](auto& c) { return num(c.partition.alpha); }},
        {"partition.clients",
         [](auto& c, auto& v) {
             c.partition.n_clients = to_u64("partition.clients", v);
             c.fed.n_clients = c.partition.n_clients;
         },
         [](auto& c) { return std::to_string(c.partition.n_clients); }},
        {"partition.shards", [](auto& c, auto& v) { c.shards = v; }, [](auto& c) { return c.shards.string(); }},
        {"fed.fraction", [](auto& c, auto& v) { c.fed.fraction = to_double("fed.fraction", v); },
         [](auto& c) { return num(c.fed.fraction); }},
        {"fed.rounds", [](auto& c, auto& v) { c.fed.rounds = to_u64("fed.rounds", v); },
         [](auto& c) { return std::to_string(c.fed.rounds); }},
        {"fed.epochs", [](auto& c, auto& v) { c.fed.epochs = to_u64("fed.epochs", v); },
         [](auto& c) { return std::to_string(c.fed.epochs); }},
        {"fed.learning_rate", [](auto& c, auto& v) { c.fed.learning_rate = to_double("fed.learning_rate", v); },
         [](auto& c) { return num(c.fed.learning_rate); }},
        {"fed.batch_size", [](auto& c, auto& v) { c.fed.batch_size = to_u64("fed.batch_size", v); },
         [](auto& c) { return std::to_string(c.fed.batch_size); }},
        {"fed.parallel_clients", [](auto& c, auto& v) { c.fed.parallel_clients = to_bool("fed.parallel_clients", v); },
         [](auto& c) { return boolean(c.fed.parallel_clients); }},
        {"fed.product_diagnostic",
         [](auto& c, auto& v) { c.fed.product_diagnostic = to_bool("fed.product_diagnostic", v); },
         [](auto& c) { return boolean(c.fed.product_diagnostic); }},
        {"fed.client_test", [](auto& c, auto& v) { c.fed.client_test = parse_client_test_mode(v); },
         [](auto& c) { return std::string(to_string(c.fed.client_test)); }},
        {"fed.holdout_fraction",
         [](auto& c, auto& v) { c.fed.holdout_fraction = to_double("fed.holdout_fraction", v); },
         [](auto& c) { return num(c.fed.holdout_fraction); }},
        {"model.d_model", [](auto& c, auto& v) { c.model.d_model = to_u64("model.d_model", v); },
         [](auto& c) { return std::to_string(c.model.d_model); }},
        {"model.n_layers", [](auto& c, auto& v) { c.model.n_layers = to_u64("model.n_layers", v); },
         [](auto& c) { return std::to_string(c.model.n_layers); }},
        {"model.n_heads", [](auto& c, auto& v) { c.model.n_heads = to_u64("model.n_heads", v); },
         [](auto& c) { return std::to_string(c.model.n_heads); }},
        {"model.d_ff", [](auto& c, auto& v) { c.model.d_ff = to_u64("model.d_ff", v); },
         [](auto& c) { return std::to_string(c.model.d_ff); }},
        {"model.max_seq_len", [](auto& c, auto& v) { c.model.max_seq_len = to_u64("model.max_seq_len", v); },
         [](auto& c) { return std::to_string(c.model.max_seq_len); }},
        {"model.lora_rank", [](auto& c, auto& v) { c.model.lora_rank = to_u64("model.lora_rank", v); },
         [](auto& c) { return std::to_string(c.model.lora_rank); }},
        {"model.lora_targets", [](auto& c, auto& v) { c.model.lora_targets = parse_lora_targets(v); },
         [](auto& c) { return format_lora_targets(c.model.lora_targets); }},
        {"model.lora_init_std", [](auto& c, auto& v) { c.model.lora_init_std = to_double("model.lora_init_std", v); },
         [](auto& c) { return num(c.model.lora_init_std); }},
        {"metrics.patience", [](auto& c, auto& v) { c.overfit_patience = to_u64("metrics.patience", v); },
         [](auto& c) { return std::to_string(c.overfit_patience); }},
        {"sweep.alphas",
         [](auto& c, auto& v) {
             c.sweep.alphas.clear();
             for (const auto& a : split_list(v)) {
                 c.sweep.alphas.push_back(to_double("sweep.alphas", a));
             }
         },
         [](auto& c) { return join(c.sweep.alphas, [](double a) { return num(a); }); }},
        {"sweep.modes",
         [](auto& c, auto& v) {
             c.sweep.modes.clear();
             for (const auto& m : split_list(v)) {
                 c.sweep.modes.push_back(parse_partition_mode(m));
             }
         },
         [](auto& c) { return join(c.sweep.modes, [](PartitionMode m) { return std::string(to_string(m)); }); }},
        {"sweep.seeds",
         [](auto& c, auto& v) {
             c.sweep.seeds.clear();
             for (const auto& s : split_list(v)) {
                 c.sweep.seeds.push_back(to_u64("sweep.seeds", s));
             }
         },
         [](auto& c) { return join(c.sweep.seeds, [](std::uint64_t s) { return std::to_string(s); }); }},
        {"sweep.parallel", [](auto& c, auto& v) { c.sweep.parallel = to_bool("sweep.parallel", v); },
         [](auto& c) { return boolean(c.sweep.parallel); }},
    };
    return k;
}

std::string env_name(const std::string& key) {
    std::string s = "CLLORA_";
    for (char ch : key) {
        s.push_back(ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    }
    return s;
}

} // namespace

std::uint64_t ExperimentConfig::split_seed() const { return splitmix64(seed ^ fnv1a64("split")); }
std::uint64_t ExperimentConfig::partition_seed() const { return splitmix64(seed ^ fnv1a64("partition")); }
std::uint64_t ExperimentConfig::model_seed() const { return splitmix64(seed ^ fnv1a64("model")); }
std::uint64_t ExperimentConfig::federation_seed() const { return splitmix64(seed ^ fnv1a64("federation")); }

std::filesystem::path ExperimentConfig::shard_path() const { return shards.empty() ? out / "shards.jsonl" : shards; }

void ExperimentConfig::validate() const {
    if (corpus.source.empty()) {
        throw UsageError("corpus.source must be 'synthetic' or a file path");
    }
    if (!(corpus.test_fraction > 0.0 && corpus.test_fraction < 0.5)) {
        throw UsageError(fmt::format("corpus.test_fraction must be in (0, 0.5), got {}", corpus.test_fraction));
    }
    partition.validate();
    FedConfig f = fed;
    f.n_clients = partition.n_clients;
    f.validate();
    model.validate();
    if (overfit_patience < 1) {
        throw UsageError("metrics.patience must be at least 1");
    }
}

std::map<std::string, std::string> ExperimentConfig::to_map() const {
    std::map<std::string, std::string> m;
    for (const auto& k : keys()) {
        m[k.name] = k.get(*this);
    }
    return m;
}

std::string ExperimentConfig::serialize() const {
    std::string s;
    for (const auto& [k, v] : to_map()) {
        s += k + " = " + v + "\n";
    }
    return s;
}

ExperimentConfig default_config() { return ExperimentConfig{}; }

KeyValues parse_key_values(const std::string& text, const std::string& source_name) {
    KeyValues kv;
    std::stringstream ss(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        auto t = trim(line);
        if (t.empty() || t[0] == '#') {
            continue;
        }
        auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw UsageError(fmt::format("{}:{}: expected 'key = value'", source_name, line_no));
        }
        auto key = trim(std::string_view(t).substr(0, eq));
        auto value = trim(std::string_view(t).substr(eq + 1));
        if (key.empty()) {
            throw UsageError(fmt::format("{}:{}: empty key", source_name, line_no));
        }
        kv[key] = value;
    }
    return kv;
}

KeyValues read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw UsageError(fmt::format("cannot read config file '{}'", path.string()));
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_key_values(ss.str(), path.string());
}

ExperimentConfig apply_overrides(ExperimentConfig base, const KeyValues& entries) {
    for (const auto& [name, value] : entries) {
        auto it = std::find_if(keys().begin(), keys().end(), [&](const Key& k) { return k.name == name; });
        if (it == keys().end()) {
            throw UsageError(fmt::format("unknown config key '{}'", name));
        }
        it->set(base, value);
    }
    base.fed.n_clients = base.partition.n_clients;
    return base;
}

KeyValues environment_overrides() {
    KeyValues kv;
    for (const auto& k : keys()) {
        if (const char* v = std::getenv(env_name(k.name).c_str())) {
            kv[k.name] = v;
        }
    }
    return kv;
}

std::vector<std::string> known_keys() {
    std::vector<std::string> out;
    for (const auto& k : keys()) {
        out.push_back(k.name);
    }
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace cllora::cli
