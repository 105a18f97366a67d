#include <algorithm>
#include <cmath>
#include <charconv>
#include <fstream>
#include <sstream>

#include "icl/harness.hpp"

namespace icl {

namespace {

enum class Type { Int, Real, Bool, Text, List, Path, Choice };

struct KeySpec {
    const char* key;
    Type type;
    const char* def;  // nullptr: required
    const char* help;
    const char* choices = "";  // comma-separated, for Choice
};

const std::vector<KeySpec>& common_keys() {
    static const std::vector<KeySpec> k = {
        {"kind", Type::Text, nullptr, "run kind"},
        {"seed", Type::Int, nullptr, "root seed; every random stream derives from it"},
        {"out", Type::Text, "out", "output directory"},
        {"emit_csv", Type::Bool, "1", "write CSV tables"},
        {"emit_svg", Type::Bool, "1", "write SVG charts"},
        {"emit_traces", Type::Bool, "0", "write attention traces"},
    };
    return k;
}

const std::map<std::string, std::vector<KeySpec>>& kind_keys() {
    static const std::map<std::string, std::vector<KeySpec>> k = {
        {"segment",
         {{"input", Type::Path, nullptr, "token file, one whitespace-separated sequence"},
          {"model", Type::Path, nullptr, "n-gram model TSV"},
          {"delims", Type::List, nullptr, "delimiter token names"},
          {"compiled", Type::Bool, "0", "also run the compiled transformer"},
          {"gamma_tol", Type::Real, "1e-8", "off-max attention mass for the compiled run"}}},
        {"seg-sweep",
         {{"c", Type::Real, "2", "per-chunk gap"},
          {"nu", Type::Real, "1e-4", "probability floor"},
          {"n_delims", Type::Int, "8", "delimiter count"},
          {"delta", Type::Real, "0.1", "target error"},
          {"trials", Type::Int, "500", "trials per n"},
          {"n_grid", Type::List, "auto", "example counts; auto spans 0 to the bound"},
          {"corpus_docs", Type::Int, "2000", "documents fitted for the base model"},
          {"alpha", Type::Real, "0.1", "additive smoothing"},
          {"x_vocab", Type::Int, "6", "x content tokens"},
          {"y_vocab", Type::Int, "4", "y content tokens"},
          {"gap_trials", Type::Int, "50", "samples for the gap estimate"}}},
        {"sparse-1",
         {{"m", Type::Int, nullptr, "coordinates per example"},
          {"dist", Type::Choice, nullptr, "x distribution", "gaussian,rademacher"},
          {"eps", Type::Real, "0.05", "bucket width"},
          {"tau", Type::Real, "2", "near-orthogonality scale"},
          {"n", Type::Int, "64", "examples"},
          {"embed", Type::Choice, "projection", "embedding mode", "projection,onehot"},
          {"delta", Type::Real, "0.1", "projection failure probability"},
          {"trace_examples", Type::Int, "4", "examples shown in attention heatmaps"}}},
        {"sparse-s",
         {{"m", Type::Int, nullptr, "coordinates per example"},
          {"s", Type::Int, nullptr, "support size"},
          {"dist", Type::Choice, nullptr, "x distribution", "gaussian,rademacher"},
          {"eps", Type::Real, "0.05", "bucket width"},
          {"tau", Type::Real, "auto", "near-orthogonality scale; auto is max(2, 2s)"},
          {"n", Type::Int, "128", "examples"},
          {"embed", Type::Choice, "onehot", "embedding mode", "projection,onehot"},
          {"delta", Type::Real, "0.1", "projection failure probability"},
          {"stacked", Type::Bool, "0", "also run the stacked layers"}}},
        {"vector",
         {{"m", Type::Int, nullptr, "coordinates per example"},
          {"dist", Type::Choice, nullptr, "x distribution", "gaussian,rademacher"},
          {"eps", Type::Real, "0.05", "bucket width"},
          {"tau", Type::Real, "auto", "threshold scale; auto is 2m + 1"},
          {"gamma", Type::Real, "50", "bit attention scale"},
          {"n", Type::Int, "64", "examples"}}},
        {"risk-sweep",
         {{"m", Type::Int, "8", "coordinates per example"},
          {"s_list", Type::List, "1,2", "support sizes"},
          {"dist", Type::Choice, "gaussian", "x distribution", "gaussian,rademacher"},
          {"eps", Type::Real, "0.05", "accuracy target"},
          {"K", Type::Real, "1", "sample-size constant"},
          {"tasks", Type::Int, "100", "random tasks per support size"},
          {"n_test", Type::Int, "2000", "fresh draws per risk estimate"},
          {"delta", Type::Real, "0.1", "confidence for the disagreement bound"}}},
    };
    return k;
}

const KeySpec* find_key(const std::string& kind, const std::string& key) {
    for (const auto& s : common_keys())
        if (key == s.key) return &s;
    const auto it = kind_keys().find(kind);
    if (it == kind_keys().end()) return nullptr;
    for (const auto& s : it->second)
        if (key == s.key) return &s;
    return nullptr;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

bool parse_int(const std::string& v, std::int64_t& out) {
    const char* b = v.data();
    const char* e = b + v.size();
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && p == e;
}

bool parse_real(const std::string& v, double& out) {
    const char* b = v.data();
    const char* e = b + v.size();
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && p == e && std::isfinite(out);
}

void check_value(const KeySpec& s, const std::string& v, const std::filesystem::path& base) {
    const std::string where = std::string("key '") + s.key + "': ";
    if (v.empty()) throw ConfigError(where + "empty value");
    std::int64_t i = 0;
    double r = 0.0;
    switch (s.type) {
        case Type::Int:
            if (!parse_int(v, i) || i < 0) throw ConfigError(where + "expected a nonnegative integer, got '" + v + "'");
            break;
        case Type::Real:
            if (v == "auto" && std::string(s.def ? s.def : "") == "auto") break;
            if (!parse_real(v, r)) throw ConfigError(where + "expected a real number, got '" + v + "'");
            break;
        case Type::Bool:
            if (v != "0" && v != "1") throw ConfigError(where + "expected 0 or 1, got '" + v + "'");
            break;
        case Type::Choice: {
            const auto ok = split_list(s.choices);
            if (std::find(ok.begin(), ok.end(), v) == ok.end())
                throw ConfigError(where + "expected one of " + s.choices + ", got '" + v + "'");
            break;
        }
        case Type::List:
            for (const auto& item : split_list(v))
                if (item.empty()) throw ConfigError(where + "empty list item");
            break;
        case Type::Path: {
            const std::filesystem::path p = std::filesystem::path(v).is_absolute() ? std::filesystem::path(v) : base / v;
            if (!std::filesystem::exists(p)) throw ConfigError(where + "file not found: " + p.string());
            break;
        }
        case Type::Text:
            break;
    }
}

}  // namespace

const std::vector<std::string>& run_kinds() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> v;
        for (const auto& [name, keys] : kind_keys()) v.push_back(name);
        return v;
    }();
    return k;
}

std::vector<KeyDoc> config_keys(const std::string& kind) {
    const auto it = kind_keys().find(kind);
    if (it == kind_keys().end()) throw ConfigError("unknown run kind '" + kind + "'");
    std::vector<KeyDoc> out;
    for (const auto* group : {&common_keys(), &it->second})
        for (const auto& s : *group) out.push_back({s.key, s.def ? s.def : "", s.help});
    return out;
}

RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (!kv.emplace(key, trim(line.substr(eq + 1))).second)
            throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }

    RunConfig c;
    c.base_dir = base_dir;
    const auto kind = kv.find("kind");
    if (kind == kv.end()) throw ConfigError("missing required key 'kind'");
    if (!kind_keys().contains(kind->second)) throw ConfigError("unknown run kind '" + kind->second + "'");
    c.kind = kind->second;

    for (const auto& [k, v] : kv) {
        const KeySpec* s = find_key(c.kind, k);
        if (!s) throw ConfigError("unknown key '" + k + "' for kind " + c.kind);
        check_value(*s, v, base_dir);
    }
    for (const auto* group : {&common_keys(), &kind_keys().at(c.kind)})
        for (const auto& s : *group)
            if (!s.def && !kv.contains(s.key)) throw ConfigError(std::string("missing required key '") + s.key + "'");

    std::int64_t seed = 0;
    parse_int(kv.at("seed"), seed);
    c.seed = static_cast<std::uint64_t>(seed);
    c.explicit_values = std::move(kv);
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), path.parent_path());
}

std::string dump_config(const RunConfig& c) {
    std::string out;
    for (const auto& [k, v] : c.explicit_values) out += k + "=" + v + "\n";
    return out;
}

std::string RunConfig::get(const std::string& key) const {
    const KeySpec* s = find_key(kind, key);
    if (!s) throw ConfigError("key '" + key + "' not defined for kind " + kind);
    const auto it = explicit_values.find(key);
    if (it != explicit_values.end()) return it->second;
    if (!s->def) throw ConfigError("missing required key '" + key + "'");
    return s->def;
}

double RunConfig::real(const std::string& key) const {
    double r = 0.0;
    const std::string v = get(key);
    if (!parse_real(v, r)) throw ConfigError("key '" + key + "' is not a real number");
    return r;
}

std::int64_t RunConfig::integer(const std::string& key) const {
    std::int64_t i = 0;
    if (!parse_int(get(key), i)) throw ConfigError("key '" + key + "' is not an integer");
    return i;
}

bool RunConfig::flag(const std::string& key) const { return get(key) == "1"; }

std::vector<std::string> RunConfig::list(const std::string& key) const { return split_list(get(key)); }

std::filesystem::path RunConfig::path(const std::string& key) const {
    const std::filesystem::path p = get(key);
    return p.is_absolute() ? p : base_dir / p;
}

}  // namespace icl
