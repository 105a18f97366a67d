#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "icl/sparse_icl.hpp"
#include "icl/tf_core.hpp"

namespace icl {

// Bad or missing configuration; the CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A module failure during a run, prefixed with the run kind.
class RunError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kHarnessVersion = "icl-mech/1";
inline constexpr const char* kOutDirEnv = "ICL_MECH_OUT";

const std::vector<std::string>& run_kinds();

struct RunConfig {
    std::string kind;
    std::uint64_t seed = 0;
    // Keys set in the file, values trimmed. Defaults are not stored here.
    std::map<std::string, std::string> explicit_values;
    std::filesystem::path base_dir;  // relative paths resolve against this

    // Value of a key for this kind, falling back to its documented default.
    std::string get(const std::string& key) const;
    double real(const std::string& key) const;
    std::int64_t integer(const std::string& key) const;
    bool flag(const std::string& key) const;
    std::vector<std::string> list(const std::string& key) const;
    std::filesystem::path path(const std::string& key) const;
};

struct KeyDoc {
    std::string key;
    std::string default_value;  // empty means required
    std::string help;
};
// Keys accepted for a kind, including the common ones.
std::vector<KeyDoc> config_keys(const std::string& kind);

RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);
// Sorted key=value lines of the explicitly set keys, one per line.
std::string dump_config(const RunConfig& c);

struct ResultTable {
    std::string schema;  // e.g. "sparse-1.loss/1"
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    std::vector<bool> integral;  // per column; printed without a fraction

    void add_row(std::vector<double> r);
    std::size_t col(const std::string& name) const;
    std::vector<double> column(const std::string& name) const;
};

// RFC-4180 text; first column is "schema", repeated on every row.
std::string to_csv(const ResultTable& t);
// Inverse of to_csv; every value column must be numeric.
ResultTable from_csv(const std::string& text);

// Rows (example_idx, coord_idx, value); the label row has coord_idx -1.
ResultTable batch_table(const ExampleBatch& b);
ExampleBatch batch_from_table(const ResultTable& t);

struct PlotSpec {
    std::string title;
    std::string x;
    std::vector<std::string> ys;
};
std::string line_svg(const ResultTable& t, const PlotSpec& spec);
std::string heatmap_svg(const Matrix& M, const std::string& title);

std::uint64_t fnv1a(const std::string& bytes);

struct RunOutput {
    std::vector<ResultTable> tables;
    std::vector<std::string> files;  // written, relative to out_dir, manifest excluded
    std::filesystem::path out_dir;
    std::vector<std::string> notes;  // one-line summaries for the console
};

// Output dir: override if nonempty, else $ICL_MECH_OUT, else the "out" key.
RunOutput run(const RunConfig& c, const std::filesystem::path& out_override = {});

// Rebuilds the config recorded in a manifest written by run().
RunConfig config_from_manifest(const std::filesystem::path& manifest);

}  // namespace icl
