// icl-mech <kind> --config <path> [--out <dir>] [--seed <u64>]
// Exit codes: 0 success, 2 configuration error, 3 module error.
#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "icl/base_lm.hpp"
#include "icl/harness.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitModule = 3;

struct KindArgs {
    std::string config;
    std::string manifest;
    std::string out;
    std::optional<std::uint64_t> seed;
};

struct SegmentArgs {
    std::string input, model, delims;
    bool compiled = false;
    std::optional<double> gamma_tol;
};

struct FitArgs {
    std::string corpus, delims, out;
    int order = 2;
    double alpha = 0.1, nu = 1e-6;
};

icl::RunConfig segment_config_from_flags(const SegmentArgs& s, const KindArgs& k) {
    if (s.input.empty() || s.model.empty() || s.delims.empty())
        throw icl::ConfigError("segment needs --config, or all of --input, --model and --delims");
    std::string text = "kind=segment\nseed=" + std::to_string(k.seed.value_or(0)) + "\ninput=" + s.input +
                       "\nmodel=" + s.model + "\ndelims=" + s.delims + "\n";
    if (s.compiled) text += "compiled=1\n";
    if (s.gamma_tol) text += "gamma_tol=" + std::to_string(*s.gamma_tol) + "\n";
    return icl::parse_config(text, std::filesystem::current_path());
}

int run_kind(const std::string& kind, const KindArgs& k, const SegmentArgs* seg) {
    icl::RunConfig c;
    if (!k.manifest.empty()) {
        c = icl::config_from_manifest(k.manifest);
    } else if (!k.config.empty()) {
        c = icl::load_config(k.config);
    } else if (seg) {
        c = segment_config_from_flags(*seg, k);
    } else {
        throw icl::ConfigError(kind + " needs --config or --manifest");
    }
    if (c.kind != kind) throw icl::ConfigError("config kind '" + c.kind + "' does not match command '" + kind + "'");
    if (k.seed) {
        c.seed = *k.seed;
        c.explicit_values["seed"] = std::to_string(*k.seed);
    }
    const icl::RunOutput out = icl::run(c, k.out);
    for (const auto& n : out.notes) std::cout << n << "\n";
    for (const auto& f : out.files) std::cout << "wrote " << (out.out_dir / f).string() << "\n";
    std::cout << "wrote " << (out.out_dir / "manifest.json").string() << "\n";
    return 0;
}

int run_fit(const FitArgs& f) {
    icl::Vocab vocab;
    const auto corpus = icl::read_corpus(f.corpus, vocab);
    if (!f.delims.empty()) {
        std::vector<int> ids;
        std::stringstream ss(f.delims);
        std::string name;
        while (std::getline(ss, name, ',')) {
            if (!vocab.contains(name)) throw icl::ConfigError("delimiter '" + name + "' not in corpus");
            ids.push_back(vocab.id(name));
        }
        vocab.set_delims(ids);
    }
    const auto model = icl::fit_ngram(corpus, f.order, f.alpha, vocab.size(), f.nu);
    icl::save_model(f.out, model, vocab);
    std::cout << "wrote " << f.out << " (" << vocab.size() << " tokens, " << corpus.size() << " documents)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Constructed in-context learning mechanisms: experiment runner"};
    app.require_subcommand(1);

    std::map<std::string, KindArgs> kinds;
    std::map<std::string, CLI::App*> subs;
    SegmentArgs seg;
    for (const auto& kind : icl::run_kinds()) {
        auto* sub = app.add_subcommand(kind, "run a " + kind + " experiment");
        KindArgs& k = kinds[kind];
        sub->add_option("--config", k.config, "key=value config file");
        sub->add_option("--manifest", k.manifest, "replay the config recorded in a manifest");
        sub->add_option("--out", k.out, std::string("output directory (overrides $") + icl::kOutDirEnv + ")");
        sub->add_option("--seed", k.seed, "override the config seed");
        if (kind == "segment") {
            sub->add_option("--input", seg.input, "token file");
            sub->add_option("--model", seg.model, "n-gram model TSV");
            sub->add_option("--delims", seg.delims, "comma-separated delimiter tokens");
            sub->add_flag("--compiled", seg.compiled, "also run the compiled transformer");
            sub->add_option("--gamma-tol", seg.gamma_tol, "off-max attention mass for the compiled run");
        }
        subs[kind] = sub;
    }
    FitArgs fit;
    auto* fit_cmd = app.add_subcommand("fit", "fit an n-gram model TSV from a corpus");
    fit_cmd->add_option("--corpus", fit.corpus, "one document per line")->required();
    fit_cmd->add_option("--out", fit.out, "model TSV path")->required();
    fit_cmd->add_option("--order", fit.order, "n-gram order")->check(CLI::Range(1, 8));
    fit_cmd->add_option("--alpha", fit.alpha, "additive smoothing");
    fit_cmd->add_option("--nu", fit.nu, "probability floor");
    fit_cmd->add_option("--delims", fit.delims, "comma-separated delimiter tokens");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (fit_cmd->parsed()) return run_fit(fit);
        for (const auto& [kind, sub] : subs)
            if (sub->parsed()) return run_kind(kind, kinds[kind], kind == "segment" ? &seg : nullptr);
    } catch (const icl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitModule;
    }
    return kExitConfig;
}
