#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "icl/base_lm.hpp"
#include "icl/harness.hpp"
#include "icl/segmenter.hpp"
#include "icl/sparse_icl.hpp"

namespace icl {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string join_idx(const Tuple& t) {
    std::string s;
    for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + std::to_string(t[i]);
    return "{" + s + "}";
}

ResultTable table(std::string schema, std::vector<std::string> cols, std::vector<bool> integral) {
    ResultTable t;
    t.schema = std::move(schema);
    t.columns = std::move(cols);
    t.integral = std::move(integral);
    return t;
}

double b2d(bool v) { return v ? 1.0 : 0.0; }
double z2d(std::size_t v) { return static_cast<double>(v); }

Dist parse_dist(const std::string& v) { return v == "gaussian" ? Dist::Gaussian : Dist::Rademacher; }

std::size_t as_size(const RunConfig& c, const std::string& key, std::size_t lo) {
    const auto v = c.integer(key);
    if (v < static_cast<std::int64_t>(lo))
        throw ConfigError("key '" + key + "' must be at least " + std::to_string(lo));
    return static_cast<std::size_t>(v);
}

ResultTable trace_table(const AttentionTrace& tr) {
    ResultTable t = table("trace/1", {"layer", "head", "query_pos", "key_pos", "weight"},
                          {true, true, true, true, false});
    for (std::size_t l = 0; l < tr.layers.size(); ++l)
        for (std::size_t h = 0; h < tr.layers[l].size(); ++h) {
            const Matrix& A = tr.layers[l][h];
            for (Eigen::Index i = 0; i < A.rows(); ++i)
                for (Eigen::Index j = 0; j < A.cols(); ++j)
                    if (A(i, j) > 1e-12) t.add_row({z2d(l), z2d(h), static_cast<double>(i), static_cast<double>(j), A(i, j)});
        }
    return t;
}

class Emitter {
public:
    Emitter(const RunConfig& c, fs::path dir, RunOutput& out) : c_(c), out_(out) {
        out_.out_dir = std::move(dir);
        fs::create_directories(out_.out_dir);
    }

    void csv(const ResultTable& t, const std::string& name) {
        out_.tables.push_back(t);
        if (c_.flag("emit_csv")) write(name, to_csv(t));
    }
    void svg(const std::string& name, const std::string& body) {
        if (c_.flag("emit_svg")) write(name, body);
    }
    bool traces() const { return c_.flag("emit_traces"); }
    void note(std::string s) { out_.notes.push_back(std::move(s)); }

    void write(const std::string& name, const std::string& body) {
        std::ofstream f(out_.out_dir / name, std::ios::binary | std::ios::trunc);
        f << body;
        if (!f) throw RunError("cannot write " + (out_.out_dir / name).string());
        out_.files.push_back(name);
    }

private:
    const RunConfig& c_;
    RunOutput& out_;
};

// ---- kinds -------------------------------------------------------------------

void run_segment(const RunConfig& c, Emitter& em) {
    const LoadedModel lm = load_model(c.path("model").string());
    std::ifstream in(c.path("input"));
    TokenSeq z;
    std::string tok;
    while (in >> tok) {
        if (!lm.vocab.contains(tok)) throw RunError("input token '" + tok + "' not in model vocabulary");
        z.push_back(lm.vocab.id(tok));
    }
    if (z.empty() || z.front() != lm.vocab.begin()) z.insert(z.begin(), lm.vocab.begin());
    std::vector<int> delims;
    for (const auto& name : c.list("delims")) {
        if (!lm.vocab.contains(name)) throw RunError("delimiter '" + name + "' not in model vocabulary");
        delims.push_back(lm.vocab.id(name));
    }

    const MlResult ml = ml_segment(z, delims, lm.model);
    const bool compiled = c.flag("compiled");
    SegRun run;
    AttentionTrace trace;
    if (compiled) {
        const std::size_t len = z.size() + 1;
        const CondOracle oracle = [&lm](const CondQuery& q) { return cond_prob_oracle(lm.model, q); };
        const SegTransformer st =
            build_seg_transformer(delims, lm.vocab.size(), len, oracle, seg_gamma(len, c.real("gamma_tol")));
        run = run_seg_transformer(st, z, em.traces() ? &trace : nullptr);
    }

    std::vector<std::string> cols = {"sigma_lsep", "sigma_esep", "logp", "feasible", "chosen"};
    std::vector<bool> integral = {true, true, false, true, true};
    if (compiled) {
        cols.push_back("compiled_score");
        integral.push_back(false);
    }
    ResultTable t = table("segment/1", cols, integral);
    for (std::size_t i = 0; i < ml.all.size(); ++i) {
        const SegScore& s = ml.all[i];
        std::vector<double> row = {static_cast<double>(s.sigma.lsep), static_cast<double>(s.sigma.esep), s.logp,
                                   b2d(s.feasible), b2d(s.sigma == ml.sigma)};
        if (compiled) row.push_back(run.head_scores.at(i));
        t.add_row(std::move(row));
    }
    em.csv(t, "segment.csv");
    em.note("chosen sigma: lsep=" + lm.vocab.name(ml.sigma.lsep) + " esep=" + lm.vocab.name(ml.sigma.esep));
    if (compiled) {
        em.note("compiled sigma: lsep=" + lm.vocab.name(run.sigma.lsep) + " esep=" + lm.vocab.name(run.sigma.esep));
        if (em.traces()) {
            em.csv(trace_table(trace), "segment_trace.csv");
            if (!trace.layers.empty() && !trace.layers.back().empty())
                em.svg("segment_attention_last.svg", heatmap_svg(trace.layers.back().front(), "last layer, head 0"));
        }
    }
}

void run_seg_sweep(const RunConfig& c, Emitter& em) {
    SegTaskSpec spec;
    spec.c = c.real("c");
    spec.nu = c.real("nu");
    spec.n_delims = as_size(c, "n_delims", 2);
    spec.delta = c.real("delta");
    spec.corpus_docs = as_size(c, "corpus_docs", 1);
    spec.alpha = c.real("alpha");
    spec.x_vocab = as_size(c, "x_vocab", 1);
    spec.y_vocab = as_size(c, "y_vocab", 1);
    spec.gap_trials = as_size(c, "gap_trials", 1);
    const std::size_t trials = as_size(c, "trials", 1);

    std::vector<std::size_t> grid;
    const auto g = c.list("n_grid");
    if (g.size() == 1 && g[0] == "auto") {
        const std::size_t b = sample_bound(spec.nu, spec.c, spec.n_delims, spec.delta);
        grid = {0, 1, 2, 4, 8, b / 4, b / 2, b};
        std::sort(grid.begin(), grid.end());
        grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    } else {
        for (const auto& v : g) {
            std::size_t pos = 0;
            unsigned long long n = 0;
            try {
                n = std::stoull(v, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos != v.size() || v.empty() || v[0] == '-') throw ConfigError("n_grid entry '" + v + "' is not a count");
            grid.push_back(static_cast<std::size_t>(n));
        }
    }

    const McResult r = mc_experiment(spec, grid, trials, c.seed);
    ResultTable t = table("seg-sweep/1", {"n", "trials", "errors", "rate", "se", "bound_n"},
                          {true, true, true, false, false, true});
    for (const auto& row : r.rows)
        t.add_row({z2d(row.n), z2d(row.trials), z2d(row.errors), row.rate, row.se, z2d(r.bound_n)});
    em.csv(t, "seg_sweep.csv");
    em.svg("seg_sweep.svg", line_svg(t, {"segmentation error rate", "n", {"rate"}}));
    em.note("bound_n=" + std::to_string(r.bound_n) + " gap=" + std::to_string(r.gap.min_gap) +
            " monotone=" + (r.monotone ? "yes" : "no"));
    for (const auto& w : r.warnings) em.note("warning: " + w);
}

BucketEmbedding make_embedding(const RunConfig& c, Dist d, std::size_t s, double tau) {
    const EmbedMode mode = c.get("embed") == "onehot" ? EmbedMode::OneHot : EmbedMode::RandomProjection;
    return BucketEmbedding(c.real("eps"), default_clip(d, s), mode, tau, c.real("delta"), c.seed);
}

void run_sparse1(const RunConfig& c, Emitter& em) {
    const std::size_t m = as_size(c, "m", 1);
    const std::size_t n = as_size(c, "n", 1);
    const Dist d = parse_dist(c.get("dist"));
    auto rng = substream(c.seed, 31, 0);
    const SparseTask task = make_task(m, 1, d, rng, c.real("eps"), c.real("tau"));
    const ExampleBatch b = gen_examples(task, n, c.seed);
    const OneSparseMech mech = build_1sparse(m, make_embedding(c, d, 1, task.tau));
    const OneSparseRun r = run_1sparse(mech, b);
    em.csv(batch_table(b), "sparse1_batch.csv");

    ResultTable t = table("sparse-1.loss/1", {"example_idx", "loss", "pred", "y", "f_hat", "oracle_size", "f_in_oracle"},
                          {true, false, false, false, true, true, true});
    for (std::size_t i = 0; i < n; ++i) {
        const auto oracle = oracle_consistent(b, i + 1, 1, task.eps);
        const bool in = std::find(oracle.begin(), oracle.end(), Tuple{r.f[i]}) != oracle.end();
        t.add_row({z2d(i), r.loss[i], r.pred[i], b.y[i], z2d(r.f[i]), z2d(oracle.size()), b2d(in)});
    }
    em.csv(t, "sparse1_loss.csv");
    em.svg("sparse1_loss.svg", line_svg(t, {"loss per example", "example_idx", {"loss"}}));
    em.note("f_star=" + join_idx(task.f_star) + " f_final=" + std::to_string(r.f.back()));
    if (em.traces()) {
        em.csv(trace_table(r.state.trace), "sparse1_trace.csv");
        const auto shown = static_cast<Eigen::Index>(std::min(n, as_size(c, "trace_examples", 1)) * (m + 1));
        const auto& layers = r.state.trace.layers;
        for (std::size_t l = 0; l < layers.size(); ++l)
            em.svg("sparse1_attention_layer" + std::to_string(l + 1) + ".svg",
                   heatmap_svg(layers[l].front().topLeftCorner(shown, shown), "layer " + std::to_string(l + 1)));
    }
}

void run_sparse_s(const RunConfig& c, Emitter& em) {
    const std::size_t m = as_size(c, "m", 1);
    const std::size_t s = as_size(c, "s", 1);
    const std::size_t n = as_size(c, "n", 1);
    const Dist d = parse_dist(c.get("dist"));
    const double tau = c.get("tau") == "auto" ? default_tau(s) : c.real("tau");
    auto rng = substream(c.seed, 31, 0);
    const SparseTask task = make_task(m, s, d, rng, c.real("eps"), tau);
    const ExampleBatch b = gen_examples(task, n, c.seed);
    const BucketEmbedding e = make_embedding(c, d, s, tau);
    em.csv(batch_table(b), "sparse_s_batch.csv");
    const SsparseResult r = run_ssparse(task, b, e);
    const bool stacked = c.flag("stacked");
    StackedRun st;
    if (stacked) st = run_ssparse_stacked(task, b, e);

    ResultTable rounds = table("sparse-s.rounds/1", {"round", "example_idx", "winner", "c_size"}, {true, true, true, true});
    for (std::size_t k = 0; k < r.rounds.size(); ++k)
        for (std::size_t i = 0; i < n; ++i)
            rounds.add_row({z2d(k), z2d(i), z2d(r.rounds[k].winner[i]), z2d(r.rounds[k].C_before[i].size())});
    em.csv(rounds, "sparse_s_rounds.csv");

    std::vector<std::string> cols = {"example_idx", "oracle_size", "c_consistent"};
    std::vector<bool> integral = {true, true, true};
    if (stacked) {
        cols.push_back("stacked_agrees");
        integral.push_back(true);
    }
    ResultTable pref = table("sparse-s.prefix/1", cols, integral);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row = {z2d(i), z2d(oracle_consistent(b, i + 1, s, task.eps).size()),
                                   b2d(is_consistent(b, i + 1, r.C_prefix[i], task.eps))};
        if (stacked) row.push_back(b2d(st.C_prefix[i] == r.C_prefix[i]));
        pref.add_row(std::move(row));
    }
    em.csv(pref, "sparse_s_prefix.csv");
    em.svg("sparse_s_oracle.svg", line_svg(pref, {"consistent hypotheses per prefix", "example_idx", {"oracle_size"}}));
    em.note("f_star=" + join_idx(task.f_star) + " C=" + join_idx(r.C) +
            " bijection=" + (r.bijection_ok ? "yes" : "no"));
    if (stacked) em.note("stacked layers=" + std::to_string(st.layers) + " C=" + join_idx(st.C));
}

void run_vector(const RunConfig& c, Emitter& em) {
    const std::size_t m = as_size(c, "m", 1);
    const std::size_t n = as_size(c, "n", 1);
    const Dist d = parse_dist(c.get("dist"));
    const double tau = c.get("tau") == "auto" ? 2.0 * static_cast<double>(m) + 1.0 : c.real("tau");
    auto rng = substream(c.seed, 31, 0);
    const SparseTask task = make_task(m, 1, d, rng, c.real("eps"));
    const ExampleBatch b = gen_examples(task, n, c.seed);
    const BucketEmbedding e(c.real("eps"), default_clip(d, 1), EmbedMode::OneHot);
    em.csv(batch_table(b), "vector_batch.csv");
    const BitRecovery r = vector_bit_recovery(b, e, tau, c.real("gamma"));

    ResultTable t = table("vector.bits/1", {"bit", "value", "attn_x"}, {true, true, false});
    for (const auto& br : r.rounds) t.add_row({z2d(br.bit), static_cast<double>(br.value), br.attn_x});
    em.csv(t, "vector_bits.csv");
    const bool ok = is_consistent(b, n, Tuple{r.j}, task.eps);
    em.note("f_star=" + join_idx(task.f_star) + " j=" + std::to_string(r.j) + " consistent=" + (ok ? "yes" : "no"));
}

struct RiskRow {
    RiskEstimate est;
    bool failed = false;
};

void run_risk_sweep(const RunConfig& c, Emitter& em) {
    const std::size_t m = as_size(c, "m", 1);
    const std::size_t tasks = as_size(c, "tasks", 1);
    const std::size_t n_test = as_size(c, "n_test", 2);
    const double eps = c.real("eps"), K = c.real("K"), delta = c.real("delta");
    const Dist d = parse_dist(c.get("dist"));
    std::vector<std::size_t> s_list;
    for (const auto& v : c.list("s_list")) {
        if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
            throw ConfigError("s_list entry '" + v + "' is not a count");
        s_list.push_back(std::stoul(v));
    }

    ResultTable per = table("risk-sweep.tasks/1", {"s", "task", "n", "risk", "risk_se", "disagree", "disagree_se", "failed"},
                            {true, true, true, false, false, false, false, true});
    ResultTable sum = table("risk-sweep.summary/1", {"s", "n", "K", "frac_within_2eps", "mean_disagree", "disagree_bound"},
                            {true, true, false, false, false, false});
    for (std::size_t si = 0; si < s_list.size(); ++si) {
        const std::size_t s = s_list[si];
        const std::size_t n = risk_sample_size(K, s, m, eps);
        std::vector<RiskRow> rows(tasks);
        // Tasks are independent; each owns its output slot.
        const std::size_t workers = std::max(1U, std::min(8U, std::thread::hardware_concurrency()));
        std::vector<std::thread> pool;
        std::vector<std::string> errors(workers);
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t k = w; k < tasks; k += workers) {
                        auto rng = substream(c.seed, 41 + si, k);
                        const SparseTask task = make_task(m, s, d, rng, eps);
                        const std::uint64_t data_seed = rng();
                        const ExampleBatch b = gen_examples(task, n, data_seed);
                        const BucketEmbedding e(eps, default_clip(d, s), EmbedMode::OneHot, task.tau);
                        try {
                            const SsparseResult r = run_ssparse(task, b, e);
                            rows[k].est = risk_eval(r.C, task, n_test, data_seed + 1);
                        } catch (const SparseError&) {
                            rows[k].failed = true;
                        }
                    }
                } catch (const std::exception& ex) {
                    errors[w] = ex.what();
                }
            });
        for (auto& th : pool) th.join();
        for (const auto& err : errors)
            if (!err.empty()) throw RunError(err);

        std::size_t within = 0;
        double dis = 0.0;
        for (std::size_t k = 0; k < tasks; ++k) {
            const auto& e = rows[k].est;
            if (!rows[k].failed && e.mean <= 2.0 * eps) ++within;
            dis += rows[k].failed ? 1.0 : e.disagree;
            per.add_row({z2d(s), z2d(k), z2d(n), e.mean, e.se, e.disagree, e.disagree_se, b2d(rows[k].failed)});
        }
        sum.add_row({z2d(s), z2d(n), K, z2d(within) / z2d(tasks), dis / z2d(tasks), disagreement_bound(m, delta, n)});
    }
    em.csv(per, "risk_tasks.csv");
    em.csv(sum, "risk_summary.csv");
    em.svg("risk_summary.svg", line_svg(sum, {"disagreement vs support size", "s", {"mean_disagree", "disagree_bound"}}));
}

fs::path resolve_out(const RunConfig& c, const fs::path& override_dir) {
    if (!override_dir.empty()) return override_dir;
    if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
    return c.get("out");
}

void write_manifest(const RunConfig& c, const RunOutput& out) {
    const std::string cfg = dump_config(c);
    json files = json::array();
    for (const auto& f : out.files) {
        std::ifstream in(out.out_dir / f, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        files.push_back({{"path", f}, {"fnv1a", hex64(fnv1a(ss.str()))}});
    }
    const json m = {
        {"harness", kHarnessVersion},
        {"kind", c.kind},
        {"seed", c.seed},
        {"config", cfg},
        {"config_hash", hex64(fnv1a(cfg))},
        {"base_dir", c.base_dir.empty() ? std::string() : fs::absolute(c.base_dir).string()},
        {"modules", {{"tf-core", "1"}, {"base-lm", "1"}, {"segmenter", "1"}, {"sparse-icl", "1"}, {"cli-harness", "1"}}},
        {"files", files},
    };
    const fs::path tmp = out.out_dir / "manifest.json.tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f << m.dump(2) << "\n";
        if (!f) throw RunError("cannot write manifest");
    }
    fs::rename(tmp, out.out_dir / "manifest.json");
}

}  // namespace

RunOutput run(const RunConfig& c, const fs::path& out_override) {
    RunOutput out;
    Emitter em(c, resolve_out(c, out_override), out);
    try {
        if (c.kind == "segment") run_segment(c, em);
        else if (c.kind == "seg-sweep") run_seg_sweep(c, em);
        else if (c.kind == "sparse-1") run_sparse1(c, em);
        else if (c.kind == "sparse-s") run_sparse_s(c, em);
        else if (c.kind == "vector") run_vector(c, em);
        else if (c.kind == "risk-sweep") run_risk_sweep(c, em);
        else throw ConfigError("unknown run kind '" + c.kind + "'");
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& ex) {
        throw RunError(c.kind + ": " + ex.what());
    }
    write_manifest(c, out);
    return out;
}

RunConfig config_from_manifest(const fs::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw ConfigError("cannot read manifest " + manifest.string());
    json m;
    try {
        in >> m;
        return parse_config(m.at("config").get<std::string>(), m.at("base_dir").get<std::string>());
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("malformed manifest: ") + ex.what());
    }
}

}  // namespace icl
