// Acceptance suite: one PASS/FAIL line per criterion; nonzero exit if any fail.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "icl/base_lm.hpp"
#include "icl/harness.hpp"
#include "icl/segmenter.hpp"
#include "icl/sparse_icl.hpp"
#include "icl/tf_core.hpp"

using namespace icl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

bool contains(const std::vector<Tuple>& set, const Tuple& t) { return std::find(set.begin(), set.end(), t) != set.end(); }

// ---- 1: compiled segmenter equals the direct likelihood ----------------------

Outcome compiled_segmenter() {
    Vocab v;
    std::vector<int> content;
    for (int i = 0; i < 14; ++i) content.push_back(v.add("t" + std::to_string(i)));
    std::vector<int> delims;
    for (const char* d : {"D0", "D1", "D2", "D3"}) delims.push_back(v.add(d));
    if (v.size() > 20) return {false, "vocabulary exceeds 20"};

    std::mt19937_64 rng(101);
    std::uniform_int_distribution<std::size_t> pick_c(0, content.size() - 1), pick_d(0, delims.size() - 1);
    std::uniform_int_distribution<int> len(1, 4);
    std::vector<TokenSeq> corpus;
    for (int doc = 0; doc < 400; ++doc) {
        TokenSeq s{v.begin()};
        const int n = len(rng) + 1;
        for (int i = 0; i < n; ++i) s.push_back(content[pick_c(rng)]);
        s.push_back(v.end());
        corpus.push_back(std::move(s));
    }
    const NGramModel m = fit_ngram(corpus, 2, 0.1, v.size(), 1e-5);

    const std::size_t max_len = 64;
    const CondOracle oracle = [&m](const CondQuery& q) { return cond_prob_oracle(m, q); };
    const SegTransformer t = build_seg_transformer(delims, v.size(), max_len, oracle, seg_gamma(max_len, 1e-8));

    double worst = 0.0;
    std::size_t argmax_ok = 0;
    const std::size_t sequences = 50;
    for (std::size_t k = 0; k < sequences; ++k) {
        TokenSeq z{v.begin()};
        if (k % 2 == 0) {
            // Example-structured: x lsep y esep ... x lsep.
            const int lsep = delims[pick_d(rng)];
            int esep = delims[pick_d(rng)];
            while (esep == lsep) esep = delims[pick_d(rng)];
            while (z.size() + 16 < max_len) {
                for (int i = len(rng); i > 0; --i) z.push_back(content[pick_c(rng)]);
                z.push_back(lsep);
                for (int i = len(rng); i > 0; --i) z.push_back(content[pick_c(rng)]);
                z.push_back(esep);
            }
            for (int i = len(rng); i > 0; --i) z.push_back(content[pick_c(rng)]);
            z.push_back(lsep);
        } else {
            std::uniform_int_distribution<std::size_t> n(0, max_len - 2);
            std::bernoulli_distribution delim(0.25);
            for (std::size_t i = n(rng); i > 0; --i)
                z.push_back(delim(rng) ? delims[pick_d(rng)] : content[pick_c(rng)]);
        }
        if (z.size() + 1 > max_len) return {false, "generated sequence too long"};
        const SegRun run = run_seg_transformer(t, z);
        for (std::size_t h = 0; h < t.pairs.size(); ++h)
            worst = std::max(worst, std::abs(run.head_scores[h] - likelihood(z, t.pairs[h], m).logp));
        argmax_ok += run.sigma == ml_segment(z, delims, m).sigma;
    }
    return {worst <= 1e-6 && argmax_ok == sequences,
            "50 sequences, 12 heads, max |score diff| " + fmt("%.2e", worst) + ", argmax agrees " +
                std::to_string(argmax_ok) + "/50"};
}

// ---- 2: sample bound and Monte Carlo error curve ------------------------------

Outcome sample_bound_curve() {
    SegTaskSpec spec;  // nu 1e-4, c 2, 8 delimiters, delta 0.1
    const std::size_t bound = sample_bound(spec.nu, spec.c, spec.n_delims, spec.delta);
    const McResult r = mc_experiment(spec, {0, 1, 2, 4, 8, 32, 128, 512, bound}, 500, 7);
    const McRow& last = r.rows.back();
    std::string detail = "bound n=" + std::to_string(bound) + ", error at n " + fmt("%.3f", last.rate) +
                         " over 500 trials, monotone " + (r.monotone ? "yes" : "no") + ", rates";
    for (const auto& row : r.rows) detail += " " + fmt("%.3f", row.rate);
    for (const auto& w : r.warnings) detail += "; warning: " + w;
    return {bound == 1487 && last.n == 1487 && last.trials == 500 && last.rate <= spec.delta && r.monotone, detail};
}

// ---- 3: 1-sparse Gaussian reaches zero loss after one example -----------------

Outcome one_sparse_gaussian() {
    const std::size_t m = 5;
    const BucketEmbedding e(1e-6, default_clip(Dist::Gaussian, 1), EmbedMode::RandomProjection, 2.0, 0.1, 3);
    const OneSparseMech mech = build_1sparse(m, e);
    std::size_t bad = 0;
    for (std::uint64_t seq = 0; seq < 64; ++seq) {
        auto rng = substream(seq, 51, 0);
        const SparseTask t = make_task(m, 1, Dist::Gaussian, rng, 1e-6);
        const ExampleBatch b = gen_examples(t, 32, seq);
        const OneSparseRun r = run_1sparse(mech, b);
        for (std::size_t i = 1; i < b.n(); ++i) bad += r.loss[i] != 0.0;
    }
    return {bad == 0, "64 sequences x 32 examples, projection width " + std::to_string(e.dim()) +
                          ", nonzero losses at index >= 1: " + std::to_string(bad)};
}

// ---- 4: 1-sparse Rademacher tracks the consistent set -------------------------

Outcome one_sparse_rademacher() {
    const std::size_t m = 5;
    const BucketEmbedding e(0.05, default_clip(Dist::Rademacher, 1), EmbedMode::RandomProjection, 2.0, 0.1, 4);
    const OneSparseMech mech = build_1sparse(m, e);
    std::size_t outside = 0, late = 0, never = 0;
    for (std::uint64_t seq = 0; seq < 64; ++seq) {
        auto rng = substream(seq, 52, 0);
        const SparseTask t = make_task(m, 1, Dist::Rademacher, rng);
        const ExampleBatch b = gen_examples(t, 32, seq);
        const OneSparseRun r = run_1sparse(mech, b);
        std::size_t first = b.n();
        for (std::size_t i = 0; i < b.n(); ++i) {
            const auto set = oracle_consistent(b, i + 1, 1, t.eps);
            outside += !contains(set, Tuple{r.f[i]});
            if (set.size() == 1 && first == b.n()) first = i + 1;
        }
        if (first == b.n()) ++never;
        for (std::size_t i = first; i < b.n(); ++i) late += r.loss[i] != 0.0;
    }
    return {outside == 0 && late == 0, "64 sequences, hypothesis outside consistent set " + std::to_string(outside) +
                                           ", nonzero loss after singleton " + std::to_string(late) +
                                           ", never singleton " + std::to_string(never)};
}

// ---- 5: first-layer margin ------------------------------------------------------

Outcome margin() {
    std::mt19937_64 rng(55);
    std::uniform_int_distribution<int> lvl(-3, 3);
    std::normal_distribution<double> g;
    std::size_t checked = 0, examples = 0;
    double worst = 1e9;
    const std::size_t per_m = 1429;  // 7 values of m, 10^4 examples in total
    const std::size_t chunk = 100;
    for (std::size_t m = 2; m <= 8; ++m) {
        const OneSparseMech mech = build_1sparse(m, BucketEmbedding(0.05, 4.0, EmbedMode::OneHot));
        const double bound = std::exp(1.0) / (4.0 * (static_cast<double>(m) + 1.0));
        for (std::size_t done = 0; done < per_m; done += chunk) {
            ExampleBatch b;
            b.m = m;
            std::vector<std::size_t> fs;
            for (std::size_t k = 0; k < std::min(chunk, per_m - done); ++k) {
                std::vector<double> x(m);
                const bool coarse = k % 2 == 0;  // coarse levels force shared buckets
                for (auto& v : x) v = coarse ? 0.5 * lvl(rng) : g(rng);
                const std::size_t f = std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
                b.x.push_back(x);
                b.y.push_back(x[f]);
                fs.push_back(f);
            }
            const OneSparseRun r = run_1sparse(mech, b);
            for (std::size_t t = 0; t < b.n(); ++t) {
                ++examples;
                const Vector& o1 = r.state.o1[t];
                for (std::size_t j = 0; j < m; ++j) {
                    if (std::abs(b.x[t][j] - b.y[t]) <= 0.05) continue;
                    ++checked;
                    worst = std::min(worst, (o1(fs[t]) - o1(j)) - bound);
                }
            }
        }
    }
    return {examples >= 10000 && worst >= -1e-9,
            std::to_string(examples) + " examples, " + std::to_string(checked) +
                " inconsistent slots, min(margin - e/(4(m+1))) " + fmt("%.3e", worst)};
}

// ---- 6: deflation thresholds ----------------------------------------------------

Outcome deflation_thresholds() {
    std::mt19937_64 rng(66);
    // One projection embedding per support size, tau = 2s, with bucket vectors cached.
    struct Cached {
        BucketEmbedding e;
        std::map<std::size_t, Vector> vec;
        const Vector& at(double v) {
            const std::size_t k = e.bucket(v);
            auto it = vec.find(k);
            if (it == vec.end()) it = vec.emplace(k, e.embed(v)).first;
            return it->second;
        }
    };
    std::vector<Cached> emb;
    std::vector<Cached> emb_r;
    for (std::size_t s = 1; s <= 3; ++s) {
        const double tau = 2.0 * static_cast<double>(s);
        emb.push_back({BucketEmbedding(0.05, default_clip(Dist::Gaussian, s), EmbedMode::RandomProjection, tau, 0.01, 60 + s), {}});
        emb_r.push_back({BucketEmbedding(0.05, default_clip(Dist::Rademacher, s), EmbedMode::RandomProjection, tau, 0.01, 70 + s), {}});
    }
    double min_in = 1e9, max_far = 0.0;
    std::size_t far_checked = 0;
    const std::size_t pairs = 10000;
    for (std::size_t k = 0; k < pairs; ++k) {
        const std::size_t m = std::uniform_int_distribution<std::size_t>(2, 8)(rng);
        const std::size_t s = std::uniform_int_distribution<std::size_t>(1, std::min<std::size_t>(3, m))(rng);
        const Dist d = k % 2 == 0 ? Dist::Gaussian : Dist::Rademacher;
        Cached& c = d == Dist::Gaussian ? emb[s - 1] : emb_r[s - 1];
        const SparseTask t = make_task(m, s, d, rng);
        const auto x = draw_x(m, d, rng);
        std::vector<Vector> x1;
        for (double v : x) x1.push_back(c.at(v));
        // Random proper subset of the support as the identified set.
        Tuple C = t.f_star;
        std::shuffle(C.begin(), C.end(), rng);
        C.resize(std::uniform_int_distribution<std::size_t>(0, s - 1)(rng));
        std::sort(C.begin(), C.end());
        const Vector defl = deflate(compositional_label(x1, t.f_star), C, x1);
        std::vector<std::size_t> rest;
        for (std::size_t j : t.f_star)
            if (!std::binary_search(C.begin(), C.end(), j)) rest.push_back(j);
        for (std::size_t j : rest) min_in = std::min(min_in, x1[j].dot(defl));
        for (std::size_t j = 0; j < m; ++j) {
            if (std::find(t.f_star.begin(), t.f_star.end(), j) != t.f_star.end()) continue;
            const bool far = std::all_of(rest.begin(), rest.end(),
                                         [&](std::size_t r) { return c.e.bucket(x[j]) != c.e.bucket(x[r]); });
            if (!far) continue;
            ++far_checked;
            max_far = std::max(max_far, std::abs(x1[j].dot(defl)));
        }
    }
    return {min_in >= 0.75 && max_far <= 0.25,
            "10^4 (task, C) pairs, tau = 2s, min in-support " + fmt("%.4f", min_in) + ", max far " +
                fmt("%.4f", max_far) + " over " + std::to_string(far_checked) + " far coordinates"};
}

// ---- 7: s-sparse driver and stacked layers ------------------------------------

Outcome ssparse_recovery() {
    std::size_t consistent = 0, stacked_runs = 0, stacked_agree = 0, bijection = 0;
    std::vector<std::string> failures;
    const std::size_t tasks = 200;
    for (std::uint64_t k = 0; k < tasks; ++k) {
        auto rng = substream(k, 77, 0);
        const std::size_t m = std::uniform_int_distribution<std::size_t>(2, 8)(rng);
        const std::size_t s = std::uniform_int_distribution<std::size_t>(1, std::min<std::size_t>(3, m))(rng);
        const Dist d = k % 2 == 0 ? Dist::Gaussian : Dist::Rademacher;
        const SparseTask t = make_task(m, s, d, rng);
        const ExampleBatch b = gen_examples(t, 128, k);
        const BucketEmbedding e(t.eps, default_clip(d, s), EmbedMode::OneHot, t.tau);
        try {
            const SsparseResult r = run_ssparse(t, b, e);
            if (contains(oracle_consistent(b, b.n(), s, t.eps), r.C)) ++consistent;
            else failures.push_back("task " + std::to_string(k));
            bijection += r.bijection_ok;
            if (s <= 2) {
                ++stacked_runs;
                stacked_agree += run_ssparse_stacked(t, b, e).C_prefix == r.C_prefix;
            }
        } catch (const SparseError& ex) {
            failures.push_back("task " + std::to_string(k) + " (" + ex.what() + ")");
        }
    }
    std::string detail = "200 tasks, consistent " + std::to_string(consistent) + "/200, stacked agrees " +
                         std::to_string(stacked_agree) + "/" + std::to_string(stacked_runs) + ", bijection " +
                         std::to_string(bijection) + "/200";
    for (const auto& f : failures) detail += "; " + f;
    return {consistent == tasks && stacked_agree == stacked_runs, detail};
}

// ---- 8: population risk at the prescribed sample size -------------------------

Outcome risk_at_sample_size() {
    const fs::path out = fs::temp_directory_path() / "icl_acceptance_risk";
    fs::remove_all(out);
    const RunConfig c = parse_config(
        "kind=risk-sweep\nseed=8\nm=8\ns_list=1,2\neps=0.05\nK=1\ntasks=100\nn_test=2000\ndelta=0.1\n"
        "emit_svg=0\n");
    const RunOutput r = run(c, out);
    const ResultTable& per = r.tables.at(0);
    const ResultTable& sum = r.tables.at(1);
    bool ok = true;
    std::string detail = "K=1";
    for (const auto& row : sum.rows) {
        const double s = row[sum.col("s")], n = row[sum.col("n")], frac = row[sum.col("frac_within_2eps")];
        detail += ", s=" + fmt("%.0f", s) + " n=" + fmt("%.0f", n) + " within 2eps " + fmt("%.2f", frac);
        ok = ok && frac >= 0.9;
        if (s == 1) {
            std::vector<double> dis;
            for (const auto& pr : per.rows)
                if (pr[per.col("s")] == 1) dis.push_back(pr[per.col("disagree")]);
            const double mean = std::accumulate(dis.begin(), dis.end(), 0.0) / static_cast<double>(dis.size());
            double var = 0.0;
            for (double v : dis) var += (v - mean) * (v - mean);
            const double se = std::sqrt(var / static_cast<double>(dis.size() - 1) / static_cast<double>(dis.size()));
            const double bound = row[sum.col("disagree_bound")];
            detail += " (disagreement " + fmt("%.4f", mean) + " +- " + fmt("%.4f", se) + " vs bound " + fmt("%.4f", bound) + ")";
            ok = ok && mean <= bound + 2.0 * se;
        }
    }
    fs::remove_all(out);
    return {ok, detail};
}

// ---- 9: vector bit recovery -----------------------------------------------------

Outcome bit_recovery() {
    std::size_t good = 0;
    const std::size_t ms[] = {2, 4, 8};
    for (std::uint64_t k = 0; k < 100; ++k) {
        const std::size_t m = ms[k % 3];
        const Dist d = (k / 3) % 2 == 0 ? Dist::Gaussian : Dist::Rademacher;
        auto rng = substream(k, 99, 0);
        const SparseTask t = make_task(m, 1, d, rng);
        const ExampleBatch b = gen_examples(t, 32, k);
        const BucketEmbedding e(t.eps, default_clip(d, 1), EmbedMode::OneHot);
        const BitRecovery r = vector_bit_recovery(b, e, 2.0 * static_cast<double>(m) + 1.0, 50.0);
        good += contains(oracle_consistent(b, b.n(), 1, t.eps), Tuple{r.j});
    }
    return {good == 100, "100 tasks over m in {2,4,8}, consistent " + std::to_string(good) + "/100"};
}

// ---- 10: engine invariants --------------------------------------------------------

Outcome engine_invariants() {
    std::mt19937_64 rng(1010);
    std::normal_distribution<double> g(0.0, 2.0);
    std::uniform_int_distribution<int> nd(1, 12), dd(1, 6), vd(2, 7);
    std::bernoulli_distribution coin(0.5), masked(0.3);
    double row_err = 0.0, col_err = 0.0, min_prob = 1.0;
    std::size_t causal_bad = 0;
    const auto random_head = [&](int d, int da) {
        Head h;
        h.Q = Matrix::NullaryExpr(da, d, [&] { return g(rng); });
        h.K = Matrix::NullaryExpr(da, d, [&] { return g(rng); });
        h.V = Matrix::NullaryExpr(da, d, [&] { return g(rng); });
        if (coin(rng)) {
            // Random mask that always leaves the diagonal open.
            const std::uint64_t salt = rng();
            h.bias = [salt](std::size_t q, std::size_t k) {
                if (q == k) return 0.0;
                return (std::hash<std::uint64_t>{}(salt ^ (q * 131 + k)) % 10 < 3) ? kNegInf : 0.5;
            };
        }
        return h;
    };
    for (int c = 0; c < 1000; ++c) {
        // Attention rows and causal zeros through layer_forward.
        const int n = nd(rng), d = dd(rng), da = dd(rng), heads = 1 + c % 3;
        LayerParams p;
        for (int k = 0; k < heads; ++k) p.heads.push_back(random_head(d, da));
        p.hard = c % 7 == 0;
        const Matrix X = Matrix::NullaryExpr(d, n, [&] { return g(rng); });
        AttentionTrace tr;
        layer_forward(X, p, &tr);
        for (const Matrix& A : tr.layers.at(0))
            for (Eigen::Index i = 0; i < A.rows(); ++i) {
                row_err = std::max(row_err, std::abs(A.row(i).sum() - 1.0));
                for (Eigen::Index j = i + 1; j < A.cols(); ++j) causal_bad += A(i, j) != 0.0;
            }

        // model_forward columns.
        const int vocab = vd(rng), dm = dd(rng) + 1;
        ModelParams mp;
        mp.W_E = Matrix::NullaryExpr(dm, vocab, [&] { return g(rng); });
        for (int l = c % 3; l > 0; --l) {
            LayerParams lp;
            lp.heads.push_back(random_head(dm, dm));
            lp.W_O = Matrix::NullaryExpr(dm, dm, [&] { return g(rng); });
            lp.use_skip = coin(rng);
            lp.use_gelu = coin(rng);
            mp.layers.push_back(std::move(lp));
        }
        TokenSeq toks(static_cast<std::size_t>(nd(rng)));
        for (auto& tk : toks) tk = std::uniform_int_distribution<int>(0, vocab - 1)(rng);
        const Matrix P = model_forward(toks, mp);
        for (Eigen::Index j = 0; j < P.cols(); ++j) col_err = std::max(col_err, std::abs(P.col(j).sum() - 1.0));
        min_prob = std::min(min_prob, P.minCoeff());
    }
    return {row_err <= 1e-12 && causal_bad == 0 && col_err <= 1e-12 && min_prob >= 0.0,
            "10^3 cases each, max row-sum error " + fmt("%.1e", row_err) + ", causal violations " +
                std::to_string(causal_bad) + ", max column-sum error " + fmt("%.1e", col_err)};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        double limit_s;  // 0: no limit
        std::function<Outcome()> fn;
    };
    const std::vector<Criterion> all = {
        {1, "compiled segmenter equals direct likelihood", 30, compiled_segmenter},
        {2, "sample bound and error curve", 120, sample_bound_curve},
        {3, "1-sparse Gaussian zero loss", 10, one_sparse_gaussian},
        {4, "1-sparse Rademacher tracks consistent set", 10, one_sparse_rademacher},
        {5, "first-layer margin", 0, margin},
        {6, "deflation thresholds", 0, deflation_thresholds},
        {7, "s-sparse driver and stacked layers", 60, ssparse_recovery},
        {8, "risk at prescribed sample size", 0, risk_at_sample_size},
        {9, "vector bit recovery", 0, bit_recovery},
        {10, "engine invariants", 0, engine_invariants},
    };
    int failed = 0;
    for (const auto& c : all) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.fn();
        } catch (const std::exception& ex) {
            o = {false, std::string("exception: ") + ex.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        bool pass = o.pass;
        if (c.limit_s > 0 && secs > c.limit_s) {
            pass = false;
            o.detail += "; exceeded " + fmt("%.0f", c.limit_s) + " s";
        }
        std::printf("criterion %d: %s  %s [%s; %.2f s]\n", c.id, pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs);
        std::fflush(stdout);
        failed += !pass;
    }
    return failed == 0 ? 0 : 1;
}
