#include <algorithm>
#include <cmath>
#include <limits>

#include "icl/segmenter.hpp"

namespace icl {

namespace {

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::size_t fast_argmax(std::span<const int> z, const std::vector<DelimPair>& pairs, const NGramModel& m,
                        std::vector<double>& buf) {
    buf.clear();
    for (const auto& s : pairs) buf.push_back(stream_score(z, s, m));
    return best_index(buf);
}

}  // namespace

TokenSeq SegGenerator::sample_x(std::mt19937_64& rng) const {
    const std::size_t k = uniform(rng, spec.x_content_min, spec.x_content_max);
    const std::size_t len = k + decoys.size();
    std::vector<char> is_content(len, 0);
    std::fill(is_content.begin(), is_content.begin() + static_cast<std::ptrdiff_t>(k), 1);
    std::shuffle(is_content.begin(), is_content.end(), rng);
    TokenSeq out;
    std::size_t d = 0;
    for (std::size_t i = 0; i < len; ++i)
        out.push_back(is_content[i] ? x_content[uniform(rng, 0, x_content.size() - 1)] : decoys[d++]);
    return out;
}

TokenSeq SegGenerator::sample_y(std::mt19937_64& rng) const {
    const std::size_t k = uniform(rng, spec.y_len_min, spec.y_len_max);
    TokenSeq out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(y_content[uniform(rng, 0, y_content.size() - 1)]);
    return out;
}

TokenSeq SegGenerator::sample(std::size_t n, std::mt19937_64& rng) const {
    TokenSeq z{vocab.begin()};
    for (std::size_t i = 0; i < n; ++i) {
        const TokenSeq x = sample_x(rng), y = sample_y(rng);
        z.insert(z.end(), x.begin(), x.end());
        z.push_back(truth.lsep);
        z.insert(z.end(), y.begin(), y.end());
        z.push_back(truth.esep);
    }
    const TokenSeq q = sample_x(rng);
    z.insert(z.end(), q.begin(), q.end());
    z.push_back(truth.lsep);
    return z;
}

SegGenerator make_seg_generator(const SegTaskSpec& spec, std::uint64_t seed) {
    if (spec.n_delims < 2) throw SegError("need at least two delimiters");
    if (spec.x_vocab < 1 || spec.y_vocab < 1) throw SegError("content vocabularies must be nonempty");
    if (spec.x_content_min > spec.x_content_max || spec.y_len_min > spec.y_len_max)
        throw SegError("length range inverted");
    SegGenerator g;
    g.spec = spec;
    for (std::size_t i = 0; i < spec.n_delims; ++i) g.delims.push_back(g.vocab.add("D" + std::to_string(i)));
    for (std::size_t i = 0; i < spec.x_vocab; ++i) g.x_content.push_back(g.vocab.add("x" + std::to_string(i)));
    for (std::size_t i = 0; i < spec.y_vocab; ++i) g.y_content.push_back(g.vocab.add("y" + std::to_string(i)));
    g.vocab.set_delims(g.delims);

    auto rng = substream(seed, 1, 0);
    std::vector<int> order = g.delims;
    std::shuffle(order.begin(), order.end(), rng);
    g.truth = {order[0], order[1]};
    g.decoys.assign(order.begin() + 2, order.end());

    // Natural text: x-style and y-style documents, never containing the true
    // delimiters.
    std::vector<TokenSeq> corpus;
    for (std::size_t d = 0; d < spec.corpus_docs; ++d) {
        TokenSeq doc{g.vocab.begin()};
        const TokenSeq body = (d % 2 == 0) ? g.sample_x(rng) : g.sample_y(rng);
        doc.insert(doc.end(), body.begin(), body.end());
        doc.push_back(g.vocab.end());
        corpus.push_back(std::move(doc));
    }
    g.model = fit_ngram(corpus, 2, spec.alpha, g.vocab.size(), spec.nu);
    return g;
}

GapReport measure_gap(const SegGenerator& g, std::size_t n, std::size_t trials, std::uint64_t seed) {
    if (n == 0 || trials == 0) throw SegError("gap measurement needs n, trials >= 1");
    const auto pairs = candidate_pairs(g.delims);
    const DelimPair swap{g.truth.esep, g.truth.lsep};
    std::vector<double> mean(pairs.size(), 0.0);
    GapReport r;
    r.swap_margin = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < trials; ++t) {
        auto rng = substream(seed, 2, t);
        const TokenSeq z = g.sample(n, rng);
        const double truth = stream_score(z, g.truth, g.model);
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            const double d = truth - stream_score(z, pairs[p], g.model);
            mean[p] += d / static_cast<double>(n * trials);
            if (pairs[p] == swap) r.swap_margin = std::min(r.swap_margin, d);
        }
    }
    r.min_gap = std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        if (pairs[p] == g.truth || pairs[p] == swap) continue;
        if (mean[p] < r.min_gap) {
            r.min_gap = mean[p];
            r.closest = pairs[p];
        }
    }
    return r;
}

McResult mc_experiment(const SegTaskSpec& spec, const std::vector<std::size_t>& n_grid, std::size_t trials,
                       std::uint64_t seed) {
    if (trials == 0) throw SegError("need at least one trial");
    McResult res;
    const SegGenerator g = make_seg_generator(spec, seed);
    res.bound_n = sample_bound(spec.nu, spec.c, spec.n_delims, spec.delta);
    res.gap = measure_gap(g, spec.gap_chunks, spec.gap_trials, seed);
    if (res.gap.min_gap < spec.c / 2.0)
        res.warnings.push_back("measured gap " + std::to_string(res.gap.min_gap) + " below c/2");
    if (!(res.gap.swap_margin > 0.0))
        res.warnings.push_back("swapped pair not dominated on every gap sample");

    const auto pairs = candidate_pairs(g.delims);
    std::size_t truth_idx = 0;
    while (pairs[truth_idx] != g.truth) ++truth_idx;
    std::vector<double> buf;
    for (std::size_t gi = 0; gi < n_grid.size(); ++gi) {
        McRow row;
        row.n = n_grid[gi];
        row.trials = trials;
        for (std::size_t t = 0; t < trials; ++t) {
            auto rng = substream(seed, 3 + gi, t);
            const TokenSeq z = g.sample(row.n, rng);
            if (fast_argmax(z, pairs, g.model, buf) != truth_idx) ++row.errors;
        }
        row.rate = static_cast<double>(row.errors) / static_cast<double>(trials);
        row.se = std::sqrt(row.rate * (1.0 - row.rate) / static_cast<double>(trials));
        res.rows.push_back(row);
    }
    for (std::size_t i = 1; i < res.rows.size(); ++i) {
        const auto& a = res.rows[i - 1];
        const auto& b = res.rows[i];
        if (b.n >= a.n && b.rate > a.rate + 2.0 * std::hypot(a.se, b.se)) res.monotone = false;
    }
    return res;
}

}  // namespace icl
