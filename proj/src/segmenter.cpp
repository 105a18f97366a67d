#include "icl/segmenter.hpp"

#include <algorithm>
#include <cmath>

namespace icl {

namespace {

void check_sequence(std::span<const int> z, DelimPair s, int begin_id, int end_id) {
    if (s.lsep == s.esep) throw SegError("lsep and esep must differ");
    if (z.empty() || z[0] != begin_id) throw SegError("sequence must start with <begin>");
    for (std::size_t i = 1; i < z.size(); ++i)
        if (z[i] == begin_id || z[i] == end_id) throw SegError("<begin>/<end> inside sequence");
    if (s.lsep == begin_id || s.lsep == end_id || s.esep == begin_id || s.esep == end_id)
        throw SegError("<begin>/<end> cannot be delimiters");
}

}  // namespace

Segmentation split_by(std::span<const int> z, DelimPair sigma) {
    check_sequence(z, sigma, 0, 1);
    Segmentation seg;
    seg.sigma = sigma;
    Chunk cur;
    cur.parts.emplace_back();
    auto close = [&] {
        if (cur.parts.size() > 2) seg.feasible = false;
        seg.chunks.push_back(std::move(cur));
        cur = Chunk{};
        cur.parts.emplace_back();
    };
    for (std::size_t i = 1; i < z.size(); ++i) {
        if (z[i] == sigma.esep)
            close();
        else if (z[i] == sigma.lsep)
            cur.parts.emplace_back();
        else
            cur.parts.back().push_back(z[i]);
    }
    close();
    Chunk& last = seg.chunks.back();
    if (last.parts.size() == 2 && last.parts[1].empty()) {
        seg.query = std::move(last.parts[0]);
        seg.chunks.pop_back();
    }
    return seg;
}

TokenSeq join(const Segmentation& s) {
    TokenSeq z{0};
    bool first = true;
    auto emit = [&](const std::vector<TokenSeq>& parts) {
        if (!first) z.push_back(s.sigma.esep);
        first = false;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            if (p > 0) z.push_back(s.sigma.lsep);
            z.insert(z.end(), parts[p].begin(), parts[p].end());
        }
    };
    for (const auto& c : s.chunks) emit(c.parts);
    if (s.query) emit({*s.query, {}});
    return z;
}

SegScore likelihood(std::span<const int> z, DelimPair sigma, const NGramModel& m) {
    const Segmentation seg = split_by(z, sigma);
    SegScore out{sigma, std::log(m.nu), seg.feasible};
    if (!seg.feasible) return out;
    double s = seg.query ? prefix_logprob(m, *seg.query) : 0.0;
    for (const auto& c : seg.chunks) {
        s += chunk_logprob(m, c.x());
        if (c.has_label()) s += chunk_logprob(m, c.y());
    }
    out.logp = s;
    return out;
}

double stream_score(std::span<const int> z, DelimPair sigma, const NGramModel& m) {
    check_sequence(z, sigma, m.begin_id, m.end_id);
    double total = 0.0;
    double last_close = 0.0;
    std::size_t start = 1;
    int lseps = 0;
    for (std::size_t p = 1; p < z.size(); ++p) {
        const int t = z[p];
        const auto ctx = z.subspan(start, p - start);
        if (t == sigma.esep || t == sigma.lsep) {
            if (t == sigma.lsep && ++lseps > 1) return std::log(m.nu);
            if (t == sigma.esep) lseps = 0;
            last_close = log_cond(m, m.end_id, ctx);
            total += last_close;
            start = p + 1;
        } else {
            total += log_cond(m, t, ctx);
        }
    }
    if (lseps == 1 && z.size() > 1 && z.back() == sigma.lsep) return total - last_close;
    return total + log_cond(m, m.end_id, z.subspan(start));
}

std::vector<DelimPair> candidate_pairs(const std::vector<int>& delims) {
    std::vector<int> d = delims;
    std::sort(d.begin(), d.end());
    if (std::adjacent_find(d.begin(), d.end()) != d.end()) throw SegError("duplicate delimiter");
    if (d.size() < 2) throw SegError("need at least two delimiters");
    std::vector<DelimPair> out;
    for (int l : d)
        for (int e : d)
            if (l != e) out.push_back({l, e});
    return out;
}

std::size_t best_index(const std::vector<double>& scores) {
    if (scores.empty()) throw SegError("no candidate scores");
    const double mx = *std::max_element(scores.begin(), scores.end());
    std::size_t i = 0;
    while (scores[i] < mx - kScoreTieTol) ++i;
    return i;
}

MlResult ml_segment(std::span<const int> z, const std::vector<int>& delims, const NGramModel& m) {
    MlResult r;
    std::vector<double> v;
    for (const auto& s : candidate_pairs(delims)) {
        r.all.push_back(likelihood(z, s, m));
        v.push_back(r.all.back().logp);
    }
    r.score = r.all[best_index(v)];
    r.sigma = r.score.sigma;
    r.seg = split_by(z, r.sigma);
    return r;
}

double sample_bound_real(double nu, double c, std::size_t n_delims, double delta) {
    if (!(c > 0.0)) throw SegError("gap must be positive");
    if (!(nu > 0.0 && nu < 1.0)) throw SegError("floor must lie in (0,1)");
    if (!(delta > 0.0 && delta <= 1.0)) throw SegError("confidence must lie in (0,1]");
    if (n_delims < 1) throw SegError("need at least one delimiter");
    const double l = std::log(1.0 / nu);
    return 16.0 * l * l * std::log(static_cast<double>(n_delims) / delta) / (c * c);
}

std::size_t sample_bound(double nu, double c, std::size_t n_delims, double delta) {
    const double r = sample_bound_real(nu, c, n_delims, delta);
    return r <= 0.0 ? 0 : static_cast<std::size_t>(std::ceil(r));
}

}  // namespace icl
