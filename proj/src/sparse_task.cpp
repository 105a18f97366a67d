#include <algorithm>
#include <cmath>
#include <numeric>

#include "icl/sparse_icl.hpp"

namespace icl {

namespace {

constexpr std::uint64_t kOracleLimit = 1000000;

}  // namespace

double default_tau(std::size_t s) { return std::max(2.0, 2.0 * static_cast<double>(s)); }

double default_clip(Dist d, std::size_t s) {
    return d == Dist::Gaussian ? 8.0 : 1.0 + static_cast<double>(s);
}

void validate(const SparseTask& t) {
    if (t.m < 1) throw SparseError("m must be >= 1");
    if (t.s < 1 || t.s > t.m) throw SparseError("s must lie in [1, m]");
    if (!(t.eps > 0.0)) throw SparseError("eps must be positive");
    if (t.tau < std::max(1.0, 2.0 * static_cast<double>(t.s)))
        throw SparseError("tau must be >= max(1, 2s)");
    if (t.f_star.size() != t.s) throw SparseError("support size differs from s");
    for (std::size_t i = 0; i < t.f_star.size(); ++i) {
        if (t.f_star[i] >= t.m) throw SparseError("support index out of range");
        if (i > 0 && t.f_star[i] <= t.f_star[i - 1]) throw SparseError("support must be sorted and distinct");
    }
}

SparseTask make_task(std::size_t m, std::size_t s, Dist d, std::mt19937_64& rng, double eps, double tau) {
    if (s < 1 || s > m) throw SparseError("s must lie in [1, m]");
    SparseTask t;
    t.m = m;
    t.s = s;
    t.dist = d;
    t.eps = eps;
    t.tau = tau > 0.0 ? tau : default_tau(s);
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    t.f_star.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(s));
    std::sort(t.f_star.begin(), t.f_star.end());
    validate(t);
    return t;
}

std::vector<double> draw_x(std::size_t m, Dist d, std::mt19937_64& rng) {
    std::vector<double> x(m);
    if (d == Dist::Gaussian) {
        std::normal_distribution<double> g;
        for (auto& v : x) v = g(rng);
    } else {
        std::bernoulli_distribution c(0.5);
        for (auto& v : x) v = c(rng) ? 1.0 : -1.0;
    }
    return x;
}

double label(const Tuple& f, const std::vector<double>& x) {
    double y = 0.0;
    for (std::size_t j : f) y += x.at(j);
    return y;
}

ExampleBatch gen_examples(const SparseTask& t, std::size_t n, std::uint64_t seed) {
    validate(t);
    ExampleBatch b;
    b.m = t.m;
    auto rng = substream(seed, 11, 0);
    for (std::size_t i = 0; i < n; ++i) {
        b.x.push_back(draw_x(t.m, t.dist, rng));
        b.y.push_back(label(t.f_star, b.x.back()));
    }
    return b;
}

// ---- embedding --------------------------------------------------------------

std::size_t projection_dim(double tau, std::size_t buckets, double delta) {
    if (!(tau > 0.0) || !(delta > 0.0 && delta < 1.0)) throw SparseError("projection needs tau > 0, delta in (0,1)");
    const double K = static_cast<double>(buckets);
    return static_cast<std::size_t>(std::ceil(8.0 * tau * tau * std::log(2.0 * K * K / delta)));
}

BucketEmbedding::BucketEmbedding(double eps, double clip, EmbedMode mode, double tau, double delta,
                                 std::uint64_t seed)
    : eps_(eps), clip_(clip), tau_(tau), mode_(mode), seed_(seed),
      clips_(std::make_shared<std::atomic<std::size_t>>(0)) {
    if (!(eps > 0.0) || !(clip > 0.0)) throw SparseError("embedding needs eps > 0 and clip > 0");
    buckets_ = static_cast<std::size_t>(std::ceil(2.0 * clip / eps));
    if (mode == EmbedMode::OneHot) {
        if (buckets_ > 100000) throw SparseError("one-hot embedding too wide; use random projection");
        dim_ = buckets_;
    } else {
        dim_ = projection_dim(tau, buckets_, delta);
    }
}

std::size_t BucketEmbedding::bucket(double v) const {
    if (std::isnan(v)) throw SparseError("NaN value cannot be embedded");
    if (v < -clip_ || v > clip_) clips_->fetch_add(1);
    const double u = std::floor((std::clamp(v, -clip_, clip_) + clip_) / eps_);
    return std::min(static_cast<std::size_t>(std::max(u, 0.0)), buckets_ - 1);
}

Vector BucketEmbedding::embed(double v) const {
    const std::size_t k = bucket(v);
    Vector e = Vector::Zero(static_cast<Eigen::Index>(dim_));
    if (mode_ == EmbedMode::OneHot) {
        e(static_cast<Eigen::Index>(k)) = 1.0;
        return e;
    }
    auto rng = substream(seed_, 13, k);
    std::normal_distribution<double> g;
    for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = g(rng);
    return e / e.norm();
}

double BucketEmbedding::inner(double a, double b) const { return embed(a).dot(embed(b)); }

EmbeddingCheck check_embedding(const BucketEmbedding& e, std::size_t samples, std::uint64_t seed) {
    EmbeddingCheck r;
    r.samples = samples;
    auto rng = substream(seed, 17, 0);
    std::uniform_real_distribution<double> u(-e.clip(), e.clip());
    std::uniform_real_distribution<double> frac(0.0, 1.0);
    for (std::size_t i = 0; i < samples; ++i) {
        const double a = u(rng), b = u(rng);
        const Vector ea = e.embed(a);
        r.max_self_err = std::max(r.max_self_err, std::abs(ea.squaredNorm() - 1.0));
        if (std::abs(a - b) >= e.eps()) r.max_far = std::max(r.max_far, std::abs(ea.dot(e.embed(b))));
        const double lo = -e.clip() + static_cast<double>(e.bucket(a)) * e.eps();
        const double c = std::min(lo + frac(rng) * e.eps(), e.clip());
        if (e.bucket(c) == e.bucket(a)) r.min_close = std::min(r.min_close, ea.dot(e.embed(c)));
    }
    r.ok = r.max_far < 1.0 / (2.0 * e.tau()) && r.min_close >= -1e-12 && r.max_self_err < 1e-9;
    return r;
}

// ---- brute-force hypothesis set ---------------------------------------------

std::uint64_t binomial(std::size_t n, std::size_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    std::uint64_t r = 1;
    for (std::size_t i = 1; i <= k; ++i) {
        r = r * (n - k + i) / i;
        if (r > kOracleLimit * 1000) return r;
    }
    return r;
}

bool is_consistent(const ExampleBatch& b, std::size_t prefix, const Tuple& f, double eps) {
    for (std::size_t t = 0; t < prefix; ++t)
        if (std::abs(label(f, b.x[t]) - b.y[t]) > eps) return false;
    return true;
}

std::vector<Tuple> oracle_consistent(const ExampleBatch& b, std::size_t prefix, std::size_t s, double eps) {
    if (prefix > b.n()) throw SparseError("prefix longer than batch");
    if (s < 1 || s > b.m) throw SparseError("s must lie in [1, m]");
    if (binomial(b.m, s) > kOracleLimit) throw SparseError("oracle scale exceeded");
    std::vector<Tuple> out;
    Tuple c(s);
    std::iota(c.begin(), c.end(), 0);
    while (true) {
        if (is_consistent(b, prefix, c, eps)) out.push_back(c);
        std::size_t i = s;
        while (i > 0 && c[i - 1] == b.m - s + i - 1) --i;
        if (i == 0) break;
        ++c[i - 1];
        for (std::size_t k = i; k < s; ++k) c[k] = c[k - 1] + 1;
    }
    return out;
}

bool has_bijection(const ExampleBatch& b, const Tuple& f_star, const Tuple& C, double eps) {
    if (f_star.size() != C.size()) return false;
    Tuple perm = C;
    std::sort(perm.begin(), perm.end());
    do {
        bool ok = true;
        for (std::size_t t = 0; t < b.n() && ok; ++t)
            for (std::size_t i = 0; i < f_star.size() && ok; ++i)
                ok = std::abs(b.x[t][f_star[i]] - b.x[t][perm[i]]) <= eps;
        if (ok) return true;
    } while (std::next_permutation(perm.begin(), perm.end()));
    return false;
}

// ---- risk -------------------------------------------------------------------

RiskEstimate risk_eval(const Tuple& hyp, const SparseTask& t, std::size_t n_test, std::uint64_t seed) {
    validate(t);
    if (n_test < 2) throw SparseError("risk needs at least two test draws");
    for (std::size_t j : hyp)
        if (j >= t.m) throw SparseError("hypothesis index out of range");
    auto rng = substream(seed, 19, 0);
    double sum = 0.0, sq = 0.0;
    std::size_t miss = 0;
    for (std::size_t i = 0; i < n_test; ++i) {
        const auto x = draw_x(t.m, t.dist, rng);
        const double d = std::abs(label(hyp, x) - label(t.f_star, x));
        sum += d;
        sq += d * d;
        if (d > t.eps) ++miss;
    }
    const double n = static_cast<double>(n_test);
    RiskEstimate r;
    r.n_test = n_test;
    r.mean = sum / n;
    r.se = std::sqrt(std::max(0.0, sq / n - r.mean * r.mean) / (n - 1.0));
    r.disagree = static_cast<double>(miss) / n;
    r.disagree_se = std::sqrt(r.disagree * (1.0 - r.disagree) / n);
    return r;
}

std::size_t risk_sample_size(double K, std::size_t s, std::size_t m, double eps) {
    if (!(K > 0.0) || !(eps > 0.0) || s < 1 || m < 1) throw SparseError("invalid sample-size arguments");
    const double v = K * static_cast<double>(s) * std::log(static_cast<double>(m) / eps) / eps;
    return static_cast<std::size_t>(std::ceil(std::max(v, 1.0)));
}

double disagreement_bound(std::size_t m, double delta, std::size_t n) {
    if (n == 0 || !(delta > 0.0 && delta < 1.0)) throw SparseError("bound needs n >= 1 and delta in (0,1)");
    return 20.0 * std::log(static_cast<double>(m) / delta) / (3.0 * static_cast<double>(n));
}

}  // namespace icl
