#include <algorithm>
#include <cmath>

#include "icl/sparse_icl.hpp"
#include "layer_build.hpp"

namespace icl {

using namespace detail;

namespace {

constexpr double kMaskScale = 1073741824.0;  // 2^30, beyond kMaskCut after negation
constexpr double kPrefixBlend = 1e-3;         // weight of the all-prefix average

std::size_t argmax_tol(const Vector& v, double tol) {
    const double mx = v.maxCoeff();
    Idx i = 0;
    while (v(i) < mx - tol) ++i;
    return static_cast<std::size_t>(i);
}

void check_subset(const Tuple& C, std::size_t m) {
    std::vector<char> seen(m, 0);
    for (std::size_t j : C) {
        if (j >= m) throw SparseError("deflation index out of range");
        if (seen[j]) throw SparseError("deflation set has duplicates");
        seen[j] = 1;
    }
}

}  // namespace

Vector deflate(const Vector& y1, const Tuple& C, const std::vector<Vector>& x1, double* companion) {
    check_subset(C, x1.size());
    const std::size_t k = C.size() + 1;
    // Last row of the causal softmax over all-zero logits: uniform over k.
    const Vector w = masked_softmax(Matrix::Zero(I(k), I(k))).row(I(k - 1)).transpose();
    Vector out = w(I(k - 1)) * y1;
    for (std::size_t i = 0; i < C.size(); ++i) out -= w(I(i)) * x1[C[i]];
    const double c = w(I(k - 1));
    if (companion) *companion = c;
    return out / c;
}

Vector compositional_label(const std::vector<Vector>& x1, const Tuple& f) {
    if (x1.empty()) throw SparseError("no coordinates");
    Vector y = Vector::Zero(x1[0].size());
    for (std::size_t j : f) y += x1.at(j);
    return y;
}

SsparseResult run_ssparse(const SparseTask& task, const ExampleBatch& b, const BucketEmbedding& e) {
    validate(task);
    if (b.m != task.m) throw SparseError("batch dimension differs from task");
    if (b.n() == 0) throw SparseError("empty batch");
    const std::size_t m = task.m, n = b.n();

    std::vector<std::vector<Vector>> x1(n);
    std::vector<Vector> y1(n);
    for (std::size_t t = 0; t < n; ++t) {
        for (double v : b.x[t]) x1[t].push_back(e.embed(v));
        y1[t] = compositional_label(x1[t], task.f_star);
    }

    SsparseResult res;
    std::vector<Tuple> C(n);
    for (std::size_t r = 0; r < task.s; ++r) {
        SsparseRound round;
        round.C_before = C;
        std::vector<Vector> o1(n);
        for (std::size_t t = 0; t < n; ++t) {
            const Vector d = deflate(y1[t], C[t], x1[t]);
            // Column order matches the token order: coordinates then label.
            Vector logit(I(m + 1));
            for (std::size_t j = 0; j < m; ++j) logit(I(j)) = d.dot(x1[t][j]);
            logit(I(m)) = 1.0;
            Vector a = (logit.array() - logit.maxCoeff()).exp();
            a /= a.sum();
            o1[t] = a.head(I(m));
        }
        std::vector<std::vector<char>> ind(n, std::vector<char>(m, 0));
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t j : C[t]) ind[t][j] = 1;
        for (std::size_t t = 0; t < n; ++t) {
            // Average over earlier labels holding the same set; the plain
            // prefix average only separates exact ties.
            std::vector<std::size_t> peers;
            for (std::size_t u = 0; u <= t; ++u)
                if (ind[u] == ind[t]) peers.push_back(u);
            const double share = 1.0 / static_cast<double>(peers.size());
            Vector agg = Vector::Zero(I(m));
            for (std::size_t u : peers) agg += share * o1[u];
            Vector all = Vector::Zero(I(m));
            for (std::size_t u = 0; u <= t; ++u) all += o1[u] / static_cast<double>(t + 1);
            agg += kPrefixBlend * all;
            round.aggregate.push_back(agg);
            for (std::size_t j : C[t]) agg(I(j)) -= 2.0;
            const std::size_t w = argmax_tol(agg, kArgmaxTieTol);
            round.winner.push_back(w);
            C[t].push_back(w);
        }
        res.rounds.push_back(std::move(round));
    }

    // Each winner at the final prefix must carry the deflated label on every
    // example.
    for (std::size_t r = 0; r < task.s; ++r) {
        const std::size_t w = res.rounds[r].winner[n - 1];
        const Tuple& before = res.rounds[r].C_before[n - 1];
        for (std::size_t t = 0; t < n; ++t)
            if (x1[t][w].dot(deflate(y1[t], before, x1[t])) < 0.5)
                throw SparseError("inconsistent batch: round " + std::to_string(r) + " winner " +
                                  std::to_string(w) + " fails on example " + std::to_string(t));
    }

    for (auto& c : C) std::sort(c.begin(), c.end());
    res.C_prefix = C;
    res.C = C[n - 1];
    res.bijection_ok = has_bijection(b, task.f_star, res.C, task.eps);
    return res;
}

// ---- stacked layers ---------------------------------------------------------

namespace {

struct StackLayout {
    std::size_t D, m, s;

    std::size_t emb() const { return 0; }
    std::size_t tgt() const { return D; }
    std::size_t one() const { return 2 * D; }
    std::size_t is_y() const { return 2 * D + 1; }
    std::size_t coord() const { return 2 * D + 2; }
    std::size_t cind0() const { return coord() + m; }
    std::size_t round_base(std::size_t r) const { return cind0() + m + r * (D + 1 + 5 * m); }
    std::size_t def(std::size_t r) const { return round_base(r); }
    std::size_t kc(std::size_t r) const { return def(r) + D; }
    std::size_t o1(std::size_t r) const { return kc(r) + 1; }
    std::size_t agg(std::size_t r) const { return o1(r) + m; }
    std::size_t msk(std::size_t r) const { return agg(r) + m; }
    std::size_t hyp(std::size_t r) const { return msk(r) + m; }
    std::size_t cnext(std::size_t r) const { return hyp(r) + m; }
    std::size_t cind(std::size_t r) const { return r == 0 ? cind0() : cnext(r - 1); }
    std::size_t width() const { return round_base(s); }
};

// dst[i] = sum over terms of coef * x[src + i], as one affine step over [0, hi).
MlpStep gather(std::size_t dst, std::size_t len, const std::vector<std::pair<std::size_t, double>>& terms,
               double bias) {
    std::size_t hi = 0;
    for (const auto& [src, c] : terms) hi = std::max(hi, src + len);
    Matrix W = Matrix::Zero(I(len), I(hi));
    for (const auto& [src, c] : terms)
        for (std::size_t i = 0; i < len; ++i) W(I(i), I(src + i)) += c;
    return MlpStep::affine(0, dst, std::move(W), Vector::Constant(I(len), bias), false);
}

std::vector<LayerParams> build_stack(const StackLayout& L) {
    const std::size_t W = L.width(), D = L.D, m = L.m, stride = m + 1;
    std::vector<LayerParams> layers;
    for (std::size_t r = 0; r < L.s; ++r) {
        // Deflation: label attends to itself and to coordinates already in C.
        {
            const std::size_t da = square_at_least(std::max(D + 1, m + 2));
            const double sc = std::sqrt(static_cast<double>(da)) * kMaskScale;
            Head h = empty_head(da, W);
            for (std::size_t i = 0; i < m; ++i) {
                h.Q(I(i), I(L.cind(r) + i)) = sc;
                h.K(I(i), I(L.coord() + i)) = 1.0;
            }
            h.Q(I(m), I(L.is_y())) = -sc;
            h.K(I(m), I(L.one())) = 1.0;
            h.Q(I(m + 1), I(L.is_y())) = sc;
            h.K(I(m + 1), I(L.is_y())) = 1.0;
            for (std::size_t i = 0; i < D; ++i) {
                h.V(I(i), I(L.tgt() + i)) = 1.0;
                h.V(I(i), I(L.emb() + i)) = -1.0;
            }
            h.V(I(D), I(L.is_y())) = 1.0;
            h.bias = example_bias(stride, [m](Pos q, Pos k, std::size_t qi, std::size_t ki) {
                if (qi == ki) return 0.0;
                return (q.slot == m && k.ex == q.ex) ? 0.0 : kNegInf;
            });
            LayerParams l = skip_layer(std::move(h), W);
            for (std::size_t i = 0; i < D; ++i) l.W_O(I(L.def(r) + i), I(i)) = 1.0;
            l.W_O(I(L.kc(r)), I(D)) = 1.0;
            Matrix cnt = Matrix::Ones(1, I(m));
            l.mlp.push_back(MlpStep::affine(L.cind(r), L.kc(r), cnt, Vector::Ones(1), false));
            for (std::size_t i = 0; i < D; ++i)
                l.mlp.push_back(MlpStep::product(L.def(r) + i, L.kc(r), L.def(r) + i));
            layers.push_back(std::move(l));
        }
        // Selection by similarity to the deflated label.
        {
            const std::size_t da = square_at_least(std::max(D, m));
            const double sc = std::sqrt(static_cast<double>(da));
            Head h = empty_head(da, W);
            for (std::size_t i = 0; i < D; ++i) {
                h.Q(I(i), I(L.def(r) + i)) = sc;
                h.K(I(i), I(L.emb() + i)) = 1.0;
            }
            for (std::size_t i = 0; i < m; ++i) h.V(I(i), I(L.coord() + i)) = 1.0;
            h.bias = example_bias(stride, [m](Pos q, Pos k, std::size_t qi, std::size_t ki) {
                if (qi == ki) return q.slot == m ? 1.0 : 0.0;
                return (q.slot == m && k.ex == q.ex) ? 0.0 : kNegInf;
            });
            LayerParams l = skip_layer(std::move(h), W);
            for (std::size_t i = 0; i < m; ++i) l.W_O(I(L.o1(r) + i), I(i)) = 1.0;
            layers.push_back(std::move(l));
        }
        // Average over earlier labels with the same set, exclusion of C,
        // argmax, and C update.
        {
            const std::size_t da = square_at_least(m + 1);
            const double sc = std::sqrt(static_cast<double>(da)) * kMaskScale;
            Head h = empty_head(da, W);
            for (std::size_t i = 0; i < m; ++i) {
                h.Q(I(i), I(L.cind(r) + i)) = sc;
                h.K(I(i), I(L.cind(r) + i)) = 1.0;
                h.V(I(i), I(L.o1(r) + i)) = 1.0;
            }
            h.Q(I(m), I(L.is_y())) = -sc * static_cast<double>(r);
            h.K(I(m), I(L.one())) = 1.0;
            h.bias = example_bias(stride, [m](Pos q, Pos k, std::size_t qi, std::size_t ki) {
                if (q.slot == m) return k.slot == m ? 0.0 : kNegInf;
                return qi == ki ? 0.0 : kNegInf;
            });
            Head all = empty_head(da, W);
            for (std::size_t i = 0; i < m; ++i) all.V(I(i), I(L.o1(r) + i)) = 1.0;
            all.bias = h.bias;
            LayerParams l = skip_layer(std::move(h), W);
            l.heads.push_back(std::move(all));
            l.W_O = Matrix::Zero(I(W), I(2 * da));
            for (std::size_t i = 0; i < m; ++i) {
                l.W_O(I(L.agg(r) + i), I(i)) = 1.0;
                l.W_O(I(L.agg(r) + i), I(da + i)) = kPrefixBlend;
            }
            l.mlp.push_back(gather(L.msk(r), m, {{L.agg(r), 1.0}, {L.cind(r), -2.0}}, 0.0));
            l.mlp.push_back(MlpStep::argmax_one_hot(L.msk(r), L.hyp(r), m, kArgmaxTieTol));
            l.mlp.push_back(gather(L.cnext(r), m, {{L.cind(r), 1.0}, {L.hyp(r), 1.0}}, 0.0));
            // Coordinate tokens keep an empty indicator block.
            for (std::size_t i = 0; i < m; ++i)
                l.mlp.push_back(MlpStep::product(L.cnext(r) + i, L.is_y(), L.cnext(r) + i));
            layers.push_back(std::move(l));
        }
    }
    return layers;
}

}  // namespace

StackedRun run_ssparse_stacked(const SparseTask& task, const ExampleBatch& b, const BucketEmbedding& e) {
    validate(task);
    if (b.m != task.m) throw SparseError("batch dimension differs from task");
    if (b.n() == 0) throw SparseError("empty batch");
    const StackLayout L{e.dim(), task.m, task.s};
    const std::size_t m = task.m, n = b.n();

    Matrix X = Matrix::Zero(I(L.width()), I(n * (m + 1)));
    for (std::size_t t = 0; t < n; ++t) {
        std::vector<Vector> x1;
        for (std::size_t j = 0; j < m; ++j) {
            const Idx c = I(t * (m + 1) + j);
            x1.push_back(e.embed(b.x[t][j]));
            X.col(c).segment(I(L.emb()), I(L.D)) = x1.back();
            X(I(L.one()), c) = 1.0;
            X(I(L.coord() + j), c) = 1.0;
        }
        const Idx c = I(t * (m + 1) + m);
        X.col(c).segment(I(L.tgt()), I(L.D)) = compositional_label(x1, task.f_star);
        X(I(L.one()), c) = 1.0;
        X(I(L.is_y()), c) = 1.0;
    }

    const auto layers = build_stack(L);
    const Matrix Z = run_layers(X, layers);
    StackedRun out;
    out.layers = layers.size();
    for (std::size_t t = 0; t < n; ++t) {
        Tuple c;
        for (std::size_t j = 0; j < m; ++j)
            if (Z(I(L.cind(task.s) + j), I(t * (m + 1) + m)) > 0.5) c.push_back(j);
        out.C_prefix.push_back(std::move(c));
    }
    out.C = out.C_prefix.back();
    return out;
}

}  // namespace icl
