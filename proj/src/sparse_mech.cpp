#include <cmath>

#include "icl/sparse_icl.hpp"
#include "layer_build.hpp"

namespace icl {

using namespace detail;

OneSparseMech build_1sparse(std::size_t m, const BucketEmbedding& e, std::size_t check_samples,
                            std::uint64_t check_seed) {
    if (m < 1) throw SparseError("m must be >= 1");
    const EmbeddingCheck chk = check_embedding(e, check_samples, check_seed);
    if (!chk.ok)
        throw SparseError("embedding fails the near-orthogonality check (max far inner product " +
                          std::to_string(chk.max_far) + ")");

    OneSparseMech mech{m, e, {}, {}, 50.0};
    OneSparseLayout& L = mech.layout;
    L.D = e.dim();
    L.m = m;
    const std::size_t W = L.width();
    const std::size_t D = L.D;

    // Layer 1: label attends to its own example's coordinates by embedding
    // similarity; self logit fixed at 1. Coordinates attend to themselves.
    {
        const std::size_t da = std::max(D, m);
        Head h = empty_head(da, W);
        const double r = std::sqrt(static_cast<double>(da));
        for (std::size_t i = 0; i < D; ++i) {
            h.Q(I(i), I(L.tgt() + i)) = r;
            h.K(I(i), I(L.emb() + i)) = 1.0;
        }
        for (std::size_t i = 0; i < m; ++i) h.V(I(i), I(L.coord() + i)) = 1.0;
        h.bias = example_bias(m + 1, [m](Pos q, Pos k, std::size_t qi, std::size_t ki) {
            if (qi == ki) return q.slot == m ? 1.0 : 0.0;
            return (q.slot == m && k.ex == q.ex) ? 0.0 : kNegInf;
        });
        LayerParams l = skip_layer(std::move(h), W);
        for (std::size_t i = 0; i < m; ++i) l.W_O(I(L.o1() + i), I(i)) = 1.0;
        mech.params.layers.push_back(std::move(l));
    }

    // Layer 2: uniform average over label tokens so far, then argmax.
    {
        Head h = empty_head(m, W);
        for (std::size_t i = 0; i < m; ++i) h.V(I(i), I(L.o1() + i)) = 1.0;
        h.bias = example_bias(m + 1, [m](Pos q, Pos k, std::size_t qi, std::size_t ki) {
            if (q.slot == m) return k.slot == m ? 0.0 : kNegInf;
            return qi == ki ? 0.0 : kNegInf;
        });
        LayerParams l = skip_layer(std::move(h), W);
        for (std::size_t i = 0; i < m; ++i) l.W_O(I(L.agg() + i), I(i)) = 1.0;
        l.mlp.push_back(MlpStep::argmax_one_hot(L.agg(), L.hyp(), m, kArgmaxTieTol));
        mech.params.layers.push_back(std::move(l));
    }

    // Layer 3: coordinate token of example t+1 attends to itself and to the
    // previous label; the selected coordinate splits mass 1/2 : 1/2.
    {
        const std::size_t da = std::max<std::size_t>(m, 2);
        Head h = empty_head(da, W);
        const double r = std::sqrt(static_cast<double>(da));
        for (std::size_t i = 0; i < m; ++i) {
            h.Q(I(i), I(L.hyp() + i)) = r;
            h.K(I(i), I(L.hyp() + i)) = 1.0;
        }
        h.V(0, I(L.raw())) = 2.0;
        h.V(1, I(L.is_y())) = 2.0;
        h.bias = example_bias(m + 1, [m](Pos q, Pos k, std::size_t qi, std::size_t ki) {
            if (qi == ki) return 0.0;
            return (q.slot < m && q.ex >= 1 && k.ex + 1 == q.ex && k.slot == m) ? 0.0 : kNegInf;
        });
        LayerParams l = skip_layer(std::move(h), W);
        l.W_O(I(L.o3()), 0) = 1.0;
        l.W_O(I(L.o3() + 1), 1) = 1.0;
        Matrix band(2, 1);
        band << 10.0, 10.0;
        Vector off(2);
        off << -10.0 * kFlagLow, -10.0 * kFlagHigh;
        l.mlp.push_back(MlpStep::affine(L.o3() + 1, L.scratch(), band, off, true));
        Matrix diff(1, 2);
        diff << 1.0, -1.0;
        l.mlp.push_back(MlpStep::affine(L.scratch(), L.flag(), diff, Vector::Zero(1), false));
        l.mlp.push_back(MlpStep::product(L.flag(), L.o3(), L.sel()));
        mech.params.layers.push_back(std::move(l));
    }

    // Layer 4: the last coordinate token copies the flagged value.
    {
        Head h = empty_head(1, W);
        h.Q(0, I(L.one())) = mech.copy_gamma;
        h.K(0, I(L.flag())) = 1.0;
        h.V(0, I(L.sel())) = 1.0;
        h.bias = example_bias(m + 1, [m](Pos q, Pos k, std::size_t qi, std::size_t ki) {
            if (qi == ki) return 0.0;
            return (q.slot + 1 == m && k.ex == q.ex && k.slot < m) ? 0.0 : kNegInf;
        });
        LayerParams l = skip_layer(std::move(h), W);
        l.W_O(I(L.pred()), 0) = 1.0;
        mech.params.layers.push_back(std::move(l));
    }
    return mech;
}

Matrix embed_sequence(const OneSparseMech& mech, const ExampleBatch& b) {
    const OneSparseLayout& L = mech.layout;
    if (b.m != mech.m) throw SparseError("batch dimension differs from mechanism");
    if (b.n() == 0) throw SparseError("empty batch");
    const std::size_t m = mech.m;
    Matrix X = Matrix::Zero(I(L.width()), I(b.n() * (m + 1)));
    for (std::size_t t = 0; t < b.n(); ++t) {
        if (b.x[t].size() != m) throw SparseError("example has wrong dimension");
        for (std::size_t j = 0; j <= m; ++j) {
            const Idx c = I(t * (m + 1) + j);
            const bool y = j == m;
            const double v = y ? b.y[t] : b.x[t][j];
            X.col(c).segment(I(y ? L.tgt() : L.emb()), I(L.D)) = mech.emb.embed(v);
            X(I(L.one()), c) = 1.0;
            if (y) {
                X(I(L.is_y()), c) = 1.0;
            } else {
                X(I(L.raw()), c) = v;
                X(I(L.coord() + j), c) = 1.0;
            }
        }
    }
    return X;
}

OneSparseRun run_1sparse(const OneSparseMech& mech, const ExampleBatch& b) {
    const OneSparseLayout& L = mech.layout;
    const std::size_t m = mech.m;
    OneSparseRun r;
    const Matrix Z = run_layers(embed_sequence(mech, b), mech.params.layers, &r.state.trace);
    for (std::size_t t = 0; t < b.n(); ++t) {
        const Idx yc = I(t * (m + 1) + m);
        r.state.o1.push_back(Z.col(yc).segment(I(L.o1()), I(m)));
        r.state.aggregate.push_back(Z.col(yc).segment(I(L.agg()), I(m)));
        Idx f = 0;
        Z.col(yc).segment(I(L.hyp()), I(m)).maxCoeff(&f);
        r.f.push_back(static_cast<std::size_t>(f));
        const double p = Z(I(L.pred()), I(t * (m + 1) + m - 1));
        r.pred.push_back(p);
        r.loss.push_back((p - b.y[t]) * (p - b.y[t]));
    }
    r.state.f = r.f;
    return r;
}

}  // namespace icl
