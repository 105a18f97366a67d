#include <algorithm>
#include <cmath>

#include "icl/segmenter.hpp"

namespace icl {

namespace {

using S = SegLayout::Slot;

// Rounding band half-width used by the staircase MLPs; inputs must sit
// within 0.5 - kBand / 2 of an integer.
constexpr double kBand = 0.1;
constexpr double kMaxRoundErr = 0.4;

struct Affine {
    Matrix W;
    Vector b;
    explicit Affine(std::size_t rows, std::size_t width)
        : W(Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(width))),
          b(Vector::Zero(static_cast<Eigen::Index>(rows))) {}
    void set(std::size_t r, std::size_t col, double v) { W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col)) += v; }
    MlpStep step(std::size_t dst, bool relu) const { return MlpStep::affine(0, dst, W, b, relu); }
};

// Staircase: x -> round(x) for x in [0, top], as a ReLU layer into scratch
// followed by a linear read-out back onto row.
void push_round(std::vector<MlpStep>& mlp, const SegLayout& L, std::size_t row, std::size_t top) {
    Affine hid(2 * top, L.width());
    for (std::size_t k = 1; k <= top; ++k) {
        const std::size_t r = 2 * (k - 1);
        hid.set(r, row, 1.0 / kBand);
        hid.b(static_cast<Eigen::Index>(r)) = (0.5 - static_cast<double>(k)) / kBand + 0.5;
        hid.set(r + 1, row, 1.0 / kBand);
        hid.b(static_cast<Eigen::Index>(r + 1)) = (0.5 - static_cast<double>(k)) / kBand - 0.5;
    }
    mlp.push_back(hid.step(L.scratch(), true));
    Matrix out = Matrix::Zero(1, static_cast<Eigen::Index>(2 * top));
    for (std::size_t k = 0; k < top; ++k) {
        out(0, static_cast<Eigen::Index>(2 * k)) = 1.0;
        out(0, static_cast<Eigen::Index>(2 * k + 1)) = -1.0;
    }
    mlp.push_back(MlpStep::affine(L.scratch(), row, out, Vector::Zero(1), false));
}

Head zero_head(std::size_t d_att, std::size_t width) {
    Head h;
    h.Q = Matrix::Zero(static_cast<Eigen::Index>(d_att), static_cast<Eigen::Index>(width));
    h.K = h.Q;
    h.V = h.Q;
    return h;
}

LayerParams skip_layer(const SegLayout& L, std::size_t d_att) {
    LayerParams p;
    p.use_skip = true;
    p.W_O = Matrix::Zero(static_cast<Eigen::Index>(L.width()),
                         static_cast<Eigen::Index>(L.heads * d_att));
    return p;
}

void route(LayerParams& p, std::size_t h, std::size_t d_att, std::size_t head_row, std::size_t dst) {
    p.W_O(static_cast<Eigen::Index>(dst), static_cast<Eigen::Index>(h * d_att + head_row)) = 1.0;
}

// Attends from i to the largest earlier position j whose indicator row is 1.
// Position 1 (<begin>) attends to itself.
LayerParams nearest_marker_layer(const SegLayout& L, double gamma, S marker, S dst) {
    LayerParams p = skip_layer(L, 1);
    const double n1 = static_cast<double>(L.max_len + 1);
    for (std::size_t h = 0; h < L.heads; ++h) {
        Head hd = zero_head(1, L.width());
        hd.Q(0, static_cast<Eigen::Index>(L.one())) = gamma;
        hd.K(0, static_cast<Eigen::Index>(L.pos())) = 1.0;
        hd.K(0, static_cast<Eigen::Index>(L.slot(h, marker))) = n1;
        hd.K(0, static_cast<Eigen::Index>(L.one())) = -n1;
        hd.V(0, static_cast<Eigen::Index>(L.pos())) = 1.0;
        hd.bias = [](std::size_t i, std::size_t j) { return (i == j && i != 0) ? kNegInf : 0.0; };
        p.heads.push_back(std::move(hd));
        route(p, h, 1, 0, L.slot(h, dst));
    }
    return p;
}

}  // namespace

double seg_gamma(std::size_t max_len, double mass_tol) { return pick_gamma(1.0, mass_tol, max_len); }

SegTransformer build_seg_transformer(const std::vector<int>& delims, std::size_t vocab_size,
                                     std::size_t max_len, CondOracle oracle, double gamma) {
    if (!oracle) throw SegError("missing conditional-probability oracle");
    if (max_len < 2) throw SegError("max_len must be at least 2");
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw SegError("gamma must be positive and finite");
    // Position selection: competitors sit >= gamma below the target and the
    // value error is bounded by the off-max mass times the position range.
    if (off_max_mass(gamma, 1.0, max_len) * static_cast<double>(max_len) >= kMaxRoundErr)
        throw SegError("gamma too small to separate position logits");
    for (int d : delims)
        if (d < 2 || static_cast<std::size_t>(d) >= vocab_size) throw SegError("delimiter outside vocabulary");

    SegTransformer t;
    t.pairs = candidate_pairs(delims);
    t.gamma = gamma;
    t.oracle = std::move(oracle);
    t.ln_nu = t.oracle(CondQuery{{}, 0, 0, true});
    SegLayout& L = t.layout;
    L.vocab = vocab_size;
    L.heads = t.pairs.size();
    L.max_len = max_len;
    const auto W = static_cast<Eigen::Index>(L.width());
    const auto ix = [](std::size_t v) { return static_cast<Eigen::Index>(v); };

    // Token-only features.
    t.front.W_E = Matrix::Zero(W, ix(vocab_size));
    for (std::size_t v = 0; v < vocab_size; ++v) {
        const auto c = ix(v);
        t.front.W_E(ix(v), c) = 1.0;
        t.front.W_E(ix(L.one()), c) = 1.0;
        t.front.W_E(ix(L.is_begin()), c) = v == 0 ? 1.0 : 0.0;
        t.front.W_E(ix(L.is_end()), c) = v == 1 ? 1.0 : 0.0;
        for (std::size_t h = 0; h < L.heads; ++h) {
            const bool e = static_cast<int>(v) == t.pairs[h].esep || v == 0;
            const bool l = e || static_cast<int>(v) == t.pairs[h].lsep;
            t.front.W_E(ix(L.slot(h, S::E)), c) = e ? 1.0 : 0.0;
            t.front.W_E(ix(L.slot(h, S::LP)), c) = l ? 1.0 : 0.0;
        }
    }

    // Layer 1: nearest earlier esep, rounded.
    LayerParams l1 = nearest_marker_layer(L, gamma, S::E, S::ME);
    for (std::size_t h = 0; h < L.heads; ++h) push_round(l1.mlp, L, L.slot(h, S::ME), max_len);
    t.front.layers.push_back(std::move(l1));

    // Layer 2: nearest earlier boundary, rounded, then polynomial features.
    LayerParams l2 = nearest_marker_layer(L, gamma, S::LP, S::ML);
    for (std::size_t h = 0; h < L.heads; ++h) {
        const std::size_t me = L.slot(h, S::ME), ml = L.slot(h, S::ML);
        push_round(l2.mlp, L, ml, max_len);
        l2.mlp.push_back(MlpStep::product(ml, me, L.slot(h, S::MLME)));
        l2.mlp.push_back(MlpStep::product(ml, ml, L.slot(h, S::ML2)));
        l2.mlp.push_back(MlpStep::product(me, me, L.slot(h, S::ME2)));
        l2.mlp.push_back(MlpStep::product(L.slot(h, S::ML2), me, L.slot(h, S::ML2ME)));
        l2.mlp.push_back(MlpStep::product(L.slot(h, S::ME2), ml, L.slot(h, S::ME2ML)));
    }
    t.front.layers.push_back(std::move(l2));

    // Layer 3: query i' looks for an earlier i in the same example that sits
    // in a label while a later boundary separates it from i'.
    {
        constexpr std::size_t da = 6;
        LayerParams l3 = skip_layer(L, da);
        const double n = static_cast<double>(max_len);
        const double g1 = 2.0 * gamma * (n + 1.0) * std::sqrt(static_cast<double>(da));
        const double g2 = gamma * std::sqrt(static_cast<double>(da));
        for (std::size_t h = 0; h < L.heads; ++h) {
            Head hd = zero_head(da, L.width());
            const auto a = ix(L.slot(h, S::ML)), b = ix(L.slot(h, S::ME));
            const auto ab = ix(L.slot(h, S::MLME)), c2 = ix(L.slot(h, S::ML2)), d2 = ix(L.slot(h, S::ME2));
            const auto c2d = ix(L.slot(h, S::ML2ME)), cd2 = ix(L.slot(h, S::ME2ML));
            const auto one = ix(L.one()), pos = ix(L.pos());
            hd.Q(0, a) = g1;
            hd.Q(1, ab) = g1;
            hd.Q(2, one) = g1;
            hd.Q(3, b) = g1;
            hd.Q(4, one) = g2;
            hd.Q(5, pos) = -g2;
            // (a - c)(d - b + 1/2)(c - d) with key (c, d) = (m_l, m_e).
            hd.K(0, ab) = 1.0;
            hd.K(0, d2) = -1.0;
            hd.K(0, a) = 0.5;
            hd.K(0, b) = -0.5;
            hd.K(1, b) = 1.0;
            hd.K(1, a) = -1.0;
            hd.K(2, c2d) = -1.0;
            hd.K(2, cd2) = 1.0;
            hd.K(2, c2) = -0.5;
            hd.K(2, ab) = 0.5;
            hd.K(3, c2) = 1.0;
            hd.K(3, ab) = -1.0;
            hd.K(4, pos) = 1.0;
            hd.K(5, one) = 1.0;
            hd.V(0, pos) = 1.0;
            l3.heads.push_back(std::move(hd));
            route(l3, h, da, 0, L.slot(h, S::IOTA));

            // viol = 1[i' - iota > 1/2] as a two-unit ReLU band.
            Affine band(2, L.width());
            for (std::size_t r = 0; r < 2; ++r) {
                band.set(r, L.pos(), 1.0 / kBand);
                band.set(r, L.slot(h, S::IOTA), -1.0 / kBand);
                band.b(ix(r)) = -0.5 / kBand + 0.5 - static_cast<double>(r);
            }
            l3.mlp.push_back(band.step(L.scratch(), true));
            Matrix diff(1, 2);
            diff << 1.0, -1.0;
            l3.mlp.push_back(MlpStep::affine(L.scratch(), L.slot(h, S::VIOL), diff, Vector::Zero(1), false));
        }
        t.front.layers.push_back(std::move(l3));
    }

    // Back layer A: copy the previous position's log-probability and cancel
    // the query's end emission at a trailing lsep.
    {
        LayerParams la = skip_layer(L, 1);
        for (std::size_t h = 0; h < L.heads; ++h) {
            Head hd = zero_head(1, L.width());
            hd.V(0, ix(L.slot(h, S::LNP))) = 1.0;
            hd.bias = [](std::size_t i, std::size_t j) { return (j + 1 == i || (i == 0 && j == 0)) ? 0.0 : kNegInf; };
            la.heads.push_back(std::move(hd));
            route(la, h, 1, 0, L.slot(h, S::PREV));

            Affine inda(1, L.width());
            inda.set(0, L.pos(), -1.0);
            inda.set(0, L.slot(h, S::ML), 1.0);
            inda.b(0) = 2.0;
            la.mlp.push_back(inda.step(L.slot(h, S::INDA), true));

            Affine indb(2, L.width());
            indb.set(0, L.pos(), 1.0);
            indb.set(0, L.slot(h, S::ME), -1.0);
            indb.b(0) = -1.0;
            indb.set(1, L.pos(), 1.0);
            indb.set(1, L.slot(h, S::ME), -1.0);
            indb.b(1) = -2.0;
            la.mlp.push_back(indb.step(L.scratch(), true));
            Matrix diff(1, 2);
            diff << 1.0, -1.0;
            la.mlp.push_back(MlpStep::affine(L.scratch(), L.slot(h, S::INDB), diff, Vector::Zero(1), false));

            la.mlp.push_back(MlpStep::product(L.is_end(), L.slot(h, S::INDA), L.slot(h, S::Q)));
            la.mlp.push_back(MlpStep::product(L.slot(h, S::Q), L.slot(h, S::INDB), L.slot(h, S::Q)));

            Affine neg(1, L.width());
            neg.set(0, L.slot(h, S::PREV), -1.0);
            neg.set(0, L.slot(h, S::LNP), -1.0);
            la.mlp.push_back(neg.step(L.slot(h, S::TMP), false));
            la.mlp.push_back(MlpStep::product(L.slot(h, S::Q), L.slot(h, S::TMP), L.slot(h, S::TMP)));
            Affine add(1, L.width());
            add.set(0, L.slot(h, S::LNP), 1.0);
            add.set(0, L.slot(h, S::TMP), 1.0);
            la.mlp.push_back(add.step(L.slot(h, S::CONTRIB), false));
        }
        t.back.push_back(std::move(la));
    }

    // Back layer B: uniform prefix mean of (contribution, violation), scaled
    // by position, gated to the floor on any violation, then argmax.
    {
        constexpr std::size_t da = 2;
        LayerParams lb = skip_layer(L, da);
        for (std::size_t h = 0; h < L.heads; ++h) {
            Head hd = zero_head(da, L.width());
            hd.V(0, ix(L.slot(h, S::CONTRIB))) = 1.0;
            hd.V(1, ix(L.slot(h, S::VIOL))) = 1.0;
            lb.heads.push_back(std::move(hd));
            route(lb, h, da, 0, L.slot(h, S::MEANC));
            route(lb, h, da, 1, L.slot(h, S::MEANV));

            lb.mlp.push_back(MlpStep::product(L.pos(), L.slot(h, S::MEANC), L.slot(h, S::SUM)));
            lb.mlp.push_back(MlpStep::product(L.pos(), L.slot(h, S::MEANV), L.slot(h, S::NV)));
            Affine over(1, L.width());
            over.set(0, L.slot(h, S::NV), 1.0);
            over.b(0) = -1.0;
            lb.mlp.push_back(over.step(L.scratch(), true));
            Affine gate(1, L.width());
            gate.set(0, L.slot(h, S::NV), 1.0);
            gate.set(0, L.scratch(), -1.0);
            lb.mlp.push_back(gate.step(L.slot(h, S::GATE), false));
            Affine gap(1, L.width());
            gap.set(0, L.slot(h, S::SUM), -1.0);
            gap.b(0) = t.ln_nu;
            lb.mlp.push_back(gap.step(L.slot(h, S::TMP), false));
            lb.mlp.push_back(MlpStep::product(L.slot(h, S::GATE), L.slot(h, S::TMP), L.slot(h, S::TMP)));
            Affine score(1, L.width());
            score.set(0, L.slot(h, S::SUM), 1.0);
            score.set(0, L.slot(h, S::TMP), 1.0);
            lb.mlp.push_back(score.step(L.slot(h, S::SCORE), false));
        }
        Affine gather(L.heads, L.width());
        for (std::size_t h = 0; h < L.heads; ++h) gather.set(h, L.slot(h, S::SCORE), 1.0);
        lb.mlp.push_back(gather.step(L.scratch(), false));
        lb.mlp.push_back(MlpStep::argmax_one_hot(L.scratch(), L.choice(), L.heads, kScoreTieTol));
        t.back.push_back(std::move(lb));
    }
    return t;
}

namespace {

// Assumption-level oracle stage: reads token, position, boundary and
// violation flag off the residual stream and writes ln p per head.
void oracle_stage(const SegTransformer& t, Matrix& X) {
    const SegLayout& L = t.layout;
    const Eigen::Index n = X.cols();
    TokenSeq tokens(static_cast<std::size_t>(n));
    for (Eigen::Index c = 0; c < n; ++c) {
        Eigen::Index id = 0;
        X.col(c).head(static_cast<Eigen::Index>(L.vocab)).maxCoeff(&id);
        tokens[static_cast<std::size_t>(c)] = static_cast<int>(id);
    }
    TokenSeq w(tokens.size());
    for (std::size_t h = 0; h < L.heads; ++h) {
        const DelimPair s = t.pairs[h];
        for (std::size_t i = 0; i < tokens.size(); ++i)
            w[i] = (tokens[i] == s.lsep || tokens[i] == s.esep) ? 1 : tokens[i];
        for (Eigen::Index c = 0; c < n; ++c) {
            const double ml = X(static_cast<Eigen::Index>(L.slot(h, S::ML)), c);
            const auto j = static_cast<std::size_t>(std::llround(ml)) - 1;
            const bool err = X(static_cast<Eigen::Index>(L.slot(h, S::VIOL)), c) > 0.5;
            X(static_cast<Eigen::Index>(L.slot(h, S::LNP)), c) =
                t.oracle(CondQuery{w, static_cast<std::size_t>(c), j, err});
        }
    }
}

}  // namespace

SegRun run_seg_transformer(const SegTransformer& t, std::span<const int> z, AttentionTrace* trace) {
    const SegLayout& L = t.layout;
    if (z.empty() || z[0] != 0) throw SegError("sequence must start with <begin>");
    if (z.size() + 1 > L.max_len) throw SegError("sequence longer than the compiled maximum");
    TokenSeq framed(z.begin(), z.end());
    framed.push_back(1);
    for (std::size_t i = 1; i + 1 < framed.size(); ++i)
        if (framed[i] == 0 || framed[i] == 1) throw SegError("<begin>/<end> inside sequence");

    const auto n = static_cast<Eigen::Index>(framed.size());
    Matrix X(static_cast<Eigen::Index>(L.width()), n);
    for (Eigen::Index c = 0; c < n; ++c) {
        const int tok = framed[static_cast<std::size_t>(c)];
        if (tok < 0 || static_cast<std::size_t>(tok) >= L.vocab) throw SegError("token id out of vocabulary");
        X.col(c) = t.front.W_E.col(tok);
        X(static_cast<Eigen::Index>(L.pos()), c) = static_cast<double>(c + 1);
    }
    X = run_layers(X, t.front.layers, trace);
    oracle_stage(t, X);
    X = run_layers(X, t.back, trace);

    SegRun r;
    for (std::size_t h = 0; h < L.heads; ++h)
        r.head_scores.push_back(X(static_cast<Eigen::Index>(L.slot(h, S::SCORE)), n - 1));
    for (std::size_t h = 0; h < L.heads; ++h)
        if (X(static_cast<Eigen::Index>(L.choice() + h), n - 1) == 1.0) {
            r.best = h;
            break;
        }
    r.sigma = t.pairs[r.best];
    r.residual = std::move(X);
    return r;
}

}  // namespace icl
