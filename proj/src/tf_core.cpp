#include "icl/tf_core.hpp"

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <limits>

namespace icl {

MlpStep MlpStep::argmax_one_hot(std::size_t src, std::size_t dst, std::size_t len,
                                double tie_tol) {
    MlpStep s;
    s.kind = Kind::ArgmaxOneHot;
    s.src = src;
    s.dst = dst;
    s.len = len;
    s.tie_tol = tie_tol;
    return s;
}

MlpStep MlpStep::affine(std::size_t src, std::size_t dst, Matrix W, Vector b, bool relu) {
    if (b.size() != W.rows()) throw EngineError("affine step: bias length mismatch");
    MlpStep s;
    s.kind = Kind::Affine;
    s.src = src;
    s.dst = dst;
    s.W = std::move(W);
    s.b = std::move(b);
    s.relu = relu;
    return s;
}

MlpStep MlpStep::product(std::size_t a, std::size_t b, std::size_t dst) {
    MlpStep s;
    s.kind = Kind::Product;
    s.a = a;
    s.b_idx = b;
    s.dst = dst;
    return s;
}

MlpStep MlpStep::custom(std::string name, std::function<void(Eigen::Ref<Vector>)> fn) {
    MlpStep s;
    s.kind = Kind::Custom;
    s.name = std::move(name);
    s.fn = std::move(fn);
    return s;
}

std::size_t LayerParams::d_in() const {
    if (heads.empty()) throw EngineError("layer has no heads");
    return static_cast<std::size_t>(heads.front().Q.cols());
}

std::size_t LayerParams::d_att() const {
    if (heads.empty()) throw EngineError("layer has no heads");
    return static_cast<std::size_t>(heads.front().Q.rows());
}

std::size_t LayerParams::d_out() const {
    if (W_O.size() == 0) return heads.size() * d_att();
    return static_cast<std::size_t>(W_O.rows());
}

std::size_t ModelParams::width() const {
    std::size_t w = static_cast<std::size_t>(W_E.rows());
    for (const auto& l : layers) w = std::max({w, l.d_in(), l.d_out()});
    return w;
}

Matrix zero_pad_rows(const Matrix& X, std::size_t rows) {
    if (static_cast<std::size_t>(X.rows()) == rows) return X;
    if (static_cast<std::size_t>(X.rows()) > rows) throw EngineError("shape mismatch: input wider than layer");
    Matrix out = Matrix::Zero(static_cast<Eigen::Index>(rows), X.cols());
    out.topRows(X.rows()) = X;
    return out;
}

Matrix masked_softmax(const Matrix& M) {
    if (M.rows() != M.cols()) throw EngineError("masked_softmax: matrix not square");
    const Eigen::Index n = M.rows();
    Matrix A = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j)
            if (M(i, j) > kMaskCut) mx = std::max(mx, M(i, j));
        if (!std::isfinite(mx)) throw EngineError("empty attention row");
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
            if (M(i, j) <= kMaskCut) continue;
            A(i, j) = std::exp(M(i, j) - mx);
            z += A(i, j);
        }
        A.row(i).head(i + 1) /= z;
    }
    return A;
}

namespace {

Matrix hard_attention(const Matrix& M) {
    const Eigen::Index n = M.rows();
    Matrix A = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j)
            if (M(i, j) > kMaskCut) mx = std::max(mx, M(i, j));
        if (!std::isfinite(mx)) throw EngineError("empty attention row");
        const double tol = 1e-12 * std::max(1.0, std::abs(mx));
        int count = 0;
        for (Eigen::Index j = 0; j <= i; ++j)
            if (M(i, j) > kMaskCut && M(i, j) >= mx - tol) {
                A(i, j) = 1.0;
                ++count;
            }
        A.row(i).head(i + 1) /= count;
    }
    return A;
}

void apply_step(const MlpStep& s, Eigen::Ref<Vector> x) {
    switch (s.kind) {
        case MlpStep::Kind::Identity:
            return;
        case MlpStep::Kind::ArgmaxOneHot: {
            const auto src = static_cast<Eigen::Index>(s.src);
            const auto len = static_cast<Eigen::Index>(s.len);
            const Vector slice = x.segment(src, len);
            const double mx = slice.maxCoeff();
            Eigen::Index best = 0;
            while (slice(best) < mx - s.tie_tol) ++best;
            x.segment(static_cast<Eigen::Index>(s.dst), len).setZero();
            x(static_cast<Eigen::Index>(s.dst) + best) = 1.0;
            return;
        }
        case MlpStep::Kind::Affine: {
            Vector y = s.W * x.segment(static_cast<Eigen::Index>(s.src), s.W.cols()) + s.b;
            if (s.relu) y = y.cwiseMax(0.0);
            x.segment(static_cast<Eigen::Index>(s.dst), y.size()) = y;
            return;
        }
        case MlpStep::Kind::Product:
            x(static_cast<Eigen::Index>(s.dst)) =
                x(static_cast<Eigen::Index>(s.a)) * x(static_cast<Eigen::Index>(s.b_idx));
            return;
        case MlpStep::Kind::Custom:
            s.fn(x);
            return;
    }
}

std::size_t step_extent(const MlpStep& s) {
    switch (s.kind) {
        case MlpStep::Kind::ArgmaxOneHot:
            return std::max(s.src, s.dst) + s.len;
        case MlpStep::Kind::Affine:
            return std::max(s.src + static_cast<std::size_t>(s.W.cols()),
                            s.dst + static_cast<std::size_t>(s.W.rows()));
        case MlpStep::Kind::Product:
            return std::max({s.a, s.b_idx, s.dst}) + 1;
        default:
            return 0;
    }
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

namespace {

// M * X, via a sparse product when M is mostly zeros.
Matrix mul(const Matrix& M, const Matrix& X) {
    const Eigen::Index nnz = (M.array() != 0.0).count();
    if (nnz * 20 > M.size()) return M * X;
    const Eigen::SparseMatrix<double> S = M.sparseView(0.0, 0.0);
    return S * X;
}

std::vector<Eigen::Index> nonzero_rows(const Matrix& M) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index r = 0; r < M.rows(); ++r)
        if (!M.row(r).isZero(0.0)) rows.push_back(r);
    return rows;
}

// (QX)^T (KX) summed only over rows where both Q and K are nonzero.
Matrix bilinear(const Matrix& Q, const Matrix& K, const Matrix& X) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index r = 0; r < Q.rows(); ++r)
        if (!Q.row(r).isZero(0.0) && !K.row(r).isZero(0.0)) rows.push_back(r);
    if (rows.size() == static_cast<std::size_t>(Q.rows())) return mul(Q, X).transpose() * mul(K, X);
    if (rows.empty()) return Matrix::Zero(X.cols(), X.cols());
    const Matrix Qr = Q(rows, Eigen::all), Kr = K(rows, Eigen::all);
    return mul(Qr, X).transpose() * mul(Kr, X);
}

// (VX) A^T computed over the nonzero rows of V only.
Matrix mix(const Matrix& V, const Matrix& X, const Matrix& A) {
    const auto rows = nonzero_rows(V);
    Matrix out = Matrix::Zero(V.rows(), X.cols());
    if (rows.empty()) return out;
    const Matrix VX = mul(V(rows, Eigen::all), X);
    const Eigen::Index nnz = (A.array() != 0.0).count();
    if (nnz * 20 > A.size()) {
        out(rows, Eigen::all) = VX * A.transpose();
    } else {
        const Eigen::SparseMatrix<double> S = A.sparseView(0.0, 0.0);
        out(rows, Eigen::all) = VX * S.transpose();
    }
    return out;
}

// Scaled content logits plus position bias. A bias at or below kMaskCut
// masks the entry outright; content terms are skipped for masked entries.
Matrix head_logits(const Head& h, const Matrix& X, double scale) {
    const Eigen::Index n = X.cols();
    if (!h.bias) return bilinear(h.Q, h.K, X) * scale;
    Matrix B = Matrix::Constant(n, n, kNegInf);
    Eigen::Index open = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j <= i; ++j) {
            B(i, j) = h.bias(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
            if (B(i, j) > kMaskCut) ++open;
        }
    if (open * 8 > n * n) {
        Matrix L = bilinear(h.Q, h.K, X) * scale;
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j <= i; ++j) L(i, j) = B(i, j) > kMaskCut ? L(i, j) + B(i, j) : kNegInf;
        return L;
    }
    std::vector<Eigen::Index> rows;
    for (Eigen::Index r = 0; r < h.Q.rows(); ++r)
        if (!h.Q.row(r).isZero(0.0) && !h.K.row(r).isZero(0.0)) rows.push_back(r);
    if (rows.empty()) {
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j <= i; ++j)
                if (B(i, j) <= kMaskCut) B(i, j) = kNegInf;
        return B;
    }
    const Matrix QX = mul(h.Q(rows, Eigen::all), X);
    const Matrix KX = mul(h.K(rows, Eigen::all), X);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j <= i; ++j)
            B(i, j) = B(i, j) > kMaskCut ? B(i, j) + scale * QX.col(i).dot(KX.col(j)) : kNegInf;
    return B;
}

}  // namespace

Matrix layer_forward(const Matrix& X, const LayerParams& p, AttentionTrace* trace) {
    if (X.cols() < 1) throw EngineError("layer_forward: empty sequence");
    const std::size_t d = p.d_in();
    const std::size_t da = p.d_att();
    for (const auto& h : p.heads) {
        if (static_cast<std::size_t>(h.Q.cols()) != d || static_cast<std::size_t>(h.K.cols()) != d ||
            static_cast<std::size_t>(h.V.cols()) != d)
            throw EngineError("layer_forward: head input width mismatch");
        if (static_cast<std::size_t>(h.Q.rows()) != da || static_cast<std::size_t>(h.K.rows()) != da ||
            static_cast<std::size_t>(h.V.rows()) != da)
            throw EngineError("layer_forward: head d_att mismatch");
    }
    if (p.W_O.size() != 0 && static_cast<std::size_t>(p.W_O.cols()) != p.heads.size() * da)
        throw EngineError("layer_forward: W_O column count mismatch");

    const Matrix Xp = zero_pad_rows(X, d);
    const Eigen::Index n = Xp.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(da));

    Matrix concat(static_cast<Eigen::Index>(p.heads.size() * da), n);
    if (trace) trace->layers.emplace_back();
    for (std::size_t k = 0; k < p.heads.size(); ++k) {
        const Head& h = p.heads[k];
        const Matrix logits = head_logits(h, Xp, scale);
        Matrix A = p.hard ? hard_attention(logits) : masked_softmax(logits);
        concat.middleRows(static_cast<Eigen::Index>(k * da), static_cast<Eigen::Index>(da)) =
            mix(h.V, Xp, A);
        if (trace) trace->layers.back().push_back(std::move(A));
    }

    Matrix Xo = p.W_O.size() == 0 ? concat : mul(p.W_O, concat);
    if (p.use_gelu) Xo = Xo.unaryExpr([](double v) { return gelu(v); });

    Matrix out;
    if (p.use_skip) {
        const auto w = std::max<std::size_t>(static_cast<std::size_t>(Xp.rows()),
                                              static_cast<std::size_t>(Xo.rows()));
        out = zero_pad_rows(Xp, w) + zero_pad_rows(Xo, w);
    } else {
        out = std::move(Xo);
    }

    if (!p.mlp.empty()) {
        std::size_t need = static_cast<std::size_t>(out.rows());
        for (const auto& s : p.mlp) need = std::max(need, step_extent(s));
        out = zero_pad_rows(out, need);
        for (Eigen::Index c = 0; c < n; ++c)
            for (const auto& s : p.mlp) apply_step(s, out.col(c));
    }
    return out;
}

Matrix run_layers(const Matrix& X, const std::vector<LayerParams>& layers, AttentionTrace* trace) {
    Matrix Z = X;
    for (const auto& l : layers) {
        if (static_cast<std::size_t>(Z.rows()) < l.d_in()) Z = zero_pad_rows(Z, l.d_in());
        Z = layer_forward(Z, l, trace);
    }
    return Z;
}

Matrix model_forward(const TokenSeq& tokens, const ModelParams& p, AttentionTrace* trace) {
    const Eigen::Index vocab = p.W_E.cols();
    const Eigen::Index d = p.W_E.rows();
    if (tokens.empty()) throw EngineError("model_forward: empty sequence");
    Matrix X(d, static_cast<Eigen::Index>(tokens.size()));
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= vocab) throw EngineError("token id out of vocabulary");
        X.col(static_cast<Eigen::Index>(i)) = p.W_E.col(tokens[i]);
    }
    Matrix Z = run_layers(X, p.layers, trace);
    if (Z.rows() < d) Z = zero_pad_rows(Z, static_cast<std::size_t>(d));
    Matrix logits = p.W_E.transpose() * Z.topRows(d);
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        const double mx = logits.col(c).maxCoeff();
        logits.col(c) = (logits.col(c).array() - mx).exp();
        logits.col(c) /= logits.col(c).sum();
    }
    return logits;
}

double pick_gamma(double score_gap, double mass_tol, std::size_t fanout) {
    return std::log(static_cast<double>(std::max<std::size_t>(fanout, 1)) / mass_tol) / score_gap;
}

double off_max_mass(double gamma, double score_gap, std::size_t fanout) {
    if (is_hard(gamma, score_gap)) return 0.0;
    const double t = static_cast<double>(fanout) * std::exp(-gamma * score_gap);
    return t / (1.0 + t);
}

bool is_hard(double gamma, double score_gap) { return gamma * score_gap >= kHardSaturation; }

}  // namespace icl
