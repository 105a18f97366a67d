#include <algorithm>
#include <bit>
#include <cmath>

#include "icl/sparse_icl.hpp"

namespace icl {

namespace {

// Clipped ramp: 0 at or below c - 1/(2w), 1 at or above c + 1/(2w).
double step(double v, double c, double w) {
    const double a = w * (v - c) + 0.5;
    return std::max(a, 0.0) - std::max(a - 1.0, 0.0);
}

}  // namespace

BitRecovery vector_bit_recovery(const ExampleBatch& b, const BucketEmbedding& e, double tau, double gamma) {
    const std::size_t m = b.m, n = b.n();
    if (m < 1 || n == 0) throw SparseError("vector task needs m >= 1 and a nonempty batch");
    if (!(tau > 2.0 * static_cast<double>(m)))
        throw SparseError("threshold bands overlap: tau must exceed 2m");
    if (!(gamma > 0.0)) throw SparseError("gamma must be positive");

    const std::size_t width = std::bit_ceil(m);
    const std::size_t bits = static_cast<std::size_t>(std::countr_zero(width));

    // Per-example same-bucket indicators, averaged over the prefix and
    // thresholded: 1 only when the coordinate matches on every example.
    std::vector<double> mean(width, 0.0);
    std::vector<double> last_inner(width, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        if (b.x[t].size() != m) throw SparseError("example has wrong dimension");
        const Vector ey = e.embed(b.y[t]);
        for (std::size_t j = 0; j < m; ++j) {
            const double ip = ey.dot(e.embed(b.x[t][j]));
            mean[j] += (ip >= 0.5 ? 1.0 : 0.0) / static_cast<double>(n);
            if (t + 1 == n) last_inner[j] = ip;
        }
    }
    BitRecovery r;
    std::vector<double> M(width, 0.0);
    for (std::size_t j = 0; j < m; ++j) M[j] = step(mean[j], 1.0 - 0.5 / static_cast<double>(n), 2.0 * n);
    r.consistent = M;
    if (std::all_of(M.begin(), M.end(), [](double v) { return v < 0.5; }))
        throw SparseError("no consistent coordinate");

    for (std::size_t k = bits; k-- > 0;) {
        double score = 0.0;
        for (std::size_t j = 0; j < width; ++j)
            if ((j >> k) & 1U) score += M[j] * last_inner[j];
        // Label token attends to the x token (score) or itself (gamma / 2).
        Matrix logits = Matrix::Zero(2, 2);
        logits(1, 0) = gamma * score;
        logits(1, 1) = gamma / 2.0;
        const Matrix A = masked_softmax(logits);
        BitRound br;
        br.bit = k;
        br.attn_x = A(1, 0);
        br.value = br.attn_x > 0.5 ? 1 : 0;
        for (std::size_t j = 0; j < width; ++j) {
            const double beta = static_cast<double>((j >> k) & 1U);
            const double o = A(1, 0) * beta + A(1, 1) * (1.0 - beta);
            M[j] = step(M[j] + o, 1.5, 10.0);
        }
        br.mask = M;
        r.rounds.push_back(std::move(br));
    }
    r.j = static_cast<std::size_t>(std::max_element(M.begin(), M.end()) - M.begin());
    return r;
}

}  // namespace icl
