#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "icl/rng.hpp"
#include "icl/tf_core.hpp"

namespace icl {

class SparseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Dist { Gaussian, Rademacher };

// Coordinates are 0-based throughout.
using Tuple = std::vector<std::size_t>;

struct SparseTask {
    std::size_t m = 5;
    std::size_t s = 1;
    Tuple f_star;  // sorted, |f_star| == s
    Dist dist = Dist::Gaussian;
    double eps = 0.05;
    double tau = 2.0;
};

double default_tau(std::size_t s);
double default_clip(Dist d, std::size_t s);

// f_star drawn uniformly among s-subsets.
SparseTask make_task(std::size_t m, std::size_t s, Dist d, std::mt19937_64& rng, double eps = 0.05,
                     double tau = 0.0);
void validate(const SparseTask& t);

struct ExampleBatch {
    std::size_t m = 0;
    std::vector<std::vector<double>> x;
    std::vector<double> y;

    std::size_t n() const { return y.size(); }
};

std::vector<double> draw_x(std::size_t m, Dist d, std::mt19937_64& rng);
double label(const Tuple& f, const std::vector<double>& x);
ExampleBatch gen_examples(const SparseTask& t, std::size_t n, std::uint64_t seed);

// ---- embedding --------------------------------------------------------------

enum class EmbedMode { OneHot, RandomProjection };

// Values are clipped into [-clip, clip] and bucketed with width eps. One-hot
// mode returns the bucket indicator; projection mode a fixed unit Gaussian
// direction per bucket.
class BucketEmbedding {
public:
    BucketEmbedding(double eps, double clip, EmbedMode mode, double tau = 2.0, double delta = 0.01,
                    std::uint64_t seed = 0);

    std::size_t buckets() const { return buckets_; }
    std::size_t dim() const { return dim_; }
    EmbedMode mode() const { return mode_; }
    double eps() const { return eps_; }
    double clip() const { return clip_; }
    double tau() const { return tau_; }

    std::size_t bucket(double v) const;
    Vector embed(double v) const;
    double inner(double a, double b) const;

    std::size_t clip_count() const { return clips_->load(); }

private:
    double eps_, clip_, tau_;
    EmbedMode mode_;
    std::uint64_t seed_;
    std::size_t buckets_ = 0;
    std::size_t dim_ = 0;
    std::shared_ptr<std::atomic<std::size_t>> clips_;
};

// Projection width sufficient for |<u,v>| < 1/(2 tau) over K buckets with
// failure probability delta.
std::size_t projection_dim(double tau, std::size_t buckets, double delta);

struct EmbeddingCheck {
    double max_far = 0.0;      // max |<e(a),e(b)>| over |a-b| >= eps
    double min_close = 1.0;    // min <e(a),e(b)> over same-bucket pairs
    double max_self_err = 0.0;  // max |<e(a),e(a)> - 1|
    std::size_t samples = 0;
    bool ok = false;
};

EmbeddingCheck check_embedding(const BucketEmbedding& e, std::size_t samples, std::uint64_t seed);

// ---- brute-force hypothesis set ---------------------------------------------

std::uint64_t binomial(std::size_t n, std::size_t k);

// All s-subsets (sorted tuples, lexicographic) with max_t |sum_j x_tj - y_t|
// <= eps over the first `prefix` examples.
std::vector<Tuple> oracle_consistent(const ExampleBatch& b, std::size_t prefix, std::size_t s, double eps);
bool is_consistent(const ExampleBatch& b, std::size_t prefix, const Tuple& f, double eps);

// ---- 1-sparse mechanism -----------------------------------------------------

struct OneSparseLayout {
    std::size_t D = 0;  // embedding width
    std::size_t m = 0;

    std::size_t emb() const { return 0; }
    std::size_t tgt() const { return D; }
    std::size_t raw() const { return 2 * D; }
    std::size_t is_y() const { return 2 * D + 1; }
    std::size_t one() const { return 2 * D + 2; }
    std::size_t coord() const { return 2 * D + 3; }
    std::size_t o1() const { return coord() + m; }
    std::size_t agg() const { return o1() + m; }
    std::size_t hyp() const { return agg() + m; }
    std::size_t o3() const { return hyp() + m; }  // two rows
    std::size_t flag() const { return o3() + 2; }
    std::size_t sel() const { return flag() + 1; }
    std::size_t pred() const { return sel() + 1; }
    std::size_t scratch() const { return pred() + 1; }  // two rows
    std::size_t width() const { return scratch() + 2; }
};

struct OneSparseMech {
    std::size_t m = 0;
    BucketEmbedding emb;
    OneSparseLayout layout;
    // W_E is unused: tokens are real values embedded by `emb`.
    ModelParams params;
    double copy_gamma = 50.0;
};

// Layer-3 band thresholds: selected coordinate reads 1, others 2/(1+e).
inline constexpr double kFlagLow = 0.7;
inline constexpr double kFlagHigh = 0.8;

OneSparseMech build_1sparse(std::size_t m, const BucketEmbedding& e, std::size_t check_samples = 2000,
                            std::uint64_t check_seed = 1);

// Example t occupies tokens t(m+1) .. t(m+1)+m; the last is the label.
Matrix embed_sequence(const OneSparseMech& mech, const ExampleBatch& b);

struct MechState {
    std::vector<Vector> o1;         // first-layer slot weights at each label token
    std::vector<Vector> aggregate;  // prefix mean of o1
    std::vector<std::size_t> f;     // selected coordinate per prefix
    AttentionTrace trace;
};

struct OneSparseRun {
    std::vector<std::size_t> f;  // f[t]: hypothesis after examples 0..t
    std::vector<double> pred;    // pred[t]: prediction for example t (0 for t = 0)
    std::vector<double> loss;    // squared error per example
    MechState state;
};

OneSparseRun run_1sparse(const OneSparseMech& mech, const ExampleBatch& b);

// ---- deflation and s-sparse -------------------------------------------------

// y1 minus the embeddings of coordinates in C, computed as uniform attention
// over C and the label followed by rescaling. companion receives 1/(|C|+1).
Vector deflate(const Vector& y1, const Tuple& C, const std::vector<Vector>& x1, double* companion = nullptr);

Vector compositional_label(const std::vector<Vector>& x1, const Tuple& f);

inline constexpr double kArgmaxTieTol = 1e-9;

struct SsparseRound {
    std::vector<Tuple> C_before;  // per prefix
    std::vector<Vector> aggregate;
    std::vector<std::size_t> winner;
};

struct SsparseResult {
    Tuple C;  // sorted, at the final prefix
    std::vector<Tuple> C_prefix;
    std::vector<SsparseRound> rounds;
    bool bijection_ok = false;
};

SsparseResult run_ssparse(const SparseTask& t, const ExampleBatch& b, const BucketEmbedding& e);

// Literal layer stacking of the same procedure; returns the final-prefix set
// and the per-prefix sets. s <= 2 keeps widths small.
struct StackedRun {
    Tuple C;
    std::vector<Tuple> C_prefix;
    std::size_t layers = 0;
};
StackedRun run_ssparse_stacked(const SparseTask& t, const ExampleBatch& b, const BucketEmbedding& e);

// True when some bijection b: f_star -> C has |x_tj - x_t b(j)| <= eps on all
// examples.
bool has_bijection(const ExampleBatch& b, const Tuple& f_star, const Tuple& C, double eps);

// ---- vector task ------------------------------------------------------------

struct BitRound {
    std::size_t bit = 0;
    int value = 0;
    double attn_x = 0.0;  // attention on the x token
    std::vector<double> mask;
};

struct BitRecovery {
    std::size_t j = 0;
    std::vector<double> consistent;  // mask after combining all examples
    std::vector<BitRound> rounds;
};

// One x token (the whole vector) and one y token per example.
BitRecovery vector_bit_recovery(const ExampleBatch& b, const BucketEmbedding& e, double tau, double gamma);

// ---- risk -------------------------------------------------------------------

struct RiskEstimate {
    double mean = 0.0;
    double se = 0.0;
    double disagree = 0.0;  // P(|f(x) - f*(x)| > eps)
    double disagree_se = 0.0;
    std::size_t n_test = 0;
};

RiskEstimate risk_eval(const Tuple& hyp, const SparseTask& t, std::size_t n_test, std::uint64_t seed);
std::size_t risk_sample_size(double K, std::size_t s, std::size_t m, double eps);
double disagreement_bound(std::size_t m, double delta, std::size_t n);

}  // namespace icl
