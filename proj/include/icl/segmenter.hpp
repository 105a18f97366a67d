#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "icl/base_lm.hpp"
#include "icl/rng.hpp"
#include "icl/tf_core.hpp"

namespace icl {

class SegError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DelimPair {
    int lsep = -1;
    int esep = -1;
    auto operator<=>(const DelimPair&) const = default;
};

// One esep-delimited piece, split on lsep. parts.size() == 1 means no label,
// 2 means x lsep y (y may be empty), more means the piece is infeasible.
struct Chunk {
    std::vector<TokenSeq> parts;

    const TokenSeq& x() const { return parts.front(); }
    bool has_label() const { return parts.size() == 2; }
    const TokenSeq& y() const { return parts.at(1); }
};

struct Segmentation {
    DelimPair sigma;
    std::vector<Chunk> chunks;
    // Set when the last piece is exactly "x lsep": the trailing query.
    std::optional<TokenSeq> query;
    bool feasible = true;

    std::size_t k() const { return chunks.size(); }
};

struct SegScore {
    DelimPair sigma;
    double logp = 0.0;
    bool feasible = true;
};

// Scores closer than this are ties; the smaller pair wins.
inline constexpr double kScoreTieTol = 1e-7;

// z must start with <begin> and contain no other <begin>/<end>.
Segmentation split_by(std::span<const int> z, DelimPair sigma);
TokenSeq join(const Segmentation& s);

SegScore likelihood(std::span<const int> z, DelimPair sigma, const NGramModel& m);

// Same value as likelihood(...).logp computed in one pass without building
// chunks.
double stream_score(std::span<const int> z, DelimPair sigma, const NGramModel& m);

// Ordered pairs with lsep != esep, sorted lexicographically.
std::vector<DelimPair> candidate_pairs(const std::vector<int>& delims);

struct MlResult {
    DelimPair sigma;
    Segmentation seg;
    SegScore score;
    std::vector<SegScore> all;  // in candidate_pairs order
};

MlResult ml_segment(std::span<const int> z, const std::vector<int>& delims, const NGramModel& m);

// Index into pairs of the best score under the tie rule.
std::size_t best_index(const std::vector<double>& scores);

double sample_bound_real(double nu, double c, std::size_t n_delims, double delta);
std::size_t sample_bound(double nu, double c, std::size_t n_delims, double delta);

// ---- compiled segmenter ----------------------------------------------------

using CondOracle = std::function<double(const CondQuery&)>;

// Residual-stream rows. Per-head slots start at head_base(h).
struct SegLayout {
    enum Slot : std::size_t {
        E = 0,      // token is esep or <begin>
        LP,         // token is lsep, esep or <begin>
        ME,         // nearest earlier esep position
        ML,         // nearest earlier boundary position
        MLME,
        ML2,
        ME2,
        ML2ME,
        ME2ML,
        IOTA,       // soundness attention output
        VIOL,
        LNP,        // oracle output
        PREV,
        INDA,
        INDB,
        Q,
        TMP,
        CONTRIB,
        MEANC,
        MEANV,
        SUM,
        NV,
        GATE,
        SCORE,
        kSlots
    };

    std::size_t vocab = 0;
    std::size_t heads = 0;
    std::size_t max_len = 0;

    std::size_t pos() const { return vocab; }
    std::size_t one() const { return vocab + 1; }
    std::size_t is_begin() const { return vocab + 2; }
    std::size_t is_end() const { return vocab + 3; }
    std::size_t head_base(std::size_t h) const { return vocab + 4 + h * kSlots; }
    std::size_t slot(std::size_t h, Slot s) const { return head_base(h) + s; }
    std::size_t choice() const { return head_base(heads); }
    std::size_t scratch() const { return choice() + heads; }
    std::size_t scratch_len() const { return std::max<std::size_t>(2 * max_len, heads); }
    std::size_t width() const { return scratch() + scratch_len(); }
};

struct SegTransformer {
    std::vector<DelimPair> pairs;  // head h scores pairs[h]
    SegLayout layout;
    double gamma = 0.0;
    double ln_nu = 0.0;
    ModelParams front;  // layers 1-3; W_E holds the token-only features
    std::vector<LayerParams> back;  // previous-copy layer and aggregation layer
    CondOracle oracle;
};

struct SegRun {
    std::vector<double> head_scores;
    std::size_t best = 0;
    DelimPair sigma;
    Matrix residual;  // final residual stream
};

// gamma giving at most mass_tol off-max attention for position selection
// over max_len keys.
double seg_gamma(std::size_t max_len, double mass_tol);

SegTransformer build_seg_transformer(const std::vector<int>& delims, std::size_t vocab_size,
                                     std::size_t max_len, CondOracle oracle, double gamma);

// z as for split_by; <end> is appended internally, so z.size() + 1 <= max_len.
SegRun run_seg_transformer(const SegTransformer& t, std::span<const int> z,
                           AttentionTrace* trace = nullptr);

// ---- sample-complexity experiment -----------------------------------------

struct SegTaskSpec {
    double c = 2.0;
    double nu = 1e-4;
    std::size_t n_delims = 8;
    double delta = 0.1;
    std::size_t x_vocab = 6;
    std::size_t y_vocab = 4;
    std::size_t x_content_min = 1;
    std::size_t x_content_max = 3;
    std::size_t y_len_min = 1;
    std::size_t y_len_max = 2;
    std::size_t corpus_docs = 2000;
    double alpha = 0.1;
    std::size_t gap_chunks = 64;
    std::size_t gap_trials = 50;
};

// Delimiters not in the true pair appear once per x chunk in a fixed order,
// so every candidate pair yields a feasible segmentation.
struct SegGenerator {
    Vocab vocab;
    NGramModel model;
    std::vector<int> delims;
    DelimPair truth;
    std::vector<int> decoys;
    std::vector<int> x_content;
    std::vector<int> y_content;
    SegTaskSpec spec;

    TokenSeq sample_x(std::mt19937_64& rng) const;
    TokenSeq sample_y(std::mt19937_64& rng) const;
    // n examples followed by a trailing query "x lsep".
    TokenSeq sample(std::size_t n, std::mt19937_64& rng) const;
};

SegGenerator make_seg_generator(const SegTaskSpec& spec, std::uint64_t seed);

struct GapReport {
    // Mean per-chunk log ratio against the closest pair other than the truth
    // and its swap.
    double min_gap = 0.0;
    DelimPair closest;
    // Smallest observed margin of the truth over the swapped pair.
    double swap_margin = 0.0;
};

GapReport measure_gap(const SegGenerator& g, std::size_t n, std::size_t trials, std::uint64_t seed);

struct McRow {
    std::size_t n = 0;
    std::size_t trials = 0;
    std::size_t errors = 0;
    double rate = 0.0;
    double se = 0.0;
};

struct McResult {
    std::vector<McRow> rows;
    GapReport gap;
    std::size_t bound_n = 0;
    bool monotone = true;
    std::vector<std::string> warnings;
};

McResult mc_experiment(const SegTaskSpec& spec, const std::vector<std::size_t>& n_grid,
                       std::size_t trials, std::uint64_t seed);

}  // namespace icl
