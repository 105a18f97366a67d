#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace icl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Pre-softmax stand-in for minus infinity. Anything at or below kMaskCut
// receives exactly zero attention mass.
inline constexpr double kNegInf = -1e9;
inline constexpr double kMaskCut = -1e8;

// gamma * gap at or above this is treated as exact hard attention.
inline constexpr double kHardSaturation = 50.0;

class EngineError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Additive logit term that depends on (query position, key position) only.
using PositionBias = std::function<double(std::size_t query, std::size_t key)>;

struct Head {
    Matrix Q;  // d_att x d
    Matrix K;  // d_att x d
    Matrix V;  // d_att x d
    PositionBias bias;  // optional
};

// One step of the position-wise map applied after attention. Steps run in
// order on each column independently.
struct MlpStep {
    enum class Kind { Identity, ArgmaxOneHot, Affine, Product, Custom };

    Kind kind = Kind::Identity;

    // ArgmaxOneHot: reads [src, src+len), writes a one-hot into [dst, dst+len).
    // Values within tie_tol of the max count as tied; the lowest index wins.
    // Affine: x[dst .. dst+W.rows) = act(W * x[src .. src+W.cols) + b).
    std::size_t src = 0;
    std::size_t dst = 0;
    std::size_t len = 0;
    double tie_tol = 0.0;
    Matrix W;
    Vector b;
    bool relu = false;

    // Product: x[dst] = x[a] * x[b_idx].
    std::size_t a = 0;
    std::size_t b_idx = 0;

    std::string name;
    std::function<void(Eigen::Ref<Vector>)> fn;

    static MlpStep argmax_one_hot(std::size_t src, std::size_t dst, std::size_t len,
                                  double tie_tol = 0.0);
    static MlpStep affine(std::size_t src, std::size_t dst, Matrix W, Vector b, bool relu);
    static MlpStep product(std::size_t a, std::size_t b, std::size_t dst);
    static MlpStep custom(std::string name, std::function<void(Eigen::Ref<Vector>)> fn);
};

struct LayerParams {
    std::vector<Head> heads;
    Matrix W_O;  // d_out x (heads * d_att); empty means the raw head outputs
    bool use_skip = false;
    bool use_gelu = false;
    // Hard mode replaces softmax by a uniform split over the row maxima.
    bool hard = false;
    std::vector<MlpStep> mlp;

    std::size_t d_in() const;
    std::size_t d_att() const;
    std::size_t d_out() const;
};

struct ModelParams {
    Matrix W_E;  // d x |V|
    std::vector<LayerParams> layers;

    std::size_t width() const;
};

// A[layer][head] is an N x N row-stochastic lower-triangular matrix.
struct AttentionTrace {
    std::vector<std::vector<Matrix>> layers;
};

using TokenSeq = std::vector<int>;

Matrix masked_softmax(const Matrix& M);

double gelu(double x);

Matrix layer_forward(const Matrix& X, const LayerParams& p, AttentionTrace* trace = nullptr);

// Runs the layer stack on an already embedded d x N input. Inputs narrower
// than the model are zero padded.
Matrix run_layers(const Matrix& X, const std::vector<LayerParams>& layers,
                  AttentionTrace* trace = nullptr);

Matrix model_forward(const TokenSeq& tokens, const ModelParams& p,
                     AttentionTrace* trace = nullptr);

double pick_gamma(double score_gap, double mass_tol, std::size_t fanout);

// Softmax mass that lands off the top entry when fanout competitors sit
// gamma*gap below it.
double off_max_mass(double gamma, double score_gap, std::size_t fanout);

bool is_hard(double gamma, double score_gap);

Matrix zero_pad_rows(const Matrix& X, std::size_t rows);

}  // namespace icl
