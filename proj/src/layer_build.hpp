#pragma once

#include <cmath>
#include <functional>

#include "icl/tf_core.hpp"

namespace icl::detail {

using Idx = Eigen::Index;

inline Idx I(std::size_t v) { return static_cast<Idx>(v); }

struct Pos {
    std::size_t ex, slot;
};

// Tokens come in groups of `stride`: example index and slot within it.
inline Pos decode(std::size_t q, std::size_t stride) { return {q / stride, q % stride}; }

inline Head empty_head(std::size_t d_att, std::size_t width) {
    Head h;
    h.Q = Matrix::Zero(I(d_att), I(width));
    h.K = Matrix::Zero(I(d_att), I(width));
    h.V = Matrix::Zero(I(d_att), I(width));
    return h;
}

inline LayerParams skip_layer(Head h, std::size_t width) {
    LayerParams l;
    l.W_O = Matrix::Zero(I(width), h.Q.rows());
    l.heads.push_back(std::move(h));
    l.use_skip = true;
    return l;
}

using BiasRule = std::function<double(Pos q, Pos k, std::size_t qi, std::size_t ki)>;

inline PositionBias example_bias(std::size_t stride, BiasRule rule) {
    return [stride, rule](std::size_t q, std::size_t k) {
        return rule(decode(q, stride), decode(k, stride), q, k);
    };
}

// Smallest perfect square >= n; keeps the 1/sqrt(d_att) scale exact.
inline std::size_t square_at_least(std::size_t n) {
    std::size_t r = 1;
    while (r * r < n) ++r;
    return r * r;
}

}  // namespace icl::detail
