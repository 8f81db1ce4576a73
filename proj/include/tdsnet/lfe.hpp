#pragma once

#include <limits>

#include "tdsnet/layers.hpp"
#include "tdsnet/tensor.hpp"

namespace tdsnet {

inline constexpr double kProbFloor = 1e-8;

// Weakly supervised attention generation: 1x1 conv C -> m followed by ReLU,
// so maps are non-negative and differentiable w.r.t. both inputs and kernel.
template <class T>
struct AttentionHead {
    Conv2dLayer<T> conv;
    std::size_t maps = 0;

    AttentionHead() = default;
    AttentionHead(ParamStore<T>& ps, std::size_t channels, std::size_t m, Rng& rng) : maps(m) {
        conv = Conv2dLayer<T>(ps, "lfe.conv", 1, 1, channels, m, /*pad=*/0, /*with_bias=*/true, rng);
    }

    // F (B,H,W,C) -> A (B,H,W,m)
    Tensor<T> forward(const Tensor<T>& f) const { return relu(conv.forward(f)); }
};

// Part feature matrix M^P (m,C) of one image: row k is the global average
// pool of A_k . F.
template <class T>
Tensor<T> part_features(const Tensor<T>& f, const Tensor<T>& a) {
    if (f.rank() != 3 || a.rank() != 3 || f.shape()[0] != a.shape()[0] || f.shape()[1] != a.shape()[1])
        fail_shape("part_features: spatial shapes differ", f.shape(), a.shape());
    const std::size_t hw = f.shape()[0] * f.shape()[1];
    Tensor<T> fm = reshape(f, {hw, f.shape()[2]});
    Tensor<T> am = reshape(a, {hw, a.shape()[2]});
    return mul(matmul(transpose(am), fm), Tensor<T>::scalar(T(1) / static_cast<T>(hw)));
}

// Attention-pooled map F^a = (1/m) sum_k (A_k . F), batched.
template <class T>
Tensor<T> attention_pooled(const Tensor<T>& f, const Tensor<T>& a) {
    if (f.rank() != 4 || a.rank() != 4) fail_shape("attention_pooled: NHWC required", f.shape(), a.shape());
    const std::size_t m = a.shape()[3];
    Tensor<T> coverage = sum(a, {3}, true); // (B,H,W,1)
    return mul(mul(f, coverage), Tensor<T>::scalar(T(1) / static_cast<T>(m)));
}

// KL(P_g || P_a) = sum P_g log(P_g / P_a), probabilities clamped to
// >= 1e-8 before the logarithms. The caller detaches the teacher.
template <class T>
Tensor<T> kl_regularizer(const Tensor<T>& pg, const Tensor<T>& pa) {
    if (pg.numel() != pa.numel()) fail_shape("kl_regularizer: length mismatch", pg.shape(), pa.shape());
    const T inf = std::numeric_limits<T>::infinity();
    Tensor<T> lg = log(clamp(pg, T(kProbFloor), inf));
    Tensor<T> la = log(clamp(pa, T(kProbFloor), inf));
    return sum(mul(pg, sub(lg, la)));
}

// Row-wise softmax of (R,N) scores; the max shift is detached (the value is
// shift-invariant, so this changes nothing but keeps exponents small).
template <class T>
Tensor<T> row_softmax(const Tensor<T>& x) {
    if (x.rank() != 2) throw std::invalid_argument("row_softmax: rank-2 required, got " + shape_str(x.shape()));
    Tensor<T> shifted = sub(x, detach(max(x, {1}, true)));
    Tensor<T> e = exp(shifted);
    return div(e, sum(e, {1}, true));
}

} // namespace tdsnet
