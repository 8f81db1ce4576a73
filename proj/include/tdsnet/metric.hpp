#pragma once

#include <algorithm>
#include <vector>

#include "tdsnet/tensor.hpp"

namespace tdsnet {

inline constexpr double kCosineEps = 1e-8;

// Captured non-differentiated quantities of one forward pass (top-k
// thresholds, teacher distributions). Recording then replaying them lets a
// finite-difference probe evaluate exactly the function whose gradient the
// trainer uses, with the detached values held fixed.
template <class T>
struct ForwardTrace {
    bool replay = false;
    std::vector<std::vector<T>> beta;
    std::vector<std::vector<T>> teacher;
    std::size_t beta_cursor = 0;
    std::size_t teacher_cursor = 0;

    void rewind() { beta_cursor = teacher_cursor = 0; }
};

// cos(u,v) = u.v / (|u||v| + eps), clamped to [-1,1]. The eps guard maps
// zero vectors to similarity 0.
template <class T>
Tensor<T> cosine(const Tensor<T>& u, const Tensor<T>& v) {
    if (u.numel() != v.numel()) fail_shape("cosine: length mismatch", u.shape(), v.shape());
    Tensor<T> uf = reshape(u, {u.numel()});
    Tensor<T> vf = reshape(v, {v.numel()});
    Tensor<T> dot = sum(mul(uf, vf));
    Tensor<T> nu = sqrt(sum(mul(uf, uf)));
    Tensor<T> nv = sqrt(sum(mul(vf, vf)));
    return clamp(div(dot, mul(nu, nv) + T(kCosineEps)), T(-1), T(1));
}

// Pairwise cosine of rows: A (P,D), B (Q,D) -> (P,Q).
template <class T>
Tensor<T> rows_cosine(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
        fail_shape("rows_cosine: rows must share the feature extent", a.shape(), b.shape());
    Tensor<T> raw = matmul(a, transpose(b));                    // (P,Q)
    Tensor<T> na = sqrt(sum(mul(a, a), {1}, true));             // (P,1)
    Tensor<T> nb = sqrt(sum(mul(b, b), {1}, true));             // (Q,1)
    Tensor<T> denom = matmul(na, transpose(nb)) + T(kCosineEps); // (P,Q)
    return clamp(div(raw, denom), T(-1), T(1));
}

// Column-descriptor matrix of feature maps: (B,H,W,C) -> (C, B*H*W).
// Block order is batch-major, row-major over space inside each block.
template <class T>
Tensor<T> descriptor_columns(const Tensor<T>& f) {
    if (f.rank() != 4) throw std::invalid_argument("descriptor_columns: NHWC required, got " + shape_str(f.shape()));
    const std::size_t cols = f.shape()[0] * f.shape()[1] * f.shape()[2];
    return transpose(reshape(f, {cols, f.shape()[3]}));
}

// Similarity matrix between descriptor sets L^q (C,P) and L^s (C,Q):
// M[i,j] = cos(column i, column j).
template <class T>
Tensor<T> build_similarity_matrix(const Tensor<T>& lq, const Tensor<T>& ls) {
    if (lq.rank() != 2 || ls.rank() != 2 || lq.shape()[0] != ls.shape()[0])
        fail_shape("similarity matrix: descriptor dimensions differ", lq.shape(), ls.shape());
    return rows_cosine(transpose(lq), transpose(ls));
}

enum class AttentionKind { Smooth, Hard };
enum class AttentionScope { TaskWide, PerClass };

// Task-aware attention over a relation matrix (R rows, N*C columns).
// Per row, beta is the k-th largest entry (detached). Hard mode keeps
// entries strictly above beta; smooth mode reweights by a sigmoid of
// steepness t. Rows are then normalized to sum to 1 over the chosen scope;
// rows whose thresholded mass vanishes fall back to a uniform row.
template <class T>
Tensor<T> task_attention(const Tensor<T>& mphi, std::size_t n_classes, std::size_t k, T t, AttentionKind kind,
                         AttentionScope scope = AttentionScope::TaskWide, ForwardTrace<T>* trace = nullptr) {
    if (mphi.rank() != 2) throw std::invalid_argument("task_attention: rank-2 required, got " + shape_str(mphi.shape()));
    const std::size_t rows = mphi.shape()[0];
    const std::size_t cols = mphi.shape()[1];
    if (cols % n_classes != 0) fail_shape("task_attention: columns not divisible by classes", mphi.shape(), {n_classes});
    if (k < 1 || k > cols)
        throw std::invalid_argument("task_attention: k=" + std::to_string(k) + " outside [1," + std::to_string(cols) + "]");

    // k-th largest per row, from detached values (or the recorded trace).
    std::vector<T> beta(rows);
    if (trace && trace->replay) {
        beta = trace->beta.at(trace->beta_cursor++);
    } else {
        const T* p = mphi.data();
        std::vector<T> row(cols);
        for (std::size_t i = 0; i < rows; ++i) {
            std::copy(p + i * cols, p + (i + 1) * cols, row.begin());
            std::nth_element(row.begin(), row.begin() + (k - 1), row.end(), std::greater<T>());
            beta[i] = row[k - 1];
        }
        if (trace) trace->beta.push_back(beta);
    }
    Tensor<T> beta_col = Tensor<T>::from_vec({rows, 1}, std::vector<T>(beta));

    Tensor<T> gated;
    if (kind == AttentionKind::Smooth) {
        gated = mul(mphi, sigmoid(mul(sub(mphi, beta_col), Tensor<T>::scalar(t))));
    } else {
        // strict threshold: the k-th element itself is zeroed
        std::vector<T> mask(rows * cols);
        const T* p = mphi.data();
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) mask[i * cols + j] = p[i * cols + j] > beta[i] ? T(1) : T(0);
        gated = mul(mphi, Tensor<T>::from_vec({rows, cols}, std::move(mask)));
    }

    const std::size_t block = cols / n_classes;
    const bool per_class = scope == AttentionScope::PerClass;
    Tensor<T> g3 = per_class ? reshape(gated, {rows, n_classes, block}) : reshape(gated, {rows, 1, cols});
    Tensor<T> denom = sum(g3, {2}, true); // (rows, groups, 1)

    // Select per group: normalize when the mass is usable, else uniform.
    const std::size_t groups = denom.numel();
    const std::size_t group_cols = per_class ? block : cols;
    std::vector<T> sel(groups), fb(groups);
    for (std::size_t i = 0; i < groups; ++i) {
        const bool ok = std::abs(denom.data()[i]) >= T(1e-12);
        sel[i] = ok ? T(1) : T(0);
        fb[i] = ok ? T(0) : T(1) / static_cast<T>(group_cols);
    }
    Shape gshape = denom.shape();
    Tensor<T> sel_t = Tensor<T>::from_vec(gshape, std::move(sel));
    Tensor<T> fb_t = Tensor<T>::from_vec(gshape, std::move(fb));
    Tensor<T> denom_safe = add(denom, sub(Tensor<T>::scalar(T(1)), sel_t)); // 1 where falling back
    Tensor<T> normalized = add(mul(div(g3, denom_safe), sel_t), fb_t);
    return reshape(normalized, {rows, cols});
}

// Uniform attention (ablation): every entry 1/(N*C), rows sum to 1.
template <class T>
Tensor<T> uniform_attention(std::size_t rows, std::size_t cols) {
    return Tensor<T>::full({rows, cols}, T(1) / static_cast<T>(cols));
}

// Local similarity per class: S_l[n] = (1/R) sum_i sum_{j in block n} (M^A . M).
template <class T>
Tensor<T> local_similarity(const Tensor<T>& m, const Tensor<T>& ma, std::size_t n_classes) {
    if (m.shape() != ma.shape()) fail_shape("local_similarity: shapes differ", m.shape(), ma.shape());
    const std::size_t rows = m.shape()[0];
    const std::size_t block = m.shape()[1] / n_classes;
    Tensor<T> weighted = reshape(mul(ma, m), {rows, n_classes, block});
    return mul(sum(weighted, {0, 2}), Tensor<T>::scalar(T(1) / static_cast<T>(rows)));
}

// Global similarity: rows of hq (Q,D) against rows of hp (N,D) -> (Q,N).
template <class T>
Tensor<T> global_similarity(const Tensor<T>& hq, const Tensor<T>& hp) {
    return rows_cosine(hq, hp);
}

// S_total = (S_g + S_l) / 2.
template <class T>
Tensor<T> fuse(const Tensor<T>& sg, const Tensor<T>& sl) {
    if (sg.shape() != sl.shape()) fail_shape("fuse: shapes differ", sg.shape(), sl.shape());
    return mul(add(sg, sl), Tensor<T>::scalar(T(0.5)));
}

} // namespace tdsnet
