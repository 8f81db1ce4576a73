#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdsnet/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tdsnet {

// ---------------------------------------------------------------------------
// Storage
// ---------------------------------------------------------------------------

template <class T>
struct TensorImpl {
    Shape shape;
    std::shared_ptr<std::vector<T>> vals; // shared so reshape can alias
    std::vector<T> grad;                  // lazily allocated, zero-filled
    bool requires_grad = false;

    std::size_t numel() const { return vals->size(); }
    const T* data() const { return vals->data(); }

    // Gradient buffer, allocated on first accumulation.
    T* gptr() {
        if (grad.empty()) grad.assign(vals->size(), T(0));
        return grad.data();
    }
};

// Dense row-major array participating in reverse-mode differentiation.
// Values are immutable once an operation has consumed the tensor; only
// grad buffers (during backward) and parameters (owned by the optimizer
// between episodes) are written in place.
template <class T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

    static Tensor full(Shape shape, T value) {
        check_shape(shape);
        auto impl = std::make_shared<TensorImpl<T>>();
        impl->vals = std::make_shared<std::vector<T>>(tdsnet::numel(shape), value);
        impl->shape = std::move(shape);
        return Tensor(std::move(impl));
    }

    static Tensor from_vec(Shape shape, std::vector<T> data) {
        check_shape(shape);
        if (tdsnet::numel(shape) != data.size())
            throw std::invalid_argument("tensor: " + std::to_string(data.size()) +
                                        " values for shape " + shape_str(shape));
        auto impl = std::make_shared<TensorImpl<T>>();
        impl->vals = std::make_shared<std::vector<T>>(std::move(data));
        impl->shape = std::move(shape);
        return Tensor(std::move(impl));
    }

    static Tensor scalar(T v) { return from_vec({}, {v}); }

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    std::size_t rank() const { return p_->shape.size(); }
    std::size_t numel() const { return p_->numel(); }
    std::size_t extent(std::size_t axis) const { return p_->shape[axis]; }

    const T* data() const { return p_->data(); }
    const std::vector<T>& values() const { return *p_->vals; }

    // In-place access for the optimizer, initializers and test setup.
    T* mutable_data() { return p_->vals->data(); }

    T value() const {
        if (numel() != 1)
            throw std::invalid_argument("value(): tensor " + shape_str(shape()) + " is not scalar");
        return (*p_->vals)[0];
    }

    T at(std::initializer_list<std::size_t> idx) const {
        auto st = strides_of(shape());
        std::size_t lin = 0, ax = 0;
        for (std::size_t i : idx) lin += i * st[ax++];
        return (*p_->vals)[lin];
    }

    bool requires_grad() const { return p_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        p_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !p_->grad.empty(); }
    const std::vector<T>& grad() const { return p_->grad; }
    std::vector<T> grad_or_zeros() const {
        return p_->grad.empty() ? std::vector<T>(numel(), T(0)) : p_->grad;
    }
    void zero_grad() { p_->grad.clear(); }

    std::shared_ptr<TensorImpl<T>> impl() const { return p_; }

    explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : p_(std::move(impl)) {}

private:
    static void check_shape(const Shape& s) {
        for (std::size_t e : s)
            if (e == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_str(s));
    }

    std::shared_ptr<TensorImpl<T>> p_;
};

// ---------------------------------------------------------------------------
// Computation record
// ---------------------------------------------------------------------------

// Ordered log of the primitive operations of one forward pass. Insertion
// order is a topological order, so replaying in reverse visits every
// operation exactly once with all downstream gradients already in place.
// Records are independent; distinct records may live on distinct threads.
template <class T>
class Tape {
public:
    static Tape* current() { return cur_; }

    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(cur_) { cur_ = &t; }
        ~Scope() { cur_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    void record(std::shared_ptr<TensorImpl<T>> out, std::function<void()> vjp) {
        nodes_.push_back(Node{std::move(out), std::move(vjp)});
    }
    std::size_t size() const { return nodes_.size(); }

    // Accumulates d(root)/d(leaf) into the grad buffer of every leaf the
    // record connects to root. Interior gradients are scratch: they are
    // reset per call, so repeated calls (on this or another root of the
    // same record) add independent contributions to the leaves.
    void backward(const Tensor<T>& root) {
        if (root.numel() != 1)
            throw std::invalid_argument("backward: root " + shape_str(root.shape()) +
                                        " is not scalar");
        for (auto& n : nodes_) n.out->grad.clear();
        root.impl()->gptr()[0] += T(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i].vjp();
    }

private:
    struct Node {
        std::shared_ptr<TensorImpl<T>> out;
        std::function<void()> vjp;
    };
    std::vector<Node> nodes_;
    inline static thread_local Tape* cur_ = nullptr;
};

namespace detail {

template <class T>
inline bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::current()) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// ---------------------------------------------------------------------------
// GEMM kernel (shared with conv via im2col)
// ---------------------------------------------------------------------------

// C (M x N) = [+=] op(A) * op(B), row-major. Each output row is owned by a
// single thread and accumulated in a fixed order, so results do not depend
// on the number of threads.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K,
          const T* A, const T* B, T* C, bool accumulate) {
    if (!accumulate) std::fill(C, C + M * N, T(0));
    if (!trans_a && !trans_b) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (M * N * K > 32768)
#endif
        for (std::ptrdiff_t m = 0; m < static_cast<std::ptrdiff_t>(M); ++m) {
            T* c = C + m * N;
            const T* a = A + m * K;
            for (std::size_t k = 0; k < K; ++k) {
                const T av = a[k];
                const T* b = B + k * N;
                for (std::size_t n = 0; n < N; ++n) c[n] += av * b[n];
            }
        }
    } else if (trans_a && !trans_b) { // A is K x M
        if (M * N * K > 16384) {      // transpose once, then stream rows
            std::vector<T> at(M * K);
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t m = 0; m < M; ++m) at[m * K + k] = A[k * M + m];
            gemm(false, false, M, N, K, at.data(), B, C, true);
            return;
        }
        for (std::size_t m = 0; m < M; ++m) {
            T* c = C + m * N;
            for (std::size_t k = 0; k < K; ++k) {
                const T av = A[k * M + m];
                const T* b = B + k * N;
                for (std::size_t n = 0; n < N; ++n) c[n] += av * b[n];
            }
        }
    } else if (!trans_a && trans_b) { // B is N x K
        if (M * N * K > 16384) {      // transpose once, then stream rows
            std::vector<T> bt(K * N);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t k = 0; k < K; ++k) bt[k * N + n] = B[n * K + k];
            gemm(false, false, M, N, K, A, bt.data(), C, true);
            return;
        }
        for (std::size_t m = 0; m < M; ++m) {
            const T* a = A + m * K;
            T* c = C + m * N;
            for (std::size_t n = 0; n < N; ++n) {
                const T* b = B + n * K;
                T acc = 0;
                for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
                c[n] += acc;
            }
        }
    } else { // A is K x M, B is N x K
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t n = 0; n < N; ++n) {
                T acc = 0;
                for (std::size_t k = 0; k < K; ++k) acc += A[k * M + m] * B[n * K + k];
                C[m * N + n] += acc;
            }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting (trailing axes, extents equal or 1)
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1) fail_shape("broadcast mismatch", a, b);
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Strides of `s` right-aligned into `rank` axes, 0 on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::size_t> st(out.size(), 0);
    auto own = strides_of(s);
    const std::size_t off = out.size() - s.size();
    for (std::size_t i = 0; i < s.size(); ++i)
        st[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : own[i];
    return st;
}

// How an operand's linear index follows the output's linear index. Most
// broadcasts in this codebase are contiguous repeats (per-channel vectors,
// per-row denominators), which reduce to a modulo or a division and avoid
// the generic odometer walk.
struct IndexMap {
    enum Kind { Full, Mod, Div, General } kind = General;
    std::size_t k = 1; // Mod: index = i % k; Div: index = i / k
};

inline IndexMap classify_map(const Shape& out, const std::vector<std::size_t>& st) {
    const auto ideal = strides_of(out);
    const std::size_t rank = out.size();
    IndexMap m;
    // suffix: trailing axes contiguous, leading axes broadcast
    {
        std::size_t d = rank;
        while (d > 0 && st[d - 1] == ideal[d - 1] && out[d - 1] > 0) --d;
        bool lead_zero = true;
        for (std::size_t ax = 0; ax < d; ++ax) lead_zero &= st[ax] == 0;
        if (lead_zero) {
            std::size_t k = 1;
            for (std::size_t ax = d; ax < rank; ++ax) k *= out[ax];
            m.kind = k == numel(out) ? IndexMap::Full : IndexMap::Mod;
            m.k = k;
            return m;
        }
    }
    // prefix: leading axes contiguous over the compacted prefix, trailing broadcast
    {
        std::size_t t = rank;
        while (t > 0 && st[t - 1] == 0) --t;
        std::size_t tail = 1;
        for (std::size_t ax = t; ax < rank; ++ax) tail *= out[ax];
        std::vector<std::size_t> prefix_ideal(t, 1);
        for (std::size_t ax = t; ax-- > 1;) prefix_ideal[ax - 1] = prefix_ideal[ax] * out[ax];
        bool ok = true;
        for (std::size_t ax = 0; ax < t; ++ax) ok &= st[ax] == prefix_ideal[ax];
        if (ok) {
            m.kind = IndexMap::Div;
            m.k = tail;
            return m;
        }
    }
    return m;
}

// Visits (out_i, a_i, b_i) using the cheapest index scheme available.
template <class F>
void for_each_mapped(const Shape& out, const IndexMap& ma, const IndexMap& mb,
                     const std::vector<std::size_t>& sta, const std::vector<std::size_t>& stb, F&& fn) {
    const std::size_t n = numel(out);
    auto simple = [](const IndexMap& m) { return m.kind != IndexMap::General; };
    if (simple(ma) && simple(mb)) {
        // block size over which all three indices advance contiguously;
        // must divide every Mod/Div period so no window straddles a wrap
        std::size_t block = n;
        if (ma.kind != IndexMap::Full) block = std::gcd(block, ma.k);
        if (mb.kind != IndexMap::Full) block = std::gcd(block, mb.k);
        auto at = [](const IndexMap& m, std::size_t i) {
            switch (m.kind) {
                case IndexMap::Full: return i;
                case IndexMap::Mod: return i % m.k;
                case IndexMap::Div: return i / m.k;
                default: return i;
            }
        };
        for (std::size_t base = 0; base < n; base += block) {
            std::size_t ai = at(ma, base), bi = at(mb, base);
            const std::size_t astep = ma.kind == IndexMap::Div ? 0 : 1;
            const std::size_t bstep = mb.kind == IndexMap::Div ? 0 : 1;
            for (std::size_t j = 0; j < block; ++j) fn(base + j, ai + j * astep, bi + j * bstep);
        }
        return;
    }
    // generic odometer
    const std::size_t rank = out.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ai = 0, bi = 0;
    for (std::size_t oi = 0; oi < n; ++oi) {
        fn(oi, ai, bi);
        for (std::size_t ax = rank; ax-- > 0;) {
            ai += sta[ax];
            bi += stb[ax];
            if (++idx[ax] < out[ax]) break;
            ai -= sta[ax] * out[ax];
            bi -= stb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

// Shared skeleton for differentiable binary elementwise operations.
// fwd(a,b) -> out; da/db give local partials as functions of (a, b).
template <class T, class Fwd, class Da, class Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
    const bool same = a.shape() == b.shape();
    Shape os = same ? a.shape() : broadcast_shape(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::zeros(os);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.mutable_data();
    std::vector<std::size_t> sta, stb;
    IndexMap ma, mb;
    if (same) {
        for (std::size_t i = 0, n = out.numel(); i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
        sta = broadcast_strides(a.shape(), os);
        stb = broadcast_strides(b.shape(), os);
        ma = classify_map(os, sta);
        mb = classify_map(os, stb);
        for_each_mapped(os, ma, mb, sta, stb,
                        [&](std::size_t oi, std::size_t ai, std::size_t bi) { po[oi] = fwd(pa[ai], pb[bi]); });
    }
    if (tracing<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ia = a.impl(), ib = b.impl(), io = out.impl();
        Tape<T>::current()->record(io, [ia, ib, io, same, ma, mb, sta, stb, da, db]() {
            if (io->grad.empty()) return;
            const T* go = io->grad.data();
            const T* pa = ia->data();
            const T* pb = ib->data();
            T* ga = ia->gptr();
            T* gb = ib->gptr();
            if (same) {
                for (std::size_t i = 0, n = io->numel(); i < n; ++i) {
                    ga[i] += go[i] * da(pa[i], pb[i]);
                    gb[i] += go[i] * db(pa[i], pb[i]);
                }
            } else {
                for_each_mapped(io->shape, ma, mb, sta, stb, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
                    ga[ai] += go[oi] * da(pa[ai], pb[bi]);
                    gb[bi] += go[oi] * db(pa[ai], pb[bi]);
                });
            }
        });
    }
    return out;
}

// Unary elementwise: fwd(x) -> y, dydx(x, y) local derivative.
template <class T, class Fwd, class Dydx>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Dydx dydx) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.mutable_data();
    for (std::size_t i = 0, n = x.numel(); i < n; ++i) po[i] = fwd(px[i]);
    if (tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto ix = x.impl(), io = out.impl();
        Tape<T>::current()->record(io, [ix, io, dydx]() {
            if (io->grad.empty()) return;
            const T* go = io->grad.data();
            const T* px = ix->data();
            const T* py = io->data();
            T* gx = ix->gptr();
            for (std::size_t i = 0, n = io->numel(); i < n; ++i) gx[i] += go[i] * dydx(px[i], py[i]);
        });
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); });
}

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <class T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add(a, Tensor<T>::scalar(s)); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, T s) { return sub(a, Tensor<T>::scalar(s)); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul(a, Tensor<T>::scalar(s)); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, T s) { return div(a, Tensor<T>::scalar(s)); }
template <class T> Tensor<T> operator-(const Tensor<T>& a) { return mul(a, Tensor<T>::scalar(T(-1))); }
template <class T> Tensor<T> operator+(T s, const Tensor<T>& a) { return add(Tensor<T>::scalar(s), a); }
template <class T> Tensor<T> operator-(T s, const Tensor<T>& a) { return sub(Tensor<T>::scalar(s), a); }
template <class T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul(Tensor<T>::scalar(s), a); }

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary_op(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
    return detail::unary_op(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// Backward guards the denominator so an exactly-zero input (common under
// ReLU) yields a finite subgradient instead of inf.
template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
    return detail::unary_op(x, [](T v) { return std::sqrt(v); },
                            [](T, T y) { return T(1) / (T(2) * std::max(y, T(1e-12))); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary_op(x, [](T v) { return v > T(0) ? v : T(0); },
                            [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary_op(x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                            [](T, T y) { return y * (T(1) - y); });
}

// Gradient passes through inside [lo, hi] (inclusive) and is zero outside.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    return detail::unary_op(x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
                            [lo, hi](T v, T) { return v >= lo && v <= hi ? T(1) : T(0); });
}

// Value copy outside the differentiation record.
template <class T>
Tensor<T> detach(const Tensor<T>& x) {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = x.shape();
    impl->vals = std::make_shared<std::vector<T>>(x.values());
    return Tensor<T>(std::move(impl));
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) fail_shape("matmul: rank-2 operands required", a.shape(), b.shape());
    if (a.shape()[1] != b.shape()[0]) fail_shape("matmul: inner extents differ", a.shape(), b.shape());
    const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({M, N});
    detail::gemm(false, false, M, N, K, a.data(), b.data(), out.mutable_data(), false);
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ia = a.impl(), ib = b.impl(), io = out.impl();
        Tape<T>::current()->record(io, [ia, ib, io, M, N, K]() {
            if (io->grad.empty()) return;
            const T* go = io->grad.data();
            detail::gemm(false, true, M, K, N, go, ib->data(), ia->gptr(), true);  // dA = dC B^T
            detail::gemm(true, false, K, N, M, ia->data(), go, ib->gptr(), true);  // dB = A^T dC
        });
    }
    return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) throw std::invalid_argument("transpose: rank-2 required, got " + shape_str(x.shape()));
    const std::size_t R = x.shape()[0], C = x.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({C, R});
    const T* px = x.data();
    T* po = out.mutable_data();
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) po[j * R + i] = px[i * C + j];
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto ix = x.impl(), io = out.impl();
        Tape<T>::current()->record(io, [ix, io, R, C]() {
            if (io->grad.empty()) return;
            const T* go = io->grad.data();
            T* gx = ix->gptr();
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < C; ++j) gx[i * C + j] += go[j * R + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape movement
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.numel()) fail_shape("reshape: element count differs", x.shape(), shape);
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->vals = x.impl()->vals; // alias, no copy
    Tensor<T> out(std::move(impl));
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto ix = x.impl(), io = out.impl();
        Tape<T>::current()->record(io, [ix, io]() {
            if (io->grad.empty()) return;
            const T* go = io->grad.data();
            T* gx = ix->gptr();
            for (std::size_t i = 0, n = io->numel(); i < n; ++i) gx[i] += go[i];
        });
    }
    return out;
}

// Rows [begin, end) of axis 0.
template <class T>
Tensor<T> slice0(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    if (x.rank() == 0 || begin >= end || end > x.shape()[0])
        throw std::invalid_argument("slice0: invalid range [" + std::to_string(begin) + "," +
                                    std::to_string(end) + ") for " + shape_str(x.shape()));
    Shape os = x.shape();
    os[0] = end - begin;
    const std::size_t row = x.numel() / x.shape()[0];
    Tensor<T> out = Tensor<T>::zeros(os);
    std::memcpy(out.mutable_data(), x.data() + begin * row, (end - begin) * row * sizeof(T));
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto ix = x.impl(), io = out.impl();
        Tape<T>::current()->record(io, [ix, io, begin, row]() {
            if (io->grad.empty()) return;
            const T* go = io->grad.data();
            T* gx = ix->gptr() + begin * row;
            for (std::size_t i = 0, n = io->numel(); i < n; ++i) gx[i] += go[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> concat0(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat0: no inputs");
    Shape os = xs[0].shape();
    std::size_t rows = 0;
    for (const auto& x : xs) {
        if (x.rank() != os.size() || !std::equal(os.begin() + 1, os.end(), x.shape().begin() + 1))
            fail_shape("concat0: trailing shape differs", os, x.shape());
        rows += x.shape()[0];
    }
    const std::size_t row = numel(os) / os[0];
    os[0] = rows;
    Tensor<T> out = Tensor<T>::zeros(os);
    T* po = out.mutable_data();
    std::size_t off = 0;
    bool want = false;
    for (const auto& x : xs) {
        std::memcpy(po + off, x.data(), x.numel() * sizeof(T));
        off += x.numel();
        want |= x.requires_grad();
    }
    if (Tape<T>::current() && want) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorImpl<T>>> ins;
        for (const auto& x : xs) ins.push_back(x.impl());
        auto io = out.impl();
        Tape<T>::current()->record(io, [ins, io]() {
            if (io->grad.empty()) return;
            const T* go = io->grad.data();
            std::size_t off = 0;
            for (const auto& in : ins) {
                T* gx = in->gptr();
                for (std::size_t i = 0, n = in->numel(); i < n; ++i) gx[i] += go[off + i];
                off += in->numel();
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline void reduce_layout(const Shape& in, const std::vector<int>& axes, bool keepdims, Shape& out,
                          std::vector<std::size_t>& out_stride_for_in_axis) {
    if (axes.empty()) throw std::invalid_argument("reduction: empty axis list");
    std::vector<bool> reduced(in.size(), false);
    for (int a : axes) {
        if (a < 0 || static_cast<std::size_t>(a) >= in.size())
            throw std::invalid_argument("reduction: axis " + std::to_string(a) + " out of range for " +
                                        shape_str(in));
        if (reduced[a]) throw std::invalid_argument("reduction: duplicate axis " + std::to_string(a));
        reduced[a] = true;
    }
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (!reduced[i]) out.push_back(in[i]);
        else if (keepdims) out.push_back(1);
    }
    auto ost = strides_of(out);
    out_stride_for_in_axis.assign(in.size(), 0);
    std::size_t oax = 0;
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (reduced[i]) {
            if (keepdims) ++oax;
            continue;
        }
        out_stride_for_in_axis[i] = ost[oax++];
    }
}

// Walks the input linearly with the mapped output index.
template <class F>
void for_each_reduce(const Shape& in, const std::vector<std::size_t>& omap, F&& fn) {
    const IndexMap m = classify_map(in, omap);
    const std::vector<std::size_t> none(in.size(), 0);
    for_each_mapped(in, m, IndexMap{IndexMap::Full, 1}, omap, none,
                    [&](std::size_t ii, std::size_t oi, std::size_t) { fn(ii, oi); });
}

enum class Red { Sum, Mean, Max };

template <class T>
Tensor<T> reduce(const Tensor<T>& x, std::vector<int> axes, bool keepdims, Red kind) {
    Shape os;
    std::vector<std::size_t> omap;
    reduce_layout(x.shape(), axes, keepdims, os, omap);
    Tensor<T> out = Tensor<T>::zeros(os);
    const T* px = x.data();
    T* po = out.mutable_data();
    const std::size_t on = out.numel();
    std::size_t count = x.numel() / on;

    std::vector<std::size_t> argmax;
    if (kind == Red::Max) {
        argmax.assign(on, 0);
        std::fill(po, po + on, -std::numeric_limits<T>::infinity());
        for_each_reduce(x.shape(), omap, [&](std::size_t ii, std::size_t oi) {
            if (px[ii] > po[oi]) { // strict: first maximal element wins
                po[oi] = px[ii];
                argmax[oi] = ii;
            }
        });
    } else {
        for_each_reduce(x.shape(), omap, [&](std::size_t ii, std::size_t oi) { po[oi] += px[ii]; });
        if (kind == Red::Mean)
            for (std::size_t i = 0; i < on; ++i) po[i] /= static_cast<T>(count);
    }
    if (tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto ix = x.impl(), io = out.impl();
        auto shape = x.shape();
        Tape<T>::current()->record(io, [ix, io, omap, shape, kind, count, argmax]() {
            if (io->grad.empty()) return;
            const T* go = io->grad.data();
            T* gx = ix->gptr();
            if (kind == Red::Max) {
                for (std::size_t oi = 0; oi < io->numel(); ++oi) gx[argmax[oi]] += go[oi];
            } else {
                const T scale = kind == Red::Mean ? T(1) / static_cast<T>(count) : T(1);
                for_each_reduce(shape, omap, [&](std::size_t ii, std::size_t oi) { gx[ii] += go[oi] * scale; });
            }
        });
    }
    return out;
}

inline std::vector<int> all_axes(std::size_t rank) {
    std::vector<int> a(rank);
    for (std::size_t i = 0; i < rank; ++i) a[i] = static_cast<int>(i);
    return a;
}

} // namespace detail

template <class T>
Tensor<T> sum(const Tensor<T>& x, std::vector<int> axes, bool keepdims = false) {
    return detail::reduce(x, std::move(axes), keepdims, detail::Red::Sum);
}
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    if (x.rank() == 0) return detail::unary_op(x, [](T v) { return v; }, [](T, T) { return T(1); });
    return detail::reduce(x, detail::all_axes(x.rank()), false, detail::Red::Sum);
}
template <class T>
Tensor<T> mean(const Tensor<T>& x, std::vector<int> axes, bool keepdims = false) {
    return detail::reduce(x, std::move(axes), keepdims, detail::Red::Mean);
}
template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.rank() == 0) return detail::unary_op(x, [](T v) { return v; }, [](T, T) { return T(1); });
    return detail::reduce(x, detail::all_axes(x.rank()), false, detail::Red::Mean);
}
template <class T>
Tensor<T> max(const Tensor<T>& x, std::vector<int> axes, bool keepdims = false) {
    return detail::reduce(x, std::move(axes), keepdims, detail::Red::Max);
}
template <class T>
Tensor<T> max(const Tensor<T>& x) {
    if (x.rank() == 0) return detail::unary_op(x, [](T v) { return v; }, [](T, T) { return T(1); });
    return detail::reduce(x, detail::all_axes(x.rank()), false, detail::Red::Max);
}

template <class T>
bool all_finite(const Tensor<T>& x) {
    const T* p = x.data();
    for (std::size_t i = 0, n = x.numel(); i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

} // namespace tdsnet
