#pragma once

#include <map>
#include <optional>
#include <string>

#include "tdsnet/rng.hpp"
#include "tdsnet/tensor.hpp"

namespace tdsnet {

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

// Named map layer-path -> tensor. std::map keeps iteration lexicographic,
// which fixes checkpoint record order and optimizer update order.
template <class T>
struct ParamStore {
    std::map<std::string, Tensor<T>> params;

    Tensor<T> add(const std::string& path, Tensor<T> t) {
        t.set_requires_grad(true);
        auto [it, inserted] = params.emplace(path, t);
        if (!inserted) throw std::invalid_argument("duplicate parameter path: " + path);
        return it->second;
    }

    std::size_t total_count() const {
        std::size_t n = 0;
        for (const auto& [k, v] : params) n += v.numel();
        return n;
    }

    // Counts keyed by the path segment before the first '.'.
    std::map<std::string, std::size_t> counts_by_module() const {
        std::map<std::string, std::size_t> out;
        for (const auto& [k, v] : params) out[k.substr(0, k.find('.'))] += v.numel();
        return out;
    }

    void zero_grads() {
        for (auto& [k, v] : params) v.zero_grad();
    }
};

// Non-trainable persistent buffers (batch-norm running statistics).
template <class T>
struct StateStore {
    std::map<std::string, Tensor<T>> buffers;

    Tensor<T> add(const std::string& path, Tensor<T> t) {
        auto [it, inserted] = buffers.emplace(path, t);
        if (!inserted) throw std::invalid_argument("duplicate state path: " + path);
        return it->second;
    }
};

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, stride 1, symmetric zero padding)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void im2col(const T* x, std::size_t H, std::size_t W, std::size_t C, std::size_t KH, std::size_t KW,
            std::size_t pad, std::size_t Hout, std::size_t Wout, T* col) {
    for (std::size_t oy = 0; oy < Hout; ++oy)
        for (std::size_t ox = 0; ox < Wout; ++ox) {
            T* row = col + (oy * Wout + ox) * KH * KW * C;
            for (std::size_t ky = 0; ky < KH; ++ky) {
                const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                for (std::size_t kx = 0; kx < KW; ++kx) {
                    const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                    T* dst = row + (ky * KW + kx) * C;
                    if (y < 0 || y >= static_cast<std::ptrdiff_t>(H) || xx < 0 ||
                        xx >= static_cast<std::ptrdiff_t>(W)) {
                        std::fill(dst, dst + C, T(0));
                    } else {
                        std::memcpy(dst, x + (y * W + xx) * C, C * sizeof(T));
                    }
                }
            }
        }
}

template <class T>
void col2im_add(const T* col, std::size_t H, std::size_t W, std::size_t C, std::size_t KH, std::size_t KW,
                std::size_t pad, std::size_t Hout, std::size_t Wout, T* gx) {
    for (std::size_t oy = 0; oy < Hout; ++oy)
        for (std::size_t ox = 0; ox < Wout; ++ox) {
            const T* row = col + (oy * Wout + ox) * KH * KW * C;
            for (std::size_t ky = 0; ky < KH; ++ky) {
                const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                if (y < 0 || y >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kx = 0; kx < KW; ++kx) {
                    const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                    if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(W)) continue;
                    const T* src = row + (ky * KW + kx) * C;
                    T* dst = gx + (y * W + xx) * C;
                    for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
                }
            }
        }
}

} // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4) fail_shape("conv2d: want NHWC input and KKIO kernel", x.shape(), w.shape());
    const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    const std::size_t KH = w.shape()[0], KW = w.shape()[1], Cout = w.shape()[3];
    if (w.shape()[2] != C) fail_shape("conv2d: channel mismatch", x.shape(), w.shape());
    if (KH > H + 2 * pad || KW > W + 2 * pad)
        fail_shape("conv2d: kernel exceeds padded input", x.shape(), w.shape());
    const std::size_t Hout = H + 2 * pad - KH + 1;
    const std::size_t Wout = W + 2 * pad - KW + 1;
    const std::size_t patch = KH * KW * C;
    const std::size_t rows = Hout * Wout;

    Tensor<T> out = Tensor<T>::zeros({B, Hout, Wout, Cout});
    {
        std::vector<T> col(rows * patch);
        for (std::size_t b = 0; b < B; ++b) {
            detail::im2col(x.data() + b * H * W * C, H, W, C, KH, KW, pad, Hout, Wout, col.data());
            detail::gemm(false, false, rows, Cout, patch, col.data(), w.data(),
                         out.mutable_data() + b * rows * Cout, false);
        }
    }
    if (detail::tracing<T>({&x, &w})) {
        out.set_requires_grad(true);
        auto ix = x.impl(), iw = w.impl(), io = out.impl();
        Tape<T>::current()->record(io, [ix, iw, io, B, H, W, C, KH, KW, pad, Hout, Wout, patch, rows]() {
            if (io->grad.empty()) return;
            const T* go = io->grad.data();
            const std::size_t Cout = iw->shape[3];
            T* gw = iw->gptr();
            T* gx = ix->gptr();
            std::vector<T> col(rows * patch);
            std::vector<T> dcol(rows * patch);
            for (std::size_t b = 0; b < B; ++b) {
                const T* go_b = go + b * rows * Cout;
                detail::im2col(ix->data() + b * H * W * C, H, W, C, KH, KW, pad, Hout, Wout, col.data());
                detail::gemm(true, false, patch, Cout, rows, col.data(), go_b, gw, true);
                detail::gemm(false, true, rows, patch, Cout, go_b, iw->data(), dcol.data(), false);
                detail::col2im_add(dcol.data(), H, W, C, KH, KW, pad, Hout, Wout, gx + b * H * W * C);
            }
        });
    }
    return out;
}

// 2x2 max pooling, stride 2. Gradient goes to the first maximal element of
// each window (lowest linear index on ties).
template <class T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
    if (x.rank() != 4) throw std::invalid_argument("maxpool2x2: NHWC required, got " + shape_str(x.shape()));
    const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    const std::size_t Ho = H / 2, Wo = W / 2;
    if (Ho == 0 || Wo == 0) throw std::invalid_argument("maxpool2x2: input too small " + shape_str(x.shape()));
    Tensor<T> out = Tensor<T>::zeros({B, Ho, Wo, C});
    std::vector<std::size_t> argmax(out.numel());
    const T* px = x.data();
    T* po = out.mutable_data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox)
                for (std::size_t c = 0; c < C; ++c) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t bi = 0;
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t li = ((b * H + 2 * oy + dy) * W + 2 * ox + dx) * C + c;
                            if (px[li] > best) {
                                best = px[li];
                                bi = li;
                            }
                        }
                    const std::size_t oi = ((b * Ho + oy) * Wo + ox) * C + c;
                    po[oi] = best;
                    argmax[oi] = bi;
                }
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto ix = x.impl(), io = out.impl();
        Tape<T>::current()->record(io, [ix, io, argmax]() {
            if (io->grad.empty()) return;
            const T* go = io->grad.data();
            T* gx = ix->gptr();
            for (std::size_t i = 0, n = io->numel(); i < n; ++i) gx[argmax[i]] += go[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer modules
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> v(numel(shape));
    for (auto& e : v) e = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from_vec(std::move(shape), std::move(v));
}

template <class T>
struct Conv2dLayer {
    Tensor<T> w; // (KH,KW,Cin,Cout)
    std::optional<Tensor<T>> bias;
    std::size_t pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<T>& ps, const std::string& path, std::size_t kh, std::size_t kw, std::size_t cin,
                std::size_t cout, std::size_t pad_, bool with_bias, Rng& rng)
        : pad(pad_) {
        w = ps.add(path + ".weight", kaiming_uniform<T>({kh, kw, cin, cout}, kh * kw * cin, rng));
        if (with_bias) bias = ps.add(path + ".bias", Tensor<T>::zeros({cout}));
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> y = conv2d(x, w, pad);
        if (bias) y = add(y, *bias);
        return y;
    }
};

enum class BnMode {
    Train,       // batch statistics, update running statistics
    TrainFrozen, // batch statistics, leave running statistics untouched
    Eval         // running statistics
};

template <class T>
struct BatchNormLayer {
    Tensor<T> gamma, beta;
    Tensor<T> run_mean, run_var, steps; // state buffers
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNormLayer() = default;
    BatchNormLayer(ParamStore<T>& ps, StateStore<T>& ss, const std::string& path, std::size_t channels) {
        gamma = ps.add(path + ".gamma", Tensor<T>::full({channels}, T(1)));
        beta = ps.add(path + ".beta", Tensor<T>::zeros({channels}));
        run_mean = ss.add(path + ".running_mean", Tensor<T>::zeros({channels}));
        run_var = ss.add(path + ".running_var", Tensor<T>::full({channels}, T(1)));
        steps = ss.add(path + ".steps", Tensor<T>::zeros({1}));
    }

    bool initialized() const { return steps.data()[0] > T(0); }

    Tensor<T> forward(const Tensor<T>& x, BnMode mode) {
        if (x.rank() != 4) throw std::invalid_argument("batchnorm: NHWC required, got " + shape_str(x.shape()));
        if (x.shape()[3] != gamma.numel()) fail_shape("batchnorm: channel mismatch", x.shape(), gamma.shape());
        if (mode == BnMode::Eval) {
            if (!initialized())
                throw std::runtime_error("batchnorm: uninitialized running statistics (train first or load a checkpoint)");
            Tensor<T> xc = sub(x, detach(run_mean));
            Tensor<T> denom = sqrt(detach(run_var) + eps);
            return add(mul(gamma, div(xc, denom)), beta);
        }
        Tensor<T> mu = mean(x, {0, 1, 2});
        Tensor<T> xc = sub(x, mu);
        Tensor<T> var = mean(mul(xc, xc), {0, 1, 2}); // biased, also used for the running update
        Tensor<T> y = add(mul(gamma, div(xc, sqrt(var + eps))), beta);
        if (mode == BnMode::Train) {
            const T* bm = mu.data();
            const T* bv = var.data();
            T* rm = run_mean.mutable_data();
            T* rv = run_var.mutable_data();
            for (std::size_t c = 0; c < gamma.numel(); ++c) {
                rm[c] = (T(1) - momentum) * rm[c] + momentum * bm[c];
                rv[c] = (T(1) - momentum) * rv[c] + momentum * bv[c];
            }
            steps.mutable_data()[0] += T(1);
        }
        return y;
    }
};

// conv -> batchnorm -> ReLU -> optional 2x2 maxpool. Conv bias is omitted:
// batch-norm's shift makes it redundant.
template <class T>
struct ConvBlock {
    Conv2dLayer<T> conv;
    BatchNormLayer<T> bn;
    bool pool = false;

    ConvBlock() = default;
    ConvBlock(ParamStore<T>& ps, StateStore<T>& ss, const std::string& path, std::size_t kernel, std::size_t cin,
              std::size_t cout, bool pool_, Rng& rng)
        : conv(ps, path + ".conv", kernel, kernel, cin, cout, kernel / 2, /*with_bias=*/false, rng),
          bn(ps, ss, path + ".bn", cout),
          pool(pool_) {}

    Tensor<T> forward(const Tensor<T>& x, BnMode mode) {
        Tensor<T> y = relu(bn.forward(conv.forward(x), mode));
        return pool ? maxpool2x2(y) : y;
    }
};

// The Conv-4 feature extractor: `blocks` pooled conv blocks, first mapping
// in_channels -> channels, the rest channels -> channels.
template <class T>
struct Backbone {
    std::vector<ConvBlock<T>> blocks;
    std::size_t image_size = 0;
    std::size_t channels = 0;

    Backbone() = default;
    Backbone(ParamStore<T>& ps, StateStore<T>& ss, std::size_t image_size_, std::size_t in_channels,
             std::size_t channels_, std::size_t num_blocks, Rng& rng)
        : image_size(image_size_), channels(channels_) {
        for (std::size_t i = 0; i < num_blocks; ++i) {
            const std::string path = "backbone.block" + std::to_string(i + 1);
            blocks.emplace_back(ps, ss, path, 3, i == 0 ? in_channels : channels, channels, /*pool=*/true, rng);
        }
    }

    std::size_t feature_hw() const {
        std::size_t s = image_size;
        for (std::size_t i = 0; i < blocks.size(); ++i) s /= 2;
        return s;
    }

    Tensor<T> forward(const Tensor<T>& x, BnMode mode) {
        if (x.rank() != 4 || x.shape()[1] != image_size || x.shape()[2] != image_size)
            throw std::invalid_argument("backbone: expected " + std::to_string(image_size) + "x" +
                                        std::to_string(image_size) + " input, got " + shape_str(x.shape()));
        Tensor<T> y = x;
        for (auto& b : blocks) y = b.forward(y, mode);
        return y;
    }
};

enum class HConvVariant { Conv3x3, Conv1x1, Identity };

inline const char* to_string(HConvVariant v) {
    switch (v) {
        case HConvVariant::Conv3x3: return "conv3x3";
        case HConvVariant::Conv1x1: return "conv1x1";
        case HConvVariant::Identity: return "identity";
    }
    return "?";
}

// Global-branch head: two unpooled conv blocks over prototype / query maps.
template <class T>
struct HConv {
    HConvVariant variant = HConvVariant::Conv3x3;
    std::vector<ConvBlock<T>> blocks;

    HConv() = default;
    HConv(ParamStore<T>& ps, StateStore<T>& ss, std::size_t channels, HConvVariant variant_, Rng& rng)
        : variant(variant_) {
        if (variant == HConvVariant::Identity) return;
        const std::size_t kernel = variant == HConvVariant::Conv3x3 ? 3 : 1;
        for (std::size_t i = 0; i < 2; ++i)
            blocks.emplace_back(ps, ss, "hconv.block" + std::to_string(i + 1), kernel, channels, channels,
                                /*pool=*/false, rng);
    }

    Tensor<T> forward(const Tensor<T>& x, BnMode mode) {
        Tensor<T> y = x;
        for (auto& b : blocks) y = b.forward(y, mode);
        return y;
    }
};

} // namespace tdsnet
