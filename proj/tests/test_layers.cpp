#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "helpers.hpp"
#include "tdsnet/layers.hpp"

using namespace tdsnet;
using Catch::Approx;
using testutil::fd_gradient;
using testutil::max_rel_err;
using testutil::rand_vec;

namespace {

// Independent reference: direct nested-loop cross-correlation, NHWC.
std::vector<double> conv_naive(const std::vector<double>& x, std::size_t B, std::size_t H, std::size_t W,
                               std::size_t C, const std::vector<double>& w, std::size_t KH, std::size_t KW,
                               std::size_t Cout, std::size_t pad) {
    const std::size_t Ho = H + 2 * pad - KH + 1, Wo = W + 2 * pad - KW + 1;
    std::vector<double> out(B * Ho * Wo * Cout, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox)
                for (std::size_t co = 0; co < Cout; ++co) {
                    double acc = 0;
                    for (std::size_t ky = 0; ky < KH; ++ky)
                        for (std::size_t kx = 0; kx < KW; ++kx)
                            for (std::size_t ci = 0; ci < C; ++ci) {
                                const std::ptrdiff_t y = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(pad);
                                const std::ptrdiff_t xx = std::ptrdiff_t(ox + kx) - std::ptrdiff_t(pad);
                                if (y < 0 || y >= std::ptrdiff_t(H) || xx < 0 || xx >= std::ptrdiff_t(W)) continue;
                                acc += x[((b * H + y) * W + xx) * C + ci] *
                                       w[((ky * KW + kx) * C + ci) * Cout + co];
                            }
                    out[((b * Ho + oy) * Wo + ox) * Cout + co] = acc;
                }
    return out;
}

} // namespace

TEST_CASE("conv2d identity kernels") {
    Rng rng(17);
    auto xv = rand_vec(rng, 2 * 4 * 4 * 3);
    auto x = Tensor<double>::from_vec({2, 4, 4, 3}, xv);

    SECTION("1x1 channel identity") {
        std::vector<double> wv(3 * 3, 0.0);
        for (int c = 0; c < 3; ++c) wv[c * 3 + c] = 1.0;
        auto w = Tensor<double>::from_vec({1, 1, 3, 3}, wv);
        CHECK(conv2d(x, w, 0).values() == x.values());
    }
    SECTION("3x3 delta kernel with pad 1") {
        std::vector<double> wv(3 * 3 * 3 * 3, 0.0);
        for (int c = 0; c < 3; ++c) wv[((1 * 3 + 1) * 3 + c) * 3 + c] = 1.0; // center tap
        auto w = Tensor<double>::from_vec({3, 3, 3, 3}, wv);
        auto y = conv2d(x, w, 1);
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == Approx(x.data()[i]).margin(1e-12));
    }
}

TEST_CASE("conv2d matches the nested-loop reference") {
    Rng rng(23);
    auto xv = rand_vec(rng, 1 * 6 * 6 * 2);
    auto wv = rand_vec(rng, 3 * 3 * 2 * 4);
    auto y = conv2d(Tensor<double>::from_vec({1, 6, 6, 2}, xv), Tensor<double>::from_vec({3, 3, 2, 4}, wv), 1);
    auto want = conv_naive(xv, 1, 6, 6, 2, wv, 3, 3, 4, 1);
    REQUIRE(y.numel() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(y.data()[i] == Approx(want[i]).margin(1e-6));
}

TEST_CASE("conv2d gradients match central differences") {
    Rng rng(29);
    auto xv = rand_vec(rng, 1 * 5 * 5 * 2);
    auto wv = rand_vec(rng, 3 * 3 * 2 * 3);
    Rng pinr(77);
    auto pv = rand_vec(pinr, 1 * 5 * 5 * 3, 0.25, 1.75);

    auto x = Tensor<double>::from_vec({1, 5, 5, 2}, xv).set_requires_grad(true);
    auto w = Tensor<double>::from_vec({3, 3, 2, 3}, wv).set_requires_grad(true);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        auto pinned = mul(conv2d(x, w, 1), Tensor<double>::from_vec({1, 5, 5, 3}, pv));
        tape.backward(sum(pinned));
    }
    auto f = [&]() {
        auto xx = Tensor<double>::from_vec({1, 5, 5, 2}, xv);
        auto ww = Tensor<double>::from_vec({3, 3, 2, 3}, wv);
        return sum(mul(conv2d(xx, ww, 1), Tensor<double>::from_vec({1, 5, 5, 3}, pv))).value();
    };
    CHECK(max_rel_err(x.grad(), fd_gradient(xv, f)) < 1e-5);
    CHECK(max_rel_err(w.grad(), fd_gradient(wv, f)) < 1e-5);
}

TEST_CASE("conv2d rejects bad geometry") {
    auto x = Tensor<double>::zeros({1, 4, 4, 3});
    CHECK_THROWS_WITH(conv2d(x, Tensor<double>::zeros({3, 3, 2, 8}), 1),
                      Catch::Matchers::ContainsSubstring("channel"));
    CHECK_THROWS_WITH(conv2d(x, Tensor<double>::zeros({7, 7, 3, 8}), 1),
                      Catch::Matchers::ContainsSubstring("kernel"));
}

TEST_CASE("maxpool halves extents with floor and routes gradients to the max") {
    auto x = Tensor<double>::from_vec({1, 2, 2, 1}, {1, 4, 2, 3}).set_requires_grad(true);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        auto y = maxpool2x2(x);
        CHECK(y.values() == std::vector<double>{4});
        tape.backward(sum(y));
    }
    CHECK(x.grad() == std::vector<double>{0, 1, 0, 0});

    auto odd = Tensor<double>::zeros({1, 5, 5, 2});
    CHECK(maxpool2x2(odd).shape() == Shape{1, 2, 2, 2}); // trailing row/col dropped

    auto tie = Tensor<double>::from_vec({1, 2, 2, 1}, {7, 7, 7, 7}).set_requires_grad(true);
    Tape<double> tape2;
    {
        Tape<double>::Scope scope(tape2);
        tape2.backward(sum(maxpool2x2(tie)));
    }
    CHECK(tie.grad() == std::vector<double>{1, 0, 0, 0}); // lowest linear index wins
}

TEST_CASE("batchnorm train mode standardizes per channel") {
    Rng rng(31);
    ParamStore<double> ps;
    StateStore<double> ss;
    BatchNormLayer<double> bn(ps, ss, "bn", 3);
    auto xv = rand_vec(rng, 4 * 3 * 3 * 3, -2.0, 5.0);
    auto x = Tensor<double>::from_vec({4, 3, 3, 3}, xv);
    auto y = bn.forward(x, BnMode::Train);

    // gamma=1, beta=0: output is the standardized input
    const std::size_t n = 4 * 3 * 3;
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (std::size_t i = 0; i < y.numel(); i += 3) m += y.data()[i + c];
        m /= double(n);
        for (std::size_t i = 0; i < y.numel(); i += 3) v += (y.data()[i + c] - m) * (y.data()[i + c] - m);
        v /= double(n);
        CHECK(std::abs(m) < 1e-4);
        CHECK(std::abs(v - 1.0) < 1e-4);
    }

    // running mean after the first batch is momentum * batch mean
    for (std::size_t c = 0; c < 3; ++c) {
        double bm = 0;
        for (std::size_t i = 0; i < x.numel(); i += 3) bm += x.data()[i + c];
        bm /= double(n);
        CHECK(bn.run_mean.data()[c] == Approx(0.1 * bm).epsilon(1e-12));
    }
}

TEST_CASE("batchnorm on standardized input is near identity") {
    Rng rng(37);
    ParamStore<double> ps;
    StateStore<double> ss;
    BatchNormLayer<double> bn(ps, ss, "bn", 2);
    // construct data with exact zero mean, unit variance per channel
    std::vector<double> xv = {1, -1, -1, 1, 1, -1, -1, 1};
    auto x = Tensor<double>::from_vec({2, 1, 2, 2}, xv);
    auto y = bn.forward(x, BnMode::Train);
    for (std::size_t i = 0; i < y.numel(); ++i)
        CHECK(y.data()[i] == Approx(x.data()[i]).margin(1e-4)); // eps shifts slightly
}

TEST_CASE("batchnorm eval requires initialized running statistics") {
    ParamStore<double> ps;
    StateStore<double> ss;
    BatchNormLayer<double> bn(ps, ss, "bn", 2);
    auto x = Tensor<double>::zeros({1, 2, 2, 2});
    CHECK_THROWS_WITH(bn.forward(x, BnMode::Eval),
                      Catch::Matchers::ContainsSubstring("uninitialized running statistics"));
    bn.forward(x, BnMode::TrainFrozen); // frozen mode must not initialize
    CHECK_THROWS_AS(bn.forward(x, BnMode::Eval), std::runtime_error);
    bn.forward(x, BnMode::Train);
    CHECK_NOTHROW(bn.forward(x, BnMode::Eval));
}

TEST_CASE("batchnorm gradients match central differences") {
    Rng rng(41);
    auto xv = rand_vec(rng, 2 * 2 * 2 * 2, -1.0, 1.0);
    Rng pinr(78);
    auto pv = rand_vec(pinr, 16, 0.25, 1.75);
    auto run = [&](bool with_tape, std::vector<double>& storage, Tensor<double>* xout) {
        ParamStore<double> ps;
        StateStore<double> ss;
        BatchNormLayer<double> bn(ps, ss, "bn", 2);
        auto x = Tensor<double>::from_vec({2, 2, 2, 2}, storage);
        if (with_tape) {
            x.set_requires_grad(true);
            *xout = x;
        }
        auto y = bn.forward(x, BnMode::TrainFrozen);
        return sum(mul(y, Tensor<double>::from_vec({2, 2, 2, 2}, pv)));
    };
    Tensor<double> x;
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        tape.backward(run(true, xv, &x));
    }
    auto f = [&]() { return run(false, xv, nullptr).value(); };
    CHECK(max_rel_err(x.grad(), fd_gradient(xv, f)) < 1e-5);
}

TEST_CASE("backbone produces 5x5x64 maps from 84x84 input") {
    Rng seed(1);
    ParamStore<float> ps;
    StateStore<float> ss;
    Rng rng(123);
    Backbone<float> bb(ps, ss, 84, 3, 64, 4, rng);
    CHECK(bb.feature_hw() == 5);

    std::vector<float> img(10 * 84 * 84 * 3);
    Rng data(99);
    for (auto& v : img) v = float(data.uniform(0.0, 1.0));
    auto out = bb.forward(Tensor<float>::from_vec({10, 84, 84, 3}, img), BnMode::Train);
    CHECK(out.shape() == Shape{10, 5, 5, 64});

    CHECK_THROWS_WITH(bb.forward(Tensor<float>::zeros({1, 32, 32, 3}), BnMode::Train),
                      Catch::Matchers::ContainsSubstring("84"));
}

TEST_CASE("backbone trainable parameter count is exactly 112832") {
    ParamStore<double> ps;
    StateStore<double> ss;
    Rng rng(7);
    Backbone<double> bb(ps, ss, 84, 3, 64, 4, rng);
    CHECK(ps.counts_by_module().at("backbone") == 112832u);
    // closed form: (3*3*3*64 + 128) + 3 * (3*3*64*64 + 128)
    CHECK(1856u + 3u * 36992u == 112832u);
}

TEST_CASE("h_conv variant parameter counts") {
    auto count = [](HConvVariant v) {
        ParamStore<double> ps;
        StateStore<double> ss;
        Rng rng(7);
        HConv<double> h(ps, ss, 64, v, rng);
        auto by = ps.counts_by_module();
        return by.count("hconv") ? by.at("hconv") : 0u;
    };
    CHECK(count(HConvVariant::Conv3x3) == 2u * (3u * 3u * 64u * 64u + 128u));
    CHECK(count(HConvVariant::Conv1x1) == 2u * (64u * 64u + 128u));
    CHECK(count(HConvVariant::Identity) == 0u);
}

TEST_CASE("feature extraction is deterministic and eval is batch-independent") {
    ParamStore<float> ps;
    StateStore<float> ss;
    Rng rng(55);
    Backbone<float> bb(ps, ss, 16, 3, 8, 2, rng);

    Rng data(5);
    std::vector<float> img(4 * 16 * 16 * 3);
    for (auto& v : img) v = float(data.uniform(0.0, 1.0));
    auto batch = Tensor<float>::from_vec({4, 16, 16, 3}, img);

    auto a = bb.forward(batch, BnMode::Train); // also warms running stats
    auto b = bb.forward(batch, BnMode::TrainFrozen);
    auto c = bb.forward(batch, BnMode::TrainFrozen);
    CHECK(std::memcmp(b.data(), c.data(), b.numel() * sizeof(float)) == 0);

    // eval output of one sample does not depend on its batch companions
    auto full = bb.forward(batch, BnMode::Eval);
    auto solo = bb.forward(slice0(batch, 1, 2), BnMode::Eval);
    const std::size_t per = full.numel() / 4;
    for (std::size_t i = 0; i < per; ++i) CHECK(full.data()[per + i] == Approx(solo.data()[i]).margin(1e-6));
}
