#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "tdsnet/metric.hpp"
#include "tdsnet/model.hpp"

using namespace tdsnet;
using Catch::Approx;
using testutil::max_rel_err;
using testutil::rand_vec;

namespace {

// Independent pairwise-cosine reference over columns of (C,P) matrices.
std::vector<double> cosine_matrix_naive(const std::vector<double>& a, const std::vector<double>& b,
                                        std::size_t c, std::size_t p, std::size_t q) {
    std::vector<double> m(p * q);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) {
            double dot = 0, na = 0, nb = 0;
            for (std::size_t d = 0; d < c; ++d) {
                dot += a[d * p + i] * b[d * q + j];
                na += a[d * p + i] * a[d * p + i];
                nb += b[d * q + j] * b[d * q + j];
            }
            double v = dot / (std::sqrt(na) * std::sqrt(nb) + 1e-8);
            m[i * q + j] = std::min(1.0, std::max(-1.0, v));
        }
    return m;
}

// Brute-force local score: (1/R) sum_i sum_{j in block n} MA[i,j] * M[i,j].
std::vector<double> local_score_naive(const std::vector<double>& m, const std::vector<double>& ma,
                                      std::size_t rows, std::size_t n, std::size_t block) {
    std::vector<double> s(n, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t cls = 0; cls < n; ++cls)
            for (std::size_t j = 0; j < block; ++j)
                s[cls] += ma[i * n * block + cls * block + j] * m[i * n * block + cls * block + j];
    for (auto& v : s) v /= double(rows);
    return s;
}

ModelConfig tiny_config() {
    ModelConfig mc;
    mc.image_size = 16;
    mc.channels = 8;
    mc.blocks = 2;
    mc.attention_maps = 2;
    mc.top_k = 2;
    mc.lfe = false;
    return mc;
}

template <class T>
EpisodeBatch<T> random_episode(std::size_t n, std::size_t k, std::size_t q_per, std::size_t size,
                               std::uint64_t seed) {
    Rng rng(seed);
    EpisodeBatch<T> ep;
    ep.n_way = n;
    ep.k_shot = k;
    std::vector<T> sup(n * k * size * size * 3), qry(n * q_per * size * size * 3);
    for (auto& v : sup) v = T(rng.uniform(0.0, 1.0));
    for (auto& v : qry) v = T(rng.uniform(0.0, 1.0));
    ep.support = Tensor<T>::from_vec({n * k, size, size, 3}, std::move(sup));
    ep.query = Tensor<T>::from_vec({n * q_per, size, size, 3}, std::move(qry));
    for (std::size_t c = 0; c < n; ++c)
        for (std::size_t i = 0; i < q_per; ++i) ep.labels.push_back(int(c));
    return ep;
}

} // namespace

TEST_CASE("cosine basics") {
    auto u = Tensor<double>::from_vec({3}, {1, 2, 3});
    CHECK(cosine(u, u).value() == Approx(1.0).margin(1e-7));
    CHECK(cosine(u, mul(u, Tensor<double>::scalar(-1.0))).value() == Approx(-1.0).margin(1e-7));
    auto e1 = Tensor<double>::from_vec({2}, {1, 0});
    auto e2 = Tensor<double>::from_vec({2}, {0, 1});
    CHECK(cosine(e1, e2).value() == 0.0);

    // zero vectors resolve to similarity 0 through the epsilon guard
    auto z = Tensor<double>::zeros({3});
    CHECK(cosine(z, u).value() == 0.0);
    CHECK(cosine(z, z).value() == 0.0);
}

TEST_CASE("similarity matrix against the pairwise loop reference") {
    Rng rng(3);
    const std::size_t c = 6, p = 4, q = 8;
    auto av = rand_vec(rng, c * p);
    auto bv = rand_vec(rng, c * q);
    auto m = build_similarity_matrix(Tensor<double>::from_vec({c, p}, av), Tensor<double>::from_vec({c, q}, bv));
    auto want = cosine_matrix_naive(av, bv, c, p, q);
    REQUIRE(m.numel() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
        CHECK(m.data()[i] == Approx(want[i]).margin(1e-6));
        CHECK(m.data()[i] >= -1.0);
        CHECK(m.data()[i] <= 1.0);
    }
}

TEST_CASE("similarity matrix of a set with itself has unit diagonal") {
    Rng rng(4);
    auto lv = rand_vec(rng, 5 * 7);
    auto l = Tensor<double>::from_vec({5, 7}, lv);
    auto m = build_similarity_matrix(l, l);
    for (std::size_t i = 0; i < 7; ++i) CHECK(m.data()[i * 7 + i] == Approx(1.0).margin(1e-7));

    auto same = Tensor<double>::from_vec({3, 4}, {1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3});
    auto m2 = build_similarity_matrix(same, same);
    for (std::size_t i = 0; i < m2.numel(); ++i) CHECK(m2.data()[i] == Approx(1.0).margin(1e-7));
}

TEST_CASE("task attention rows sum to one in smooth mode") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        auto mv = rand_vec(rng, 6 * 20);
        auto ma = task_attention(Tensor<double>::from_vec({6, 20}, mv), 4, 3, 20.0, AttentionKind::Smooth);
        for (std::size_t i = 0; i < 6; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 20; ++j) s += ma.data()[i * 20 + j];
            CHECK(s == Approx(1.0).margin(1e-5));
        }
    }
}

TEST_CASE("smooth gate passes half of the threshold element") {
    // one row [a, b] with a > b, k=1 so beta = a; I*(a) = a/2
    const double a = 0.8, b = -0.4, t = 20.0;
    auto ma = task_attention(Tensor<double>::from_vec({1, 2}, {a, b}), 1, 1, t, AttentionKind::Smooth);
    const double ia = a / 2.0;
    const double ib = b / (1.0 + std::exp(-t * (b - a)));
    CHECK(ma.data()[0] == Approx(ia / (ia + ib)).epsilon(1e-9));
    CHECK(ma.data()[1] == Approx(ib / (ia + ib)).epsilon(1e-9));
}

TEST_CASE("hard attention zeroes the k-th element itself") {
    auto ma = task_attention(Tensor<double>::from_vec({1, 3}, {0.9, 0.5, 0.1}), 1, 2, 20.0,
                             AttentionKind::Hard);
    CHECK(ma.data()[0] == Approx(1.0));
    CHECK(ma.data()[1] == 0.0);
    CHECK(ma.data()[2] == 0.0);
}

TEST_CASE("hard attention with no survivor falls back to the uniform row") {
    auto ma = task_attention(Tensor<double>::full({2, 6}, 0.3), 2, 3, 20.0, AttentionKind::Hard);
    for (std::size_t i = 0; i < ma.numel(); ++i) CHECK(ma.data()[i] == Approx(1.0 / 6.0));
}

TEST_CASE("per-class attention normalizes each class block") {
    Rng rng(6);
    auto mv = rand_vec(rng, 4 * 12);
    auto ma = task_attention(Tensor<double>::from_vec({4, 12}, mv), 3, 2, 20.0, AttentionKind::Smooth,
                             AttentionScope::PerClass);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t cls = 0; cls < 3; ++cls) {
            double s = 0;
            for (std::size_t j = 0; j < 4; ++j) s += ma.data()[i * 12 + cls * 4 + j];
            CHECK(s == Approx(1.0).margin(1e-5));
        }
}

TEST_CASE("smooth attention approaches hard attention at large steepness") {
    // rows built so the k-th largest value is ~0: the threshold element then
    // carries negligible mass and the remaining entries sit well away from it
    Rng rng(7);
    const std::size_t cols = 12, k = 3;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> row(cols);
        for (std::size_t j = 0; j < k - 1; ++j) row[j] = rng.uniform(0.3, 1.0);
        row[k - 1] = rng.uniform(-5e-4, 5e-4);
        for (std::size_t j = k; j < cols; ++j) row[j] = rng.uniform(-1.0, -0.1);
        auto m = Tensor<double>::from_vec({1, cols}, row);
        auto smooth = task_attention(m, 2, k, 1e4, AttentionKind::Smooth);
        auto hard = task_attention(m, 2, k, 1e4, AttentionKind::Hard);
        for (std::size_t j = 0; j < cols; ++j)
            CHECK(std::abs(smooth.data()[j] - hard.data()[j]) <= 1e-2);
    }
}

TEST_CASE("local similarity") {
    SECTION("uniform attention, one class: score is the matrix mean") {
        Rng rng(8);
        auto mv = rand_vec(rng, 4 * 4);
        auto m = Tensor<double>::from_vec({4, 4}, mv);
        auto s = local_similarity(m, uniform_attention<double>(4, 4), 1);
        CHECK(s.value() == Approx(mean(m).value()).margin(1e-12));
    }
    SECTION("all-ones matrix conserves attention mass") {
        Rng rng(9);
        auto mv = rand_vec(rng, 3 * 15);
        auto ma = task_attention(Tensor<double>::from_vec({3, 15}, mv), 3, 2, 20.0, AttentionKind::Smooth);
        auto s = local_similarity(Tensor<double>::full({3, 15}, 1.0), ma, 3);
        double total = 0;
        for (std::size_t n = 0; n < 3; ++n) total += s.data()[n];
        CHECK(total == Approx(1.0).margin(1e-9));
    }
    SECTION("random two-class case matches the double loop") {
        Rng rng(10);
        auto mv = rand_vec(rng, 5 * 8);
        auto av = rand_vec(rng, 5 * 8, 0.0, 1.0);
        auto s = local_similarity(Tensor<double>::from_vec({5, 8}, mv), Tensor<double>::from_vec({5, 8}, av), 2);
        auto want = local_score_naive(mv, av, 5, 2, 4);
        CHECK(s.data()[0] == Approx(want[0]).margin(1e-6));
        CHECK(s.data()[1] == Approx(want[1]).margin(1e-6));
    }
}

TEST_CASE("fuse") {
    auto a = Tensor<double>::from_vec({2}, {1, 0});
    auto b = Tensor<double>::from_vec({2}, {0, 1});
    CHECK(fuse(a, a).values() == a.values());
    CHECK(fuse(a, b).values() == std::vector<double>{0.5, 0.5});

    // argmax of the fused score ignores a common shift of both branches
    Rng rng(11);
    auto sg = rand_vec(rng, 5);
    auto sl = rand_vec(rng, 5);
    auto base = fuse(Tensor<double>::from_vec({5}, sg), Tensor<double>::from_vec({5}, sl));
    auto sg2 = sg, sl2 = sl;
    for (auto& v : sg2) v += 0.37;
    for (auto& v : sl2) v += 0.37;
    auto shifted = fuse(Tensor<double>::from_vec({5}, sg2), Tensor<double>::from_vec({5}, sl2));
    auto arg = [](const Tensor<double>& t) {
        std::size_t b = 0;
        for (std::size_t i = 1; i < t.numel(); ++i)
            if (t.data()[i] > t.data()[b]) b = i;
        return b;
    };
    CHECK(arg(base) == arg(shifted));
}

TEST_CASE("rows_cosine basics for the global branch") {
    auto hq = Tensor<double>::from_vec({2, 2}, {1, 0, 0, 1});
    auto hp = Tensor<double>::from_vec({2, 2}, {0, 1, 1, 0});
    auto s = global_similarity(hq, hp);
    CHECK(s.data()[0] == 0.0); // orthogonal
    CHECK(s.data()[1] == Approx(1.0).margin(1e-7));
}

TEST_CASE("model: identical query and prototype give unit global score under identity head") {
    auto mc = tiny_config();
    mc.hconv = HConvVariant::Identity;
    mc.local_branch = false;
    TDSNet<double> net(mc, 42);
    auto ep = random_episode<double>(2, 1, 1, 16, 5);
    // make query 0 a copy of support image 0
    std::vector<double> q(ep.query.values());
    std::memcpy(q.data(), ep.support.data(), 16 * 16 * 3 * sizeof(double));
    ep.query = Tensor<double>::from_vec(ep.query.shape(), std::move(q));
    auto out = net.forward(ep, BnMode::Train);
    CHECK(out.global_scores.at({0, 0}) == Approx(1.0).margin(1e-6));
    CHECK(out.global_scores.at({0, 1}) < 1.0);
}

TEST_CASE("model: global scores equal a naive cosine over backbone features") {
    auto mc = tiny_config();
    mc.hconv = HConvVariant::Identity;
    TDSNet<double> net(mc, 43);
    auto ep = random_episode<double>(2, 2, 2, 16, 6);
    auto out = net.forward(ep, BnMode::Train);

    // independent recomputation: backbone features, class-mean prototypes,
    // plain cosine of flattened maps
    auto feats = net.backbone.forward(concat0<double>({ep.support, ep.query}), BnMode::TrainFrozen);
    const std::size_t per = 4 * 4 * 8;
    auto fv = feats.values();
    auto proto = [&](std::size_t cls) {
        std::vector<double> p(per, 0.0);
        for (std::size_t s = 0; s < 2; ++s)
            for (std::size_t i = 0; i < per; ++i) p[i] += fv[(cls * 2 + s) * per + i] / 2.0;
        return p;
    };
    for (std::size_t q = 0; q < 4; ++q)
        for (std::size_t cls = 0; cls < 2; ++cls) {
            auto p = proto(cls);
            const double* qf = fv.data() + (4 + q) * per;
            double dot = 0, nq = 0, np = 0;
            for (std::size_t i = 0; i < per; ++i) {
                dot += qf[i] * p[i];
                nq += qf[i] * qf[i];
                np += p[i] * p[i];
            }
            const double want = dot / (std::sqrt(nq) * std::sqrt(np) + 1e-8);
            CHECK(out.global_scores.at({q, cls}) == Approx(want).margin(1e-6));
        }
}

TEST_CASE("model: relation matrix equals similarity matrix under identity transform") {
    auto mc = tiny_config();
    TDSNet<double> net(mc, 44);
    // overwrite the 1x1 relation kernel with the channel identity
    auto* w = net.mphi.w.mutable_data();
    std::fill(w, w + net.mphi.w.numel(), 0.0);
    for (std::size_t c = 0; c < 8; ++c) w[c * 8 + c] = 1.0;

    auto ep = random_episode<double>(2, 1, 2, 16, 7);
    std::vector<SimilarityBundle<double>> bundles;
    auto out = net.forward(ep, BnMode::Train, nullptr, &bundles);
    REQUIRE(bundles.size() == 4);
    for (const auto& b : bundles) {
        REQUIRE(b.mphi.defined());
        for (std::size_t i = 0; i < b.m.numel(); ++i) {
            CHECK(b.mphi.data()[i] == Approx(b.m.data()[i]).margin(1e-6));
            CHECK(b.mphi.data()[i] >= -1.0);
            CHECK(b.mphi.data()[i] <= 1.0);
        }
    }
    (void)out;
}

TEST_CASE("model: local scores match the double-loop reference on captured matrices") {
    auto mc = tiny_config();
    TDSNet<double> net(mc, 45);
    auto ep = random_episode<double>(2, 1, 3, 16, 8);
    std::vector<SimilarityBundle<double>> bundles;
    auto out = net.forward(ep, BnMode::Train, nullptr, &bundles);
    const std::size_t hw = 16;
    for (std::size_t q = 0; q < bundles.size(); ++q) {
        auto want = local_score_naive(bundles[q].m.values(), bundles[q].ma.values(), hw, 2, hw);
        for (std::size_t n = 0; n < 2; ++n)
            CHECK(out.local_scores.at({q, n}) == Approx(want[n]).margin(1e-6));
    }
}

TEST_CASE("model: uniform attention reduces to DN4-like mean-block scoring") {
    auto mc = tiny_config();
    mc.uniform_attention = true;
    TDSNet<double> net(mc, 46);
    auto ep = random_episode<double>(2, 1, 3, 16, 9);
    std::vector<SimilarityBundle<double>> bundles;
    auto out = net.forward(ep, BnMode::Train, nullptr, &bundles);
    const std::size_t hw = 16;
    for (std::size_t q = 0; q < bundles.size(); ++q) {
        for (std::size_t n = 0; n < 2; ++n) {
            double acc = 0;
            for (std::size_t i = 0; i < hw; ++i)
                for (std::size_t j = 0; j < hw; ++j) acc += bundles[q].m.data()[i * 2 * hw + n * hw + j];
            const double want = acc / double(hw * 2 * hw);
            CHECK(out.local_scores.at({q, n}) == Approx(want).margin(1e-6));
        }
    }
}

TEST_CASE("model: permuting the support class order permutes all scores") {
    auto mc = tiny_config();
    TDSNet<double> net(mc, 47);
    const std::size_t n = 3, size = 16;
    auto ep = random_episode<double>(n, 1, 2, size, 10);
    auto out = net.forward(ep, BnMode::TrainFrozen);

    const std::vector<std::size_t> perm = {2, 0, 1}; // new position of each class
    EpisodeBatch<double> ep2 = ep;
    std::vector<double> sup(ep.support.numel());
    const std::size_t per = size * size * 3;
    for (std::size_t c = 0; c < n; ++c)
        std::memcpy(sup.data() + perm[c] * per, ep.support.data() + c * per, per * sizeof(double));
    ep2.support = Tensor<double>::from_vec(ep.support.shape(), std::move(sup));
    for (auto& l : ep2.labels) l = int(perm[l]);
    auto out2 = net.forward(ep2, BnMode::TrainFrozen);

    for (std::size_t q = 0; q < 6; ++q)
        for (std::size_t c = 0; c < n; ++c) {
            CHECK(out2.global_scores.at({q, perm[c]}) == Approx(out.global_scores.at({q, c})).margin(1e-9));
            CHECK(out2.local_scores.at({q, perm[c]}) == Approx(out.local_scores.at({q, c})).margin(1e-9));
            CHECK(out2.total_scores.at({q, perm[c]}) == Approx(out.total_scores.at({q, c})).margin(1e-9));
        }
}

TEST_CASE("model: fused scores are the exact mean of the branches") {
    auto mc = tiny_config();
    TDSNet<double> net(mc, 48);
    auto ep = random_episode<double>(2, 1, 2, 16, 11);
    auto out = net.forward(ep, BnMode::Train);
    for (std::size_t i = 0; i < out.total_scores.numel(); ++i)
        CHECK(out.total_scores.data()[i] ==
              Approx((out.global_scores.data()[i] + out.local_scores.data()[i]) / 2.0).margin(0));
}

TEST_CASE("model: end-to-end gradient of the fused score w.r.t. the input") {
    auto mc = tiny_config();
    TDSNet<double> net(mc, 49);
    auto ep = random_episode<double>(2, 1, 1, 16, 12);
    std::vector<double> qv(ep.query.values());

    Rng pinr(79);
    auto pv = rand_vec(pinr, 2 * 2, 0.25, 1.75);
    auto pinnoise = Tensor<double>::from_vec({2, 2}, pv);

    ForwardTrace<double> trace;
    auto query = Tensor<double>::from_vec(ep.query.shape(), qv).set_requires_grad(true);
    ep.query = query;
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        auto out = net.forward(ep, BnMode::TrainFrozen, &trace);
        tape.backward(sum(mul(out.total_scores, pinnoise)));
    }
    REQUIRE(query.has_grad());

    trace.replay = true;
    auto f = [&]() {
        trace.rewind();
        EpisodeBatch<double> e2 = ep;
        e2.query = Tensor<double>::from_vec(ep.query.shape(), qv);
        auto out = net.forward(e2, BnMode::TrainFrozen, &trace);
        return sum(mul(out.total_scores, pinnoise)).value();
    };
    // probe a deterministic subset of input coordinates
    Rng pick(13);
    double worst = 0;
    for (int s = 0; s < 32; ++s) {
        const std::size_t i = pick.uniform_index(qv.size());
        const double keep = qv[i];
        const double h = 1e-5;
        qv[i] = keep + h;
        const double fp = f();
        qv[i] = keep - h;
        const double fm = f();
        qv[i] = keep;
        const double fd = (fp - fm) / (2 * h);
        const double an = query.grad()[i];
        worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}));
    }
    CHECK(worst < 1e-3);
}
