#include <doctest.h>

#include <cmath>

#include "diffprompt/mask_vae.hpp"
#include "diffprompt/rng.hpp"
#include "support/grad_check.hpp"

using namespace dp;

namespace {

Tensor random_mask(uint64_t seed, int64_t size) {
    // Blocky binary pattern, roughly circular.
    Tensor m({1, size, size});
    Rng rng(seed);
    const double cx = rng.uniform(size * 0.3, size * 0.7);
    const double cy = rng.uniform(size * 0.3, size * 0.7);
    const double r = rng.uniform(size * 0.15, size * 0.3);
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            m.at(y * size + x) = dx * dx + dy * dy <= r * r ? 1.0f : 0.0f;
        }
    return m;
}

}  // namespace

TEST_CASE("encode maps 64px masks to 4x8x8 and is deterministic") {
    auto vae = make_mask_vae<float>(64, 4, 11);
    auto m = random_mask(1, 64);
    auto [mu, lv] = encode(*vae, m);
    CHECK(mu.shape == std::vector<int64_t>{4, 8, 8});
    CHECK(lv.shape == std::vector<int64_t>{4, 8, 8});
    for (auto v : mu.data) CHECK(std::isfinite(v));
    for (auto v : lv.data) CHECK(std::isfinite(v));

    auto [mu2, lv2] = encode(*vae, m);
    CHECK(mu2.data == mu.data);
    CHECK(lv2.data == lv.data);

    Tensor zeros({1, 64, 64});
    auto [mu0, lv0] = encode(*vae, zeros);
    for (auto v : mu0.data) CHECK(std::isfinite(v));
    for (auto v : lv0.data) CHECK(std::isfinite(v));

    Tensor bad({1, 32, 32});
    CHECK_THROWS_AS(encode(*vae, bad), ShapeError);
}

TEST_CASE("decode output lies strictly inside (0,1) with latent-shaped input") {
    auto vae = make_mask_vae<float>(64, 4, 12);
    Tensor z({4, 8, 8});
    auto out = decode(*vae, z);
    CHECK(out.shape == std::vector<int64_t>{1, 64, 64});
    for (auto v : out.data) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    Rng rng(3);
    z.fill_normal(rng);
    out = decode(*vae, z);
    for (auto v : out.data) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    Tensor bad({4, 4, 4});
    CHECK_THROWS_AS(decode(*vae, bad), ShapeError);
}

TEST_CASE("reparam_sample is seed-deterministic and collapses with tiny variance") {
    Tensor mu({4, 8, 8});
    Rng rng(4);
    mu.fill_normal(rng);
    Tensor lv({4, 8, 8});
    lv.fill(-40.0f);

    auto z1 = reparam_sample(mu, lv, 9);
    auto z2 = reparam_sample(mu, lv, 9);
    CHECK(z1.data == z2.data);
    for (int64_t i = 0; i < mu.numel(); ++i)
        CHECK(std::abs(z1.at(i) - mu.at(i)) <= 1e-8f);

    lv.fill(0.0f);
    auto z3 = reparam_sample(mu, lv, 10);
    CHECK(z3.data != z1.data);

    Tensor wrong({4, 4, 4});
    CHECK_THROWS_AS(reparam_sample(mu, wrong, 1), ShapeError);
}

TEST_CASE("reparam_sample mean converges to mu") {
    // sigma = 1, 1e4 draws: sample mean within 3 sigma / 100 of mu.
    TensorT<double> mu({1, 1, 4}, {0.5, -1.25, 2.0, 0.0});
    TensorT<double> lv({1, 1, 4});
    std::vector<double> acc(4, 0.0);
    const int64_t n = 10000;
    for (int64_t s = 0; s < n; ++s) {
        auto z = reparam_sample(mu, lv, static_cast<uint64_t>(s));
        for (int64_t i = 0; i < 4; ++i) acc[static_cast<size_t>(i)] += z.at(i);
    }
    for (int64_t i = 0; i < 4; ++i)
        CHECK(std::abs(acc[static_cast<size_t>(i)] / n - mu.at(i)) <= 3.0 / 100.0);
}

TEST_CASE("vae_loss hand cases") {
    Tensor m({1, 4, 4});
    m.fill(0.5f);
    Tensor mu({4, 1, 1});
    Tensor lv({4, 1, 1});

    // Perfect reconstruction, standard-normal posterior: exactly zero.
    CHECK(vae_loss(m, m, mu, lv, 0.0003) == doctest::Approx(0.0).epsilon(1e-12));

    // mu = 1, lv = 0: KL = 0.5 per element.
    mu.fill(1.0f);
    CHECK(kl_divergence(mu, lv) == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(vae_loss(m, m, mu, lv, 2.0) == doctest::Approx(1.0).epsilon(1e-6));

    // Reconstruction term is the plain MSE.
    Tensor mt = m;
    for (auto& v : mt.data) v += 0.25f;
    mu.fill(0.0f);
    CHECK(vae_loss(m, mt, mu, lv, 0.0) == doctest::Approx(0.0625).epsilon(1e-6));

    CHECK_THROWS_AS(vae_loss(m, m, mu, lv, -0.1), ConfigError);
}

TEST_CASE("KL is non-negative and matches a Monte-Carlo estimate") {
    Rng outer(77);
    for (int pair = 0; pair < 20; ++pair) {
        TensorT<double> mu({2, 2, 2});
        TensorT<double> lv({2, 2, 2});
        for (auto& v : mu.data) v = outer.uniform(-1.5, 1.5);
        for (auto& v : lv.data) v = outer.uniform(-1.5, 1.0);

        const double analytic = kl_divergence(mu, lv);
        CHECK(analytic >= 0.0);

        // E_q[log q(z) - log p(z)] averaged per element, 1e5 draws.
        Rng rng(1000 + static_cast<uint64_t>(pair));
        const int64_t draws = 100000;
        double acc = 0.0;
        for (int64_t d = 0; d < draws; ++d) {
            for (int64_t i = 0; i < mu.numel(); ++i) {
                const double s = std::exp(0.5 * lv.at(i));
                const double z = mu.at(i) + s * rng.normal();
                const double zq = (z - mu.at(i)) / s;
                acc += -0.5 * lv.at(i) - 0.5 * zq * zq + 0.5 * z * z;
            }
        }
        const double mc = acc / static_cast<double>(draws * mu.numel());
        // Within 2% relative (plus a small absolute floor for near-zero KL).
        CHECK(std::abs(mc - analytic) <= 0.02 * std::max(analytic, 0.05));
    }
}

TEST_CASE("graph loss equals the tensor-level loss") {
    auto vae = make_mask_vae<float>(64, 4, 21);
    auto m = random_mask(5, 64);
    Tensor eps({4, 8, 8});
    Rng rng(6);
    eps.fill_normal(rng);

    TapeT<float> tape(false);
    const double graph = vae_loss_graph(tape, *vae, m, eps, 0.0003).val().at(0);

    auto [mu, lv] = encode(*vae, m);
    Tensor z(mu.shape);
    for (int64_t i = 0; i < z.numel(); ++i)
        z.at(i) = mu.at(i) + std::exp(0.5f * lv.at(i)) * eps.at(i);
    auto mt = decode(*vae, z);
    const double direct = vae_loss(m, mt, mu, lv, 0.0003);
    CHECK(graph == doctest::Approx(direct).epsilon(1e-5));
}

TEST_CASE("frozen vae builds no tape and receives no gradient") {
    auto vae = make_mask_vae<float>(64, 4, 22);
    vae->params.set_trainable(false);
    auto m = random_mask(7, 64);
    Tensor eps({4, 8, 8});
    TapeT<float> tape;
    auto loss = vae_loss_graph(tape, *vae, m, eps, 0.0003);
    CHECK(!loss.requires_grad());
    CHECK(tape.size() == 0);
}

TEST_CASE("tiny vae gradient check in double precision") {
    Rng rng(31);
    MaskVaeT<double> vae(16, 4, {6, 8}, 4, rng);
    auto m64 = random_mask(8, 16);
    TensorT<double> m({1, 16, 16});
    for (int64_t i = 0; i < m.numel(); ++i)
        m.at(i) = 0.1 + 0.8 * static_cast<double>(m64.at(i));
    TensorT<double> eps({4, 4, 4});
    Rng erng(9);
    eps.fill_normal(erng);

    auto res = dp::testing::check_gradients(
        vae.params,
        [&](TapeT<double>& tape) { return vae_loss_graph(tape, vae, m, eps, 0.1); });
    CAPTURE(res.worst);
    CHECK(res.checked == vae.params.count_params());
    CHECK(res.max_rel_err <= 1e-3);
}
