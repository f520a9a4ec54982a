#include <doctest.h>

#include <cmath>

#include "diffprompt/diffusion.hpp"

using namespace dp;

TEST_CASE("forward_noise closed form vs an iterative noising chain") {
    auto sched = build_cosine_schedule(100);
    Rng rng(777);
    const int64_t t = 10;
    TensorT<double> z0({4, 8, 8});
    z0.fill_normal(rng);

    std::vector<TensorT<double>> eps_chain;
    for (int64_t k = 0; k < t; ++k) {
        TensorT<double> e({4, 8, 8});
        e.fill_normal(rng);
        eps_chain.push_back(e);
    }

    // Single-step recurrence z_k = sqrt(1 - beta_k) z_{k-1} + sqrt(beta_k) e_k.
    TensorT<double> z = z0;
    for (int64_t k = 1; k <= t; ++k) {
        const double beta = sched.beta[static_cast<size_t>(k - 1)];
        for (int64_t i = 0; i < z.numel(); ++i)
            z.at(i) = std::sqrt(1.0 - beta) * z.at(i) +
                      std::sqrt(beta) * eps_chain[static_cast<size_t>(k - 1)].at(i);
    }

    // The chain noises collapse into one effective epsilon.
    const double ab_t = sched.alpha_bar_at(t);
    TensorT<double> eps_eff({4, 8, 8});
    for (int64_t k = 1; k <= t; ++k) {
        const double c = std::sqrt(ab_t / sched.alpha_bar_at(k)) *
                         std::sqrt(sched.beta[static_cast<size_t>(k - 1)]) /
                         std::sqrt(1.0 - ab_t);
        for (int64_t i = 0; i < eps_eff.numel(); ++i)
            eps_eff.at(i) += c * eps_chain[static_cast<size_t>(k - 1)].at(i);
    }

    auto closed = forward_noise(z0, t, eps_eff, sched);
    double max_diff = 0;
    for (int64_t i = 0; i < z.numel(); ++i)
        max_diff = std::max(max_diff, std::abs(closed.at(i) - z.at(i)));
    CHECK(max_diff <= 1e-5);
}

TEST_CASE("forward_noise zero-noise and near-identity limits") {
    auto sched = build_cosine_schedule(100);
    TensorT<double> z0({2, 3});
    z0.data = {1, -2, 3, -4, 5, -6};
    TensorT<double> zero({2, 3});

    auto z1 = forward_noise(z0, 10, zero, sched);
    const double a = std::sqrt(sched.alpha_bar_at(10));
    for (int64_t i = 0; i < z0.numel(); ++i) CHECK(z1.at(i) == doctest::Approx(a * z0.at(i)));

    auto z_early = forward_noise(z0, 1, zero, sched);
    for (int64_t i = 0; i < z0.numel(); ++i)
        CHECK(z_early.at(i) == doctest::Approx(z0.at(i)).epsilon(1e-3));
}

TEST_CASE("z_T statistics match a standard normal for unit-scale z0") {
    auto sched = build_cosine_schedule(100);
    Rng rng(31337);
    const int64_t n = 100000;
    TensorT<double> z0({n}), eps({n});
    z0.fill_normal(rng);
    eps.fill_normal(rng);
    auto zt = forward_noise(z0, 100, eps, sched);
    double mean = 0;
    for (int64_t i = 0; i < n; ++i) mean += zt.at(i);
    mean /= static_cast<double>(n);
    double var = 0;
    for (int64_t i = 0; i < n; ++i) var += (zt.at(i) - mean) * (zt.at(i) - mean);
    var /= static_cast<double>(n);
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.1);
}

TEST_CASE("forward_noise rejects bad steps and shapes") {
    auto sched = build_cosine_schedule(100);
    TensorT<double> z0({2, 2}), eps({2, 2}), wrong({2, 3});
    CHECK_THROWS_AS(forward_noise(z0, 0, eps, sched), ShapeError);
    CHECK_THROWS_AS(forward_noise(z0, 101, eps, sched), ShapeError);
    CHECK_THROWS_AS(forward_noise(z0, 5, wrong, sched), ShapeError);
}

TEST_CASE("diffusion_loss equals an element-wise hand sum") {
    Rng rng(99);
    TensorT<double> a({3, 7}), b({3, 7});
    a.fill_normal(rng);
    b.fill_normal(rng);
    double expect = 0;
    for (int64_t i = 0; i < a.numel(); ++i) expect += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
    expect /= static_cast<double>(a.numel());
    CHECK(diffusion_loss(a, b) == doctest::Approx(expect).epsilon(1e-7));
    CHECK(diffusion_loss(a, a) == 0.0);

    TensorT<double> c = a;
    for (auto& v : c.data) v += 1.0;
    CHECK(diffusion_loss(c, a) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ddim_sample is deterministic and retains T_sample + 1 latents") {
    auto sched = build_cosine_schedule(100);
    NoisePredictFn model = [](const Tensor& z, int64_t) {
        Tensor out(z.shape);
        for (int64_t i = 0; i < z.numel(); ++i) out.at(i) = 0.1f * z.at(i);
        return out;
    };
    auto t1 = ddim_sample(model, 42, sched, 25, 9001, {4, 8, 8});
    auto t2 = ddim_sample(model, 42, sched, 25, 9001, {4, 8, 8});
    REQUIRE(t1.latents.size() == 26);
    CHECK(t1.t_sample() == 25);
    for (size_t s = 0; s < t1.latents.size(); ++s)
        for (int64_t i = 0; i < t1.latents[s].numel(); ++i)
            CHECK(t1.latents[s].at(i) == t2.latents[s].at(i));

    auto t3 = ddim_sample(model, 42, sched, 25, 9002, {4, 8, 8});
    double diff = 0;
    for (int64_t i = 0; i < t3.latents[0].numel(); ++i)
        diff += std::abs(t3.latents[0].at(i) - t1.latents[0].at(i));
    CHECK(diff > 0);
}

TEST_CASE("retained timesteps follow the stride rule") {
    auto sched = build_cosine_schedule(100);
    NoisePredictFn zero = [](const Tensor& z, int64_t) { return Tensor(z.shape); };
    auto traj = ddim_sample(zero, 0, sched, 25, 5, {1, 2, 2});
    CHECK(traj.stride == 4);
    for (int64_t s = 0; s <= 25; ++s) CHECK(traj.tau(s) == 100 - 4 * s);
    CHECK(traj.tau(0) == 100);
    CHECK(traj.tau(1) == 96);
    CHECK(traj.tau(25) == 0);
}

TEST_CASE("zero predictor gives the closed-form rescaling of the initial draw") {
    auto sched = build_cosine_schedule(100);
    NoisePredictFn zero = [](const Tensor& z, int64_t) { return Tensor(z.shape); };
    auto traj = ddim_sample(zero, 0, sched, 25, 12345, {4, 4, 4});
    const Tensor& init = traj.latents[0];
    for (int64_t s = 0; s <= 25; ++s) {
        const double factor =
            std::sqrt(sched.alpha_bar_at(traj.tau(s)) / sched.alpha_bar_at(100));
        for (int64_t i = 0; i < init.numel(); ++i)
            CHECK(traj.latents[static_cast<size_t>(s)].at(i) ==
                  doctest::Approx(factor * init.at(i)).epsilon(2e-4));
    }
    // Final latent is the initial draw rescaled by 1/sqrt(alpha_bar_T).
    const double final_factor = 1.0 / std::sqrt(sched.alpha_bar_at(100));
    for (int64_t i = 0; i < init.numel(); ++i)
        CHECK(traj.latents[25].at(i) ==
              doctest::Approx(final_factor * init.at(i)).epsilon(2e-4));
}

TEST_CASE("no-skip DDIM agrees with a hand-rolled per-step update") {
    auto sched = build_cosine_schedule(100);
    NoisePredictFn model = [](const Tensor& z, int64_t t) {
        Tensor out(z.shape);
        const float c = 0.05f + 0.001f * static_cast<float>(t);
        for (int64_t i = 0; i < z.numel(); ++i) out.at(i) = c * z.at(i);
        return out;
    };
    auto traj = ddim_sample(model, 7, sched, 100, 2024, {4, 4, 4});
    REQUIRE(traj.latents.size() == 101);

    // Independent loop over every schedule step.
    Tensor z = traj.latents[0];
    for (int64_t t = 100; t >= 1; --t) {
        Tensor eps = model(z, t);
        const double ab_k = sched.alpha_bar_at(t);
        const double ab_p = sched.alpha_bar_at(t - 1);
        for (int64_t i = 0; i < z.numel(); ++i) {
            const double x0 =
                (static_cast<double>(z.at(i)) - std::sqrt(1.0 - ab_k) * eps.at(i)) /
                std::sqrt(ab_k);
            z.at(i) = static_cast<float>(std::sqrt(ab_p) * x0 +
                                         std::sqrt(1.0 - ab_p) * eps.at(i));
        }
    }
    double max_diff = 0;
    for (int64_t i = 0; i < z.numel(); ++i)
        max_diff = std::max(max_diff,
                            std::abs(static_cast<double>(z.at(i)) - traj.latents[100].at(i)));
    CHECK(max_diff <= 1e-4);
}

TEST_CASE("ddim_sample rejects bad subsampling") {
    auto sched = build_cosine_schedule(100);
    NoisePredictFn zero = [](const Tensor& z, int64_t) { return Tensor(z.shape); };
    CHECK_THROWS_AS(ddim_sample(zero, 0, sched, 101, 1, {1, 1, 1}), ConfigError);
    CHECK_THROWS_AS(ddim_sample(zero, 0, sched, 33, 1, {1, 1, 1}), ConfigError);
}
