#pragma once

// Closed-form forward noising, the diffusion training loss, and deterministic
// DDIM sampling with full trajectory retention.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "diffprompt/errors.hpp"
#include "diffprompt/rng.hpp"
#include "diffprompt/schedule.hpp"
#include "diffprompt/tensor.hpp"

namespace dp {

// z_t = sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps.
template <typename T>
TensorT<T> forward_noise(const TensorT<T>& z0, int64_t t, const TensorT<T>& eps,
                         const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T)
        throw ShapeError("forward_noise step " + std::to_string(t) + " outside [1, " +
                         std::to_string(sched.T) + "]");
    if (eps.shape != z0.shape) throw ShapeError("forward_noise eps shape mismatch");
    const double ab = sched.alpha_bar_at(t);
    const T a = static_cast<T>(std::sqrt(ab));
    const T b = static_cast<T>(std::sqrt(1.0 - ab));
    TensorT<T> out(z0.shape);
    for (int64_t i = 0; i < z0.numel(); ++i) out.at(i) = a * z0.at(i) + b * eps.at(i);
    return out;
}

// Mean squared error between predicted and true noise.
template <typename T>
double diffusion_loss(const TensorT<T>& eps_hat, const TensorT<T>& eps) {
    if (eps_hat.shape != eps.shape) throw ShapeError("diffusion_loss shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < eps.numel(); ++i) {
        const double d = static_cast<double>(eps_hat.at(i)) - static_cast<double>(eps.at(i));
        s += d * d;
    }
    return s / static_cast<double>(eps.numel());
}

// All latents along a DDIM sampling run, indexed by completed denoising steps:
// latents[0] is the initial Gaussian draw, latents[T_sample] the final latent.
struct LatentTrajectory {
    std::vector<Tensor> latents;
    uint64_t condition_digest = 0;
    uint64_t seed = 0;
    int64_t stride = 0;

    int64_t t_sample() const { return static_cast<int64_t>(latents.size()) - 1; }
    // Schedule timestep the latent at index s sits at.
    int64_t tau(int64_t s) const { return (t_sample() - s) * stride; }
};

// Noise predictor with the condition already bound: (z_t, t) -> eps_hat.
using NoisePredictFn = std::function<Tensor(const Tensor& z_t, int64_t t)>;

// Deterministic DDIM (eta = 0) over the evenly strided timestep subset
// tau_k = k * (T / T_sample), k = T_sample .. 0. Same seed and condition give
// a bit-identical trajectory. The predictor is never mutated.
inline LatentTrajectory ddim_sample(const NoisePredictFn& model, uint64_t condition_digest,
                                    const NoiseSchedule& sched, int64_t t_sample, uint64_t seed,
                                    const std::vector<int64_t>& latent_shape) {
    if (t_sample > sched.T)
        throw ConfigError("T_sample " + std::to_string(t_sample) + " exceeds T " +
                          std::to_string(sched.T));
    if (t_sample < 1 || sched.T % t_sample != 0)
        throw ConfigError("T_sample " + std::to_string(t_sample) + " must evenly divide T " +
                          std::to_string(sched.T));
    const int64_t stride = sched.T / t_sample;

    LatentTrajectory traj;
    traj.condition_digest = condition_digest;
    traj.seed = seed;
    traj.stride = stride;
    traj.latents.reserve(static_cast<size_t>(t_sample) + 1);

    Rng rng(derive_seed(seed, "ddim_init"));
    Tensor z(latent_shape);
    z.fill_normal(rng);
    traj.latents.push_back(z);

    for (int64_t s = 1; s <= t_sample; ++s) {
        const int64_t tk = (t_sample - s + 1) * stride;
        const int64_t tk_prev = (t_sample - s) * stride;
        const Tensor eps_hat = model(z, tk);
        if (eps_hat.shape != z.shape) throw ShapeError("predictor output shape mismatch");
        const double ab_k = sched.alpha_bar_at(tk);
        const double ab_p = sched.alpha_bar_at(tk_prev);
        const double sq_ab_k = std::sqrt(ab_k);
        const double sq_ab_p = std::sqrt(ab_p);
        const double sq_om_k = std::sqrt(1.0 - ab_k);
        const double sq_om_p = std::sqrt(1.0 - ab_p);
        // z <- sqrt(ab_p) * x0_hat + sqrt(1 - ab_p) * eps_hat, with
        // x0_hat = (z - sqrt(1 - ab_k) * eps_hat) / sqrt(ab_k). The update
        // runs in double: early-step gains sqrt(ab_p / ab_k) are large under
        // a capped-beta schedule and would amplify single-precision rounding.
        for (int64_t i = 0; i < z.numel(); ++i) {
            const double x0 = (static_cast<double>(z.at(i)) - sq_om_k * eps_hat.at(i)) / sq_ab_k;
            z.at(i) = static_cast<float>(sq_ab_p * x0 + sq_om_p * eps_hat.at(i));
        }
        traj.latents.push_back(z);
    }
    return traj;
}

}  // namespace dp
