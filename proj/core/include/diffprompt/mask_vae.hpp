#pragma once

// Convolutional VAE compressing a 1-channel mask into a 4-channel latent, one
// halving per encoder block (three blocks = the 8x contract). The encoder
// predicts mean and log-variance; the decoder ends in a sigmoid. Templated on
// the scalar so gradient checks run the same code in double.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "diffprompt/autograd.hpp"
#include "diffprompt/errors.hpp"
#include "diffprompt/nn.hpp"
#include "diffprompt/rng.hpp"

namespace dp {

template <typename T>
struct MaskVaeT : NoCopyMove {
    int64_t image_size;
    int64_t latent_channels;
    std::vector<int64_t> enc_channels;  // one entry per stride-2 block
    int64_t stem;                       // decoder channel count at full resolution

    ParamSetT<T> params;
    std::vector<std::unique_ptr<Conv2dT<T>>> enc_blocks;
    std::unique_ptr<Conv2dT<T>> mu_head, lv_head;  // 1x1
    std::unique_ptr<Conv2dT<T>> dec_in;            // 1x1, latent -> enc_channels.back()
    std::vector<std::unique_ptr<Conv2dT<T>>> dec_blocks;  // each followed by 2x upsample
    std::unique_ptr<Conv2dT<T>> dec_out;           // stem -> 1

    MaskVaeT(int64_t image_size_, int64_t latent_channels_, std::vector<int64_t> enc_channels_,
             int64_t stem_, Rng& rng)
        : image_size(image_size_),
          latent_channels(latent_channels_),
          enc_channels(std::move(enc_channels_)),
          stem(stem_) {
        if (enc_channels.empty()) throw ConfigError("mask vae needs at least one encoder block");
        const int64_t factor = int64_t{1} << enc_channels.size();
        if (image_size % factor != 0)
            throw ConfigError("image size not divisible by vae downsample factor");
        int64_t cin = 1;
        for (size_t i = 0; i < enc_channels.size(); ++i) {
            enc_blocks.push_back(std::make_unique<Conv2dT<T>>(
                params, "vae.enc" + std::to_string(i), cin, enc_channels[i], 3, 2, 1, rng));
            cin = enc_channels[i];
        }
        mu_head = std::make_unique<Conv2dT<T>>(params, "vae.mu", cin, latent_channels, 1, 1, 0,
                                               rng);
        lv_head = std::make_unique<Conv2dT<T>>(params, "vae.lv", cin, latent_channels, 1, 1, 0,
                                               rng);
        // Start the posterior near deterministic (std ~ e^-3): at unit variance the
        // reparameterization noise swamps mu and the decoder settles on the
        // mean-mask plateau before it ever learns to read the latent.
        lv_head->b.value.fill(T(-6));
        dec_in = std::make_unique<Conv2dT<T>>(params, "vae.dec_in", latent_channels, cin, 1, 1, 0,
                                              rng);
        std::vector<int64_t> chain(enc_channels.rbegin(), enc_channels.rend());
        chain.push_back(stem);
        for (size_t i = 0; i + 1 < chain.size(); ++i)
            dec_blocks.push_back(std::make_unique<Conv2dT<T>>(
                params, "vae.dec" + std::to_string(i), chain[i], chain[i + 1], 3, 1, 1, rng));
        dec_out = std::make_unique<Conv2dT<T>>(params, "vae.dec_out", stem, 1, 3, 1, 1, rng);
    }

    int64_t latent_side() const {
        return image_size >> static_cast<int64_t>(enc_channels.size());
    }
    std::vector<int64_t> latent_shape() const {
        return {latent_channels, latent_side(), latent_side()};
    }

    void check_mask_shape(const std::vector<int64_t>& s) const {
        if (s != std::vector<int64_t>{1, image_size, image_size})
            throw ShapeError("mask shape " + shape_str(s) + ", expected {1," +
                             std::to_string(image_size) + "," + std::to_string(image_size) + "}");
    }
    void check_latent_shape(const std::vector<int64_t>& s) const {
        if (s != latent_shape())
            throw ShapeError("latent shape " + shape_str(s) + ", expected " +
                             shape_str(latent_shape()));
    }

    // Graph builders, usable under a grad-enabled tape (training, gradient
    // checks) or a grad-disabled one (frozen inference).
    std::pair<ValueT<T>, ValueT<T>> encode_graph(TapeT<T>& tape, const ValueT<T>& m) {
        check_mask_shape(m.val().shape);
        ValueT<T> h = m;
        for (auto& blk : enc_blocks) h = gelu(blk->forward(tape, h));
        return {mu_head->forward(tape, h), lv_head->forward(tape, h)};
    }

    ValueT<T> decode_graph(TapeT<T>& tape, const ValueT<T>& z) {
        check_latent_shape(z.val().shape);
        ValueT<T> h = gelu(dec_in->forward(tape, z));
        for (auto& blk : dec_blocks) h = upsample_nearest2(gelu(blk->forward(tape, h)));
        return sigmoid(dec_out->forward(tape, h));
    }
};

using MaskVae = MaskVaeT<float>;

// Default desk-scale architecture (64 -> 8 per side, ~190k parameters).
template <typename T>
std::unique_ptr<MaskVaeT<T>> make_mask_vae(int64_t image_size, int64_t latent_channels,
                                           uint64_t seed) {
    Rng rng(seed);
    return std::make_unique<MaskVaeT<T>>(image_size, latent_channels,
                                         std::vector<int64_t>{32, 64, 128}, 8, rng);
}

// ---------------------------------------------------------------------------
// Frozen-model tensor interface.
// ---------------------------------------------------------------------------

template <typename T>
std::pair<TensorT<T>, TensorT<T>> encode(MaskVaeT<T>& vae, const TensorT<T>& m) {
    TapeT<T> tape(/*grad_enabled=*/false);
    auto [mu, lv] = vae.encode_graph(tape, tape.leaf(m));
    return {mu.val(), lv.val()};
}

template <typename T>
TensorT<T> decode(MaskVaeT<T>& vae, const TensorT<T>& z) {
    TapeT<T> tape(/*grad_enabled=*/false);
    return vae.decode_graph(tape, tape.leaf(z)).val();
}

// z = mu + exp(0.5 * log_var) * eps with seeded standard-normal eps.
template <typename T>
TensorT<T> reparam_sample(const TensorT<T>& mu, const TensorT<T>& log_var, uint64_t seed) {
    if (mu.shape != log_var.shape) throw ShapeError("reparam_sample shape mismatch");
    Rng rng(derive_seed(seed, "reparam"));
    TensorT<T> z(mu.shape);
    for (int64_t i = 0; i < mu.numel(); ++i)
        z.at(i) = mu.at(i) +
                  std::exp(T(0.5) * log_var.at(i)) * static_cast<T>(rng.normal());
    return z;
}

// 0.5 * mean(mu^2 + exp(log_var) - 1 - log_var), the KL to a standard normal.
template <typename T>
double kl_divergence(const TensorT<T>& mu, const TensorT<T>& log_var) {
    if (mu.shape != log_var.shape) throw ShapeError("kl_divergence shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < mu.numel(); ++i) {
        const double m = static_cast<double>(mu.at(i));
        const double lv = static_cast<double>(log_var.at(i));
        s += m * m + std::exp(lv) - 1.0 - lv;
    }
    return 0.5 * s / static_cast<double>(mu.numel());
}

// Eq. 3: mean squared reconstruction error plus lambda-weighted analytic KL.
template <typename T>
double vae_loss(const TensorT<T>& m, const TensorT<T>& m_tilde, const TensorT<T>& mu,
                const TensorT<T>& log_var, double lambda) {
    if (lambda < 0) throw ConfigError("vae lambda must be non-negative");
    if (m.shape != m_tilde.shape) throw ShapeError("vae_loss mask shape mismatch");
    double recon = 0.0;
    for (int64_t i = 0; i < m.numel(); ++i) {
        const double d = static_cast<double>(m.at(i)) - static_cast<double>(m_tilde.at(i));
        recon += d * d;
    }
    recon /= static_cast<double>(m.numel());
    return recon + lambda * kl_divergence(mu, log_var);
}

// Tape version of the full objective: encode, reparameterize with the given
// constant noise, decode, and combine reconstruction with KL.
template <typename T>
ValueT<T> vae_loss_graph(TapeT<T>& tape, MaskVaeT<T>& vae, const TensorT<T>& m,
                         const TensorT<T>& eps, double lambda) {
    if (lambda < 0) throw ConfigError("vae lambda must be non-negative");
    auto [mu, lv] = vae.encode_graph(tape, tape.leaf(m));
    if (eps.shape != mu.val().shape) throw ShapeError("vae_loss_graph eps shape mismatch");
    auto z = add(mu, mul(exp_op(scale(lv, T(0.5))), tape.leaf(eps)));
    auto m_tilde = vae.decode_graph(tape, z);
    auto recon = mse_loss(m_tilde, m);
    // mean(mu^2 + exp(lv) - (lv + 1)) * 0.5
    auto kl = scale(mean_all(sub(add(mul(mu, mu), exp_op(lv)), add_scalar(lv, T(1)))), T(0.5));
    return add(recon, scale(kl, static_cast<T>(lambda)));
}

}  // namespace dp
