#pragma once

// Diffusion transformer predicting latent noise with in-context conditioning:
// latent patch tokens are concatenated with projected frozen-grounder visual
// and textual embeddings (each shifted by the timestep embedding), and only
// the patch-token outputs feed the unpatch head.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "diffprompt/autograd.hpp"
#include "diffprompt/config.hpp"
#include "diffprompt/diffusion.hpp"
#include "diffprompt/errors.hpp"
#include "diffprompt/grounder.hpp"
#include "diffprompt/mask_vae.hpp"
#include "diffprompt/nn.hpp"
#include "diffprompt/schedule.hpp"

namespace dp {

// Sin block then cos block, (1, dim), computed in double.
template <typename T>
TensorT<T> sinusoidal_embedding(int64_t t, int64_t dim) {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("timestep embedding dim must be even");
    TensorT<T> e({1, dim});
    const int64_t half = dim / 2;
    for (int64_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                     static_cast<double>(half));
        e.at(i) = static_cast<T>(std::sin(static_cast<double>(t) * freq));
        e.at(half + i) = static_cast<T>(std::cos(static_cast<double>(t) * freq));
    }
    return e;
}

// Frozen-grounder activations for one sample. Cacheable: they depend only on
// the grounder weights and the raw inputs, never on t or the DiT.
template <typename T>
struct GrounderEmbedT {
    TensorT<T> vis;              // (n_vis_tokens, grounder_width)
    TensorT<T> txt;              // (caption_len, grounder_width)
    std::vector<int> txt_valid;  // 1 where caption token is not PAD
};

using GrounderEmbed = GrounderEmbedT<float>;

template <typename T>
GrounderEmbedT<T> grounder_embed(GrounderT<T>& grounder, const Tensor& image,
                                 const std::vector<uint16_t>& caption) {
    if (!grounder.params.frozen())
        throw DependencyError("condition embeddings require a frozen grounder");
    TapeT<T> tape(false);
    auto f = grounder.encode_with_prompts(tape, image, caption, PromptSetT<T>{});
    return {f.vis.val(), f.txt.val(), std::move(f.txt_valid)};
}

// Condition token stream, order [visual, textual], all rows at DiT width with
// the timestep embedding already added. Carries no positional information;
// predict_noise adds slot positions.
template <typename T>
struct ConditionT {
    ValueT<T> tokens;
    std::vector<int> txt_valid;
    int64_t n_vis = 0;
    int64_t t = 0;
};

using Condition = ConditionT<float>;

template <typename T>
struct DitT : NoCopyMove {
    int64_t latent_channels, latent_side, patch, width, n_blocks, heads, time_dim;
    int64_t cond_width;  // grounder feature width
    int64_t n_vis_tokens, caption_len;

    ParamSetT<T> params;
    std::unique_ptr<LinearT<T>> patch_embed;
    ParamT<T> pos;  // one learned position per slot of [patches, vis, txt]
    std::unique_ptr<LinearT<T>> emb_v, emb_q;
    std::unique_ptr<LinearT<T>> t_mlp1, t_mlp2;
    std::vector<std::unique_ptr<TransformerLayerT<T>>> blocks;
    std::unique_ptr<LinearT<T>> head;

    DitT(const RunConfig& cfg, Rng& rng)
        : latent_channels(cfg.latent_channels),
          latent_side(cfg.scene.image_size >> 3),
          patch(cfg.dit_patch),
          width(cfg.dit_width),
          n_blocks(cfg.dit_blocks),
          heads(cfg.dit_heads),
          time_dim(cfg.dit_time_dim),
          cond_width(cfg.grounder_width),
          n_vis_tokens((cfg.scene.image_size / cfg.grounder_patch) *
                       (cfg.scene.image_size / cfg.grounder_patch)),
          caption_len(cfg.scene.caption_len) {
        if (latent_side % patch != 0) throw ConfigError("dit patch must divide latent side");
        patch_embed = std::make_unique<LinearT<T>>(params, "dit.patch",
                                                   latent_channels * patch * patch, width, rng);
        pos.name = "dit.pos";
        pos.init_shape({seq_len(), width});
        init_normal(pos.value, 0.02, rng);
        params.add(&pos);
        emb_v = std::make_unique<LinearT<T>>(params, "dit.emb_v", cond_width, width, rng);
        emb_q = std::make_unique<LinearT<T>>(params, "dit.emb_q", cond_width, width, rng);
        t_mlp1 = std::make_unique<LinearT<T>>(params, "dit.tmlp1", time_dim, width, rng);
        t_mlp2 = std::make_unique<LinearT<T>>(params, "dit.tmlp2", width, width, rng);
        for (int64_t i = 0; i < n_blocks; ++i)
            blocks.push_back(std::make_unique<TransformerLayerT<T>>(
                params, "dit.block" + std::to_string(i), width, heads, 4 * width, rng));
        head = std::make_unique<LinearT<T>>(params, "dit.head", width,
                                            latent_channels * patch * patch, rng);
    }

    int64_t grid() const { return latent_side / patch; }
    int64_t n_patches() const { return grid() * grid(); }
    int64_t n_cond() const { return n_vis_tokens + caption_len; }
    int64_t seq_len() const { return n_patches() + n_cond(); }
    std::vector<int64_t> latent_shape() const {
        return {latent_channels, latent_side, latent_side};
    }

    // Projects cached grounder activations to model width and adds the MLP'd
    // sinusoidal embedding of t to every token.
    ConditionT<T> build_condition(TapeT<T>& tape, const GrounderEmbedT<T>& emb, int64_t t,
                                  const NoiseSchedule& sched) {
        if (t < 1 || t > sched.T)
            throw ConfigError("condition timestep " + std::to_string(t) + " outside [1, " +
                              std::to_string(sched.T) + "]");
        if (emb.vis.shape != std::vector<int64_t>{n_vis_tokens, cond_width} ||
            emb.txt.shape != std::vector<int64_t>{caption_len, cond_width})
            throw ShapeError("condition embedding shapes");
        auto t_emb = t_mlp2->forward(
            tape, gelu(t_mlp1->forward(tape, tape.leaf(sinusoidal_embedding<T>(t, time_dim)))));
        auto v = add_rowvec(emb_v->forward(tape, tape.leaf(emb.vis)), t_emb);
        auto q = add_rowvec(emb_q->forward(tape, tape.leaf(emb.txt)), t_emb);
        ConditionT<T> c;
        c.tokens = concat_rows<T>({v, q});
        c.txt_valid = emb.txt_valid;
        c.n_vis = n_vis_tokens;
        c.t = t;
        return c;
    }

    ConditionT<T> build_condition(TapeT<T>& tape, GrounderT<T>& grounder, const Tensor& image,
                                  const std::vector<uint16_t>& caption, int64_t t,
                                  const NoiseSchedule& sched) {
        return build_condition(tape, grounder_embed(grounder, image, caption), t, sched);
    }

    // Additive key mask over the full sequence: PAD caption keys only.
    TensorT<T> key_mask(const ConditionT<T>& cond) const {
        const int64_t n = seq_len();
        const int64_t txt0 = n_patches() + cond.n_vis;
        TensorT<T> m({n, n});
        for (int64_t k = 0; k < caption_len; ++k) {
            if (cond.txt_valid[static_cast<size_t>(k)]) continue;
            for (int64_t q = 0; q < n; ++q) m.at(q * n + txt0 + k) = T(-1e4);
        }
        return m;
    }

    ValueT<T> predict_noise_graph(TapeT<T>& tape, const ValueT<T>& z_t,
                                  const ConditionT<T>& cond) {
        if (z_t.val().shape != latent_shape())
            throw ShapeError("predict_noise latent shape " + shape_str(z_t.val().shape));
        if (cond.tokens.rows() != n_cond() || cond.tokens.cols() != width)
            throw ShapeError("predict_noise condition shape");
        auto x = add(concat_rows<T>({patch_embed->forward(tape, patchify(z_t, patch)),
                                     cond.tokens}),
                     tape.param(pos));
        const auto mask = key_mask(cond);
        for (auto& b : blocks) x = b->forward(tape, x, &mask);
        auto out = head->forward(tape, slice_rows(x, 0, n_patches()));
        return unpatchify(out, latent_channels, latent_side, latent_side, patch);
    }
};

using Dit = DitT<float>;

// Frozen-model single prediction from cached grounder activations.
template <typename T>
TensorT<T> predict_noise(DitT<T>& model, const TensorT<T>& z_t, const GrounderEmbedT<T>& emb,
                         int64_t t, const NoiseSchedule& sched) {
    TapeT<T> tape(false);
    auto cond = model.build_condition(tape, emb, t, sched);
    return model.predict_noise_graph(tape, tape.leaf(z_t), cond).val();
}

// One optimizer step of the stage-2 objective on a batch: per sample, draw
// t ~ U[1, T], noise the (scaled) encoded mask latent, and regress the noise.
// Returns the batch-mean loss. Latents come from the reparameterized sample
// when use_sampled_z, else the posterior mean.
template <typename T>
double generator_train_step(DitT<T>& model, MaskVaeT<T>& vae, GrounderT<T>& grounder,
                            const std::vector<Sample>& batch,
                            const std::vector<GrounderEmbedT<T>>& embeds,
                            const NoiseSchedule& sched, AdamWT<T>& opt, Rng& rng,
                            double latent_scale = 1.0, bool use_sampled_z = true) {
    if (!vae.params.frozen() || !grounder.params.frozen())
        throw DependencyError("generator training requires frozen mask_vae and grounder");
    if (batch.empty()) throw ConfigError("generator_train_step on empty batch");
    if (embeds.size() != batch.size())
        throw ShapeError("one grounder embedding per batch sample required");

    TapeT<T> tape;
    ValueT<T> total;
    for (size_t i = 0; i < batch.size(); ++i) {
        auto [mu, lv] = encode(vae, batch[i].mask.template cast<T>());
        TensorT<T> z0 =
            use_sampled_z
                ? reparam_sample(mu, lv, derive_seed(rng.next_u64(), "stage2_z"))
                : mu;
        for (int64_t j = 0; j < z0.numel(); ++j)
            z0.at(j) = static_cast<T>(static_cast<double>(z0.at(j)) * latent_scale);

        const int64_t t = 1 + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(sched.T)));
        TensorT<T> eps(z0.shape);
        eps.fill_normal(rng);
        auto z_t = forward_noise(z0, t, eps, sched);

        auto cond = model.build_condition(tape, embeds[i], t, sched);
        auto eps_hat = model.predict_noise_graph(tape, tape.leaf(std::move(z_t)), cond);
        auto li = mse_loss(eps_hat, eps);
        total = i == 0 ? li : add(total, li);
    }
    total = scale(total, T(1) / static_cast<T>(batch.size()));
    tape.backward(total);
    opt.step();
    model.params.zero_grad();
    return static_cast<double>(total.val().at(0));
}

// Provenance digest over the condition inputs, recorded in trajectories.
inline uint64_t embed_digest(const GrounderEmbed& emb) {
    auto bytes = [](const Tensor& t) {
        return std::string_view(reinterpret_cast<const char*>(t.data.data()),
                                t.data.size() * sizeof(float));
    };
    uint64_t d = fnv1a(bytes(emb.vis));
    d = mix_seed(d, fnv1a(bytes(emb.txt)));
    for (int v : emb.txt_valid) d = mix_seed(d, static_cast<uint64_t>(v));
    return d;
}

// DDIM trajectory from the generator with the condition bound. Latents are in
// the (scaled) diffusion space the generator was trained in.
inline LatentTrajectory sample_trajectory(Dit& gen, const GrounderEmbed& emb,
                                          const NoiseSchedule& sched, int64_t t_sample,
                                          uint64_t seed) {
    NoisePredictFn fn = [&gen, &emb, &sched](const Tensor& z, int64_t t) {
        return predict_noise(gen, z, emb, t, sched);
    };
    return ddim_sample(fn, embed_digest(emb), sched, t_sample, seed, gen.latent_shape());
}

// Spec-shaped convenience: computes the per-sample grounder embeddings inline.
template <typename T>
double generator_train_step(DitT<T>& model, MaskVaeT<T>& vae, GrounderT<T>& grounder,
                            const std::vector<Sample>& batch, const NoiseSchedule& sched,
                            AdamWT<T>& opt, Rng& rng, double latent_scale = 1.0,
                            bool use_sampled_z = true) {
    std::vector<GrounderEmbedT<T>> embeds;
    embeds.reserve(batch.size());
    for (const auto& s : batch) embeds.push_back(grounder_embed(grounder, s.image, s.caption));
    return generator_train_step(model, vae, grounder, batch, embeds, sched, opt, rng,
                                latent_scale, use_sampled_z);
}

}  // namespace dp
