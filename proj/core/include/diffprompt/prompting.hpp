#pragma once

// Stage-3 prompt machinery: per-layer trajectory step selection, saliency
// decoding through the frozen mask VAE, modality adapters mapping saliency to
// input-specific prompt tokens, and the learnable global-prompt store. The
// adapters and global prompts are the only trainable stage-3 parameters.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <memory>
#include <string>
#include <vector>

#include "diffprompt/autograd.hpp"
#include "diffprompt/config.hpp"
#include "diffprompt/diffusion.hpp"
#include "diffprompt/dit.hpp"
#include "diffprompt/errors.hpp"
#include "diffprompt/grounder.hpp"
#include "diffprompt/mask_vae.hpp"
#include "diffprompt/nn.hpp"

namespace dp {

// ---------------------------------------------------------------------------
// Step selection.
// ---------------------------------------------------------------------------

struct StepAssignment {
    std::string strategy;
    std::vector<int64_t> steps;  // trajectory index per layer
};

// Reverse: layer i reads trajectory index t_sample - 2i (most refined latent
// first). Sequential: the same step multiset in ascending order.
inline StepAssignment select_steps(const std::string& strategy, int64_t depth,
                                   int64_t t_sample) {
    if (depth < 0) throw ConfigError("negative prompt depth");
    if (depth > 0 && t_sample - 2 * (depth - 1) < 0)
        throw ConfigError("depth " + std::to_string(depth) + " needs t_sample >= " +
                          std::to_string(2 * (depth - 1)));
    if (strategy != "reverse" && strategy != "sequential")
        throw ConfigError("unknown step strategy '" + strategy + "'");
    StepAssignment a;
    a.strategy = strategy;
    for (int64_t i = 0; i < depth; ++i) a.steps.push_back(t_sample - 2 * i);
    if (strategy == "sequential") std::reverse(a.steps.begin(), a.steps.end());
    return a;
}

// ---------------------------------------------------------------------------
// Saliency adapter: 3 stride-2 convs (1->8->16->32), a 1x1 channel reduction
// to 2, then flatten + linear to N_p tokens of the target modality width. The
// reduction keeps the flattened dimension small enough that stage-3
// trainables stay under the parameter budget.
// ---------------------------------------------------------------------------

template <typename T>
struct AdapterT : NoCopyMove {
    int64_t image_size, n_p, width, flat_dim;
    std::unique_ptr<Conv2dT<T>> c1, c2, c3, reduce;
    std::unique_ptr<LinearT<T>> out;

    AdapterT(ParamSetT<T>& ps, const std::string& name, int64_t image_size_, int64_t n_p_,
             int64_t width_, Rng& rng)
        : image_size(image_size_), n_p(n_p_), width(width_) {
        if (image_size % 8 != 0) throw ConfigError("adapter input side must be divisible by 8");
        c1 = std::make_unique<Conv2dT<T>>(ps, name + ".c1", 1, 8, 3, 2, 1, rng);
        c2 = std::make_unique<Conv2dT<T>>(ps, name + ".c2", 8, 16, 3, 2, 1, rng);
        c3 = std::make_unique<Conv2dT<T>>(ps, name + ".c3", 16, 32, 3, 2, 1, rng);
        reduce = std::make_unique<Conv2dT<T>>(ps, name + ".reduce", 32, 2, 1, 1, 0, rng);
        flat_dim = 2 * (image_size / 8) * (image_size / 8);
        out = std::make_unique<LinearT<T>>(ps, name + ".out", flat_dim, n_p * width, rng);
    }

    // saliency {1, H, W} -> (n_p, width)
    ValueT<T> forward(TapeT<T>& tape, const ValueT<T>& saliency) {
        if (saliency.val().shape != std::vector<int64_t>{1, image_size, image_size})
            throw ShapeError("adapter saliency shape " + shape_str(saliency.val().shape));
        auto h = gelu(c1->forward(tape, saliency));
        h = gelu(c2->forward(tape, h));
        h = gelu(c3->forward(tape, h));
        h = reduce->forward(tape, h);
        h = reshape(h, {1, flat_dim});
        return reshape(out->forward(tape, h), {n_p, width});
    }
};

using Adapter = AdapterT<float>;

// ---------------------------------------------------------------------------
// Prompter: one adapter pair shared across layers plus per-layer global
// prompt tables. Its ParamSet is exactly the stage-3 trainable set.
// ---------------------------------------------------------------------------

template <typename T>
struct PrompterT : NoCopyMove {
    int64_t depth, n_p, n_gp, width, image_size;
    StepAssignment assignment;

    ParamSetT<T> params;
    std::unique_ptr<AdapterT<T>> adapter_v, adapter_l;
    std::deque<ParamT<T>> gp_v, gp_l;  // depth tables of (n_gp, width)

    PrompterT(const RunConfig& cfg, Rng& rng)
        : depth(cfg.depth),
          n_p(cfg.n_p),
          n_gp(cfg.n_gp),
          width(cfg.grounder_width),
          image_size(cfg.scene.image_size),
          assignment(select_steps(cfg.strategy, cfg.depth, cfg.t_sample)) {
        adapter_v = std::make_unique<AdapterT<T>>(params, "prompter.adapter_v", image_size, n_p,
                                                  width, rng);
        adapter_l = std::make_unique<AdapterT<T>>(params, "prompter.adapter_l", image_size, n_p,
                                                  width, rng);
        for (int64_t j = 0; j < depth; ++j) {
            gp_v.emplace_back();
            gp_v.back().name = "prompter.gp_v" + std::to_string(j);
            gp_v.back().init_shape({n_gp, width});
            init_normal(gp_v.back().value, 0.02, rng);
            params.add(&gp_v.back());
            gp_l.emplace_back();
            gp_l.back().name = "prompter.gp_l" + std::to_string(j);
            gp_l.back().init_shape({n_gp, width});
            init_normal(gp_l.back().value, 0.02, rng);
            params.add(&gp_l.back());
        }
    }
};

using Prompter = PrompterT<float>;

// Assembles the per-layer prompt set from a trajectory: for layer j, decode
// trajectory latent steps[j] through the frozen VAE (undoing the diffusion
// latent scale) and run both adapters on that one saliency map; global
// prompts come straight from the learnable store.
template <typename T>
PromptSetT<T> make_prompts(TapeT<T>& tape, PrompterT<T>& pr, const LatentTrajectory& traj,
                           MaskVaeT<T>& vae, double latent_scale = 1.0) {
    if (!vae.params.frozen()) throw DependencyError("make_prompts requires a frozen mask_vae");
    if (latent_scale <= 0.0) throw ConfigError("latent scale must be positive");
    PromptSetT<T> out;
    for (int64_t j = 0; j < pr.depth; ++j) {
        const int64_t s = pr.assignment.steps[static_cast<size_t>(j)];
        if (s < 0 || s > traj.t_sample())
            throw ConfigError("trajectory step " + std::to_string(s) + " outside [0, " +
                              std::to_string(traj.t_sample()) + "]");
        auto z = traj.latents[static_cast<size_t>(s)].template cast<T>();
        for (int64_t i = 0; i < z.numel(); ++i)
            z.at(i) = static_cast<T>(static_cast<double>(z.at(i)) / latent_scale);
        auto sal = tape.leaf(decode(vae, z));
        out.p_v.push_back(pr.adapter_v->forward(tape, sal));
        out.p_l.push_back(pr.adapter_l->forward(tape, sal));
        out.gp_v.push_back(tape.param(pr.gp_v[static_cast<size_t>(j)]));
        out.gp_l.push_back(tape.param(pr.gp_l[static_cast<size_t>(j)]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ablation drop semantics: dropped groups become zero tokens of identical
// shape, so sequence lengths and attention geometry are unchanged.
// ---------------------------------------------------------------------------

struct PromptDrop {
    bool p_v = false, gp_v = false, p_l = false, gp_l = false;
    bool any() const { return p_v || gp_v || p_l || gp_l; }
};

template <typename T>
void drop_prompt_groups(TapeT<T>& tape, PromptSetT<T>& ps, const PromptDrop& drop) {
    auto zero_like = [&](ValueT<T>& v) { v = tape.leaf(TensorT<T>(v.val().shape)); };
    for (int64_t j = 0; j < ps.depth(); ++j) {
        if (drop.p_v) zero_like(ps.p_v[static_cast<size_t>(j)]);
        if (drop.gp_v) zero_like(ps.gp_v[static_cast<size_t>(j)]);
        if (drop.p_l) zero_like(ps.p_l[static_cast<size_t>(j)]);
        if (drop.gp_l) zero_like(ps.gp_l[static_cast<size_t>(j)]);
    }
}

// ---------------------------------------------------------------------------
// Stage-3 tuning step: sample a trajectory per input (seed derived from the
// sample id so runs are reproducible), assemble prompts, run the prompted
// grounder, and step the adapters + global prompts on the grounding loss.
// ---------------------------------------------------------------------------

inline double prompt_tune_step(Prompter& prompter, Grounder& grounder, MaskVae& vae, Dit& gen,
                               const std::vector<Sample>& batch,
                               const std::vector<GrounderEmbed>& embeds,
                               const NoiseSchedule& sched, int64_t t_sample,
                               AdamWT<float>& opt, uint64_t tune_seed,
                               double latent_scale = 1.0) {
    if (!grounder.params.frozen() || !vae.params.frozen() || !gen.params.frozen())
        throw DependencyError("prompt tuning requires frozen grounder, mask_vae, and generator");
    if (batch.empty()) throw ConfigError("prompt_tune_step on empty batch");
    if (embeds.size() != batch.size())
        throw ShapeError("one grounder embedding per batch sample required");

    TapeT<float> tape;
    ValueT<float> total;
    for (size_t i = 0; i < batch.size(); ++i) {
        const Sample& smp = batch[i];
        const uint64_t seed = derive_seed(tune_seed, "stage3_ddim", smp.sample_id);
        auto traj = sample_trajectory(gen, embeds[i], sched, t_sample, seed);
        auto prompts = make_prompts(tape, prompter, traj, vae, latent_scale);
        auto feats = grounder.encode_with_prompts(tape, smp.image, smp.caption, prompts);
        auto [logits, offsets] = grounder.head_graph(tape, feats);
        Box gt{smp.box[0], smp.box[1], smp.box[2], smp.box[3]};
        auto li = grounder_loss_graph(logits, offsets, grounder.anchors, gt, grounder.image_size);
        total = i == 0 ? li : add(total, li);
    }
    total = scale(total, 1.0f / static_cast<float>(batch.size()));
    tape.backward(total);
    opt.step();
    prompter.params.zero_grad();
    return static_cast<double>(total.val().at(0));
}

}  // namespace dp
