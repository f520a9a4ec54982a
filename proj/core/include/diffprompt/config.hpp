#pragma once

// Run configuration: corpus, model dimensions, diffusion and prompting
// settings, per-stage optimization, seeds, and paths. Serialized as JSON; the
// config hash covers every field that affects results (paths excluded) and is
// stamped into checkpoints for provenance checks.

#include <cstdint>
#include <string>
#include <vector>

#include "diffprompt/synthdata.hpp"

namespace dp {

struct StageConfig {
    int64_t epochs = 1;
    int64_t batch = 32;
    double lr = 1e-3;
    double weight_decay = 0.01;
};

struct RunConfig {
    // Corpus.
    SceneConfig scene;
    int64_t train_count = 8000;
    int64_t val_count = 1000;
    int64_t test_count = 1000;

    // Grounder (stage 0).
    int64_t grounder_layers = 12;
    int64_t grounder_width = 64;
    int64_t grounder_heads = 4;
    int64_t grounder_patch = 8;
    int64_t grounder_mlp_ratio = 4;
    std::vector<int64_t> anchor_scales = {16, 28, 48};

    // Mask VAE (stage 1).
    int64_t latent_channels = 4;
    double lambda_kl = 0.0003;

    // Prompt generator DiT (stage 2).
    int64_t dit_blocks = 4;
    int64_t dit_width = 128;
    int64_t dit_heads = 4;
    int64_t dit_patch = 2;
    int64_t dit_time_dim = 256;
    bool use_sampled_z = true;  // stage-2 z0 from reparam sample (true) or mu (false)

    // Diffusion.
    int64_t t_forward = 100;
    int64_t t_sample = 25;
    double cosine_s = 0.008;
    double beta_cap = 0.999;

    // Prompting (stage 3).
    int64_t depth = 9;
    int64_t n_p = 4;
    int64_t n_gp = 4;
    std::string strategy = "reverse";  // or "sequential"

    // Stages. Paper-pinned: stage-0 20 epochs / batch 64 / lr 3e-4,
    // stage-3 lr 1e-4; the rest are desk-scale defaults.
    StageConfig stage0{20, 64, 3e-4, 0.01};
    StageConfig stage1{40, 32, 1e-3, 0.01};
    StageConfig stage2{60, 32, 1e-3, 0.01};
    StageConfig stage3{20, 16, 1e-4, 0.01};
    int64_t stage0_max_train = 0;   // 0 = full train split
    int64_t stage1_max_train = 0;
    int64_t stage2_max_train = 0;
    int64_t stage3_max_train = 1024;

    // Evaluation.
    double iou_match_thresh = 0.5;
    double nms_thresh = 0.5;
    int64_t detect_cap = 100;
    int64_t eval_max_samples = 0;  // 0 = whole split

    // Seeds and paths.
    uint64_t master_seed = 42;
    std::string out_dir = "out";

    void validate() const;
    std::string to_json_string() const;
    static RunConfig from_json_string(const std::string& text);
    static RunConfig from_json_file(const std::string& path);
    void save_json_file(const std::string& path) const;

    // FNV-1a hex over the canonical serialization minus paths.
    std::string config_hash() const;

    // Named seed streams all derive from master_seed.
    uint64_t seed_for(const std::string& purpose) const;
};

}  // namespace dp
