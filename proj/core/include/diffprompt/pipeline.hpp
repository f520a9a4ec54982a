#pragma once

// Stage orchestration: dataset generation, the four training stages with
// checkpoint/provenance plumbing, evaluation with per-sample-seeded DDIM
// trajectories, ablations, and the complexity report. Every artifact embeds
// the config hash and the digests of its upstream checkpoints.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "diffprompt/checkpoint.hpp"
#include "diffprompt/config.hpp"
#include "diffprompt/dit.hpp"
#include "diffprompt/grounder.hpp"
#include "diffprompt/mask_vae.hpp"
#include "diffprompt/metrics.hpp"
#include "diffprompt/prompting.hpp"
#include "diffprompt/schedule.hpp"
#include "diffprompt/synthdata.hpp"

namespace dp {

// ---------------------------------------------------------------------------
// Artifact layout under the output directory.
// ---------------------------------------------------------------------------

struct PipelinePaths {
    std::string out_dir;

    explicit PipelinePaths(std::string out) : out_dir(std::move(out)) {}
    std::string data_file() const { return out_dir + "/data/corpus.dpds"; }
    std::string checkpoint(const std::string& component) const {
        return out_dir + "/checkpoints/" + component + ".dpck";
    }
    std::string report(const std::string& name) const {
        return out_dir + "/reports/" + name + ".json";
    }
    std::string saliency_dir() const { return out_dir + "/reports/saliency"; }
    void ensure_dirs() const;
};

struct SplitRange {
    int64_t begin = 0, end = 0;
    int64_t size() const { return end - begin; }
};

// split is one of "train", "val", "test".
SplitRange split_range(const DatasetManifest& m, const std::string& split);

// ---------------------------------------------------------------------------
// Stage reports (JSON artifacts under <out>/reports).
// ---------------------------------------------------------------------------

struct StageReport {
    std::string stage;
    std::vector<double> epoch_loss;
    std::map<std::string, double> metrics;
    std::map<std::string, std::string> info;
};

void write_stage_report(const std::string& path, const RunConfig& cfg, const StageReport& rep);
void write_eval_report(const std::string& path, const EvalReport& rep);

uint64_t schedule_hash(const NoiseSchedule& sched);

// ---------------------------------------------------------------------------
// Bundle loading with dependency and provenance checks.
// ---------------------------------------------------------------------------

enum class BundleNeed {
    GrounderOnly,  // promptless evaluation / stage-1/2 upstream
    Frozen,        // grounder + vae + generator (stage-3 upstreams)
    Full,          // everything incl. trained prompter
};

struct Bundle {
    std::unique_ptr<Grounder> grounder;
    std::unique_ptr<MaskVae> vae;
    std::unique_ptr<Dit> gen;
    std::unique_ptr<Prompter> prompter;
    double latent_scale = 1.0;
    std::map<std::string, std::string> digests;  // component -> blob digest
};

Bundle load_bundle(const RunConfig& cfg, BundleNeed need);

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

using TrajectoryCache = std::unordered_map<uint64_t, LatentTrajectory>;

struct EvalOptions {
    std::string split = "val";
    PromptDrop drop;
    bool promptless = false;  // force the no-prompt path regardless of depth
    bool dump_saliency = false;
    std::string saliency_dir;          // required when dump_saliency
    TrajectoryCache* traj_cache = nullptr;  // optional reuse across variants
};

// vae/gen/prompter may be null for promptless evaluation. DDIM seeds derive
// from the sample id, so reports are reproducible and trajectories shareable
// across ablation variants.
EvalReport evaluate_models(const RunConfig& cfg, Grounder& grounder, MaskVae* vae, Dit* gen,
                           Prompter* prompter, double latent_scale, DatasetReader& reader,
                           const DatasetManifest& manifest, const EvalOptions& opt);

// ---------------------------------------------------------------------------
// Stage runners shared by commands, ablations, and the acceptance gate.
// ---------------------------------------------------------------------------

// Stage 3 on already-loaded frozen models; seed_base isolates tuning runs.
StageReport run_stage3(const RunConfig& cfg, Grounder& grounder, MaskVae& vae, Dit& gen,
                       Prompter& prompter, DatasetReader& reader, const DatasetManifest& manifest,
                       double latent_scale, uint64_t seed_base);

// 1/std of posterior-mean latent elements over a training prefix; the factor
// the diffusion stages train and sample in.
double estimate_latent_scale(MaskVae& vae, DatasetReader& reader, SplitRange train,
                             int64_t cap = 256);

// Mean mask IoU of thresholded reconstructions against ground truth.
double vae_reconstruction_iou(MaskVae& vae, DatasetReader& reader, SplitRange range,
                              double thresh = 0.5, int64_t cap = 0);

// ---------------------------------------------------------------------------
// Analytic FLOP estimates (per forward pass, conventions of metrics.hpp).
// ---------------------------------------------------------------------------

uint64_t grounder_forward_flops(const RunConfig& cfg, int64_t prompt_depth);
uint64_t vae_encode_flops(const RunConfig& cfg);
uint64_t vae_decode_flops(const RunConfig& cfg);
uint64_t dit_forward_flops(const RunConfig& cfg);
uint64_t adapter_forward_flops(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Commands (CLI surface). Each validates config, checks upstreams, writes its
// artifact(s), and returns what it computed.
// ---------------------------------------------------------------------------

void cmd_gen_data(const RunConfig& cfg);
StageReport cmd_pretrain(const RunConfig& cfg);
StageReport cmd_train_vae(const RunConfig& cfg);
StageReport cmd_train_generator(const RunConfig& cfg);
StageReport cmd_tune_prompts(const RunConfig& cfg);
EvalReport cmd_evaluate(const RunConfig& cfg, const std::string& split = "val",
                        bool dump_saliency = false);
void cmd_ablate(const RunConfig& cfg, const std::string& which);  // depth|strategy|prompts
void cmd_report(const RunConfig& cfg);

}  // namespace dp
