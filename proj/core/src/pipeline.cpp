#include "diffprompt/pipeline.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "diffprompt/diffusion.hpp"
#include "diffprompt/errors.hpp"
#include "diffprompt/flops.hpp"
#include "diffprompt/nn.hpp"
#include "diffprompt/rng.hpp"

namespace dp {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
    return buf;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError(DatasetError::Kind::Io, "cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError(DatasetError::Kind::Io, "cannot write " + path);
    out << text;
}

std::string file_digest(const std::string& path) { return hex64(fnv1a(read_file(path))); }

const char* kind_name(int64_t kind_index) {
    switch (static_cast<ShapeKind>(kind_index)) {
        case ShapeKind::Circle: return "circle";
        case ShapeKind::Square: return "square";
        case ShapeKind::Triangle: return "triangle";
        default: return "unknown";
    }
}

Box gt_box(const Sample& s) { return Box{s.box[0], s.box[1], s.box[2], s.box[3]}; }

// ---------------------------------------------------------------------------
// Dataset access with provenance checks.
// ---------------------------------------------------------------------------

struct DatasetHandle {
    DatasetManifest manifest;
    std::unique_ptr<DatasetReader> reader;
    std::string digest;  // over the manifest file
};

DatasetHandle open_dataset(const RunConfig& cfg, const PipelinePaths& paths,
                           const std::string& consumer) {
    const std::string path = paths.data_file();
    if (!fs::exists(path))
        throw DependencyError(consumer + " requires the generated corpus; run gen-data first");
    DatasetHandle h;
    h.manifest = read_manifest(path);
    const auto& sp = h.manifest.splits;
    if (scene_config_to_json_string(h.manifest.config) != scene_config_to_json_string(cfg.scene) ||
        h.manifest.corpus_seed != cfg.seed_for("corpus") ||
        sp.train_end - sp.train_begin != cfg.train_count ||
        sp.val_end - sp.val_begin != cfg.val_count ||
        sp.test_end - sp.test_begin != cfg.test_count)
        throw ProvenanceError("corpus at " + path + " was generated under a different config");
    h.reader = std::make_unique<DatasetReader>(path);
    h.digest = file_digest(manifest_path_for(path));
    return h;
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing.
// ---------------------------------------------------------------------------

struct ComponentSpec {
    const char* component;
    const char* stage;  // CLI command that produces it
};

constexpr ComponentSpec kGrounderSpec{"grounder", "pretrain"};
constexpr ComponentSpec kVaeSpec{"mask_vae", "train-vae"};
constexpr ComponentSpec kGeneratorSpec{"prompt_generator", "train-generator"};
constexpr ComponentSpec kPrompterSpec{"prompter", "tune-prompts"};

std::string require_checkpoint(const PipelinePaths& paths, const ComponentSpec& spec) {
    const std::string path = paths.checkpoint(spec.component);
    if (!fs::exists(path))
        throw DependencyError(std::string("missing ") + spec.component + " checkpoint; run " +
                              spec.stage + " first");
    return path;
}

void check_config_hash(const RunConfig& cfg, const CheckpointMeta& meta) {
    if (meta.config_hash != cfg.config_hash())
        throw ProvenanceError(meta.component + " checkpoint was produced under config hash " +
                              meta.config_hash + ", current config hash is " + cfg.config_hash());
}

void check_upstream(const CheckpointMeta& meta, const std::string& upstream,
                    const std::string& loaded_digest) {
    auto it = meta.upstream_digests.find(upstream);
    if (it == meta.upstream_digests.end())
        throw ProvenanceError(meta.component + " checkpoint records no " + upstream + " digest");
    if (it->second != loaded_digest)
        throw ProvenanceError(meta.component + " checkpoint was trained against a different " +
                              upstream + " (digest " + it->second + ", loaded " + loaded_digest +
                              ")");
}

double parse_extra_double(const CheckpointMeta& meta, const std::string& key) {
    auto it = meta.extra.find(key);
    if (it == meta.extra.end())
        throw ProvenanceError(meta.component + " checkpoint lacks extra field " + key);
    return std::stod(it->second);
}

// ---------------------------------------------------------------------------
// Batch helpers.
// ---------------------------------------------------------------------------

std::vector<int64_t> epoch_order(const SplitRange& r, int64_t cap, uint64_t seed) {
    int64_t n = r.size();
    if (cap > 0) n = std::min(n, cap);
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), r.begin);
    Rng rng(seed);
    rng.shuffle(idx);
    return idx;
}

void check_finite(double loss, const std::string& stage, int64_t epoch) {
    if (!std::isfinite(loss))
        throw DivergenceError(stage + " loss became non-finite in epoch " +
                              std::to_string(epoch));
}

double grounder_train_step(Grounder& g, const std::vector<Sample>& batch, AdamWT<float>& opt) {
    if (batch.empty()) throw ConfigError("grounder_train_step on empty batch");
    TapeT<float> tape;
    ValueT<float> total;
    for (size_t i = 0; i < batch.size(); ++i) {
        auto feats = g.encode_with_prompts(tape, batch[i].image, batch[i].caption, PromptSet{});
        auto [logits, offsets] = g.head_graph(tape, feats);
        auto li = grounder_loss_graph(logits, offsets, g.anchors, gt_box(batch[i]), g.image_size);
        total = i == 0 ? li : add(total, li);
    }
    total = scale(total, 1.0f / static_cast<float>(batch.size()));
    tape.backward(total);
    opt.step();
    g.params.zero_grad();
    return static_cast<double>(total.val().at(0));
}

json stage_report_json(const RunConfig& cfg, const StageReport& rep) {
    json j;
    j["stage"] = rep.stage;
    j["config_hash"] = cfg.config_hash();
    j["epoch_loss"] = rep.epoch_loss;
    j["metrics"] = rep.metrics;
    j["info"] = rep.info;
    return j;
}

void write_pgm(const std::string& path, const Tensor& img01) {
    const int64_t h = img01.shape[1], w = img01.shape[2];
    std::string body = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    body.reserve(body.size() + static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) {
        double v = static_cast<double>(img01.at(i));
        int pix = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        body.push_back(static_cast<char>(pix));
    }
    write_file(path, body);
}

}  // namespace

// ---------------------------------------------------------------------------
// Paths and splits.
// ---------------------------------------------------------------------------

void PipelinePaths::ensure_dirs() const {
    fs::create_directories(out_dir + "/data");
    fs::create_directories(out_dir + "/checkpoints");
    fs::create_directories(out_dir + "/reports");
}

SplitRange split_range(const DatasetManifest& m, const std::string& split) {
    if (split == "train") return {m.splits.train_begin, m.splits.train_end};
    if (split == "val") return {m.splits.val_begin, m.splits.val_end};
    if (split == "test") return {m.splits.test_begin, m.splits.test_end};
    throw ConfigError("unknown split " + split);
}

void write_stage_report(const std::string& path, const RunConfig& cfg, const StageReport& rep) {
    write_file(path, stage_report_json(cfg, rep).dump(2) + "\n");
}

void write_eval_report(const std::string& path, const EvalReport& rep) {
    write_file(path, rep.to_json() + "\n");
}

uint64_t schedule_hash(const NoiseSchedule& sched) {
    uint64_t h = fnv1a("cosine");
    h = mix_seed(h, static_cast<uint64_t>(sched.T));
    for (double a : sched.alpha_bar) {
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(a));
        std::memcpy(&bits, &a, sizeof(bits));
        h = mix_seed(h, bits);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Bundle loading.
// ---------------------------------------------------------------------------

Bundle load_bundle(const RunConfig& cfg, BundleNeed need) {
    PipelinePaths paths(cfg.out_dir);
    Bundle b;

    const std::string g_path = require_checkpoint(paths, kGrounderSpec);
    Rng g_rng(cfg.seed_for("stage0_init"));
    b.grounder = std::make_unique<Grounder>(cfg, g_rng);
    auto g_meta = load_checkpoint(g_path, b.grounder->params);
    check_config_hash(cfg, g_meta);
    b.grounder->params.set_trainable(false);
    b.digests["grounder"] = checkpoint_digest(g_path);
    if (need == BundleNeed::GrounderOnly) return b;

    const std::string v_path = require_checkpoint(paths, kVaeSpec);
    b.vae = make_mask_vae<float>(cfg.scene.image_size, cfg.latent_channels,
                                 cfg.seed_for("stage1_init"));
    auto v_meta = load_checkpoint(v_path, b.vae->params);
    check_config_hash(cfg, v_meta);
    b.vae->params.set_trainable(false);
    b.digests["mask_vae"] = checkpoint_digest(v_path);

    const std::string d_path = require_checkpoint(paths, kGeneratorSpec);
    Rng d_rng(cfg.seed_for("stage2_init"));
    b.gen = std::make_unique<Dit>(cfg, d_rng);
    auto d_meta = load_checkpoint(d_path, b.gen->params);
    check_config_hash(cfg, d_meta);
    check_upstream(d_meta, "grounder", b.digests["grounder"]);
    check_upstream(d_meta, "mask_vae", b.digests["mask_vae"]);
    b.gen->params.set_trainable(false);
    b.digests["prompt_generator"] = checkpoint_digest(d_path);
    b.latent_scale = parse_extra_double(d_meta, "latent_scale");
    if (need == BundleNeed::Frozen) return b;

    const std::string p_path = require_checkpoint(paths, kPrompterSpec);
    Rng p_rng(cfg.seed_for("stage3_init"));
    b.prompter = std::make_unique<Prompter>(cfg, p_rng);
    auto p_meta = load_checkpoint(p_path, b.prompter->params);
    check_config_hash(cfg, p_meta);
    check_upstream(p_meta, "grounder", b.digests["grounder"]);
    check_upstream(p_meta, "mask_vae", b.digests["mask_vae"]);
    check_upstream(p_meta, "prompt_generator", b.digests["prompt_generator"]);
    b.digests["prompter"] = checkpoint_digest(p_path);
    return b;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

EvalReport evaluate_models(const RunConfig& cfg, Grounder& grounder, MaskVae* vae, Dit* gen,
                           Prompter* prompter, double latent_scale, DatasetReader& reader,
                           const DatasetManifest& manifest, const EvalOptions& opt) {
    const SplitRange range = split_range(manifest, opt.split);
    int64_t n = range.size();
    if (cfg.eval_max_samples > 0) n = std::min(n, cfg.eval_max_samples);

    const bool prompted = !opt.promptless && prompter != nullptr && prompter->depth > 0;
    if (prompted && (vae == nullptr || gen == nullptr))
        throw DependencyError("prompted evaluation requires mask_vae and prompt_generator");
    if (opt.dump_saliency && opt.saliency_dir.empty())
        throw ConfigError("dump_saliency requires a saliency directory");

    const auto sched = build_cosine_schedule(cfg.t_forward, cfg.cosine_s, cfg.beta_cap);
    const uint64_t eval_seed = cfg.seed_for("eval_ddim");

    EvalAccumulator acc;
    for (int64_t i = 0; i < n; ++i) {
        const Sample smp = reader.read(range.begin + i);
        DetectionList dets;
        if (!prompted) {
            dets = detect_sample(grounder, smp.image, smp.caption, cfg.nms_thresh,
                                 cfg.detect_cap);
        } else {
            LatentTrajectory local;
            const LatentTrajectory* traj = nullptr;
            if (opt.traj_cache != nullptr) {
                auto it = opt.traj_cache->find(smp.sample_id);
                if (it != opt.traj_cache->end()) traj = &it->second;
            }
            if (traj == nullptr) {
                auto emb = grounder_embed(grounder, smp.image, smp.caption);
                const uint64_t seed = derive_seed(eval_seed, "sample", smp.sample_id);
                local = sample_trajectory(*gen, emb, sched, cfg.t_sample, seed);
                if (opt.traj_cache != nullptr)
                    traj = &opt.traj_cache->emplace(smp.sample_id, std::move(local)).first->second;
                else
                    traj = &local;
            }
            TapeT<float> tape(/*grad_enabled=*/false);
            auto prompts = make_prompts(tape, *prompter, *traj, *vae, latent_scale);
            if (opt.drop.any()) drop_prompt_groups(tape, prompts, opt.drop);
            auto feats = grounder.encode_with_prompts(tape, smp.image, smp.caption, prompts);
            dets = detect(grounder, feats, cfg.nms_thresh, cfg.detect_cap);

            if (opt.dump_saliency) {
                for (int64_t j = 0; j < prompter->depth; ++j) {
                    const int64_t s = prompter->assignment.steps[static_cast<size_t>(j)];
                    Tensor z = traj->latents[static_cast<size_t>(s)];
                    for (int64_t e = 0; e < z.numel(); ++e)
                        z.at(e) = static_cast<float>(static_cast<double>(z.at(e)) / latent_scale);
                    const Tensor sal = decode(*vae, z);
                    write_pgm(opt.saliency_dir + "/sample" + std::to_string(smp.sample_id) +
                                  "_layer" + std::to_string(j) + ".pgm",
                              sal);
                }
            }
        }
        const Box gt = gt_box(smp);
        const auto parse = parse_caption(smp.caption, manifest.config);
        acc.add(recall_at_k(dets, gt, 1, cfg.iou_match_thresh),
                recall_at_k(dets, gt, 5, cfg.iou_match_thresh),
                recall_at_k(dets, gt, 10, cfg.iou_match_thresh),
                upper_bound(dets, gt, cfg.iou_match_thresh), kind_name(parse.kind));
    }

    EvalReport rep = acc.finish();
    rep.config_hash = cfg.config_hash();
    rep.seed = cfg.master_seed;
    return rep;
}

// ---------------------------------------------------------------------------
// Stage 3 runner.
// ---------------------------------------------------------------------------

StageReport run_stage3(const RunConfig& cfg, Grounder& grounder, MaskVae& vae, Dit& gen,
                       Prompter& prompter, DatasetReader& reader, const DatasetManifest& manifest,
                       double latent_scale, uint64_t seed_base) {
    StageReport rep;
    rep.stage = "tune_prompts";
    const auto sched = build_cosine_schedule(cfg.t_forward, cfg.cosine_s, cfg.beta_cap);
    const SplitRange train = split_range(manifest, "train");
    int64_t n = train.size();
    if (cfg.stage3_max_train > 0) n = std::min(n, cfg.stage3_max_train);

    // Grounder embeddings are frozen across tuning; cache them once.
    std::vector<GrounderEmbed> embeds;
    embeds.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const Sample smp = reader.read(train.begin + i);
        embeds.push_back(grounder_embed(grounder, smp.image, smp.caption));
    }

    AdamWT<float> opt(prompter.params, static_cast<float>(cfg.stage3.lr),
              static_cast<float>(cfg.stage3.weight_decay));
    for (int64_t epoch = 0; epoch < cfg.stage3.epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), int64_t{0});
        Rng order_rng(derive_seed(seed_base, "order", static_cast<uint64_t>(epoch)));
        order_rng.shuffle(order);
        const uint64_t tune_seed = derive_seed(seed_base, "epoch", static_cast<uint64_t>(epoch));

        double loss_sum = 0.0;
        int64_t seen = 0;
        for (int64_t b = 0; b < n; b += cfg.stage3.batch) {
            const int64_t bs = std::min(cfg.stage3.batch, n - b);
            std::vector<Sample> batch;
            std::vector<GrounderEmbed> batch_emb;
            batch.reserve(static_cast<size_t>(bs));
            batch_emb.reserve(static_cast<size_t>(bs));
            for (int64_t k = 0; k < bs; ++k) {
                const int64_t j = order[static_cast<size_t>(b + k)];
                batch.push_back(reader.read(train.begin + j));
                batch_emb.push_back(embeds[static_cast<size_t>(j)]);
            }
            const double loss = prompt_tune_step(prompter, grounder, vae, gen, batch, batch_emb,
                                                 sched, cfg.t_sample, opt, tune_seed, latent_scale);
            check_finite(loss, "stage-3", epoch);
            loss_sum += loss * static_cast<double>(bs);
            seen += bs;
        }
        rep.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
    }
    rep.info["tuned_samples"] = std::to_string(n);
    rep.info["seed_base"] = hex64(seed_base);
    rep.metrics["tunable_params"] =
        static_cast<double>(prompter.params.count_params(/*trainable_only=*/true));
    return rep;
}

// ---------------------------------------------------------------------------
// Latent statistics and VAE quality.
// ---------------------------------------------------------------------------

double estimate_latent_scale(MaskVae& vae, DatasetReader& reader, SplitRange train, int64_t cap) {
    const int64_t n = std::min(train.size(), cap);
    if (n < 1) throw ConfigError("latent scale estimation needs at least one sample");
    double sum = 0.0, sum_sq = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < n; ++i) {
        const Sample smp = reader.read(train.begin + i);
        auto [mu, lv] = encode(vae, smp.mask.cast<float>());
        for (int64_t e = 0; e < mu.numel(); ++e) {
            const double v = static_cast<double>(mu.at(e));
            sum += v;
            sum_sq += v * v;
        }
        count += mu.numel();
    }
    const double mean = sum / static_cast<double>(count);
    const double var = sum_sq / static_cast<double>(count) - mean * mean;
    const double sd = std::sqrt(std::max(var, 1e-12));
    return 1.0 / sd;
}

double vae_reconstruction_iou(MaskVae& vae, DatasetReader& reader, SplitRange range, double thresh,
                              int64_t cap) {
    int64_t n = range.size();
    if (cap > 0) n = std::min(n, cap);
    if (n < 1) throw ConfigError("reconstruction IoU needs at least one sample");
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const Sample smp = reader.read(range.begin + i);
        auto [mu, lv] = encode(vae, smp.mask.cast<float>());
        const Tensor recon = decode(vae, mu);
        int64_t inter = 0, uni = 0;
        for (int64_t e = 0; e < recon.numel(); ++e) {
            const bool pred = static_cast<double>(recon.at(e)) >= thresh;
            const bool gt = smp.mask.at(e) != 0;
            inter += pred && gt;
            uni += pred || gt;
        }
        total += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Analytic FLOP estimates.
// ---------------------------------------------------------------------------

uint64_t grounder_forward_flops(const RunConfig& cfg, int64_t prompt_depth) {
    const int64_t grid = cfg.scene.image_size / cfg.grounder_patch;
    const int64_t n_vis = grid * grid;
    const int64_t n_txt = cfg.scene.caption_len;
    const int64_t w = cfg.grounder_width;
    const int64_t hidden = w * cfg.grounder_mlp_ratio;
    const int64_t extra = cfg.n_p + cfg.n_gp;
    uint64_t f = linear_flops(n_vis, 3 * cfg.grounder_patch * cfg.grounder_patch, w);
    for (int64_t j = 0; j < cfg.grounder_layers; ++j) {
        const int64_t pv = j < prompt_depth ? n_vis + extra : n_vis;
        const int64_t pt = j < prompt_depth ? n_txt + extra : n_txt;
        f += attn_layer_flops(pv, w) + mlp_layer_flops(pv, w, hidden);
        f += attn_layer_flops(pt, w) + mlp_layer_flops(pt, w, hidden);
    }
    f += linear_flops(1, n_txt, w);  // text pooling
    for (size_t s = 0; s < cfg.anchor_scales.size(); ++s) {
        f += linear_flops(n_vis, w, w);  // score projection
        f += linear_flops(n_vis, w, 1);  // similarity against pooled text
        f += linear_flops(n_vis, w, 4);  // box offsets
    }
    return f;
}

uint64_t vae_encode_flops(const RunConfig& cfg) {
    const std::vector<int64_t> ch = {32, 64, 128};
    int64_t side = cfg.scene.image_size;
    int64_t cin = 1;
    uint64_t f = 0;
    for (int64_t c : ch) {
        side /= 2;
        f += conv_flops(3, cin, c, side, side);
        cin = c;
    }
    f += 2 * conv_flops(1, cin, cfg.latent_channels, side, side);  // mu and log-var heads
    return f;
}

uint64_t vae_decode_flops(const RunConfig& cfg) {
    const std::vector<int64_t> ch = {32, 64, 128};
    const int64_t stem = 8;
    int64_t side = cfg.scene.image_size >> ch.size();
    uint64_t f = conv_flops(1, cfg.latent_channels, ch.back(), side, side);
    std::vector<int64_t> chain(ch.rbegin(), ch.rend());
    chain.push_back(stem);
    for (size_t i = 0; i + 1 < chain.size(); ++i) {
        f += conv_flops(3, chain[i], chain[i + 1], side, side);
        side *= 2;
    }
    f += conv_flops(3, stem, 1, side, side);
    return f;
}

uint64_t dit_forward_flops(const RunConfig& cfg) {
    const int64_t latent_side = cfg.scene.image_size / 8;
    const int64_t grid = latent_side / cfg.dit_patch;
    const int64_t n_patch = grid * grid;
    const int64_t vis_grid = cfg.scene.image_size / cfg.grounder_patch;
    const int64_t n_cond = vis_grid * vis_grid + cfg.scene.caption_len;
    const int64_t seq = n_patch + n_cond;
    const int64_t w = cfg.dit_width;
    const int64_t patch_dim = cfg.latent_channels * cfg.dit_patch * cfg.dit_patch;
    uint64_t f = linear_flops(n_patch, patch_dim, w);
    f += linear_flops(n_cond, cfg.grounder_width, w);         // condition projections
    f += linear_flops(1, cfg.dit_time_dim, w) + linear_flops(1, w, w);  // time MLP
    for (int64_t b = 0; b < cfg.dit_blocks; ++b)
        f += attn_layer_flops(seq, w) + mlp_layer_flops(seq, w, 4 * w);
    f += linear_flops(n_patch, w, patch_dim);
    return f;
}

uint64_t adapter_forward_flops(const RunConfig& cfg) {
    const int64_t s = cfg.scene.image_size;
    uint64_t f = conv_flops(3, 1, 8, s / 2, s / 2);
    f += conv_flops(3, 8, 16, s / 4, s / 4);
    f += conv_flops(3, 16, 32, s / 8, s / 8);
    f += conv_flops(1, 32, 2, s / 8, s / 8);
    const int64_t flat = 2 * (s / 8) * (s / 8);
    f += linear_flops(1, flat, cfg.n_p * cfg.grounder_width);
    return f;
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

void cmd_gen_data(const RunConfig& cfg) {
    cfg.validate();
    PipelinePaths paths(cfg.out_dir);
    paths.ensure_dirs();
    const auto manifest = build_corpus(cfg.scene, cfg.seed_for("corpus"), cfg.train_count,
                                       cfg.val_count, cfg.test_count, paths.data_file());
    StageReport rep;
    rep.stage = "gen_data";
    rep.info["corpus_seed"] = hex64(manifest.corpus_seed);
    rep.info["dataset_digest"] = file_digest(manifest_path_for(paths.data_file()));
    rep.metrics["count"] = static_cast<double>(manifest.count);
    write_stage_report(paths.report("gen_data"), cfg, rep);
}

StageReport cmd_pretrain(const RunConfig& cfg) {
    cfg.validate();
    PipelinePaths paths(cfg.out_dir);
    paths.ensure_dirs();
    auto data = open_dataset(cfg, paths, "pretrain");

    Rng init_rng(cfg.seed_for("stage0_init"));
    Grounder model(cfg, init_rng);
    AdamWT<float> opt(model.params, static_cast<float>(cfg.stage0.lr),
              static_cast<float>(cfg.stage0.weight_decay));

    StageReport rep;
    rep.stage = "pretrain";
    const SplitRange train = split_range(data.manifest, "train");
    for (int64_t epoch = 0; epoch < cfg.stage0.epochs; ++epoch) {
        const auto order = epoch_order(train, cfg.stage0_max_train,
                                       derive_seed(cfg.seed_for("stage0_order"), "epoch",
                                                   static_cast<uint64_t>(epoch)));
        double loss_sum = 0.0;
        int64_t seen = 0;
        for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.stage0.batch)) {
            const size_t bs = std::min(static_cast<size_t>(cfg.stage0.batch), order.size() - b);
            std::vector<Sample> batch;
            batch.reserve(bs);
            for (size_t k = 0; k < bs; ++k) batch.push_back(data.reader->read(order[b + k]));
            const double loss = grounder_train_step(model, batch, opt);
            check_finite(loss, "stage-0", epoch);
            loss_sum += loss * static_cast<double>(bs);
            seen += static_cast<int64_t>(bs);
        }
        rep.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
    }

    model.params.set_trainable(false);
    EvalOptions eo;
    eo.split = "val";
    const auto er = evaluate_models(cfg, model, nullptr, nullptr, nullptr, 1.0, *data.reader,
                                    data.manifest, eo);
    rep.metrics["val_r1"] = er.r_at.at(1);
    rep.metrics["val_r5"] = er.r_at.at(5);
    rep.metrics["val_ub"] = er.ub;

    CheckpointMeta meta;
    meta.component = "grounder";
    meta.config_hash = cfg.config_hash();
    meta.upstream_digests["dataset"] = data.digest;
    save_checkpoint(paths.checkpoint("grounder"), meta, model.params);
    write_stage_report(paths.report("stage0_pretrain"), cfg, rep);
    return rep;
}

StageReport cmd_train_vae(const RunConfig& cfg) {
    cfg.validate();
    PipelinePaths paths(cfg.out_dir);
    paths.ensure_dirs();
    auto data = open_dataset(cfg, paths, "train-vae");

    auto vae = make_mask_vae<float>(cfg.scene.image_size, cfg.latent_channels,
                                    cfg.seed_for("stage1_init"));
    AdamWT<float> opt(vae->params, static_cast<float>(cfg.stage1.lr),
              static_cast<float>(cfg.stage1.weight_decay));
    Rng train_rng(cfg.seed_for("stage1_train"));

    StageReport rep;
    rep.stage = "train_vae";
    const SplitRange train = split_range(data.manifest, "train");
    for (int64_t epoch = 0; epoch < cfg.stage1.epochs; ++epoch) {
        const auto order = epoch_order(train, cfg.stage1_max_train,
                                       derive_seed(cfg.seed_for("stage1_order"), "epoch",
                                                   static_cast<uint64_t>(epoch)));
        double loss_sum = 0.0;
        int64_t seen = 0;
        for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.stage1.batch)) {
            const size_t bs = std::min(static_cast<size_t>(cfg.stage1.batch), order.size() - b);
            TapeT<float> tape;
            ValueT<float> total;
            for (size_t k = 0; k < bs; ++k) {
                const Sample smp = data.reader->read(order[b + k]);
                Tensor eps(vae->latent_shape());
                eps.fill_normal(train_rng);
                auto li = vae_loss_graph(tape, *vae, smp.mask.cast<float>(), eps, cfg.lambda_kl);
                total = k == 0 ? li : add(total, li);
            }
            total = scale(total, 1.0f / static_cast<float>(bs));
            tape.backward(total);
            opt.step();
            vae->params.zero_grad();
            const double loss = static_cast<double>(total.val().at(0));
            check_finite(loss, "stage-1", epoch);
            loss_sum += loss * static_cast<double>(bs);
            seen += static_cast<int64_t>(bs);
        }
        rep.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
    }

    const SplitRange val = split_range(data.manifest, "val");
    rep.metrics["val_recon_iou"] = vae_reconstruction_iou(*vae, *data.reader, val);
    rep.metrics["latent_scale"] = estimate_latent_scale(*vae, *data.reader, train);

    CheckpointMeta meta;
    meta.component = "mask_vae";
    meta.config_hash = cfg.config_hash();
    meta.upstream_digests["dataset"] = data.digest;
    save_checkpoint(paths.checkpoint("mask_vae"), meta, vae->params);
    write_stage_report(paths.report("stage1_train_vae"), cfg, rep);
    return rep;
}

StageReport cmd_train_generator(const RunConfig& cfg) {
    cfg.validate();
    PipelinePaths paths(cfg.out_dir);
    paths.ensure_dirs();
    auto data = open_dataset(cfg, paths, "train-generator");
    Bundle b = load_bundle(cfg, BundleNeed::GrounderOnly);

    const std::string v_path = require_checkpoint(paths, kVaeSpec);
    auto vae = make_mask_vae<float>(cfg.scene.image_size, cfg.latent_channels,
                                    cfg.seed_for("stage1_init"));
    auto v_meta = load_checkpoint(v_path, vae->params);
    check_config_hash(cfg, v_meta);
    vae->params.set_trainable(false);
    const std::string vae_digest = checkpoint_digest(v_path);

    const auto sched = build_cosine_schedule(cfg.t_forward, cfg.cosine_s, cfg.beta_cap);
    const SplitRange train = split_range(data.manifest, "train");
    const double latent_scale = estimate_latent_scale(*vae, *data.reader, train);

    int64_t n = train.size();
    if (cfg.stage2_max_train > 0) n = std::min(n, cfg.stage2_max_train);
    std::vector<GrounderEmbed> embeds;
    embeds.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const Sample smp = data.reader->read(train.begin + i);
        embeds.push_back(grounder_embed(*b.grounder, smp.image, smp.caption));
    }

    Rng init_rng(cfg.seed_for("stage2_init"));
    Dit model(cfg, init_rng);
    AdamWT<float> opt(model.params, static_cast<float>(cfg.stage2.lr),
              static_cast<float>(cfg.stage2.weight_decay));
    Rng train_rng(cfg.seed_for("stage2_train"));

    StageReport rep;
    rep.stage = "train_generator";
    for (int64_t epoch = 0; epoch < cfg.stage2.epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), int64_t{0});
        Rng order_rng(derive_seed(cfg.seed_for("stage2_order"), "epoch",
                                  static_cast<uint64_t>(epoch)));
        order_rng.shuffle(order);

        double loss_sum = 0.0;
        int64_t seen = 0;
        for (int64_t bpos = 0; bpos < n; bpos += cfg.stage2.batch) {
            const int64_t bs = std::min(cfg.stage2.batch, n - bpos);
            std::vector<Sample> batch;
            std::vector<GrounderEmbed> batch_emb;
            batch.reserve(static_cast<size_t>(bs));
            batch_emb.reserve(static_cast<size_t>(bs));
            for (int64_t k = 0; k < bs; ++k) {
                const int64_t j = order[static_cast<size_t>(bpos + k)];
                batch.push_back(data.reader->read(train.begin + j));
                batch_emb.push_back(embeds[static_cast<size_t>(j)]);
            }
            const double loss =
                generator_train_step(model, *vae, *b.grounder, batch, batch_emb, sched, opt,
                                     train_rng, latent_scale, cfg.use_sampled_z);
            check_finite(loss, "stage-2", epoch);
            loss_sum += loss * static_cast<double>(bs);
            seen += bs;
        }
        rep.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
    }
    rep.metrics["latent_scale"] = latent_scale;
    rep.info["trained_samples"] = std::to_string(n);

    CheckpointMeta meta;
    meta.component = "prompt_generator";
    meta.config_hash = cfg.config_hash();
    meta.upstream_digests["dataset"] = data.digest;
    meta.upstream_digests["grounder"] = b.digests["grounder"];
    meta.upstream_digests["mask_vae"] = vae_digest;
    meta.extra["latent_scale"] = format_double(latent_scale);
    meta.extra["schedule_hash"] = hex64(schedule_hash(sched));
    save_checkpoint(paths.checkpoint("prompt_generator"), meta, model.params);
    write_stage_report(paths.report("stage2_train_generator"), cfg, rep);
    return rep;
}

StageReport cmd_tune_prompts(const RunConfig& cfg) {
    cfg.validate();
    PipelinePaths paths(cfg.out_dir);
    paths.ensure_dirs();
    auto data = open_dataset(cfg, paths, "tune-prompts");
    Bundle b = load_bundle(cfg, BundleNeed::Frozen);

    Rng init_rng(cfg.seed_for("stage3_init"));
    Prompter prompter(cfg, init_rng);
    StageReport rep = run_stage3(cfg, *b.grounder, *b.vae, *b.gen, prompter, *data.reader,
                                 data.manifest, b.latent_scale, cfg.seed_for("stage3_train"));

    EvalOptions eo;
    eo.split = "val";
    const auto er = evaluate_models(cfg, *b.grounder, b.vae.get(), b.gen.get(), &prompter,
                                    b.latent_scale, *data.reader, data.manifest, eo);
    rep.metrics["val_r1"] = er.r_at.at(1);
    rep.metrics["val_r5"] = er.r_at.at(5);
    rep.metrics["val_ub"] = er.ub;

    CheckpointMeta meta;
    meta.component = "prompter";
    meta.config_hash = cfg.config_hash();
    meta.upstream_digests["dataset"] = data.digest;
    meta.upstream_digests["grounder"] = b.digests["grounder"];
    meta.upstream_digests["mask_vae"] = b.digests["mask_vae"];
    meta.upstream_digests["prompt_generator"] = b.digests["prompt_generator"];
    meta.extra["latent_scale"] = format_double(b.latent_scale);
    meta.extra["strategy"] = prompter.assignment.strategy;
    meta.extra["depth"] = std::to_string(prompter.depth);
    std::string steps;
    for (size_t i = 0; i < prompter.assignment.steps.size(); ++i)
        steps += (i ? "," : "") + std::to_string(prompter.assignment.steps[i]);
    meta.extra["steps"] = steps;
    save_checkpoint(paths.checkpoint("prompter"), meta, prompter.params);
    write_stage_report(paths.report("stage3_tune_prompts"), cfg, rep);
    return rep;
}

EvalReport cmd_evaluate(const RunConfig& cfg, const std::string& split, bool dump_saliency) {
    cfg.validate();
    PipelinePaths paths(cfg.out_dir);
    paths.ensure_dirs();
    auto data = open_dataset(cfg, paths, "evaluate");
    Bundle b = load_bundle(cfg, BundleNeed::Full);

    EvalOptions eo;
    eo.split = split;
    eo.dump_saliency = dump_saliency;
    if (dump_saliency) eo.saliency_dir = paths.saliency_dir();
    EvalReport rep = evaluate_models(cfg, *b.grounder, b.vae.get(), b.gen.get(), b.prompter.get(),
                                     b.latent_scale, *data.reader, data.manifest, eo);
    rep.digests = b.digests;
    rep.digests["dataset"] = data.digest;
    write_eval_report(paths.report("eval_" + split), rep);
    return rep;
}

void cmd_ablate(const RunConfig& cfg, const std::string& which) {
    cfg.validate();
    PipelinePaths paths(cfg.out_dir);
    paths.ensure_dirs();
    auto data = open_dataset(cfg, paths, "ablate");

    json out;
    out["ablation"] = which;
    out["config_hash"] = cfg.config_hash();
    json rows = json::array();
    TrajectoryCache cache;

    if (which == "depth") {
        Bundle b = load_bundle(cfg, BundleNeed::Frozen);
        out["digests"] = b.digests;
        const uint64_t base = cfg.seed_for("ablate_depth");
        for (int64_t d : {int64_t{1}, int64_t{3}, int64_t{6}, int64_t{9}, int64_t{12}}) {
            RunConfig cfg_d = cfg;
            cfg_d.depth = d;
            cfg_d.validate();
            Rng init(derive_seed(base, "init", static_cast<uint64_t>(d)));
            Prompter prompter(cfg_d, init);
            const auto srep =
                run_stage3(cfg_d, *b.grounder, *b.vae, *b.gen, prompter, *data.reader,
                           data.manifest, b.latent_scale,
                           derive_seed(base, "tune", static_cast<uint64_t>(d)));
            EvalOptions eo;
            eo.split = "val";
            eo.traj_cache = &cache;
            const auto er = evaluate_models(cfg_d, *b.grounder, b.vae.get(), b.gen.get(),
                                            &prompter, b.latent_scale, *data.reader, data.manifest,
                                            eo);
            rows.push_back({{"depth", d},
                            {"tunable_params", prompter.params.count_params(true)},
                            {"r1", er.r_at.at(1)},
                            {"r5", er.r_at.at(5)},
                            {"ub", er.ub},
                            {"final_loss", srep.epoch_loss.back()}});
        }
    } else if (which == "strategy") {
        Bundle b = load_bundle(cfg, BundleNeed::Frozen);
        out["digests"] = b.digests;
        const uint64_t init_seed = cfg.seed_for("ablate_strategy_init");
        const uint64_t tune_seed = cfg.seed_for("ablate_strategy_tune");
        for (const std::string strategy : {"reverse", "sequential"}) {
            RunConfig cfg_s = cfg;
            cfg_s.strategy = strategy;
            cfg_s.validate();
            Rng init(init_seed);
            Prompter prompter(cfg_s, init);
            const auto srep = run_stage3(cfg_s, *b.grounder, *b.vae, *b.gen, prompter,
                                         *data.reader, data.manifest, b.latent_scale, tune_seed);
            EvalOptions eo;
            eo.split = "val";
            eo.traj_cache = &cache;
            const auto er = evaluate_models(cfg_s, *b.grounder, b.vae.get(), b.gen.get(),
                                            &prompter, b.latent_scale, *data.reader, data.manifest,
                                            eo);
            json steps = json::array();
            for (int64_t s : prompter.assignment.steps) steps.push_back(s);
            rows.push_back({{"strategy", strategy},
                            {"steps", steps},
                            {"r1", er.r_at.at(1)},
                            {"r5", er.r_at.at(5)},
                            {"ub", er.ub},
                            {"final_loss", srep.epoch_loss.back()}});
        }
    } else if (which == "prompts") {
        Bundle b = load_bundle(cfg, BundleNeed::Full);
        out["digests"] = b.digests;
        struct Variant {
            const char* name;
            PromptDrop drop;
            bool promptless;
        };
        const Variant variants[] = {
            {"full", {}, false},
            {"drop_p_v", {true, false, false, false}, false},
            {"drop_gp_v", {false, true, false, false}, false},
            {"drop_p_l", {false, false, true, false}, false},
            {"drop_gp_l", {false, false, false, true}, false},
            {"drop_all", {true, true, true, true}, false},
            {"promptless", {}, true},
        };
        for (const auto& v : variants) {
            EvalOptions eo;
            eo.split = "val";
            eo.drop = v.drop;
            eo.promptless = v.promptless;
            eo.traj_cache = &cache;
            const auto er = evaluate_models(cfg, *b.grounder, b.vae.get(), b.gen.get(),
                                            b.prompter.get(), b.latent_scale, *data.reader,
                                            data.manifest, eo);
            rows.push_back({{"variant", v.name},
                            {"r1", er.r_at.at(1)},
                            {"r5", er.r_at.at(5)},
                            {"ub", er.ub}});
        }
    } else {
        throw ConfigError("unknown ablation " + which + " (expected depth, strategy, or prompts)");
    }

    out["rows"] = rows;
    write_file(paths.report("ablate_" + which), out.dump(2) + "\n");
}

void cmd_report(const RunConfig& cfg) {
    cfg.validate();
    PipelinePaths paths(cfg.out_dir);
    paths.ensure_dirs();

    Rng g_rng(cfg.seed_for("stage0_init"));
    Grounder grounder(cfg, g_rng);
    auto vae = make_mask_vae<float>(cfg.scene.image_size, cfg.latent_channels,
                                    cfg.seed_for("stage1_init"));
    Rng d_rng(cfg.seed_for("stage2_init"));
    Dit gen(cfg, d_rng);
    Rng p_rng(cfg.seed_for("stage3_init"));
    Prompter prompter(cfg, p_rng);

    const int64_t g_params = grounder.params.count_params();
    const int64_t v_params = vae->params.count_params();
    const int64_t d_params = gen.params.count_params();
    const int64_t p_params = prompter.params.count_params();
    const int64_t tunable = prompter.params.count_params(/*trainable_only=*/true);
    const int64_t bundle = g_params + v_params + d_params + p_params;

    // Instrumented counts on the convolutional model, where the gemm counter
    // and the analytic convention coincide.
    Tensor mask({1, cfg.scene.image_size, cfg.scene.image_size});
    uint64_t enc_measured = 0, dec_measured = 0;
    {
        FlopScope scope;
        auto [mu, lv] = encode(*vae, mask);
        enc_measured = scope.flops();
        FlopScope dscope;
        decode(*vae, mu);
        dec_measured = dscope.flops();
    }

    const uint64_t dit_step = dit_forward_flops(cfg);
    const uint64_t adapter = adapter_forward_flops(cfg);
    const uint64_t prompted_grounder = grounder_forward_flops(cfg, cfg.depth);
    const uint64_t eval_per_sample = grounder_forward_flops(cfg, 0)  // condition pass
                                     + static_cast<uint64_t>(cfg.t_sample) * dit_step +
                                     static_cast<uint64_t>(cfg.depth) *
                                         (vae_decode_flops(cfg) + 2 * adapter) +
                                     prompted_grounder;

    json j;
    j["config_hash"] = cfg.config_hash();
    j["params"] = {
        {"grounder", g_params},
        {"mask_vae", v_params},
        {"prompt_generator", d_params},
        {"prompter", p_params},
        {"bundle_total", bundle},
        {"stage3_tunable", tunable},
        {"stage3_tunable_fraction", static_cast<double>(tunable) / static_cast<double>(bundle)},
    };
    j["flops"] = {
        {"grounder_forward", grounder_forward_flops(cfg, 0)},
        {"grounder_forward_prompted", prompted_grounder},
        {"vae_encode", vae_encode_flops(cfg)},
        {"vae_encode_instrumented", enc_measured},
        {"vae_decode", vae_decode_flops(cfg)},
        {"vae_decode_instrumented", dec_measured},
        {"generator_step", dit_step},
        {"generator_trajectory", static_cast<uint64_t>(cfg.t_sample) * dit_step},
        {"adapter_forward", adapter},
        {"prompted_eval_per_sample", eval_per_sample},
    };
    write_file(paths.report("complexity"), j.dump(2) + "\n");
}

}  // namespace dp
