#include "diffprompt/config.hpp"

#include <fstream>

#include <json.hpp>

#include "diffprompt/errors.hpp"
#include "diffprompt/rng.hpp"

namespace dp {

using json = nlohmann::ordered_json;

namespace {

json stage_to_json(const StageConfig& s) {
    return json{{"epochs", s.epochs}, {"batch", s.batch}, {"lr", s.lr},
                {"weight_decay", s.weight_decay}};
}

StageConfig stage_from_json(const json& j, const StageConfig& base) {
    StageConfig s = base;
    s.epochs = j.value("epochs", s.epochs);
    s.batch = j.value("batch", s.batch);
    s.lr = j.value("lr", s.lr);
    s.weight_decay = j.value("weight_decay", s.weight_decay);
    return s;
}

json to_json_impl(const RunConfig& c, bool include_paths) {
    json j;
    j["scene"] = json::parse(scene_config_to_json_string(c.scene));
    j["corpus"] = {{"train_count", c.train_count},
                   {"val_count", c.val_count},
                   {"test_count", c.test_count}};
    j["grounder"] = {{"layers", c.grounder_layers},   {"width", c.grounder_width},
                     {"heads", c.grounder_heads},     {"patch", c.grounder_patch},
                     {"mlp_ratio", c.grounder_mlp_ratio}, {"anchor_scales", c.anchor_scales}};
    j["vae"] = {{"latent_channels", c.latent_channels}, {"lambda_kl", c.lambda_kl}};
    j["dit"] = {{"blocks", c.dit_blocks}, {"width", c.dit_width},
                {"heads", c.dit_heads},   {"patch", c.dit_patch},
                {"time_dim", c.dit_time_dim}, {"use_sampled_z", c.use_sampled_z}};
    j["diffusion"] = {{"t_forward", c.t_forward},
                      {"t_sample", c.t_sample},
                      {"cosine_s", c.cosine_s},
                      {"beta_cap", c.beta_cap}};
    j["prompting"] = {{"depth", c.depth}, {"n_p", c.n_p}, {"n_gp", c.n_gp},
                      {"strategy", c.strategy}};
    j["stages"] = {{"stage0", stage_to_json(c.stage0)},
                   {"stage1", stage_to_json(c.stage1)},
                   {"stage2", stage_to_json(c.stage2)},
                   {"stage3", stage_to_json(c.stage3)},
                   {"stage0_max_train", c.stage0_max_train},
                   {"stage1_max_train", c.stage1_max_train},
                   {"stage2_max_train", c.stage2_max_train},
                   {"stage3_max_train", c.stage3_max_train}};
    j["eval"] = {{"iou_match_thresh", c.iou_match_thresh},
                 {"nms_thresh", c.nms_thresh},
                 {"detect_cap", c.detect_cap},
                 {"eval_max_samples", c.eval_max_samples}};
    j["master_seed"] = c.master_seed;
    if (include_paths) j["out_dir"] = c.out_dir;
    return j;
}

}  // namespace

void RunConfig::validate() const {
    scene.validate();
    if (train_count < 1 || val_count < 1 || test_count < 1)
        throw ConfigError("split counts must be positive");
    if (grounder_layers < 1 || grounder_width < 8 || grounder_heads < 1 ||
        grounder_width % grounder_heads != 0)
        throw ConfigError("invalid grounder dimensions");
    if (scene.image_size % grounder_patch != 0)
        throw ConfigError("image_size must be divisible by grounder patch");
    if (anchor_scales.empty()) throw ConfigError("anchor_scales empty");
    if (latent_channels < 1) throw ConfigError("latent_channels must be positive");
    if (lambda_kl < 0) throw ConfigError("lambda_kl must be non-negative");
    if (dit_blocks < 1 || dit_width < 8 || dit_heads < 1 || dit_width % dit_heads != 0)
        throw ConfigError("invalid dit dimensions");
    const int64_t latent_side = scene.image_size / 8;
    if (latent_side % dit_patch != 0)
        throw ConfigError("latent side must be divisible by dit patch");
    if (dit_time_dim < 2 || dit_time_dim % 2 != 0)
        throw ConfigError("dit_time_dim must be even and >= 2");
    if (t_forward < 2) throw ConfigError("t_forward must be >= 2");
    if (t_sample < 1 || t_sample > t_forward || t_forward % t_sample != 0)
        throw ConfigError("t_sample must evenly divide t_forward");
    if (depth < 0 || depth > grounder_layers)
        throw ConfigError("prompt depth must lie in [0, grounder layers]");
    if (depth > 0 && t_sample - 2 * (depth - 1) < 0)
        throw ConfigError("prompt depth too large for t_sample (step rule would go negative)");
    if (n_p < 1 || n_gp < 1) throw ConfigError("prompt token counts must be positive");
    if (strategy != "reverse" && strategy != "sequential")
        throw ConfigError("strategy must be reverse or sequential");
    for (const StageConfig* s : {&stage0, &stage1, &stage2, &stage3})
        if (s->epochs < 1 || s->batch < 1 || s->lr <= 0 || s->weight_decay < 0)
            throw ConfigError("invalid stage config");
    for (int64_t cap : {stage0_max_train, stage1_max_train, stage2_max_train, stage3_max_train})
        if (cap < 0) throw ConfigError("stage max_train caps must be non-negative");
    if (iou_match_thresh <= 0 || iou_match_thresh >= 1 || nms_thresh <= 0 || nms_thresh >= 1)
        throw ConfigError("thresholds must lie in (0,1)");
    if (detect_cap < 1) throw ConfigError("detect_cap must be positive");
}

std::string RunConfig::to_json_string() const { return to_json_impl(*this, true).dump(2); }

RunConfig RunConfig::from_json_string(const std::string& text) {
    json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw ConfigError("unparseable config JSON");
    RunConfig c;
    if (j.contains("scene")) c.scene = scene_config_from_json_string(j["scene"].dump());
    if (j.contains("corpus")) {
        const auto& jc = j["corpus"];
        c.train_count = jc.value("train_count", c.train_count);
        c.val_count = jc.value("val_count", c.val_count);
        c.test_count = jc.value("test_count", c.test_count);
    }
    if (j.contains("grounder")) {
        const auto& jg = j["grounder"];
        c.grounder_layers = jg.value("layers", c.grounder_layers);
        c.grounder_width = jg.value("width", c.grounder_width);
        c.grounder_heads = jg.value("heads", c.grounder_heads);
        c.grounder_patch = jg.value("patch", c.grounder_patch);
        c.grounder_mlp_ratio = jg.value("mlp_ratio", c.grounder_mlp_ratio);
        if (jg.contains("anchor_scales"))
            c.anchor_scales = jg["anchor_scales"].get<std::vector<int64_t>>();
    }
    if (j.contains("vae")) {
        const auto& jv = j["vae"];
        c.latent_channels = jv.value("latent_channels", c.latent_channels);
        c.lambda_kl = jv.value("lambda_kl", c.lambda_kl);
    }
    if (j.contains("dit")) {
        const auto& jd = j["dit"];
        c.dit_blocks = jd.value("blocks", c.dit_blocks);
        c.dit_width = jd.value("width", c.dit_width);
        c.dit_heads = jd.value("heads", c.dit_heads);
        c.dit_patch = jd.value("patch", c.dit_patch);
        c.dit_time_dim = jd.value("time_dim", c.dit_time_dim);
        c.use_sampled_z = jd.value("use_sampled_z", c.use_sampled_z);
    }
    if (j.contains("diffusion")) {
        const auto& jd = j["diffusion"];
        c.t_forward = jd.value("t_forward", c.t_forward);
        c.t_sample = jd.value("t_sample", c.t_sample);
        c.cosine_s = jd.value("cosine_s", c.cosine_s);
        c.beta_cap = jd.value("beta_cap", c.beta_cap);
    }
    if (j.contains("prompting")) {
        const auto& jp = j["prompting"];
        c.depth = jp.value("depth", c.depth);
        c.n_p = jp.value("n_p", c.n_p);
        c.n_gp = jp.value("n_gp", c.n_gp);
        c.strategy = jp.value("strategy", c.strategy);
    }
    if (j.contains("stages")) {
        const auto& js = j["stages"];
        if (js.contains("stage0")) c.stage0 = stage_from_json(js["stage0"], c.stage0);
        if (js.contains("stage1")) c.stage1 = stage_from_json(js["stage1"], c.stage1);
        if (js.contains("stage2")) c.stage2 = stage_from_json(js["stage2"], c.stage2);
        if (js.contains("stage3")) c.stage3 = stage_from_json(js["stage3"], c.stage3);
        c.stage0_max_train = js.value("stage0_max_train", c.stage0_max_train);
        c.stage1_max_train = js.value("stage1_max_train", c.stage1_max_train);
        c.stage2_max_train = js.value("stage2_max_train", c.stage2_max_train);
        c.stage3_max_train = js.value("stage3_max_train", c.stage3_max_train);
    }
    if (j.contains("eval")) {
        const auto& je = j["eval"];
        c.iou_match_thresh = je.value("iou_match_thresh", c.iou_match_thresh);
        c.nms_thresh = je.value("nms_thresh", c.nms_thresh);
        c.detect_cap = je.value("detect_cap", c.detect_cap);
        c.eval_max_samples = je.value("eval_max_samples", c.eval_max_samples);
    }
    c.master_seed = j.value("master_seed", c.master_seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.validate();
    return c;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json_string(text);
}

void RunConfig::save_json_file(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ConfigError("cannot write config " + path);
    f << to_json_string() << "\n";
}

std::string RunConfig::config_hash() const {
    const std::string canonical = to_json_impl(*this, false).dump();
    uint64_t h = fnv1a(canonical);
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

uint64_t RunConfig::seed_for(const std::string& purpose) const {
    return derive_seed(master_seed, purpose);
}

}  // namespace dp
