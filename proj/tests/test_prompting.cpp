#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "diffprompt/prompting.hpp"
#include "diffprompt/rng.hpp"
#include "diffprompt/schedule.hpp"
#include "diffprompt/synthdata.hpp"
#include "support/grad_check.hpp"

using namespace dp;

namespace {

RunConfig prompt_tiny_config() {
    RunConfig cfg;
    cfg.scene.image_size = 32;
    cfg.grounder_layers = 2;
    cfg.grounder_width = 16;
    cfg.grounder_heads = 2;
    cfg.anchor_scales = {12, 20};
    cfg.depth = 2;
    cfg.dit_blocks = 1;
    cfg.dit_width = 32;
    cfg.dit_heads = 2;
    cfg.dit_time_dim = 32;
    cfg.validate();
    return cfg;
}

// Hand-built trajectory with random latents at every index.
LatentTrajectory fake_trajectory(int64_t t_sample, const std::vector<int64_t>& shape,
                                 uint64_t seed, int64_t stride = 4) {
    LatentTrajectory traj;
    traj.seed = seed;
    traj.stride = stride;
    Rng rng(seed);
    for (int64_t s = 0; s <= t_sample; ++s) {
        Tensor z(shape);
        z.fill_normal(rng);
        traj.latents.push_back(std::move(z));
    }
    return traj;
}

int64_t adapter_param_formula(int64_t image_size, int64_t n_p, int64_t width) {
    const int64_t side = image_size / 8;
    return (8 * 9 + 8)            // conv 1->8, k3
           + (16 * 8 * 9 + 16)    // conv 8->16
           + (32 * 16 * 9 + 32)   // conv 16->32
           + (2 * 32 + 2)         // 1x1 reduce 32->2
           + (2 * side * side) * (n_p * width) + n_p * width;
}

}  // namespace

TEST_CASE("select_steps pins the paper step rule") {
    auto rev = select_steps("reverse", 9, 25);
    CHECK(rev.steps == std::vector<int64_t>{25, 23, 21, 19, 17, 15, 13, 11, 9});
    auto seq = select_steps("sequential", 9, 25);
    CHECK(seq.steps == std::vector<int64_t>{9, 11, 13, 15, 17, 19, 21, 23, 25});
    CHECK(select_steps("reverse", 1, 25).steps == std::vector<int64_t>{25});
    CHECK(select_steps("reverse", 0, 25).steps.empty());

    for (int64_t d : {1, 3, 6, 9, 12}) {
        auto r = select_steps("reverse", d, 25);
        auto s = select_steps("sequential", d, 25);
        CHECK(std::is_sorted(r.steps.rbegin(), r.steps.rend()));
        CHECK(std::is_sorted(s.steps.begin(), s.steps.end()));
        auto rs = r.steps;
        std::sort(rs.begin(), rs.end());
        CHECK(rs == s.steps);  // identical step multiset
        for (auto v : r.steps) {
            CHECK(v >= 0);
            CHECK(v <= 25);
        }
        // Strictly descending.
        for (size_t i = 1; i < r.steps.size(); ++i) CHECK(r.steps[i - 1] > r.steps[i]);
    }

    CHECK_THROWS_AS(select_steps("reverse", 14, 25), ConfigError);
    CHECK_THROWS_AS(select_steps("reverse", -1, 25), ConfigError);
    CHECK_THROWS_AS(select_steps("diagonal", 3, 25), ConfigError);
}

TEST_CASE("adapter shape contract and parameter arithmetic") {
    Rng rng(61);
    ParamSetT<float> ps;
    AdapterT<float> small(ps, "a", 32, 4, 16, rng);
    CHECK(ps.count_params() == adapter_param_formula(32, 4, 16));

    ParamSetT<float> ps64;
    AdapterT<float> full(ps64, "b", 64, 4, 64, rng);
    CHECK(ps64.count_params() == 38978);
    CHECK(ps64.count_params() == adapter_param_formula(64, 4, 64));

    TapeT<float> tape(false);
    Tensor sal({1, 32, 32});
    Rng sr(62);
    sal.fill_uniform(sr, 0.0f, 1.0f);
    auto p = small.forward(tape, tape.leaf(sal));
    CHECK(p.rows() == 4);
    CHECK(p.cols() == 16);

    Tensor bad({1, 16, 16});
    CHECK_THROWS_AS(small.forward(tape, tape.leaf(bad)), ShapeError);
}

TEST_CASE("prompter trainable count matches hand arithmetic at desk scale") {
    auto cfg = prompt_tiny_config();
    Rng rng(63);
    PrompterT<float> tiny(cfg, rng);
    const int64_t expect_tiny =
        2 * adapter_param_formula(32, 4, 16) + 2 * 2 * (4 * 16);
    CHECK(tiny.params.count_params() == expect_tiny);
    CHECK(tiny.params.count_params(/*trainable_only=*/true) == expect_tiny);

    RunConfig full;  // pinned defaults: depth 9, N_p = N_gp = 4, width 64
    Rng rng2(64);
    PrompterT<float> prompter(full, rng2);
    CHECK(prompter.params.count_params() == 2 * 38978 + 2 * 9 * 4 * 64);
    CHECK(prompter.params.count_params() == 82564);
}

TEST_CASE("make_prompts decodes steps, guards freezing, and keeps GP input-independent") {
    auto cfg = prompt_tiny_config();
    Rng rng(65);
    PrompterT<float> prompter(cfg, rng);
    auto vae = make_mask_vae<float>(cfg.scene.image_size, cfg.latent_channels, 66);
    auto shape = std::vector<int64_t>{cfg.latent_channels, 4, 4};
    auto traj = fake_trajectory(cfg.t_sample, shape, 67);

    TapeT<float> tape(false);
    CHECK_THROWS_AS(make_prompts(tape, prompter, traj, *vae), DependencyError);
    vae->params.set_trainable(false);

    auto ps = make_prompts(tape, prompter, traj, *vae);
    REQUIRE(ps.depth() == 2);
    ps.check_consistent();
    for (int64_t j = 0; j < 2; ++j) {
        CHECK(ps.p_v[static_cast<size_t>(j)].rows() == cfg.n_p);
        CHECK(ps.p_v[static_cast<size_t>(j)].cols() == cfg.grounder_width);
        CHECK(ps.p_l[static_cast<size_t>(j)].rows() == cfg.n_p);
        CHECK(ps.gp_v[static_cast<size_t>(j)].rows() == cfg.n_gp);
        CHECK(ps.gp_l[static_cast<size_t>(j)].rows() == cfg.n_gp);
    }
    // Reverse strategy reads distinct steps (25 then 23): layers differ.
    CHECK(ps.p_v[0].val().data != ps.p_v[1].val().data);

    // Input-specific prompts differ across trajectories; global prompts do not.
    auto traj2 = fake_trajectory(cfg.t_sample, shape, 99);
    auto ps2 = make_prompts(tape, prompter, traj2, *vae);
    CHECK(ps2.p_v[0].val().data != ps.p_v[0].val().data);
    CHECK(ps2.p_l[0].val().data != ps.p_l[0].val().data);
    CHECK(ps2.gp_v[0].val().data == ps.gp_v[0].val().data);
    CHECK(ps2.gp_l[0].val().data == ps.gp_l[0].val().data);

    // Scale is undone before decoding: different scale, different prompts.
    auto ps3 = make_prompts(tape, prompter, traj, *vae, 2.0);
    CHECK(ps3.p_v[0].val().data != ps.p_v[0].val().data);
    CHECK_THROWS_AS(make_prompts(tape, prompter, traj, *vae, 0.0), ConfigError);

    // Step index beyond a short trajectory.
    auto short_traj = fake_trajectory(5, shape, 68);
    CHECK_THROWS_AS(make_prompts(tape, prompter, short_traj, *vae), ConfigError);
}

TEST_CASE("zeroed adapter output layer yields zero P tokens and untouched GP tokens") {
    auto cfg = prompt_tiny_config();
    Rng rng(69);
    PrompterT<float> prompter(cfg, rng);
    auto vae = make_mask_vae<float>(cfg.scene.image_size, cfg.latent_channels, 70);
    vae->params.set_trainable(false);
    auto traj = fake_trajectory(cfg.t_sample, {cfg.latent_channels, 4, 4}, 71);

    prompter.adapter_v->out->w.value.fill(0.0f);
    prompter.adapter_v->out->b.value.fill(0.0f);
    prompter.adapter_l->out->w.value.fill(0.0f);
    prompter.adapter_l->out->b.value.fill(0.0f);

    TapeT<float> tape(false);
    auto ps = make_prompts(tape, prompter, traj, *vae);
    for (int64_t j = 0; j < ps.depth(); ++j) {
        for (auto v : ps.p_v[static_cast<size_t>(j)].val().data) CHECK(v == 0.0f);
        for (auto v : ps.p_l[static_cast<size_t>(j)].val().data) CHECK(v == 0.0f);
        CHECK(ps.gp_v[static_cast<size_t>(j)].val().data ==
              prompter.gp_v[static_cast<size_t>(j)].value.data);
    }
}

TEST_CASE("drop semantics zero the chosen groups and preserve shapes") {
    auto cfg = prompt_tiny_config();
    Rng rng(72);
    PrompterT<float> prompter(cfg, rng);
    auto vae = make_mask_vae<float>(cfg.scene.image_size, cfg.latent_channels, 73);
    vae->params.set_trainable(false);
    auto traj = fake_trajectory(cfg.t_sample, {cfg.latent_channels, 4, 4}, 74);

    TapeT<float> tape(false);
    auto base = make_prompts(tape, prompter, traj, *vae);

    auto ps = make_prompts(tape, prompter, traj, *vae);
    drop_prompt_groups(tape, ps, PromptDrop{});  // drop nothing
    for (int64_t j = 0; j < ps.depth(); ++j) {
        CHECK(ps.p_v[static_cast<size_t>(j)].val().data ==
              base.p_v[static_cast<size_t>(j)].val().data);
        CHECK(ps.gp_l[static_cast<size_t>(j)].val().data ==
              base.gp_l[static_cast<size_t>(j)].val().data);
    }

    PromptDrop d;
    d.p_l = true;
    drop_prompt_groups(tape, ps, d);
    for (int64_t j = 0; j < ps.depth(); ++j) {
        for (auto v : ps.p_l[static_cast<size_t>(j)].val().data) CHECK(v == 0.0f);
        CHECK(ps.p_l[static_cast<size_t>(j)].val().shape ==
              base.p_l[static_cast<size_t>(j)].val().shape);
        CHECK(ps.p_v[static_cast<size_t>(j)].val().data ==
              base.p_v[static_cast<size_t>(j)].val().data);
        CHECK(ps.gp_v[static_cast<size_t>(j)].val().data ==
              base.gp_v[static_cast<size_t>(j)].val().data);
    }

    PromptDrop all{true, true, true, true};
    drop_prompt_groups(tape, ps, all);
    ps.check_consistent();
    for (int64_t j = 0; j < ps.depth(); ++j) {
        for (auto v : ps.gp_v[static_cast<size_t>(j)].val().data) CHECK(v == 0.0f);
        for (auto v : ps.gp_l[static_cast<size_t>(j)].val().data) CHECK(v == 0.0f);
    }
}

TEST_CASE("prompt_tune_step guards freeze contracts and trains only the prompter") {
    auto cfg = prompt_tiny_config();
    Rng rng(75);
    Prompter prompter(cfg, rng);
    Grounder grounder(cfg, rng);
    Dit gen(cfg, rng);
    auto vae = make_mask_vae<float>(cfg.scene.image_size, cfg.latent_channels, 76);
    auto sched = build_cosine_schedule(cfg.t_forward);
    AdamWT<float> opt(prompter.params, 1e-3f);

    std::vector<Sample> batch;
    std::vector<GrounderEmbed> embeds;
    for (uint64_t s = 0; s < 3; ++s) batch.push_back(generate_sample(200 + s, cfg.scene));

    CHECK_THROWS_AS(prompt_tune_step(prompter, grounder, *vae, gen, batch, embeds, sched,
                                     cfg.t_sample, opt, 1),
                    DependencyError);
    grounder.params.set_trainable(false);
    vae->params.set_trainable(false);
    gen.params.set_trainable(false);
    for (const auto& s : batch) embeds.push_back(grounder_embed(grounder, s.image, s.caption));

    std::vector<Sample> empty;
    std::vector<GrounderEmbed> none;
    CHECK_THROWS_AS(prompt_tune_step(prompter, grounder, *vae, gen, empty, none, sched,
                                     cfg.t_sample, opt, 1),
                    ConfigError);
    std::vector<GrounderEmbed> wrong(1, embeds[0]);
    CHECK_THROWS_AS(prompt_tune_step(prompter, grounder, *vae, gen, batch, wrong, sched,
                                     cfg.t_sample, opt, 1),
                    ShapeError);

    auto snapshot = [](const ParamSetT<float>& ps) {
        std::vector<float> bytes;
        for (auto* p : ps.params())
            bytes.insert(bytes.end(), p->value.data.begin(), p->value.data.end());
        return bytes;
    };
    auto grounder_before = snapshot(grounder.params);
    auto vae_before = snapshot(vae->params);
    auto gen_before = snapshot(gen.params);
    auto prompter_before = snapshot(prompter.params);

    for (int step = 0; step < 2; ++step) {
        double loss = prompt_tune_step(prompter, grounder, *vae, gen, batch, embeds, sched,
                                       cfg.t_sample, opt, 1);
        CHECK(loss >= 0.0);
        CHECK(std::isfinite(loss));
    }
    CHECK(snapshot(grounder.params) == grounder_before);
    CHECK(snapshot(vae->params) == vae_before);
    CHECK(snapshot(gen.params) == gen_before);
    CHECK(snapshot(prompter.params) != prompter_before);
}

TEST_CASE("adapter and global-prompt gradients match finite differences") {
    auto cfg = prompt_tiny_config();
    Rng rng(77);
    PrompterT<double> prompter(cfg, rng);
    GrounderT<double> grounder(cfg, rng);
    auto vae = make_mask_vae<double>(cfg.scene.image_size, cfg.latent_channels, 78);
    grounder.params.set_trainable(false);
    vae->params.set_trainable(false);

    auto traj = fake_trajectory(cfg.t_sample, {cfg.latent_channels, 4, 4}, 79);
    auto sample = generate_sample(80, cfg.scene);
    Box gt{sample.box[0], sample.box[1], sample.box[2], sample.box[3]};

    auto build_loss = [&](TapeT<double>& tape) {
        auto prompts = make_prompts(tape, prompter, traj, *vae);
        auto feats = grounder.encode_with_prompts(tape, sample.image, sample.caption, prompts);
        auto [logits, offsets] = grounder.head_graph(tape, feats);
        return grounder_loss_graph(logits, offsets, grounder.anchors, gt, grounder.image_size);
    };
    auto res = dp::testing::check_gradients(prompter.params, build_loss);
    CAPTURE(res.worst);
    CHECK(res.checked == prompter.params.count_params());
    CHECK(res.max_rel_err <= 1e-3);
}
