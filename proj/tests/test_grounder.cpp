#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "diffprompt/grounder.hpp"
#include "diffprompt/rng.hpp"
#include "diffprompt/synthdata.hpp"
#include "support/grad_check.hpp"

using namespace dp;

namespace {

RunConfig tiny_config() {
    RunConfig cfg;
    cfg.scene.image_size = 32;
    cfg.grounder_layers = 2;
    cfg.grounder_width = 16;
    cfg.grounder_heads = 2;
    cfg.anchor_scales = {12, 20};
    cfg.depth = 2;
    cfg.validate();
    return cfg;
}

template <typename T>
ValueT<T> random_prompt_leaf(TapeT<T>& tape, Rng& rng, int64_t n, int64_t d) {
    TensorT<T> t({n, d});
    t.fill_normal(rng, T(0.5));
    return tape.leaf(std::move(t));
}

template <typename T>
PromptSetT<T> random_prompts(TapeT<T>& tape, Rng& rng, int64_t depth, int64_t n_p, int64_t n_gp,
                             int64_t width) {
    PromptSetT<T> ps;
    for (int64_t j = 0; j < depth; ++j) {
        ps.p_v.push_back(random_prompt_leaf(tape, rng, n_p, width));
        ps.gp_v.push_back(random_prompt_leaf(tape, rng, n_gp, width));
        ps.p_l.push_back(random_prompt_leaf(tape, rng, n_p, width));
        ps.gp_l.push_back(random_prompt_leaf(tape, rng, n_gp, width));
    }
    return ps;
}

double iou_oracle(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min<double>(a.x1, b.x1) - std::max<double>(a.x0, b.x0));
    const double iy = std::max(0.0, std::min<double>(a.y1, b.y1) - std::max<double>(a.y0, b.y0));
    const double inter = ix * iy;
    const double ua = (a.x1 - a.x0) * double(a.y1 - a.y0) + (b.x1 - b.x0) * double(b.y1 - b.y0) -
                      inter;
    return ua > 0 ? inter / ua : 0.0;
}

}  // namespace

TEST_CASE("anchor grid covers every location at every scale") {
    auto anchors = build_anchors(64, 8, {16, 28, 48});
    REQUIRE(anchors.size() == 3 * 64);
    // Scale-major layout; first block is the 16px scale, row-major.
    CHECK(anchors[0].cx == doctest::Approx(4.0));
    CHECK(anchors[0].cy == doctest::Approx(4.0));
    CHECK(anchors[0].s == doctest::Approx(16.0));
    CHECK(anchors[1].cx == doctest::Approx(12.0));
    CHECK(anchors[8].cy == doctest::Approx(12.0));
    CHECK(anchors[64].s == doctest::Approx(28.0));
    CHECK(anchors[128].s == doctest::Approx(48.0));
    CHECK(anchors.back().cx == doctest::Approx(60.0));
}

TEST_CASE("decode_box recovers the prior at zero offsets and responds to each offset") {
    Anchor a{32.0, 32.0, 16.0};
    Box prior = decode_box(a, 0, 0, 0, 0, 64);
    CHECK(prior.x0 == doctest::Approx(24.0f));
    CHECK(prior.y0 == doctest::Approx(24.0f));
    CHECK(prior.x1 == doctest::Approx(40.0f));
    CHECK(prior.y1 == doctest::Approx(40.0f));

    Box wide = decode_box(a, 0, 0, std::log(2.0), 0, 64);
    CHECK(wide.x1 - wide.x0 == doctest::Approx(32.0f));
    CHECK(wide.y1 - wide.y0 == doctest::Approx(16.0f));

    Box shifted = decode_box(a, 0.25, -0.25, 0, 0, 64);
    CHECK(0.5 * (shifted.x0 + shifted.x1) == doctest::Approx(36.0f));
    CHECK(0.5 * (shifted.y0 + shifted.y1) == doctest::Approx(28.0f));

    // Clipping keeps boxes inside the image.
    Box clipped = decode_box({2.0, 2.0, 16.0}, -1.0, -1.0, 1.0, 1.0, 64);
    CHECK(clipped.x0 >= 0.0f);
    CHECK(clipped.y0 >= 0.0f);
    CHECK(clipped.x1 >= clipped.x0);
}

TEST_CASE("anchor assignment matches an exhaustive oracle") {
    auto anchors = build_anchors(64, 8, {16, 28, 48});
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const float x0 = static_cast<float>(rng.uniform(0.0, 44.0));
        const float y0 = static_cast<float>(rng.uniform(0.0, 44.0));
        const float w = static_cast<float>(rng.uniform(8.0, 20.0));
        const float h = static_cast<float>(rng.uniform(8.0, 20.0));
        Box gt{x0, y0, x0 + w, y0 + h};

        auto assign = assign_anchors(anchors, gt, 64);

        // Oracle: recompute every IoU from scratch.
        std::vector<double> ious;
        double best = -1.0;
        size_t best_i = 0;
        for (size_t i = 0; i < anchors.size(); ++i) {
            ious.push_back(iou_oracle(anchor_prior_box(anchors[i], 64), gt));
            if (ious.back() > best) {
                best = ious.back();
                best_i = i;
            }
        }
        int64_t n_pos = 0;
        for (size_t i = 0; i < anchors.size(); ++i) {
            int expect;
            if (ious[i] >= 0.6 || i == best_i)
                expect = 1;
            else if (ious[i] < 0.4)
                expect = 0;
            else
                expect = -1;
            CHECK(assign.label[i] == expect);
            n_pos += expect == 1;
        }
        CHECK(assign.n_pos == n_pos);
        CHECK(assign.n_pos >= 1);
    }
}

TEST_CASE("fresh model with zero features scores 0.5 everywhere at the priors") {
    auto cfg = tiny_config();
    Rng rng(7);
    GrounderT<float> model(cfg, rng);

    TapeT<float> tape(false);
    GrounderFeaturesT<float> feats;
    feats.vis = tape.leaf(Tensor({model.n_vis_tokens(), model.width}));
    feats.txt = tape.leaf(Tensor({model.caption_len, model.width}));
    feats.txt_valid.assign(static_cast<size_t>(model.caption_len), 1);

    auto [logits, offsets] = model.head_graph(tape, feats);
    for (auto v : logits.val().data) CHECK(v == 0.0f);
    for (auto v : offsets.val().data) CHECK(v == 0.0f);

    auto dets = detect(model, feats, 0.5, 1000);
    REQUIRE(!dets.empty());
    CHECK(dets.size() <= static_cast<size_t>(model.n_anchors()));
    for (const auto& d : dets) CHECK(d.score == doctest::Approx(0.5f));
    // Every surviving box is some anchor's clipped prior.
    for (const auto& d : dets) {
        bool found = false;
        for (const auto& a : model.anchors) {
            Box p = anchor_prior_box(a, model.image_size);
            if (std::abs(p.x0 - d.box.x0) < 1e-5 && std::abs(p.y0 - d.box.y0) < 1e-5 &&
                std::abs(p.x1 - d.box.x1) < 1e-5 && std::abs(p.y1 - d.box.y1) < 1e-5) {
                found = true;
                break;
            }
        }
        CHECK(found);
    }
}

TEST_CASE("all-PAD caption pools to zero and zeroes every score logit") {
    auto cfg = tiny_config();
    Rng rng(8);
    GrounderT<float> model(cfg, rng);
    SceneConfig scene = cfg.scene;
    auto sample = generate_sample(3, scene);

    std::vector<uint16_t> pad_caption(static_cast<size_t>(model.caption_len), tok::PAD);
    TapeT<float> tape(false);
    auto feats = model.encode_with_prompts(tape, sample.image, pad_caption, PromptSetT<float>{});
    for (auto v : feats.txt.val().data) CHECK(std::isfinite(v));
    auto [logits, offsets] = model.head_graph(tape, feats);
    for (auto v : logits.val().data) CHECK(v == 0.0f);
}

TEST_CASE("forward is deterministic and prompts change features without changing counts") {
    auto cfg = tiny_config();
    Rng rng(9);
    GrounderT<float> model(cfg, rng);
    auto sample = generate_sample(11, cfg.scene);

    TapeT<float> t1(false), t2(false);
    auto f1 = model.encode_with_prompts(t1, sample.image, sample.caption, PromptSetT<float>{});
    auto f2 = model.encode_with_prompts(t2, sample.image, sample.caption, PromptSetT<float>{});
    CHECK(f1.vis.val().data == f2.vis.val().data);
    CHECK(f1.txt.val().data == f2.txt.val().data);
    CHECK(f1.vis.rows() == model.n_vis_tokens());
    CHECK(f1.txt.rows() == model.caption_len);

    TapeT<float> t3(false);
    Rng prng(10);
    auto prompts = random_prompts(t3, prng, 2, 4, 4, model.width);
    auto f3 = model.encode_with_prompts(t3, sample.image, sample.caption, prompts);
    // Same feature counts (prompt outputs discarded), different values.
    CHECK(f3.vis.rows() == model.n_vis_tokens());
    CHECK(f3.txt.rows() == model.caption_len);
    double max_diff = 0;
    for (size_t i = 0; i < f3.vis.val().data.size(); ++i)
        max_diff = std::max(max_diff, std::abs(static_cast<double>(f3.vis.val().data[i]) -
                                               f1.vis.val().data[i]));
    CHECK(max_diff > 0);

    // Depth 1 with the same leading prompts differs from depth 2.
    TapeT<float> t4(false);
    Rng prng2(10);
    auto prompts_d1 = random_prompts(t4, prng2, 1, 4, 4, model.width);
    auto f4 = model.encode_with_prompts(t4, sample.image, sample.caption, prompts_d1);
    double diff_depth = 0;
    for (size_t i = 0; i < f4.vis.val().data.size(); ++i)
        diff_depth = std::max(diff_depth, std::abs(static_cast<double>(f4.vis.val().data[i]) -
                                                   f3.vis.val().data[i]));
    CHECK(diff_depth > 0);
}

TEST_CASE("encode_with_prompts rejects bad inputs") {
    auto cfg = tiny_config();
    Rng rng(12);
    GrounderT<float> model(cfg, rng);
    auto sample = generate_sample(13, cfg.scene);

    TapeT<float> tape(false);
    Rng prng(14);
    auto deep = random_prompts(tape, prng, 3, 4, 4, model.width);  // depth > layers
    CHECK_THROWS_AS(model.encode_with_prompts(tape, sample.image, sample.caption, deep),
                    ConfigError);

    Tensor wrong_image({3, 64, 64});
    CHECK_THROWS_AS(
        model.encode_with_prompts(tape, wrong_image, sample.caption, PromptSetT<float>{}),
        ShapeError);

    std::vector<uint16_t> short_caption(3, tok::THE);
    CHECK_THROWS_AS(
        model.encode_with_prompts(tape, sample.image, short_caption, PromptSetT<float>{}),
        ShapeError);

    std::vector<uint16_t> bad_token(static_cast<size_t>(model.caption_len), 999);
    CHECK_THROWS_AS(
        model.encode_with_prompts(tape, sample.image, bad_token, PromptSetT<float>{}),
        ShapeError);
}

TEST_CASE("perfect head outputs give near-zero loss and random ones are non-negative") {
    auto anchors = build_anchors(64, 8, {16, 28, 48});
    Box gt{20.0f, 24.0f, 36.0f, 44.0f};
    auto assign = assign_anchors(anchors, gt, 64);
    const int64_t n = static_cast<int64_t>(anchors.size());

    Tensor logits_t({n, 1});
    Tensor offsets_t({n, 4});
    const double gcx = 28.0, gcy = 34.0, gw = 16.0, gh = 20.0;
    for (int64_t i = 0; i < n; ++i) {
        logits_t.at(i) = assign.label[static_cast<size_t>(i)] == 1 ? 20.0f : -20.0f;
        if (assign.label[static_cast<size_t>(i)] == 1) {
            const Anchor& a = anchors[static_cast<size_t>(i)];
            offsets_t.at(i * 4 + 0) = static_cast<float>((gcx - a.cx) / a.s);
            offsets_t.at(i * 4 + 1) = static_cast<float>((gcy - a.cy) / a.s);
            offsets_t.at(i * 4 + 2) = static_cast<float>(std::log(gw / a.s));
            offsets_t.at(i * 4 + 3) = static_cast<float>(std::log(gh / a.s));
        }
    }
    TapeT<float> tape(false);
    auto perfect =
        grounder_loss_graph(tape.leaf(logits_t), tape.leaf(offsets_t), anchors, gt, 64);
    CHECK(perfect.val().at(0) >= 0.0f);
    CHECK(perfect.val().at(0) < 1e-3f);

    Rng rng(15);
    Tensor rl({n, 1}), ro({n, 4});
    rl.fill_normal(rng);
    ro.fill_normal(rng);
    auto noisy = grounder_loss_graph(tape.leaf(rl), tape.leaf(ro), anchors, gt, 64);
    CHECK(noisy.val().at(0) >= 0.0f);
    CHECK(noisy.val().at(0) > perfect.val().at(0));
}

TEST_CASE("detect caps the list and suppresses duplicates") {
    auto cfg = tiny_config();
    Rng rng(16);
    GrounderT<float> model(cfg, rng);
    auto sample = generate_sample(17, cfg.scene);
    auto dets = detect_sample(model, sample.image, sample.caption, 0.5, 10);
    CHECK(dets.size() <= 10);
    for (size_t i = 1; i < dets.size(); ++i) CHECK(dets[i - 1].score >= dets[i].score);
    for (const auto& d : dets) {
        CHECK(d.box.x0 >= 0.0f);
        CHECK(d.box.y1 <= static_cast<float>(model.image_size));
        CHECK(d.score >= 0.0f);
        CHECK(d.score <= 1.0f);
    }
}

TEST_CASE("hand-counted parameters for a 1-layer config") {
    RunConfig cfg = tiny_config();
    cfg.grounder_layers = 1;
    Rng rng(18);
    GrounderT<float> model(cfg, rng);

    const int64_t w = 16, mlp = 64, patch_dim = 3 * 8 * 8, vocab = 18, cap = 8, n_vis = 16;
    const int64_t block = 2 * (2 * w)                 // two layernorms
                          + 4 * (w * w + w)           // q, k, v, o projections
                          + (w * mlp + mlp)           // fc1
                          + (mlp * w + w);            // fc2
    const int64_t expected = (patch_dim * w + w) + n_vis * w + block  // vision tower
                             + vocab * w + cap * w + block            // language tower
                             + 2 * ((w * w + w) + (w * 4 + 4));       // head, two scales
    CHECK(model.params.count_params() == expected);
}

TEST_CASE("gradients flow through prompts, towers, and head") {
    RunConfig cfg = tiny_config();
    Rng rng(19);
    GrounderT<double> model(cfg, rng);
    auto sample = generate_sample(21, cfg.scene);
    Box gt{sample.box[0], sample.box[1], sample.box[2], sample.box[3]};

    // Prompt tokens as first-class parameters: perturbing them must move the
    // loss exactly as the analytic gradient predicts (the stage-3 path).
    ParamT<double> pv, gpv, pl, gpl;
    Rng prng(20);
    for (auto* p : {&pv, &gpv, &pl, &gpl}) {
        p->init_shape({2, model.width});
        p->value.fill_normal(prng, 0.3);
    }
    pv.name = "prompt.pv";
    gpv.name = "prompt.gpv";
    pl.name = "prompt.pl";
    gpl.name = "prompt.gpl";

    ParamSetT<double> all;
    for (auto* p : model.params.params()) all.add(p);
    all.add(&pv);
    all.add(&gpv);
    all.add(&pl);
    all.add(&gpl);

    auto build_loss = [&](TapeT<double>& tape) {
        PromptSetT<double> prompts;
        prompts.p_v.push_back(tape.param(pv));
        prompts.gp_v.push_back(tape.param(gpv));
        prompts.p_l.push_back(tape.param(pl));
        prompts.gp_l.push_back(tape.param(gpl));
        auto feats = model.encode_with_prompts(tape, sample.image, sample.caption, prompts);
        auto [logits, offsets] = model.head_graph(tape, feats);
        return grounder_loss_graph(logits, offsets, model.anchors, gt, model.image_size);
    };

    auto res = dp::testing::check_gradients(all, build_loss);
    CAPTURE(res.worst);
    CHECK(res.checked == all.count_params());
    CHECK(res.max_rel_err <= 1e-3);
}
