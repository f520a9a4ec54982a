#pragma once

// Two-tower grounding model: a vision encoder over image patches and a
// language encoder over caption tokens, both with deep-prompt injection
// points, plus an anchor-scoring detection head over the final features.
// Templated on the scalar for double-precision gradient checks.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "diffprompt/autograd.hpp"
#include "diffprompt/config.hpp"
#include "diffprompt/errors.hpp"
#include "diffprompt/metrics.hpp"
#include "diffprompt/nn.hpp"
#include "diffprompt/synthdata.hpp"

namespace dp {

// ---------------------------------------------------------------------------
// Anchors.
// ---------------------------------------------------------------------------

struct Anchor {
    double cx, cy, s;  // square prior: center and side in pixels
};

// One anchor per vision token location per scale, scale-major then row-major.
inline std::vector<Anchor> build_anchors(int64_t image_size, int64_t patch,
                                         const std::vector<int64_t>& scales) {
    const int64_t grid = image_size / patch;
    std::vector<Anchor> anchors;
    anchors.reserve(static_cast<size_t>(grid * grid) * scales.size());
    for (int64_t s : scales)
        for (int64_t row = 0; row < grid; ++row)
            for (int64_t col = 0; col < grid; ++col)
                anchors.push_back({(static_cast<double>(col) + 0.5) * static_cast<double>(patch),
                                   (static_cast<double>(row) + 0.5) * static_cast<double>(patch),
                                   static_cast<double>(s)});
    return anchors;
}

inline Box anchor_prior_box(const Anchor& a, int64_t image_size) {
    auto clip = [&](double v) {
        return static_cast<float>(std::min(std::max(v, 0.0), static_cast<double>(image_size)));
    };
    return {clip(a.cx - a.s / 2), clip(a.cy - a.s / 2), clip(a.cx + a.s / 2),
            clip(a.cy + a.s / 2)};
}

// Decodes head offsets (dx, dy, dw, dh) against an anchor prior.
inline Box decode_box(const Anchor& a, double dx, double dy, double dw, double dh,
                      int64_t image_size) {
    const double cx = a.cx + dx * a.s;
    const double cy = a.cy + dy * a.s;
    const double w = a.s * std::exp(dw);
    const double h = a.s * std::exp(dh);
    auto clip = [&](double v) {
        return static_cast<float>(std::min(std::max(v, 0.0), static_cast<double>(image_size)));
    };
    Box b{clip(cx - w / 2), clip(cy - h / 2), clip(cx + w / 2), clip(cy + h / 2)};
    if (b.x1 < b.x0) b.x1 = b.x0;
    if (b.y1 < b.y0) b.y1 = b.y0;
    return b;
}

// ---------------------------------------------------------------------------
// Prompt containers. Values live on the caller's tape so stage-3 gradients
// reach the adapters and the global-prompt store that produced them.
// ---------------------------------------------------------------------------

template <typename T>
struct PromptSetT {
    // Index j < depth: input-specific then global tokens for each modality.
    std::vector<ValueT<T>> p_v, gp_v, p_l, gp_l;

    int64_t depth() const { return static_cast<int64_t>(p_v.size()); }
    bool empty() const { return p_v.empty(); }

    void check_consistent() const {
        if (gp_v.size() != p_v.size() || p_l.size() != p_v.size() || gp_l.size() != p_v.size())
            throw ShapeError("prompt set with unequal per-layer group counts");
    }
};

using PromptSet = PromptSetT<float>;

// ---------------------------------------------------------------------------
// Model.
// ---------------------------------------------------------------------------

template <typename T>
struct GrounderFeaturesT {
    ValueT<T> vis;                // (n_vis_tokens, width)
    ValueT<T> txt;                // (caption_len, width)
    std::vector<int> txt_valid;   // 1 where caption token is not PAD
};

template <typename T>
struct GrounderT : NoCopyMove {
    int64_t image_size, patch, width, layers, heads, mlp_hidden;
    int64_t caption_len, vocab_size;
    std::vector<int64_t> anchor_scales;
    std::vector<Anchor> anchors;

    ParamSetT<T> params;
    std::unique_ptr<LinearT<T>> patch_proj;
    ParamT<T> vis_pos;
    std::vector<std::unique_ptr<TransformerLayerT<T>>> vis_blocks;
    ParamT<T> tok_embed;
    ParamT<T> txt_pos;
    std::vector<std::unique_ptr<TransformerLayerT<T>>> txt_blocks;
    std::vector<std::unique_ptr<LinearT<T>>> score_proj;  // one per scale
    std::vector<std::unique_ptr<LinearT<T>>> box_head;    // one per scale, bias starts at 0

    GrounderT(const RunConfig& cfg, Rng& rng)
        : image_size(cfg.scene.image_size),
          patch(cfg.grounder_patch),
          width(cfg.grounder_width),
          layers(cfg.grounder_layers),
          heads(cfg.grounder_heads),
          mlp_hidden(cfg.grounder_mlp_ratio * cfg.grounder_width),
          caption_len(cfg.scene.caption_len),
          vocab_size(cfg.scene.vocab_size()),
          anchor_scales(cfg.anchor_scales),
          anchors(build_anchors(image_size, patch, anchor_scales)) {
        if (image_size % patch != 0) throw ConfigError("patch must divide image size");
        patch_proj = std::make_unique<LinearT<T>>(params, "grounder.vis.patch", 3 * patch * patch,
                                                  width, rng);
        vis_pos.name = "grounder.vis.pos";
        vis_pos.init_shape({n_vis_tokens(), width});
        init_normal(vis_pos.value, 0.02, rng);
        params.add(&vis_pos);
        for (int64_t i = 0; i < layers; ++i)
            vis_blocks.push_back(std::make_unique<TransformerLayerT<T>>(
                params, "grounder.vis.block" + std::to_string(i), width, heads, mlp_hidden, rng));

        tok_embed.name = "grounder.txt.embed";
        tok_embed.init_shape({vocab_size, width});
        init_normal(tok_embed.value, 0.02, rng);
        params.add(&tok_embed);
        txt_pos.name = "grounder.txt.pos";
        txt_pos.init_shape({caption_len, width});
        init_normal(txt_pos.value, 0.02, rng);
        params.add(&txt_pos);
        for (int64_t i = 0; i < layers; ++i)
            txt_blocks.push_back(std::make_unique<TransformerLayerT<T>>(
                params, "grounder.txt.block" + std::to_string(i), width, heads, mlp_hidden, rng));

        for (size_t s = 0; s < anchor_scales.size(); ++s) {
            score_proj.push_back(std::make_unique<LinearT<T>>(
                params, "grounder.head.score" + std::to_string(s), width, width, rng));
            box_head.push_back(std::make_unique<LinearT<T>>(
                params, "grounder.head.box" + std::to_string(s), width, 4, rng));
            box_head.back()->w.value.fill(T(0));  // offsets start at the priors
        }
    }

    int64_t grid() const { return image_size / patch; }
    int64_t n_vis_tokens() const { return grid() * grid(); }
    int64_t n_anchors() const { return static_cast<int64_t>(anchors.size()); }

    // Additive key mask: 0 everywhere except PAD caption keys. n_prefix extra
    // always-valid positions (prompts) sit before the caption tokens.
    TensorT<T> txt_key_mask(const std::vector<int>& valid, int64_t n_prefix) const {
        const int64_t n = n_prefix + caption_len;
        TensorT<T> m({n, n});
        for (int64_t kcol = 0; kcol < caption_len; ++kcol) {
            if (valid[static_cast<size_t>(kcol)]) continue;
            for (int64_t q = 0; q < n; ++q) m.at(q * n + n_prefix + kcol) = T(-1e4);
        }
        return m;
    }

    // Eq. 8-9 forward. For layer j < depth(prompts) the block input is
    // [P_j, GP_j, E_j]; prompt-position outputs are discarded and the next
    // layer receives fresh prompts. An empty prompt set is the plain forward,
    // bit-identical to a promptless run.
    GrounderFeaturesT<T> encode_with_prompts(TapeT<T>& tape, const Tensor& image,
                                             const std::vector<uint16_t>& caption,
                                             const PromptSetT<T>& prompts) {
        prompts.check_consistent();
        const int64_t depth = prompts.depth();
        if (depth > layers) throw ConfigError("prompt depth exceeds encoder layers");
        if (image.shape != std::vector<int64_t>{3, image_size, image_size})
            throw ShapeError("grounder image shape " + shape_str(image.shape));
        if (static_cast<int64_t>(caption.size()) != caption_len)
            throw ShapeError("caption length mismatch");

        GrounderFeaturesT<T> out;
        out.txt_valid.reserve(static_cast<size_t>(caption_len));
        std::vector<int> ids;
        ids.reserve(static_cast<size_t>(caption_len));
        for (uint16_t t : caption) {
            if (t >= vocab_size) throw ShapeError("caption token out of vocabulary");
            ids.push_back(static_cast<int>(t));
            out.txt_valid.push_back(t == tok::PAD ? 0 : 1);
        }

        TensorT<T> img_t;
        if constexpr (std::is_same_v<T, float>) {
            img_t = image;
        } else {
            img_t = image.template cast<T>();
        }

        // Vision tower.
        auto e_v = add(patch_proj->forward(tape, patchify(tape.leaf(std::move(img_t)), patch)),
                       tape.param(vis_pos));
        for (int64_t j = 0; j < layers; ++j) {
            if (j < depth) {
                auto x = concat_rows<T>({prompts.p_v[j], prompts.gp_v[j], e_v});
                const int64_t n_prefix = x.rows() - n_vis_tokens();
                x = vis_blocks[static_cast<size_t>(j)]->forward(tape, x);
                e_v = slice_rows(x, n_prefix, n_vis_tokens());
            } else {
                e_v = vis_blocks[static_cast<size_t>(j)]->forward(tape, e_v);
            }
        }
        out.vis = e_v;

        // Language tower.
        auto e_l = add(embedding(tape.param(tok_embed), ids), tape.param(txt_pos));
        const auto plain_mask = txt_key_mask(out.txt_valid, 0);
        for (int64_t j = 0; j < layers; ++j) {
            if (j < depth) {
                auto x = concat_rows<T>({prompts.p_l[j], prompts.gp_l[j], e_l});
                const int64_t n_prefix = x.rows() - caption_len;
                const auto mask = txt_key_mask(out.txt_valid, n_prefix);
                x = txt_blocks[static_cast<size_t>(j)]->forward(tape, x, &mask);
                e_l = slice_rows(x, n_prefix, caption_len);
            } else {
                e_l = txt_blocks[static_cast<size_t>(j)]->forward(tape, e_l, &plain_mask);
            }
        }
        out.txt = e_l;
        return out;
    }

    // Raw head outputs: per-anchor score logits (n_anchors, 1) and box offsets
    // (n_anchors, 4), anchors ordered scale-major. Score = <proj(vis token),
    // pooled text> / sqrt(width); pooled text averages non-PAD positions and
    // is zero for an all-PAD caption.
    std::pair<ValueT<T>, ValueT<T>> head_graph(TapeT<T>& tape, const GrounderFeaturesT<T>& f) {
        int64_t n_valid = 0;
        for (int v : f.txt_valid) n_valid += v;
        std::vector<T> w(f.txt_valid.size(), T(0));
        if (n_valid > 0)
            for (size_t i = 0; i < w.size(); ++i)
                if (f.txt_valid[i]) w[i] = T(1) / static_cast<T>(n_valid);
        auto pooled = weighted_row_sum(f.txt, std::move(w));  // (1, width)

        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(width));
        std::vector<ValueT<T>> logits, offsets;
        for (size_t s = 0; s < anchor_scales.size(); ++s) {
            auto af = score_proj[s]->forward(tape, f.vis);
            logits.push_back(scale(matmul(af, pooled, false, true), inv_sqrt));
            offsets.push_back(box_head[s]->forward(tape, f.vis));
        }
        return {concat_rows(logits), concat_rows(offsets)};
    }
};

using Grounder = GrounderT<float>;

// ---------------------------------------------------------------------------
// Loss and detection.
// ---------------------------------------------------------------------------

struct AnchorAssignment {
    std::vector<int> label;  // 1 positive, 0 negative, -1 ignored
    int64_t n_pos = 0, n_neg = 0;
};

// Positives: IoU >= pos_thresh plus the single best-IoU anchor (fallback
// guarantees one positive); negatives: IoU < neg_thresh and not positive.
inline AnchorAssignment assign_anchors(const std::vector<Anchor>& anchors, const Box& gt,
                                       int64_t image_size, double pos_thresh = 0.6,
                                       double neg_thresh = 0.4) {
    AnchorAssignment a;
    a.label.assign(anchors.size(), -1);
    double best = -1.0;
    size_t best_i = 0;
    std::vector<double> ious(anchors.size());
    for (size_t i = 0; i < anchors.size(); ++i) {
        ious[i] = iou(anchor_prior_box(anchors[i], image_size), gt);
        if (ious[i] > best) {
            best = ious[i];
            best_i = i;
        }
    }
    for (size_t i = 0; i < anchors.size(); ++i) {
        if (ious[i] >= pos_thresh)
            a.label[i] = 1;
        else if (ious[i] < neg_thresh)
            a.label[i] = 0;
    }
    a.label[best_i] = 1;
    for (int v : a.label) {
        a.n_pos += v == 1;
        a.n_neg += v == 0;
    }
    return a;
}

// Classification (BCE, positives and negatives each averaged within their
// group) plus localization (smooth L1 on positive-anchor offsets, averaged
// over positives).
template <typename T>
ValueT<T> grounder_loss_graph(const ValueT<T>& logits, const ValueT<T>& offsets,
                              const std::vector<Anchor>& anchors, const Box& gt,
                              int64_t image_size) {
    const int64_t n = static_cast<int64_t>(anchors.size());
    if (logits.rows() != n || offsets.rows() != n || offsets.cols() != 4)
        throw ShapeError("grounder_loss head shapes");
    const auto assign = assign_anchors(anchors, gt, image_size);

    TensorT<T> targets({n, 1});
    TensorT<T> cls_w({n, 1});
    TensorT<T> off_target({n, 4});
    TensorT<T> off_w({n, 4});
    const double gcx = 0.5 * (gt.x0 + gt.x1), gcy = 0.5 * (gt.y0 + gt.y1);
    const double gw = gt.x1 - gt.x0, gh = gt.y1 - gt.y0;
    for (int64_t i = 0; i < n; ++i) {
        if (assign.label[static_cast<size_t>(i)] == 1) {
            targets.at(i) = T(1);
            cls_w.at(i) = T(1) / static_cast<T>(assign.n_pos);
            const Anchor& a = anchors[static_cast<size_t>(i)];
            off_target.at(i * 4 + 0) = static_cast<T>((gcx - a.cx) / a.s);
            off_target.at(i * 4 + 1) = static_cast<T>((gcy - a.cy) / a.s);
            off_target.at(i * 4 + 2) = static_cast<T>(std::log(gw / a.s));
            off_target.at(i * 4 + 3) = static_cast<T>(std::log(gh / a.s));
            for (int64_t c = 0; c < 4; ++c)
                off_w.at(i * 4 + c) = T(1) / static_cast<T>(assign.n_pos);
        } else if (assign.label[static_cast<size_t>(i)] == 0 && assign.n_neg > 0) {
            cls_w.at(i) = T(1) / static_cast<T>(assign.n_neg);
        }
    }
    auto cls = bce_logits_wsum(logits, std::move(targets), std::move(cls_w));
    auto loc = smooth_l1_wsum(offsets, std::move(off_target), std::move(off_w));
    return add(cls, loc);
}

// Frozen-model detection: decode every anchor, clip, NMS, cap.
template <typename T>
DetectionList detect(GrounderT<T>& model, const GrounderFeaturesT<T>& feats,
                     double nms_thresh = 0.5, int64_t cap = 100) {
    TapeT<T> tape(false);
    auto [logits, offsets] = model.head_graph(tape, feats);
    DetectionList dets;
    dets.reserve(static_cast<size_t>(model.n_anchors()));
    for (int64_t i = 0; i < model.n_anchors(); ++i) {
        const double logit = static_cast<double>(logits.val().at(i));
        const Anchor& a = model.anchors[static_cast<size_t>(i)];
        Box b = decode_box(a, offsets.val().at(i * 4 + 0), offsets.val().at(i * 4 + 1),
                           offsets.val().at(i * 4 + 2), offsets.val().at(i * 4 + 3),
                           model.image_size);
        dets.push_back({b, static_cast<float>(1.0 / (1.0 + std::exp(-logit)))});
    }
    return nms(std::move(dets), nms_thresh, cap);
}

// Convenience: promptless frozen inference from raw inputs.
template <typename T>
DetectionList detect_sample(GrounderT<T>& model, const Tensor& image,
                            const std::vector<uint16_t>& caption, double nms_thresh = 0.5,
                            int64_t cap = 100) {
    TapeT<T> tape(false);
    auto feats = model.encode_with_prompts(tape, image, caption, PromptSetT<T>{});
    return detect(model, feats, nms_thresh, cap);
}

}  // namespace dp
