#pragma once

// Detection metrics (IoU, R@K, Upper Bound), report aggregation, and analytic
// FLOP estimates used by the complexity report.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace dp {

struct Box {
    float x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct Detection {
    Box box;
    float score = 0;
};

using DetectionList = std::vector<Detection>;  // score-sorted descending

// Intersection over union. Degenerate zero-area boxes give 0; inverted
// coordinates are rejected.
double iou(const Box& a, const Box& b);

// 1 if any of the top-min(k, |preds|) predictions matches gt at IoU >= thresh.
int recall_at_k(const DetectionList& preds, const Box& gt, int64_t k, double thresh = 0.5);

// 1 if any prediction in the full (capped) list matches gt.
int upper_bound(const DetectionList& preds, const Box& gt, double thresh = 0.5);

// Greedy non-maximum suppression: keeps highest-scoring boxes, drops any later
// box with IoU > thresh against a kept one, caps the list. Ties in score are
// broken by lower input index.
DetectionList nms(DetectionList dets, double thresh = 0.5, int64_t cap = 100);

struct CategoryStats {
    int64_t n = 0;
    double r1 = 0, r5 = 0, ub = 0;
};

struct EvalReport {
    std::map<int64_t, double> r_at;  // K in {1, 5, 10}
    double ub = 0;
    int64_t n = 0;
    std::map<std::string, CategoryStats> per_kind;

    // Provenance, filled by the pipeline.
    std::string config_hash;
    uint64_t seed = 0;
    std::map<std::string, std::string> digests;

    std::string to_json() const;
};

class EvalAccumulator {
public:
    void add(int r1, int r5, int r10, int ub_hit, const std::string& kind);
    EvalReport finish() const;

private:
    struct Cell {
        int64_t n = 0, r1 = 0, r5 = 0, r10 = 0, ub = 0;
    };
    Cell total_;
    std::map<std::string, Cell> kinds_;
};

// Analytic FLOP conventions used in reports: attention layers use the
// multiply-accumulate convention 2 n^2 d + 4 n d^2, convolutions the
// 2-FLOPs-per-MAC convention 2 k^2 Cin Cout Hout Wout.
inline uint64_t attn_layer_flops(int64_t n, int64_t d) {
    return 2ull * static_cast<uint64_t>(n) * static_cast<uint64_t>(n) * static_cast<uint64_t>(d) +
           4ull * static_cast<uint64_t>(n) * static_cast<uint64_t>(d) * static_cast<uint64_t>(d);
}

inline uint64_t mlp_layer_flops(int64_t n, int64_t d, int64_t hidden) {
    return 4ull * static_cast<uint64_t>(n) * static_cast<uint64_t>(d) *
           static_cast<uint64_t>(hidden);
}

inline uint64_t conv_flops(int64_t k, int64_t cin, int64_t cout, int64_t hout, int64_t wout) {
    return 2ull * static_cast<uint64_t>(k) * static_cast<uint64_t>(k) * static_cast<uint64_t>(cin) *
           static_cast<uint64_t>(cout) * static_cast<uint64_t>(hout) * static_cast<uint64_t>(wout);
}

inline uint64_t linear_flops(int64_t n, int64_t in, int64_t out) {
    return 2ull * static_cast<uint64_t>(n) * static_cast<uint64_t>(in) *
           static_cast<uint64_t>(out);
}

}  // namespace dp
