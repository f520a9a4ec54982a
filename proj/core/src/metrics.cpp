#include "diffprompt/metrics.hpp"

#include <algorithm>

#include <json.hpp>

#include "diffprompt/errors.hpp"

namespace dp {

using json = nlohmann::ordered_json;

double iou(const Box& a, const Box& b) {
    if (a.x1 < a.x0 || a.y1 < a.y0 || b.x1 < b.x0 || b.y1 < b.y0)
        throw ShapeError("iou: inverted box coordinates");
    const double ix = std::max(0.0, static_cast<double>(std::min(a.x1, b.x1)) -
                                        static_cast<double>(std::max(a.x0, b.x0)));
    const double iy = std::max(0.0, static_cast<double>(std::min(a.y1, b.y1)) -
                                        static_cast<double>(std::max(a.y0, b.y0)));
    const double inter = ix * iy;
    const double area_a = static_cast<double>(a.x1 - a.x0) * static_cast<double>(a.y1 - a.y0);
    const double area_b = static_cast<double>(b.x1 - b.x0) * static_cast<double>(b.y1 - b.y0);
    const double uni = area_a + area_b - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

int recall_at_k(const DetectionList& preds, const Box& gt, int64_t k, double thresh) {
    if (k < 1) throw ConfigError("recall_at_k needs k >= 1");
    const int64_t top = std::min<int64_t>(k, static_cast<int64_t>(preds.size()));
    for (int64_t i = 0; i < top; ++i)
        if (iou(preds[static_cast<size_t>(i)].box, gt) >= thresh) return 1;
    return 0;
}

int upper_bound(const DetectionList& preds, const Box& gt, double thresh) {
    if (preds.empty()) return 0;
    return recall_at_k(preds, gt, static_cast<int64_t>(preds.size()), thresh);
}

DetectionList nms(DetectionList dets, double thresh, int64_t cap) {
    // Stable sort keeps lower input index first among equal scores.
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    DetectionList kept;
    for (const auto& d : dets) {
        bool suppressed = false;
        for (const auto& kpt : kept)
            if (iou(d.box, kpt.box) > thresh) {
                suppressed = true;
                break;
            }
        if (!suppressed) {
            kept.push_back(d);
            if (static_cast<int64_t>(kept.size()) >= cap) break;
        }
    }
    return kept;
}

void EvalAccumulator::add(int r1, int r5, int r10, int ub_hit, const std::string& kind) {
    auto bump = [&](Cell& c) {
        ++c.n;
        c.r1 += r1;
        c.r5 += r5;
        c.r10 += r10;
        c.ub += ub_hit;
    };
    bump(total_);
    bump(kinds_[kind]);
}

EvalReport EvalAccumulator::finish() const {
    if (total_.n == 0) throw ConfigError("evaluate on empty split");
    EvalReport r;
    r.n = total_.n;
    const double n = static_cast<double>(total_.n);
    r.r_at[1] = static_cast<double>(total_.r1) / n;
    r.r_at[5] = static_cast<double>(total_.r5) / n;
    r.r_at[10] = static_cast<double>(total_.r10) / n;
    r.ub = static_cast<double>(total_.ub) / n;
    for (const auto& [kind, c] : kinds_) {
        CategoryStats s;
        s.n = c.n;
        s.r1 = static_cast<double>(c.r1) / static_cast<double>(c.n);
        s.r5 = static_cast<double>(c.r5) / static_cast<double>(c.n);
        s.ub = static_cast<double>(c.ub) / static_cast<double>(c.n);
        r.per_kind[kind] = s;
    }
    return r;
}

std::string EvalReport::to_json() const {
    json j;
    j["n"] = n;
    j["r_at"] = {{"1", r_at.count(1) ? r_at.at(1) : 0.0},
                 {"5", r_at.count(5) ? r_at.at(5) : 0.0},
                 {"10", r_at.count(10) ? r_at.at(10) : 0.0}};
    j["upper_bound"] = ub;
    json kinds = json::object();
    for (const auto& [kind, s] : per_kind)
        kinds[kind] = {{"n", s.n}, {"r1", s.r1}, {"r5", s.r5}, {"ub", s.ub}};
    j["per_kind"] = kinds;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    json dg = json::object();
    for (const auto& [k, v] : digests) dg[k] = v;
    j["digests"] = dg;
    return j.dump(2);
}

}  // namespace dp
