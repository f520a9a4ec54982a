#include "diffprompt/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include <json.hpp>

#include "diffprompt/rng.hpp"

namespace dp {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config and vocab.
// ---------------------------------------------------------------------------

void SceneConfig::validate() const {
    if (image_size < 16 || image_size % 8 != 0)
        throw ConfigError("image_size must be >= 16 and divisible by 8");
    if (min_shapes < 1 || max_shapes < min_shapes)
        throw ConfigError("invalid shapes_per_scene range");
    if (palette.size() < 4) throw ConfigError("palette needs at least 4 colors");
    if (caption_len < 7) throw ConfigError("caption_len must fit the longest caption plus EOS");
    if (!(small_r_min > 0 && small_r_max >= small_r_min && large_r_min > small_r_max &&
          large_r_max >= large_r_min))
        throw ConfigError("size category radii must be positive and non-overlapping");
}

std::vector<std::string> SceneConfig::vocab() const {
    std::vector<std::string> v = {"<pad>", "<eos>", "the", "small", "large"};
    for (const auto& c : palette) v.push_back(c.name);
    v.insert(v.end(), {"circle", "square", "triangle"});
    v.insert(v.end(), {"left", "right", "top", "bottom", "leftmost", "rightmost"});
    return v;
}

// ---------------------------------------------------------------------------
// Caption predicate.
// ---------------------------------------------------------------------------

CaptionParse parse_caption(const std::vector<uint16_t>& caption, const SceneConfig& cfg) {
    CaptionParse p;
    const int64_t ncolor = static_cast<int64_t>(cfg.palette.size());
    const uint16_t kind0 = tok::kind(cfg, 0);
    const uint16_t rel0 = tok::relation(cfg, 0);
    size_t i = 0;
    if (i < caption.size() && caption[i] == tok::THE) ++i;
    if (i < caption.size() && (caption[i] == tok::SMALL || caption[i] == tok::LARGE)) {
        p.has_size = true;
        p.size_cat = caption[i] == tok::LARGE ? 1 : 0;
        ++i;
    }
    if (i < caption.size() && caption[i] >= tok::COLOR0 && caption[i] < tok::COLOR0 + ncolor)
        p.color = caption[i++] - tok::COLOR0;
    if (i < caption.size() && caption[i] >= kind0 && caption[i] < kind0 + 3)
        p.kind = caption[i++] - kind0;
    if (i < caption.size() && caption[i] >= rel0 && caption[i] < rel0 + 6) {
        p.has_relation = true;
        p.relation = static_cast<Relation>(caption[i++] - rel0);
    }
    if (p.color < 0 || p.kind < 0) throw GenerationError("caption missing color or shape word");
    return p;
}

namespace {

bool attrs_match(const CaptionParse& p, const SceneShape& s) {
    if (p.has_size && s.size_cat != p.size_cat) return false;
    return s.color == p.color && static_cast<int64_t>(s.kind) == p.kind;
}

}  // namespace

bool caption_matches(const CaptionParse& p, const std::vector<SceneShape>& shapes, size_t i,
                     const SceneConfig& cfg) {
    const SceneShape& s = shapes[i];
    if (!attrs_match(p, s)) return false;
    if (!p.has_relation) return true;
    const double mid = static_cast<double>(cfg.image_size) / 2.0;
    switch (p.relation) {
        case Relation::Left: return s.cx < mid;
        case Relation::Right: return s.cx > mid;
        case Relation::Top: return s.cy < mid;
        case Relation::Bottom: return s.cy > mid;
        case Relation::Leftmost:
        case Relation::Rightmost: {
            for (size_t j = 0; j < shapes.size(); ++j) {
                if (j == i || !attrs_match(p, shapes[j])) continue;
                if (p.relation == Relation::Leftmost && shapes[j].cx <= s.cx) return false;
                if (p.relation == Relation::Rightmost && shapes[j].cx >= s.cx) return false;
            }
            return true;
        }
    }
    return false;
}

// ---------------------------------------------------------------------------
// Generation.
// ---------------------------------------------------------------------------

namespace {

bool inside_shape(const SceneShape& s, double px, double py) {
    switch (s.kind) {
        case ShapeKind::Circle: {
            const double dx = px - s.cx, dy = py - s.cy;
            return dx * dx + dy * dy <= s.r * s.r;
        }
        case ShapeKind::Square:
            return std::abs(px - s.cx) <= s.r && std::abs(py - s.cy) <= s.r;
        case ShapeKind::Triangle: {
            // Upward triangle: apex (cx, cy - r), base corners (cx +- r, cy + r).
            const double ax = s.cx, ay = s.cy - s.r;
            const double bx = s.cx - s.r, by = s.cy + s.r;
            const double cx = s.cx + s.r, cy = s.cy + s.r;
            auto side = [](double x1, double y1, double x2, double y2, double px_, double py_) {
                return (x2 - x1) * (py_ - y1) - (y2 - y1) * (px_ - x1);
            };
            const double d1 = side(ax, ay, bx, by, px, py);
            const double d2 = side(bx, by, cx, cy, px, py);
            const double d3 = side(cx, cy, ax, ay, px, py);
            const bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
            const bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
            return !(has_neg && has_pos);
        }
    }
    return false;
}

bool separated(const SceneShape& a, const SceneShape& b) {
    // Bounding boxes must be apart by at least 2 pixels on one axis.
    const double gap = 2.0;
    return std::abs(a.cx - b.cx) >= a.r + b.r + gap || std::abs(a.cy - b.cy) >= a.r + b.r + gap;
}

// Candidate captions in preference order: plainest first, relations only when
// attributes alone are ambiguous.
std::vector<CaptionParse> candidate_captions(const SceneShape& target) {
    std::vector<CaptionParse> out;
    const int64_t color = target.color;
    const int64_t kind = static_cast<int64_t>(target.kind);
    auto base = [&](bool with_size) {
        CaptionParse p;
        p.color = color;
        p.kind = kind;
        p.has_size = with_size;
        p.size_cat = target.size_cat;
        return p;
    };
    out.push_back(base(false));
    out.push_back(base(true));
    for (int ws = 0; ws < 2; ++ws)
        for (int r = 0; r < 6; ++r) {
            CaptionParse p = base(ws == 1);
            p.has_relation = true;
            p.relation = static_cast<Relation>(r);
            out.push_back(p);
        }
    return out;
}

std::vector<uint16_t> encode_caption(const CaptionParse& p, const SceneConfig& cfg) {
    std::vector<uint16_t> c;
    c.push_back(tok::THE);
    if (p.has_size) c.push_back(p.size_cat ? tok::LARGE : tok::SMALL);
    c.push_back(tok::color(p.color));
    c.push_back(tok::kind(cfg, p.kind));
    if (p.has_relation) c.push_back(tok::relation(cfg, static_cast<int64_t>(p.relation)));
    c.push_back(tok::EOS);
    c.resize(static_cast<size_t>(cfg.caption_len), tok::PAD);
    return c;
}

}  // namespace

Sample generate_sample(uint64_t seed, const SceneConfig& cfg, std::vector<SceneShape>* out_shapes) {
    cfg.validate();
    Rng rng(derive_seed(seed, "scene"));
    const int64_t S = cfg.image_size;

    for (int rejection = 0; rejection < 100; ++rejection) {
        const int64_t n =
            cfg.min_shapes + static_cast<int64_t>(rng.uniform_int(
                                 static_cast<uint64_t>(cfg.max_shapes - cfg.min_shapes + 1)));
        std::vector<SceneShape> shapes;
        bool placed_all = true;
        for (int64_t i = 0; i < n && placed_all; ++i) {
            bool placed = false;
            for (int attempt = 0; attempt < 50; ++attempt) {
                SceneShape s;
                s.kind = static_cast<ShapeKind>(rng.uniform_int(3));
                s.color = static_cast<int64_t>(rng.uniform_int(cfg.palette.size()));
                s.size_cat = rng.bernoulli(0.5) ? 1 : 0;
                s.r = s.size_cat ? rng.uniform(cfg.large_r_min, cfg.large_r_max)
                                 : rng.uniform(cfg.small_r_min, cfg.small_r_max);
                const double lo = s.r + 2.0, hi = static_cast<double>(S) - s.r - 2.0;
                if (hi <= lo) continue;
                s.cx = rng.uniform(lo, hi);
                s.cy = rng.uniform(lo, hi);
                bool ok = true;
                for (const auto& other : shapes)
                    if (!separated(s, other)) {
                        ok = false;
                        break;
                    }
                if (ok) {
                    shapes.push_back(s);
                    placed = true;
                    break;
                }
            }
            if (!placed) placed_all = false;
        }
        if (!placed_all) continue;

        const size_t target = static_cast<size_t>(rng.uniform_int(shapes.size()));

        // First candidate caption that refers to the target and nothing else.
        const CaptionParse* chosen = nullptr;
        std::vector<CaptionParse> candidates = candidate_captions(shapes[target]);
        for (const auto& cand : candidates) {
            size_t matches = 0, match_idx = 0;
            for (size_t j = 0; j < shapes.size(); ++j)
                if (caption_matches(cand, shapes, j, cfg)) {
                    ++matches;
                    match_idx = j;
                }
            if (matches == 1 && match_idx == target) {
                chosen = &cand;
                break;
            }
        }
        if (!chosen) continue;

        Sample sample;
        sample.sample_id = seed;
        sample.caption = encode_caption(*chosen, cfg);
        sample.image = Tensor({3, S, S});
        sample.mask = TensorT<uint8_t>({1, S, S});
        const float bg = 0.1f;
        sample.image.fill(bg);

        int64_t xmin = S, ymin = S, xmax = -1, ymax = -1;
        for (int64_t y = 0; y < S; ++y)
            for (int64_t x = 0; x < S; ++x) {
                const double px = static_cast<double>(x) + 0.5;
                const double py = static_cast<double>(y) + 0.5;
                for (size_t j = 0; j < shapes.size(); ++j) {
                    if (!inside_shape(shapes[j], px, py)) continue;
                    const PaletteColor& col = cfg.palette[static_cast<size_t>(shapes[j].color)];
                    sample.image.at(0 * S * S + y * S + x) = col.r;
                    sample.image.at(1 * S * S + y * S + x) = col.g;
                    sample.image.at(2 * S * S + y * S + x) = col.b;
                    if (j == target) {
                        sample.mask.at(y * S + x) = 1;
                        xmin = std::min(xmin, x);
                        ymin = std::min(ymin, y);
                        xmax = std::max(xmax, x);
                        ymax = std::max(ymax, y);
                    }
                    break;  // shapes do not overlap
                }
            }
        if (xmax < 0) continue;  // degenerate sub-pixel silhouette, resample
        sample.box = {static_cast<float>(xmin), static_cast<float>(ymin),
                      static_cast<float>(xmax + 1), static_cast<float>(ymax + 1)};
        if (out_shapes) *out_shapes = shapes;
        return sample;
    }
    throw GenerationError("no unambiguous scene after 100 rejections (seed " +
                          std::to_string(seed) + ")");
}

// ---------------------------------------------------------------------------
// Binary format.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'P', 'D', 'S'};
constexpr uint32_t kVersion = 1;
constexpr int64_t kHeaderSize = 4 + 4 + 8 + 4 + 4;

int64_t record_size_for(int64_t image_size, int64_t caption_len) {
    return 3 * image_size * image_size * 4 + image_size * image_size + caption_len * 2 + 4 * 4 + 8;
}

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& f, T& v) {
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
}

json config_to_json(const SceneConfig& cfg) {
    json palette = json::array();
    for (const auto& c : cfg.palette)
        palette.push_back({{"name", c.name}, {"r", c.r}, {"g", c.g}, {"b", c.b}});
    return json{{"image_size", cfg.image_size},
                {"min_shapes", cfg.min_shapes},
                {"max_shapes", cfg.max_shapes},
                {"caption_len", cfg.caption_len},
                {"palette", palette},
                {"small_r", {cfg.small_r_min, cfg.small_r_max}},
                {"large_r", {cfg.large_r_min, cfg.large_r_max}}};
}

SceneConfig config_from_json(const json& j) {
    SceneConfig cfg;
    cfg.image_size = j.at("image_size").get<int64_t>();
    cfg.min_shapes = j.at("min_shapes").get<int64_t>();
    cfg.max_shapes = j.at("max_shapes").get<int64_t>();
    cfg.caption_len = j.at("caption_len").get<int64_t>();
    cfg.palette.clear();
    for (const auto& c : j.at("palette"))
        cfg.palette.push_back({c.at("name").get<std::string>(), c.at("r").get<float>(),
                               c.at("g").get<float>(), c.at("b").get<float>()});
    cfg.small_r_min = j.at("small_r")[0].get<double>();
    cfg.small_r_max = j.at("small_r")[1].get<double>();
    cfg.large_r_min = j.at("large_r")[0].get<double>();
    cfg.large_r_max = j.at("large_r")[1].get<double>();
    return cfg;
}

}  // namespace

std::string scene_config_to_json_string(const SceneConfig& cfg) {
    return config_to_json(cfg).dump();
}

SceneConfig scene_config_from_json_string(const std::string& text) {
    json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw ConfigError("unparseable scene config JSON");
    return config_from_json(j);
}

std::string manifest_path_for(const std::string& dataset_path) {
    return dataset_path + ".manifest.json";
}

void write_dataset(const std::vector<Sample>& samples, const std::string& path,
                   const DatasetManifest& manifest) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DatasetError(DatasetError::Kind::Io, "cannot open " + path + " for writing");
    const int64_t S = manifest.config.image_size;
    const int64_t cl = manifest.config.caption_len;
    f.write(kMagic, 4);
    write_pod(f, kVersion);
    write_pod(f, static_cast<uint64_t>(samples.size()));
    write_pod(f, static_cast<uint32_t>(S));
    write_pod(f, static_cast<uint32_t>(cl));
    for (const auto& s : samples) {
        if (s.image.shape != std::vector<int64_t>{3, S, S} ||
            s.mask.shape != std::vector<int64_t>{1, S, S} ||
            static_cast<int64_t>(s.caption.size()) != cl)
            throw DatasetError(DatasetError::Kind::Io, "sample does not match manifest config");
        f.write(reinterpret_cast<const char*>(s.image.data.data()),
                static_cast<std::streamsize>(s.image.data.size() * 4));
        f.write(reinterpret_cast<const char*>(s.mask.data.data()),
                static_cast<std::streamsize>(s.mask.data.size()));
        f.write(reinterpret_cast<const char*>(s.caption.data()),
                static_cast<std::streamsize>(s.caption.size() * 2));
        f.write(reinterpret_cast<const char*>(s.box.data()), 16);
        write_pod(f, s.sample_id);
    }
    if (!f) throw DatasetError(DatasetError::Kind::Io, "write failed for " + path);
    f.close();

    json m{{"format", "DPDS"},
           {"version", kVersion},
           {"count", samples.size()},
           {"corpus_seed", manifest.corpus_seed},
           {"sample_id_base", manifest.sample_id_base},
           {"config", config_to_json(manifest.config)},
           {"splits",
            {{"train", {manifest.splits.train_begin, manifest.splits.train_end}},
             {"val", {manifest.splits.val_begin, manifest.splits.val_end}},
             {"test", {manifest.splits.test_begin, manifest.splits.test_end}}}}};
    std::ofstream mf(manifest_path_for(path), std::ios::trunc);
    if (!mf) throw DatasetError(DatasetError::Kind::Io, "cannot write manifest for " + path);
    mf << m.dump(2) << "\n";
}

DatasetReader::DatasetReader(const std::string& path) : path_(path) {
    file_.open(path, std::ios::binary);
    if (!file_) throw DatasetError(DatasetError::Kind::Io, "cannot open " + path);
    char magic[4];
    file_.read(magic, 4);
    if (!file_ || std::memcmp(magic, kMagic, 4) != 0)
        throw DatasetError(DatasetError::Kind::BadMagic, "bad magic in " + path);
    uint32_t version = 0;
    read_pod(file_, version);
    if (!file_ || version != kVersion)
        throw DatasetError(DatasetError::Kind::BadVersion,
                           "unsupported dataset version " + std::to_string(version));
    uint64_t count = 0;
    uint32_t image_size = 0, caption_len = 0;
    read_pod(file_, count);
    read_pod(file_, image_size);
    read_pod(file_, caption_len);
    if (!file_) throw DatasetError(DatasetError::Kind::Truncated, "truncated header in " + path);
    count_ = static_cast<int64_t>(count);
    image_size_ = image_size;
    caption_len_ = caption_len;
    header_size_ = kHeaderSize;
    record_size_ = record_size_for(image_size_, caption_len_);

    file_.seekg(0, std::ios::end);
    const int64_t actual = static_cast<int64_t>(file_.tellg());
    if (actual != header_size_ + count_ * record_size_)
        throw DatasetError(DatasetError::Kind::Truncated,
                           "file size mismatch in " + path + ": expected " +
                               std::to_string(header_size_ + count_ * record_size_) + ", got " +
                               std::to_string(actual));
}

Sample DatasetReader::read(int64_t index) const {
    if (index < 0 || index >= count_)
        throw DatasetError(DatasetError::Kind::Io,
                           "record index " + std::to_string(index) + " out of range");
    file_.clear();
    file_.seekg(header_size_ + index * record_size_);
    Sample s;
    const int64_t S = image_size_;
    s.image = Tensor({3, S, S});
    s.mask = TensorT<uint8_t>({1, S, S});
    s.caption.resize(static_cast<size_t>(caption_len_));
    file_.read(reinterpret_cast<char*>(s.image.data.data()),
               static_cast<std::streamsize>(s.image.data.size() * 4));
    file_.read(reinterpret_cast<char*>(s.mask.data.data()),
               static_cast<std::streamsize>(s.mask.data.size()));
    file_.read(reinterpret_cast<char*>(s.caption.data()),
               static_cast<std::streamsize>(s.caption.size() * 2));
    file_.read(reinterpret_cast<char*>(s.box.data()), 16);
    file_.read(reinterpret_cast<char*>(&s.sample_id), 8);
    if (!file_)
        throw DatasetError(DatasetError::Kind::Truncated,
                           "truncated record " + std::to_string(index) + " in " + path_);
    return s;
}

DatasetManifest read_manifest(const std::string& dataset_path) {
    std::ifstream mf(manifest_path_for(dataset_path));
    if (!mf)
        throw DatasetError(DatasetError::Kind::Io,
                           "missing manifest " + manifest_path_for(dataset_path));
    json j = json::parse(mf, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded())
        throw DatasetError(DatasetError::Kind::Io, "unparseable manifest for " + dataset_path);
    DatasetManifest m;
    m.config = config_from_json(j.at("config"));
    m.count = j.at("count").get<int64_t>();
    m.corpus_seed = j.at("corpus_seed").get<uint64_t>();
    m.sample_id_base = j.at("sample_id_base").get<uint64_t>();
    const auto& sp = j.at("splits");
    m.splits.train_begin = sp.at("train")[0].get<int64_t>();
    m.splits.train_end = sp.at("train")[1].get<int64_t>();
    m.splits.val_begin = sp.at("val")[0].get<int64_t>();
    m.splits.val_end = sp.at("val")[1].get<int64_t>();
    m.splits.test_begin = sp.at("test")[0].get<int64_t>();
    m.splits.test_end = sp.at("test")[1].get<int64_t>();
    return m;
}

DatasetManifest build_corpus(const SceneConfig& cfg, uint64_t corpus_seed, int64_t train_count,
                             int64_t val_count, int64_t test_count, const std::string& path) {
    cfg.validate();
    const int64_t total = train_count + val_count + test_count;
    const uint64_t base = splitmix64(corpus_seed);
    std::vector<Sample> samples;
    samples.reserve(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i)
        samples.push_back(generate_sample(base + static_cast<uint64_t>(i), cfg));

    DatasetManifest m;
    m.config = cfg;
    m.corpus_seed = corpus_seed;
    m.sample_id_base = base;
    m.count = total;
    m.splits.train_begin = 0;
    m.splits.train_end = train_count;
    m.splits.val_begin = train_count;
    m.splits.val_end = train_count + val_count;
    m.splits.test_begin = train_count + val_count;
    m.splits.test_end = total;
    write_dataset(samples, path, m);
    return m;
}

}  // namespace dp
