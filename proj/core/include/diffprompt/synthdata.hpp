#pragma once

// Deterministic synthetic referring-expression corpus: scenes of geometric
// shapes, grammar captions of the form "the [size?] [color] [shape]
// [relation?]", exact silhouette masks, and tight boxes. Includes the binary
// dataset format and its JSON sidecar manifest.

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "diffprompt/errors.hpp"
#include "diffprompt/tensor.hpp"

namespace dp {

struct PaletteColor {
    std::string name;
    float r, g, b;
};

struct SceneConfig {
    int64_t image_size = 64;
    int64_t min_shapes = 2;
    int64_t max_shapes = 4;
    int64_t caption_len = 8;
    std::vector<PaletteColor> palette = {
        {"red", 0.90f, 0.10f, 0.10f},
        {"green", 0.10f, 0.80f, 0.15f},
        {"blue", 0.12f, 0.20f, 0.85f},
        {"yellow", 0.90f, 0.85f, 0.10f},
    };
    // Radii in pixels for the two size categories.
    double small_r_min = 5.0, small_r_max = 8.0;
    double large_r_min = 10.0, large_r_max = 13.0;

    void validate() const;

    // Token table: PAD, EOS, "the", "small", "large", palette colors, shape
    // kinds, then the six relation words. Ids are positions in this list.
    std::vector<std::string> vocab() const;
    int64_t vocab_size() const { return static_cast<int64_t>(vocab().size()); }
};

// Token ids fixed by the vocab layout above.
namespace tok {
constexpr uint16_t PAD = 0;
constexpr uint16_t EOS = 1;
constexpr uint16_t THE = 2;
constexpr uint16_t SMALL = 3;
constexpr uint16_t LARGE = 4;
constexpr uint16_t COLOR0 = 5;  // palette colors follow in order
inline uint16_t color(int64_t idx) { return static_cast<uint16_t>(COLOR0 + idx); }
inline uint16_t kind(const SceneConfig& cfg, int64_t idx) {
    return static_cast<uint16_t>(COLOR0 + cfg.palette.size() + idx);
}
inline uint16_t relation(const SceneConfig& cfg, int64_t idx) {
    return static_cast<uint16_t>(COLOR0 + cfg.palette.size() + 3 + idx);
}
}  // namespace tok

enum class ShapeKind { Circle = 0, Square = 1, Triangle = 2 };
enum class Relation { Left = 0, Right = 1, Top = 2, Bottom = 3, Leftmost = 4, Rightmost = 5 };

struct SceneShape {
    ShapeKind kind;
    int64_t color;    // palette index
    int64_t size_cat; // 0 small, 1 large
    double cx, cy, r;
};

struct Sample {
    Tensor image;                  // {3, H, W}, values in [0, 1]
    std::vector<uint16_t> caption; // fixed caption_len, PAD padded after EOS
    TensorT<uint8_t> mask;         // {1, H, W}, values in {0, 1}
    std::array<float, 4> box{};    // x_min, y_min, x_max, y_max (exclusive max)
    uint64_t sample_id = 0;
};

// Caption predicate pieces, shared with tests that brute-force uniqueness.
struct CaptionParse {
    bool has_size = false;
    int64_t size_cat = 0;
    int64_t color = -1;
    int64_t kind = -1;
    bool has_relation = false;
    Relation relation = Relation::Left;
};

CaptionParse parse_caption(const std::vector<uint16_t>& caption, const SceneConfig& cfg);

// True when shape i is the unique referent of the parsed caption within the
// scene. Relation words left/right/top/bottom test the center against the
// image midline strictly; leftmost/rightmost compare against every other
// shape matching the caption's attribute words.
bool caption_matches(const CaptionParse& p, const std::vector<SceneShape>& shapes, size_t i,
                     const SceneConfig& cfg);

// Deterministic per-seed scene generation. Rejects and resamples scenes that
// admit no unambiguous caption for the chosen target; throws GenerationError
// after 100 rejections. When out_shapes is given, the accepted scene's shapes
// are copied there (test hook for the uniqueness oracle).
Sample generate_sample(uint64_t seed, const SceneConfig& cfg,
                       std::vector<SceneShape>* out_shapes = nullptr);

// ---------------------------------------------------------------------------
// Dataset file format.
// ---------------------------------------------------------------------------

struct DatasetSplits {
    // Half-open index ranges into the record order.
    int64_t train_begin = 0, train_end = 0;
    int64_t val_begin = 0, val_end = 0;
    int64_t test_begin = 0, test_end = 0;
};

struct DatasetManifest {
    SceneConfig config;
    DatasetSplits splits;
    uint64_t corpus_seed = 0;
    uint64_t sample_id_base = 0;
    int64_t count = 0;
};

void write_dataset(const std::vector<Sample>& samples, const std::string& path,
                   const DatasetManifest& manifest);

// Random-access reader over the binary file. Header is validated on open;
// records are read on demand.
class DatasetReader {
public:
    explicit DatasetReader(const std::string& path);

    int64_t count() const { return count_; }
    int64_t image_size() const { return image_size_; }
    int64_t caption_len() const { return caption_len_; }
    Sample read(int64_t index) const;

private:
    mutable std::ifstream file_;
    std::string path_;
    int64_t count_ = 0;
    int64_t image_size_ = 0;
    int64_t caption_len_ = 0;
    int64_t record_size_ = 0;
    int64_t header_size_ = 0;
};

DatasetManifest read_manifest(const std::string& dataset_path);
std::string manifest_path_for(const std::string& dataset_path);

// JSON round trip for SceneConfig (shared with RunConfig serialization).
std::string scene_config_to_json_string(const SceneConfig& cfg);
SceneConfig scene_config_from_json_string(const std::string& text);

// Generates count samples with consecutive sample ids starting at
// splitmix64(corpus_seed) and writes dataset plus manifest.
DatasetManifest build_corpus(const SceneConfig& cfg, uint64_t corpus_seed, int64_t train_count,
                             int64_t val_count, int64_t test_count, const std::string& path);

}  // namespace dp
