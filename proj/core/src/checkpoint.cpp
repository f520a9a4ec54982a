#include "diffprompt/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "diffprompt/errors.hpp"

namespace dp {

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'D', 'P', 'C', 'K'};
constexpr uint32_t kVersion = 1;

uint64_t fnv1a_bytes(const char* data, size_t count, uint64_t h = 0xcbf29ce484222325ULL) {
    for (size_t i = 0; i < count; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

json meta_to_json(const CheckpointMeta& meta,
                  const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    json jt = json::array();
    for (const auto& [name, t] : tensors)
        jt.push_back({{"name", name}, {"shape", t->shape}, {"dtype", "f32"}});
    json ud = json::object();
    for (const auto& [k, v] : meta.upstream_digests) ud[k] = v;
    json ex = json::object();
    for (const auto& [k, v] : meta.extra) ex[k] = v;
    return json{{"component", meta.component}, {"config_hash", meta.config_hash},
                {"upstream_digests", ud},      {"extra", ex},
                {"tensors", jt}};
}

struct ParsedHeader {
    CheckpointMeta meta;
    std::vector<std::pair<std::string, std::vector<int64_t>>> tensors;
    int64_t blob_offset = 0;
    int64_t blob_len = 0;
};

ParsedHeader read_header(std::ifstream& f, const std::string& path) {
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw CheckpointError("bad magic in " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    if (!f || version != kVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                              " in " + path);
    uint64_t manifest_len = 0;
    f.read(reinterpret_cast<char*>(&manifest_len), 8);
    if (!f) throw CheckpointError("truncated header in " + path);
    std::string manifest(manifest_len, '\0');
    f.read(manifest.data(), static_cast<std::streamsize>(manifest_len));
    if (!f) throw CheckpointError("truncated manifest in " + path);
    json j = json::parse(manifest, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw CheckpointError("unparseable manifest in " + path);

    ParsedHeader h;
    h.meta.component = j.at("component").get<std::string>();
    h.meta.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& [k, v] : j.at("upstream_digests").items())
        h.meta.upstream_digests[k] = v.get<std::string>();
    for (const auto& [k, v] : j.at("extra").items()) h.meta.extra[k] = v.get<std::string>();
    int64_t total = 0;
    for (const auto& t : j.at("tensors")) {
        auto shape = t.at("shape").get<std::vector<int64_t>>();
        if (t.at("dtype").get<std::string>() != "f32")
            throw CheckpointError("unsupported dtype in " + path);
        total += Tensor::numel_of(shape);
        h.tensors.emplace_back(t.at("name").get<std::string>(), std::move(shape));
    }
    h.blob_offset = 16 + static_cast<int64_t>(manifest_len);
    h.blob_len = total * 4;

    f.seekg(0, std::ios::end);
    if (static_cast<int64_t>(f.tellg()) != h.blob_offset + h.blob_len)
        throw CheckpointError("blob length mismatch in " + path);
    f.seekg(h.blob_offset);
    return h;
}

}  // namespace

void save_tensors(const std::string& path, const CheckpointMeta& meta,
                  const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    const std::string manifest = meta_to_json(meta, tensors).dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open " + path + " for writing");
    f.write(kMagic, 4);
    f.write(reinterpret_cast<const char*>(&kVersion), 4);
    const uint64_t mlen = manifest.size();
    f.write(reinterpret_cast<const char*>(&mlen), 8);
    f.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    for (const auto& [name, t] : tensors)
        f.write(reinterpret_cast<const char*>(t->data.data()),
                static_cast<std::streamsize>(t->data.size() * 4));
    if (!f) throw CheckpointError("write failed for " + path);
}

CheckpointMeta load_tensors(const std::string& path,
                            std::vector<std::pair<std::string, Tensor>>& out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path);
    ParsedHeader h = read_header(f, path);
    out.clear();
    for (const auto& [name, shape] : h.tensors) {
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * 4));
        if (!f) throw CheckpointError("truncated blob in " + path);
        out.emplace_back(name, std::move(t));
    }
    return h.meta;
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path);
    return read_header(f, path).meta;
}

std::string checkpoint_digest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path);
    ParsedHeader h = read_header(f, path);
    uint64_t hash = 0xcbf29ce484222325ULL;
    std::vector<char> buf(1 << 16);
    int64_t remaining = h.blob_len;
    while (remaining > 0) {
        const int64_t chunk = std::min<int64_t>(remaining, static_cast<int64_t>(buf.size()));
        f.read(buf.data(), chunk);
        if (!f) throw CheckpointError("truncated blob in " + path);
        hash = fnv1a_bytes(buf.data(), static_cast<size_t>(chunk), hash);
        remaining -= chunk;
    }
    return hex64(hash);
}

std::string params_digest(const ParamSetT<float>& params) {
    uint64_t hash = 0xcbf29ce484222325ULL;
    for (const auto* p : params.params())
        hash = fnv1a_bytes(reinterpret_cast<const char*>(p->value.data.data()),
                           p->value.data.size() * 4, hash);
    return hex64(hash);
}

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamSetT<float>& params) {
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    tensors.reserve(params.params().size());
    for (const auto* p : params.params()) tensors.emplace_back(p->name, &p->value);
    save_tensors(path, meta, tensors);
}

CheckpointMeta load_checkpoint(const std::string& path, ParamSetT<float>& params) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    CheckpointMeta meta = load_tensors(path, tensors);
    if (tensors.size() != params.params().size())
        throw CheckpointError(path + " holds " + std::to_string(tensors.size()) +
                              " tensors, model expects " +
                              std::to_string(params.params().size()));
    for (auto& [name, t] : tensors) {
        ParamT<float>* p = params.find(name);
        if (!p) throw CheckpointError("unexpected tensor " + name + " in " + path);
        if (p->value.shape != t.shape)
            throw CheckpointError("shape mismatch for " + name + " in " + path + ": " +
                                  shape_str(t.shape) + " vs " + shape_str(p->value.shape));
        p->value = std::move(t);
    }
    return meta;
}

}  // namespace dp
