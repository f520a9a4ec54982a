#include <doctest.h>

#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>

#include "diffprompt/checkpoint.hpp"
#include "diffprompt/errors.hpp"
#include "diffprompt/nn.hpp"
#include "diffprompt/rng.hpp"

using namespace dp;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

// Owns the parameters the non-owning ParamSet points at.
struct ParamStore {
    std::deque<ParamT<float>> owned;
    ParamSetT<float> set;

    ParamT<float>& add(const std::string& name, std::vector<int64_t> shape, Rng& rng) {
        owned.emplace_back();
        auto& p = owned.back();
        p.name = name;
        p.init_shape(std::move(shape));
        p.value.fill_normal(rng);
        set.add(&p);
        return p;
    }
};

ParamStore make_params(uint64_t seed) {
    ParamStore s;
    Rng rng(seed);
    s.add("enc.w", {4, 3}, rng);
    s.add("enc.b", {1, 3}, rng);
    s.add("head.w", {3, 2}, rng);
    return s;
}

}  // namespace

TEST_CASE("checkpoint round trip restores values, meta, and digest") {
    auto store = make_params(5);
    CheckpointMeta meta;
    meta.component = "unit";
    meta.config_hash = "cafe1234";
    meta.upstream_digests["grounder"] = "aabbccdd";
    meta.extra["note"] = "round-trip";

    const std::string path = temp_path("dp_test_ckpt.dpck");
    save_checkpoint(path, meta, store.set);

    auto store2 = make_params(99);  // different values, same layout
    auto loaded = load_checkpoint(path, store2.set);
    CHECK(loaded.component == "unit");
    CHECK(loaded.config_hash == "cafe1234");
    CHECK(loaded.upstream_digests.at("grounder") == "aabbccdd");
    CHECK(loaded.extra.at("note") == "round-trip");
    for (size_t i = 0; i < store.set.params().size(); ++i)
        CHECK(store2.set.params()[i]->value.data == store.set.params()[i]->value.data);

    // The in-memory digest matches the on-disk blob digest.
    CHECK(params_digest(store.set) == checkpoint_digest(path));
    CHECK(params_digest(store2.set) == params_digest(store.set));

    auto meta_only = read_checkpoint_meta(path);
    CHECK(meta_only.component == "unit");

    std::remove(path.c_str());
}

TEST_CASE("digest changes when any value changes") {
    auto store = make_params(5);
    auto d1 = params_digest(store.set);
    store.set.params()[1]->value.at(2) += 1e-3f;
    CHECK(params_digest(store.set) != d1);
}

TEST_CASE("loading rejects name and shape mismatches") {
    auto store = make_params(5);
    CheckpointMeta meta;
    meta.component = "unit";
    const std::string path = temp_path("dp_test_ckpt_mismatch.dpck");
    save_checkpoint(path, meta, store.set);

    Rng rng(1);
    ParamStore renamed;
    renamed.add("enc.w", {4, 3}, rng);
    renamed.add("enc.bias", {1, 3}, rng);
    renamed.add("head.w", {3, 2}, rng);
    CHECK_THROWS_AS(load_checkpoint(path, renamed.set), CheckpointError);

    ParamStore reshaped;
    reshaped.add("enc.w", {4, 3}, rng);
    reshaped.add("enc.b", {3, 1}, rng);
    reshaped.add("head.w", {3, 2}, rng);
    CHECK_THROWS_AS(load_checkpoint(path, reshaped.set), CheckpointError);

    ParamStore fewer;
    fewer.add("enc.w", {4, 3}, rng);
    fewer.add("enc.b", {1, 3}, rng);
    CHECK_THROWS_AS(load_checkpoint(path, fewer.set), CheckpointError);

    std::remove(path.c_str());
}

TEST_CASE("corrupt files raise checkpoint errors") {
    auto store = make_params(5);
    CheckpointMeta meta;
    meta.component = "unit";
    const std::string path = temp_path("dp_test_ckpt_corrupt.dpck");
    save_checkpoint(path, meta, store.set);

    auto corrupt_byte = [&](int64_t offset, char value) {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(offset);
        f.write(&value, 1);
    };

    auto target = make_params(1);

    corrupt_byte(0, 'Z');
    CHECK_THROWS_AS(load_checkpoint(path, target.set), CheckpointError);
    CHECK_THROWS_AS(read_checkpoint_meta(path), CheckpointError);

    corrupt_byte(0, 'D');
    corrupt_byte(4, 7);
    CHECK_THROWS_AS(load_checkpoint(path, target.set), CheckpointError);

    corrupt_byte(4, 1);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
    CHECK_THROWS_AS(load_checkpoint(path, target.set), CheckpointError);

    CHECK_THROWS_AS(load_checkpoint(temp_path("dp_no_such_file.dpck"), target.set),
                    CheckpointError);

    std::remove(path.c_str());
}

TEST_CASE("named tensor interface preserves shapes and order") {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b({1, 4}, {9, 8, 7, 6});
    CheckpointMeta meta;
    meta.component = "latents";
    const std::string path = temp_path("dp_test_tensors.dpck");
    save_tensors(path, meta, {{"z.0", &a}, {"z.1", &b}});

    std::vector<std::pair<std::string, Tensor>> out;
    auto loaded = load_tensors(path, out);
    CHECK(loaded.component == "latents");
    REQUIRE(out.size() == 2);
    CHECK(out[0].first == "z.0");
    CHECK(out[0].second.shape == a.shape);
    CHECK(out[0].second.data == a.data);
    CHECK(out[1].first == "z.1");
    CHECK(out[1].second.data == b.data);
    std::remove(path.c_str());
}

TEST_CASE("digest is stable across save-load-save") {
    auto store = make_params(21);
    CheckpointMeta meta;
    meta.component = "unit";
    const std::string p1 = temp_path("dp_test_ckpt_s1.dpck");
    const std::string p2 = temp_path("dp_test_ckpt_s2.dpck");
    save_checkpoint(p1, meta, store.set);
    auto store2 = make_params(0);
    load_checkpoint(p1, store2.set);
    save_checkpoint(p2, meta, store2.set);
    CHECK(checkpoint_digest(p1) == checkpoint_digest(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}
