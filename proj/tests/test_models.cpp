#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gallop/checkpoint.hpp"
#include "gallop/error.hpp"
#include "gallop/model.hpp"
#include "gallop/params.hpp"
#include "gallop/selection.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace gallop;

namespace {

ModelConfig small_mlp() {
    ModelConfig cfg;
    cfg.arch = ArchKind::mlp;
    cfg.input_dim = 4;
    cfg.hidden_width = 8;
    cfg.depth = 3;
    cfg.output_dim = 2;
    return cfg;
}

struct TempFile {
    std::string path;
    explicit TempFile(const char* name)
        : path((std::filesystem::temp_directory_path() / name).string()) {}
    ~TempFile() { std::remove(path.c_str()); }
};

} // namespace

TEST_CASE("build_model: same seed gives bit-identical parameters") {
    Model a = build_model(small_mlp(), 0);
    Model b = build_model(small_mlp(), 0);
    CHECK(diff_count(a.params, b.params) == 0);

    Model c = build_model(small_mlp(), 1);
    CHECK(diff_count(a.params, c.params) > 0);
}

TEST_CASE("build_model: mlp(4,8,2,L=3) has 112 parameters, no biases") {
    Model m = build_model(small_mlp(), 0);
    CHECK(m.params.total_count() == 4 * 8 + 8 * 8 + 8 * 2);
    CHECK(m.params.layer_count() == 3);
}

TEST_CASE("build_model: transformer total equals the sum of its layer sizes") {
    ModelConfig cfg;
    cfg.arch = ArchKind::micro_transformer;
    cfg.input_dim = 10;
    cfg.hidden_width = 16;
    cfg.n_heads = 2;
    cfg.n_blocks = 1;
    cfg.vocab_size = 16;
    cfg.context_len = 16;
    cfg.output_dim = 4;
    Model m = build_model(cfg, 0);
    std::size_t sum = 0;
    for (const auto& l : m.params.layers()) sum += l.size();
    CHECK(m.params.total_count() == sum);
    CHECK(m.params.find("blk0.attn.wq0") >= 0);
    CHECK(m.params.find("ln_f.scale") >= 0);
}

TEST_CASE("build_model: rejects bad dimensions") {
    ModelConfig cfg = small_mlp();
    cfg.hidden_width = 0;
    CHECK_THROWS_AS((void)build_model(cfg, 0), Error);
    cfg = small_mlp();
    cfg.depth = 1;
    CHECK_THROWS_AS((void)build_model(cfg, 0), Error);
}

TEST_CASE("snapshot: independent deep copy") {
    Model m = build_model(small_mlp(), 3);
    ParameterSet copy = snapshot(m.params);
    CHECK(diff_count(m.params, copy) == 0);

    m.params.layer(0).values.data[0] += 1.0;
    CHECK(diff_count(m.params, copy) == 1);

    ParameterSet again = snapshot(copy);
    CHECK(diff_count(copy, again) == 0);
}

TEST_CASE("diff_count: exact count and structure errors") {
    Model m = build_model(small_mlp(), 3);
    ParameterSet other = snapshot(m.params);
    CHECK(diff_count(m.params, other) == 0);
    other.layer(1).values.data[5] *= -1.0;
    CHECK(diff_count(m.params, other) == 1);

    ParameterSet wrong;
    wrong.add_layer("fc1", 4, 8);
    CHECK_THROWS_AS((void)diff_count(m.params, wrong), Error);
}

TEST_CASE("parameter iteration order is stable across builds") {
    Model a = build_model(small_mlp(), 0);
    Model b = build_model(small_mlp(), 42);
    REQUIRE(a.params.layer_count() == b.params.layer_count());
    for (std::size_t l = 0; l < a.params.layer_count(); ++l) {
        CHECK(a.params.layer(l).name == b.params.layer(l).name);
    }
}

TEST_CASE("checkpoint round-trip without mask") {
    Model m = build_model(small_mlp(), 5);
    TempFile tmp("gallop_test_ckpt.bin");
    save_checkpoint(tmp.path, m.config, m.params);
    Checkpoint loaded = load_checkpoint(tmp.path);
    CHECK(loaded.config == m.config);
    CHECK(diff_count(loaded.params, m.params) == 0);
    CHECK_FALSE(loaded.mask.has_value());
}

TEST_CASE("checkpoint round-trip with mask sidecar") {
    Model m = build_model(small_mlp(), 5);
    SparsityMask mask;
    mask.init(m.params);
    mask.set(0, 3, true);
    mask.set(2, 15, true);
    mask.threshold = 0.125;
    mask.target_density = 0.02;
    mask.sample_seed = 99;

    TempFile tmp("gallop_test_ckpt_mask.bin");
    save_checkpoint(tmp.path, m.config, m.params, &mask);
    Checkpoint loaded = load_checkpoint(tmp.path);
    REQUIRE(loaded.mask.has_value());
    CHECK(loaded.mask->ones() == 2);
    CHECK(loaded.mask->get(0, 3));
    CHECK(loaded.mask->get(2, 15));
    CHECK_FALSE(loaded.mask->get(0, 0));
    CHECK(loaded.mask->threshold == 0.125);
    CHECK(loaded.mask->target_density == 0.02);
    CHECK(loaded.mask->sample_seed == 99);
}

TEST_CASE("checkpoint: corrupt magic is rejected") {
    TempFile tmp("gallop_test_ckpt_bad.bin");
    {
        std::ofstream out(tmp.path, std::ios::binary);
        out << "NOPE----------------";
    }
    CHECK_THROWS_AS((void)load_checkpoint(tmp.path), Error);
}
