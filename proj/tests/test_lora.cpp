#include <gtest/gtest.h>

#include <filesystem>

#include "modlora/lora.hpp"
#include "modlora/rng.hpp"

using namespace modlora;

namespace {

const LayerShapes kShapes{{"fc0", {6, 5}}, {"fc1", {6, 6}}, {"fc2", {2, 6}}};

LoraAdapter random_adapter(Rng& rng, std::size_t rank, std::string name, std::vector<std::string> layers = {"fc0", "fc1"}) {
    LoraAdapter a = init_adapter(kShapes, std::move(layers), rank, 0.5 + rng.uniform(), rng, std::move(name));
    for (auto& [l, f] : a.entries) f.B = gaussian(rng, f.B.rows(), f.B.cols());
    return a;
}

std::map<std::string, Matrix> random_weights(Rng& rng) {
    std::map<std::string, Matrix> w;
    for (const auto& [l, s] : kShapes) w.emplace(l, gaussian(rng, s.d, s.k));
    return w;
}

double max_diff(const std::map<std::string, Matrix>& a, const std::map<std::string, Matrix>& b) {
    double m = 0.0;
    for (const auto& [k, v] : a) m = std::max(m, max_abs_diff(v, b.at(k)));
    return m;
}

}  // namespace

TEST(Lora, DeltaIsScaledProduct) {
    LoraAdapter a;
    a.name = "hand";
    a.rank = 1;
    a.scale = 2.0;
    a.entries["fc"] = {Matrix{{1}, {2}}, Matrix{{3, 4}}};
    EXPECT_EQ(delta(a, "fc"), (Matrix{{6, 8}, {12, 16}}));
    EXPECT_THROW(delta(a, "nope"), LookupError);
}

TEST(Lora, FreshAdapterIsBitExactlyTransparent) {
    Rng rng(1);
    const auto w = random_weights(rng);
    const LoraAdapter fresh = init_adapter(kShapes, {"fc2", "fc0"}, 3, 1.7, rng);
    EXPECT_EQ(attach(w, fresh, +1), w);
    EXPECT_EQ(attach(w, fresh, -1), w);
    EXPECT_EQ(fresh.entries.begin()->first, "fc0");
}

TEST(Lora, AttachDetachIdentity) {
    Rng rng(2);
    for (int c = 0; c < 100; ++c) {
        const auto w = random_weights(rng);
        const LoraAdapter a = random_adapter(rng, 1 + rng.below(5), "a");
        ASSERT_LE(max_diff(attach(attach(w, a, +1), a, -1), w), 1e-12);
    }
}

TEST(Lora, NegateIsAnExactInvolution) {
    Rng rng(3);
    const LoraAdapter a = random_adapter(rng, 2, "a");
    EXPECT_EQ(negate(negate(a)), a);
    const auto w = random_weights(rng);
    EXPECT_EQ(attach(w, negate(a), +1), attach(w, a, -1));
}

TEST(Lora, MergeConcatMatchesDenseSum) {
    Rng rng(4);
    for (int c = 0; c < 100; ++c) {
        const LoraAdapter a1 = random_adapter(rng, 1 + rng.below(4), "a1");
        const LoraAdapter a2 = random_adapter(rng, 1 + rng.below(4), "a2");
        const LoraAdapter m = merge_concat(a1, a2);
        ASSERT_EQ(m.rank, a1.rank + a2.rank);
        for (const auto& [l, f] : m.entries) {
            ASSERT_LE(max_abs_diff(delta(m, l), add(delta(a1, l), delta(a2, l))), 1e-12);
        }
    }
}

TEST(Lora, MergeRejectsMismatchedLayers) {
    Rng rng(5);
    EXPECT_THROW(merge_concat(random_adapter(rng, 2, "a", {"fc0"}), random_adapter(rng, 2, "b", {"fc1"})), SpecError);
}

TEST(Lora, ComposeIsOrderIndependentBitForBit) {
    Rng rng(6);
    const LoraAdapter a = random_adapter(rng, 2, "a"), b = random_adapter(rng, 3, "b"), c = random_adapter(rng, 1, "c");
    const DeltaMap ref = compose(std::vector<const LoraAdapter*>{&a, &b, &c});
    EXPECT_EQ(compose(std::vector<const LoraAdapter*>{&c, &a, &b}), ref);
    EXPECT_EQ(compose(std::vector<const LoraAdapter*>{&b, &c, &a}), ref);
    EXPECT_LE(max_abs_diff(ref.at("fc0"), add(add(delta(a, "fc0"), delta(b, "fc0")), delta(c, "fc0"))), 1e-12);
}

TEST(Lora, ValidationAndWarnings) {
    Rng rng(7);
    LoraAdapter a = random_adapter(rng, 2, "a");
    EXPECT_NO_THROW(validate_adapter(a, &kShapes));
    const LayerShapes other{{"fc0", {5, 5}}, {"fc1", {6, 6}}};
    EXPECT_THROW(validate_adapter(a, &other), ShapeError);
    a.entries["fc0"].A = Matrix(3, 5);
    EXPECT_THROW(validate_adapter(a), ShapeError);
    EXPECT_THROW(init_adapter(kShapes, {"fc9"}, 2, 1.0, rng), SpecError);
    EXPECT_THROW(init_adapter(kShapes, {"fc0"}, 0, 1.0, rng), ParameterError);
    const LoraAdapter big = init_adapter(kShapes, {"fc2"}, 3, 1.0, rng);
    EXPECT_EQ(big.warnings.size(), 1u);
    EXPECT_THROW(attach(random_weights(rng), a, 2), ParameterError);
}

TEST(Lora, SaveLoadRoundTrip) {
    Rng rng(8);
    const LoraAdapter a = random_adapter(rng, 3, "safety");
    const auto path = std::filesystem::temp_directory_path() / "modlora_lora_rt.safetensors";
    save_adapter(a, path, {{"stage", "test"}});
    EXPECT_EQ(load_adapter(path), a);
    const Checkpoint ck = read_checkpoint(path);
    EXPECT_EQ(ck.manifest.provenance.at("stage"), "test");
    EXPECT_EQ(ck.tensors.count("fc0.lora_A"), 1u);
    EXPECT_EQ(ck.tensors.count("fc1.lora_B"), 1u);
}

TEST(Lora, AdapterCheckpointNeedsBothFactors) {
    Checkpoint ck;
    ck.manifest.kind = CheckpointKind::Adapter;
    ck.manifest.rank = 1;
    ck.manifest.scale = 1.0;
    ck.tensors.emplace("fc0.lora_A", Matrix(1, 3));
    EXPECT_THROW(adapter_from_checkpoint(ck), SpecError);
    ck.tensors.emplace("junk", Matrix(1, 1));
    EXPECT_THROW(adapter_from_checkpoint(ck), SpecError);
}
