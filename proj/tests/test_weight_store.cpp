#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "modlora/rng.hpp"
#include "modlora/weight_store.hpp"

using namespace modlora;
namespace fs = std::filesystem;

namespace {

std::string header_of(const std::string& bytes) {
    std::uint64_t n = 0;
    for (int i = 7; i >= 0; --i) n = (n << 8) | static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]);
    return bytes.substr(8, n);
}

/// Hand-assembled file: length prefix, header text, raw payload.
std::string assemble(const std::string& header, const std::string& payload) {
    std::string out;
    std::uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((n >> (8 * i)) & 0xff));
    return out + header + payload;
}

std::string f64_bytes(std::initializer_list<double> vs) {
    std::string out;
    for (double v : vs) {
        const auto u = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
    return out;
}

const char* kMeta = R"("__metadata__":{"kind":"base_weights"})";

FormatError::Kind kind_of(const std::string& bytes) {
    try {
        decode_checkpoint(bytes);
    } catch (const FormatError& e) {
        return e.kind();
    }
    ADD_FAILURE() << "decoded a malformed file";
    return FormatError::Kind::BadEntry;
}

fs::path temp_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("modlora_ws_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

}  // namespace

TEST(Safetensors, HeaderLayoutOracle) {
    TensorMap t;
    t.emplace("w", Matrix{{1, 2}, {3, 4}});
    CheckpointManifest m;
    const std::string bytes = encode_checkpoint(t, m);
    const auto h = nlohmann::json::parse(header_of(bytes));
    EXPECT_EQ(h["w"]["dtype"], "F64");
    EXPECT_EQ(h["w"]["shape"], nlohmann::json::array({2, 2}));
    EXPECT_EQ(h["w"]["data_offsets"], nlohmann::json::array({0, 32}));
    EXPECT_EQ(bytes.size(), 8 + header_of(bytes).size() + 32);
    EXPECT_EQ(bytes.substr(bytes.size() - 32), f64_bytes({1, 2, 3, 4}));
}

TEST(Safetensors, TensorsPackedInKeyOrder) {
    TensorMap t;
    t.emplace("b", Matrix{{2}});
    t.emplace("a", Matrix{{1, 1}});
    const auto h = nlohmann::json::parse(header_of(encode_checkpoint(t, {})));
    EXPECT_EQ(h["a"]["data_offsets"], nlohmann::json::array({0, 16}));
    EXPECT_EQ(h["b"]["data_offsets"], nlohmann::json::array({16, 24}));
}

// 100 randomized checkpoints, half of them adapters with provenance.
TEST(Safetensors, RandomRoundTripIsByteExact) {
    Rng rng(77);
    const auto dir = temp_dir("roundtrip");
    for (int c = 0; c < 100; ++c) {
        TensorMap t;
        const std::size_t k = 1 + rng.below(5);
        for (std::size_t i = 0; i < k; ++i) {
            Matrix m = gaussian(rng, 1 + rng.below(6), 1 + rng.below(6), 0.0, 1e3);
            if (rng.below(4) == 0) m(0, 0) = -0.0;
            t.emplace("layer" + std::to_string(rng.below(100)) + ".t" + std::to_string(i), std::move(m));
        }
        CheckpointManifest man;
        if (c % 2) {
            man.kind = CheckpointKind::Adapter;
            man.rank = 1 + rng.below(8);
            man.scale = rng.uniform() * 4 - 2;
            man.provenance = {{"name", "a" + std::to_string(c)}, {"note", "x\"y"}};
        }
        const auto path = dir / ("c" + std::to_string(c) + ".safetensors");
        write_checkpoint(t, man, path);
        const std::string first = read_file_bytes(path);
        const Checkpoint back = read_checkpoint(path);
        ASSERT_EQ(back.tensors, t);
        ASSERT_EQ(back.manifest, man);
        write_checkpoint(back.tensors, back.manifest, path);
        ASSERT_EQ(read_file_bytes(path), first) << "checkpoint " << c;
        ASSERT_FALSE(fs::exists(path.string() + ".tmp"));
    }
}

TEST(Safetensors, ReadsF32AndRankOneShapes) {
    float vals[2] = {1.5f, -2.25f};
    std::string payload(8, '\0');
    std::memcpy(payload.data(), vals, 8);  // little-endian host
    const std::string h = std::string(R"({"v":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)") + kMeta + "}";
    const Checkpoint ck = decode_checkpoint(assemble(h, payload));
    EXPECT_EQ(ck.tensors.at("v"), (Matrix{{1.5, -2.25}}));
}

TEST(Safetensors, MalformedFilesAreClassified) {
    using K = FormatError::Kind;
    const std::string ok_entry = R"("w":{"dtype":"F64","shape":[1,2],"data_offsets":[0,16]})";
    const std::string two = f64_bytes({1, 2});
    EXPECT_EQ(kind_of("abc"), K::Truncated);
    EXPECT_EQ(kind_of(assemble("{}", "").substr(0, 9)), K::Truncated);
    EXPECT_EQ(kind_of(assemble("{not json", "")), K::HeaderJson);
    EXPECT_EQ(kind_of(assemble("[1]", "")), K::HeaderJson);
    EXPECT_EQ(kind_of(assemble("{" + ok_entry + "," + kMeta + "}", two.substr(0, 8))), K::Truncated);
    EXPECT_EQ(kind_of(assemble(R"({"w":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]},)" + std::string(kMeta) + "}",
                               "ab")),
              K::UnsupportedDtype);
    EXPECT_EQ(kind_of(assemble(R"({"w":{"dtype":"F64","shape":[1,3],"data_offsets":[0,16]},)" + std::string(kMeta) + "}",
                               two)),
              K::BadEntry);
    EXPECT_EQ(kind_of(assemble(R"({"a":{"dtype":"F64","shape":[2],"data_offsets":[0,16]},)"
                               R"("b":{"dtype":"F64","shape":[1],"data_offsets":[8,16]},)" +
                                   std::string(kMeta) + "}",
                               two)),
              K::OverlappingOffsets);
    EXPECT_EQ(kind_of(assemble("{" + ok_entry + "}", two)), K::BadMetadata);
    EXPECT_EQ(kind_of(assemble("{" + ok_entry + R"(,"__metadata__":{"kind":"adapter"}})", two)), K::BadMetadata);
    EXPECT_EQ(kind_of(assemble("{" + ok_entry + R"(,"__metadata__":{"kind":"base_weights","x":1}})", two)),
              K::BadMetadata);
    EXPECT_EQ(kind_of(assemble("{" + ok_entry + "," + kMeta + "}", two + "zz")), K::BadEntry);
    // a valid file decodes
    EXPECT_NO_THROW(decode_checkpoint(assemble("{" + ok_entry + "," + kMeta + "}", two)));
}

TEST(Safetensors, ManifestValidation) {
    CheckpointManifest m;
    m.kind = CheckpointKind::Adapter;
    EXPECT_THROW(encode_checkpoint({}, m), ValidationError);
    m.rank = 2;
    m.scale = 1.0;
    m.provenance["rank"] = "3";
    EXPECT_THROW(encode_checkpoint({}, m), ValidationError);
    TensorMap bad;
    bad.emplace("__metadata__", Matrix{{1}});
    EXPECT_THROW(encode_checkpoint(bad, {}), ValidationError);
}

TEST(Safetensors, MissingFileIsIoError) {
    EXPECT_THROW(read_checkpoint("/nonexistent/dir/x.safetensors"), IoError);
}

TEST(FormatDouble, ShortestRoundTrip) {
    for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, -0.0}) {
        const auto s = format_double(v);
        ASSERT_EQ(std::bit_cast<std::uint64_t>(*parse_double(s)), std::bit_cast<std::uint64_t>(v)) << s;
    }
    EXPECT_EQ(format_double(0.5), "0.5");
    EXPECT_FALSE(parse_double("1.0x"));
}

// Other writers pad the header with spaces to an 8-byte boundary.
TEST(Safetensors, AcceptsSpacePaddedHeaders) {
    const TensorMap t{{"w", Matrix{{1.5, -2.0}}}};
    const std::string bytes = encode_checkpoint(t, {});
    const std::string header = header_of(bytes);
    const std::string padded = assemble(header + "     ", bytes.substr(8 + header.size()));
    EXPECT_EQ(decode_checkpoint(padded).tensors, t);
}
