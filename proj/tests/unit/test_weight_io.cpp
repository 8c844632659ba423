#include "doctest.h"

#include "ffscope/error.hpp"
#include "ffscope/weight_io.hpp"

#include "oracle.hpp"
#include "tempdir.hpp"

#include <cstring>
#include <fstream>

using namespace ffscope;
using ffscope::testing::small_config;
using ffscope::testing::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes;
}

ErrorCode read_error(const std::filesystem::path& p) {
    try {
        (void)read_weights(p);
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("read succeeded");
    return ErrorCode::InvalidArgument;
}

bool same_weights(const ModelConfig& c, const WeightSet& a, const WeightSet& b) {
    const auto sa = tensor_slots(c, a);
    const auto sb = tensor_slots(c, b);
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa[i].name != sb[i].name || !bitwise_equal(sa[i].data, sb[i].data)) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("weights round-trip bitwise") {
    TempDir dir;
    for (auto pos : {PositionEncoding::learned, PositionEncoding::none}) {
        auto c = small_config(2, 8, 24, 19);
        c.position_encoding = pos;
        c.residual_style = ResidualStyle::parallel;
        c.nonlinearity = Nonlinearity::relu;
        const auto w = random_weights(c, 42);
        write_weights(dir / "m.ffw", c, w);
        const auto loaded = read_weights(dir / "m.ffw");
        CHECK(loaded.config == c);
        CHECK(same_weights(c, w, loaded.weights));
        CHECK(weights_hash(c, w) == weights_hash(loaded.config, loaded.weights));
    }
}

TEST_CASE("two writes are byte-identical and tensors are 64-byte aligned") {
    TempDir dir;
    const auto c = small_config(2, 8, 24, 19);
    const auto w = random_weights(c, 7);
    write_weights(dir / "a.ffw", c, w);
    write_weights(dir / "b.ffw", c, w);
    const auto a = slurp(dir / "a.ffw");
    CHECK(a == slurp(dir / "b.ffw"));
    CHECK(a.compare(0, 8, "FFSCOPE1") == 0);

    std::uint64_t header_len = 0;
    std::memcpy(&header_len, a.data() + 16, 8);
    const auto header = nlohmann::json::parse(a.substr(24, header_len));
    for (const auto& t : header.at("tensors")) {
        CHECK(t.at("offset").get<std::size_t>() % 64 == 0);
        CHECK(t.at("dtype") == "f32");
    }
    CHECK(header.at("tensors").size() == tensor_names(c).size());
}

TEST_CASE("write to an unwritable path fails with IoFailure") {
    const auto c = small_config(1, 4, 4, 4);
    try {
        write_weights("/nonexistent-dir/x/m.ffw", c, random_weights(c, 1));
        FAIL("no error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::IoFailure);
    }
}

TEST_CASE("read_weights rejects damaged files") {
    TempDir dir;
    const auto c = small_config(2, 8, 24, 19);
    write_weights(dir / "m.ffw", c, random_weights(c, 1));
    const auto good = slurp(dir / "m.ffw");

    SUBCASE("bad magic") {
        auto bad = good;
        bad.replace(0, 8, "XXXXXXXX");
        spit(dir / "x.ffw", bad);
        CHECK(read_error(dir / "x.ffw") == ErrorCode::BadMagic);
    }
    SUBCASE("unsupported version") {
        auto bad = good;
        bad[8] = 9;
        spit(dir / "x.ffw", bad);
        CHECK(read_error(dir / "x.ffw") == ErrorCode::VersionUnsupported);
    }
    SUBCASE("truncated tensor region") {
        spit(dir / "x.ffw", good.substr(0, good.size() - 100));
        CHECK(read_error(dir / "x.ffw") == ErrorCode::CorruptDirectory);
    }
    SUBCASE("header length beyond the file") {
        auto bad = good;
        const std::uint64_t huge = 1ULL << 40;
        std::memcpy(bad.data() + 16, &huge, 8);
        spit(dir / "x.ffw", bad);
        CHECK(read_error(dir / "x.ffw") == ErrorCode::CorruptDirectory);
    }
    SUBCASE("misaligned or overlapping directory entries") {
        std::uint64_t header_len = 0;
        std::memcpy(&header_len, good.data() + 16, 8);
        auto header = nlohmann::json::parse(good.substr(24, header_len));
        auto rewrite = [&](const nlohmann::json& h) {
            auto text = h.dump();
            text.resize(header_len, ' ');
            auto bad = good;
            bad.replace(24, header_len, text);
            spit(dir / "x.ffw", bad);
        };
        auto misaligned = header;
        misaligned["tensors"][1]["offset"] = misaligned["tensors"][1]["offset"].get<std::size_t>() + 4;
        rewrite(misaligned);
        CHECK(read_error(dir / "x.ffw") == ErrorCode::CorruptDirectory);

        auto overlap = header;
        overlap["tensors"][2]["offset"] = overlap["tensors"][1]["offset"];
        rewrite(overlap);
        CHECK(read_error(dir / "x.ffw") == ErrorCode::CorruptDirectory);

        auto renamed = header;
        renamed["tensors"][0]["name"] = "mystery";
        rewrite(renamed);
        CHECK(read_error(dir / "x.ffw") == ErrorCode::CorruptDirectory);

        auto reshaped = header;
        reshaped["tensors"][0]["shape"] = {18, 8};
        rewrite(reshaped);
        CHECK(read_error(dir / "x.ffw") == ErrorCode::ShapeMismatch);
    }
}

TEST_CASE("config JSON defaults d_ff to four times d_model") {
    const auto c = config_from_json({{"n_layers", 2}, {"d_model", 8}, {"vocab_size", 10}, {"max_seq_len", 16}});
    CHECK(c.d_ff == 32);
    CHECK(config_from_json(config_to_json(c)) == c);
}

TEST_CASE("detector model: detect token makes predict token the argmax, masking removes it") {
    auto c = small_config(2, 16, 32, 64, 16);
    DetectorSpec spec;
    spec.layer = 2;
    spec.key_index = 5;
    spec.detect_token = '.' - 32; // any id below vocab works
    spec.predict_token = 'a' - 64;
    const auto w = build_detector_model(c, {spec}, 3);
    const Model m = build_model(c, w);
    const std::vector<TokenId> input{1, 2, 3, spec.detect_token};
    const auto trace = m.forward(input);
    CHECK(argmax(trace.logits.row(3)) == spec.predict_token);
    // Coefficient is gain * |e|^2 with |e|^2 = d_model.
    CHECK(std::abs(trace.key_products[1](3, 4) - 10.0f * 16.0f) <= 1e-3);

    auto masked = w;
    std::fill(masked.layers[1].ff_keys.row(4).begin(), masked.layers[1].ff_keys.row(4).end(), 0.0f);
    const auto masked_trace = build_model(c, masked).forward(input);
    CHECK(argmax(masked_trace.logits.row(3)) != spec.predict_token);
}

TEST_CASE("detector key fires strictly harder on prefixes with the detect token") {
    auto c = small_config(3, 16, 32, 40, 16);
    const DetectorSpec spec{3, 9, 7, 8, 10.0f};
    const Model m = build_model(c, build_detector_model(c, {spec}, 5));
    const auto probe = ffscope::testing::random_corpus(200, 40, 1, 12, 6);
    float worst_with = 1e30f, best_without = -1e30f;
    for (const auto& p : probe.prefixes) {
        const auto trace = m.forward(p.tokens);
        float coef = -1e30f;
        for (std::size_t pos = 0; pos < trace.seq_len(); ++pos) coef = std::max(coef, trace.key_products[2](pos, 8));
        const bool has = std::find(p.tokens.begin(), p.tokens.end(), spec.detect_token) != p.tokens.end();
        (has ? worst_with : best_without) = has ? std::min(worst_with, coef) : std::max(best_without, coef);
    }
    CHECK(worst_with > best_without);
}

TEST_CASE("detector model edge cases") {
    auto c = small_config(2, 16, 32, 64, 16);
    CHECK_NOTHROW((void)build_model(c, build_detector_model(c, {}, 1)).forward(std::vector<TokenId>{1, 2, 3}));
    auto code = [&](std::vector<DetectorSpec> specs) {
        try {
            (void)build_detector_model(c, specs, 1);
        } catch (const Error& e) {
            return e.code();
        }
        return ErrorCode::EmptyCases; // sentinel: no error
    };
    CHECK(code({{3, 1, 1, 2, 10.0f}}) == ErrorCode::IndexOutOfBounds);
    CHECK(code({{1, 33, 1, 2, 10.0f}}) == ErrorCode::IndexOutOfBounds);
    CHECK(code({{1, 1, 64, 2, 10.0f}}) == ErrorCode::IndexOutOfBounds);
    CHECK(code({{1, 1, 1, 2, 10.0f}, {1, 1, 3, 4, 10.0f}}) == ErrorCode::InvalidArgument);
    CHECK(code({{1, 1, 5, 5, 10.0f}}) == ErrorCode::InvalidArgument);
}
