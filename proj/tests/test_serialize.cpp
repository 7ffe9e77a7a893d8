#include <doctest.h>

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "diracnet/serialize.hpp"
#include "diracnet/train.hpp"
#include "test_util.hpp"

using namespace diracnet;
using namespace diracnet::serialize;
using namespace diracnet::testutil;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("diracnet_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(bool(f));
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    REQUIRE(bool(f));
    f.write(bytes.data(), std::streamsize(bytes.size()));
}

std::uint32_t get_u32(const std::string& b, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(b[at + i])) << (8 * i);
    return v;
}

void put_u32(std::string& b, std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b[at + i] = char((v >> (8 * i)) & 0xFF);
}

/// One tensor blob's extent within the file, per the documented layout
/// (u32 name length, name, u32 rank, u64 dims, f32 data).
struct BlobSpan {
    std::string name;
    std::size_t begin, end;
    std::size_t rank_at;  // offset of the rank field, dims follow
};

struct ParsedFile {
    std::string bytes;
    std::size_t meta_at, blobs_at;
    nlohmann::json meta;
    std::vector<BlobSpan> blobs;
};

ParsedFile parse_checkpoint(const fs::path& p) {
    ParsedFile out;
    out.bytes = read_file(p);
    REQUIRE(out.bytes.size() > 12);
    const std::uint32_t meta_len = get_u32(out.bytes, 8);
    out.meta_at = 12;
    out.blobs_at = 12 + meta_len;
    out.meta = nlohmann::json::parse(out.bytes.substr(out.meta_at, meta_len));
    std::size_t pos = out.blobs_at;
    const std::size_t count = out.meta.at("tensor_count").get<std::size_t>();
    for (std::size_t i = 0; i < count; ++i) {
        BlobSpan span;
        span.begin = pos;
        const std::uint32_t nlen = get_u32(out.bytes, pos);
        span.name = out.bytes.substr(pos + 4, nlen);
        span.rank_at = pos + 4 + nlen;
        const std::uint32_t rank = get_u32(out.bytes, span.rank_at);
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            std::uint64_t dim = 0;
            for (int byte = 0; byte < 8; ++byte)
                dim |= std::uint64_t(std::uint8_t(out.bytes[span.rank_at + 4 + 8 * d + byte]))
                       << (8 * byte);
            numel *= dim;
        }
        span.end = span.rank_at + 4 + 8 * rank + numel * sizeof(float);
        out.blobs.push_back(span);
        pos = span.end;
    }
    REQUIRE(pos == out.bytes.size());
    return out;
}

nn::NetworkSpec small_spec(nn::Variant variant) {
    nn::NetworkSpec s;
    s.blocks_per_group = 1;
    s.width_factor = 1;
    s.num_classes = 5;
    s.variant = variant;
    if (variant == nn::Variant::ResnetDiracInit) s.init_sigma = 0.1;
    return s;
}

/// Drives a few training batches so batch-norm running stats and weights
/// move off their initialization before the net is persisted.
void warm_up(nn::NetworkT<float>& net, std::uint64_t seed) {
    data::Dataset ds = data::make_synthetic(5, 16, seed);
    ds.norm = data::compute_normalization(ds);
    train::OptimConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 16;
    cfg.schedule = {};
    cfg.augment = false;
    cfg.seed = seed;
    train::Sgd opt(net.parameters(), float(cfg.momentum), float(cfg.weight_decay));
    train::train_epoch(net, opt, ds, cfg, 0);
    net.eval();
}

bool bitwise_equal(const TensorT<float>& a, const TensorT<float>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0;
}

Checkpoint sample_checkpoint(nn::Variant variant, std::uint64_t seed) {
    Checkpoint ckpt;
    ckpt.net = nn::build_network<float>(small_spec(variant), seed);
    warm_up(ckpt.net, seed + 1);
    ckpt.epoch = 7;
    ckpt.seed = 1234;
    ckpt.norm.mean = {0.5f, 0.4f, 0.3f};
    ckpt.norm.stddev = {0.25f, 0.26f, 0.27f};
    return ckpt;
}

}  // namespace

TEST_SUITE("serialize") {
    TEST_CASE("round trip is bit-exact in eval mode for every variant") {
        TempDir dir("ser_roundtrip");
        Rng rng(31);
        TensorT<float> x = random_tensor<float>({2, 3, 32, 32}, rng);
        for (auto variant :
             {nn::Variant::Dirac, nn::Variant::Plain, nn::Variant::ResnetDiracInit}) {
            CAPTURE(nn::variant_name(variant));
            Checkpoint ckpt = sample_checkpoint(variant, 40 + std::uint64_t(variant));
            const fs::path file = dir.path / "net.drcn";
            save(ckpt, file.string());
            Checkpoint back = load(file.string());

            TensorT<float> y0 = ckpt.net.forward(x);
            TensorT<float> y1 = back.net.forward(x);
            CHECK(bitwise_equal(y0, y1));
            CHECK(back.epoch == ckpt.epoch);
            CHECK(back.seed == ckpt.seed);
            CHECK(back.norm.mean == ckpt.norm.mean);
            CHECK(back.norm.stddev == ckpt.norm.stddev);
            CHECK(back.net.spec.variant == variant);
            CHECK_FALSE(back.net.folded);
        }
    }

    TEST_CASE("loading then saving reproduces the file byte for byte") {
        TempDir dir("ser_bytes");
        Checkpoint ckpt = sample_checkpoint(nn::Variant::Dirac, 50);
        const fs::path a = dir.path / "a.drcn";
        const fs::path b = dir.path / "b.drcn";
        save(ckpt, a.string());
        save(load(a.string()), b.string());
        CHECK(read_file(a) == read_file(b));
    }

    TEST_CASE("optimizer state rides along in order") {
        TempDir dir("ser_opt");
        Checkpoint ckpt;
        ckpt.net = nn::build_network<float>(small_spec(nn::Variant::Dirac), 60);
        train::Sgd opt(ckpt.net.parameters(), 0.9f, 5e-4f);
        warm_up(ckpt.net, 61);  // leaves fresh grads behind; state stays zero
        // Real velocities come from stepping the optimizer that owns them.
        data::Dataset ds = data::make_synthetic(5, 16, 62);
        train::OptimConfig cfg;
        cfg.epochs = 1;
        cfg.batch_size = 16;
        cfg.schedule = {};
        cfg.augment = false;
        train::train_epoch(ckpt.net, opt, ds, cfg, 0);
        for (auto& [name, tensor] : opt.state()) ckpt.optimizer_state.emplace_back(name, *tensor);

        const fs::path file = dir.path / "opt.drcn";
        save(ckpt, file.string());
        Checkpoint back = load(file.string());
        REQUIRE(back.optimizer_state.size() == ckpt.optimizer_state.size());
        bool any_nonzero = false;
        for (std::size_t i = 0; i < ckpt.optimizer_state.size(); ++i) {
            CHECK(back.optimizer_state[i].first == ckpt.optimizer_state[i].first);
            CHECK(bitwise_equal(back.optimizer_state[i].second, ckpt.optimizer_state[i].second));
            for (std::size_t e = 0; e < ckpt.optimizer_state[i].second.numel(); ++e)
                if (ckpt.optimizer_state[i].second[e] != 0.0f) any_nonzero = true;
        }
        CHECK(any_nonzero);
        CHECK(back.optimizer_state.front().first.ends_with(".velocity"));
    }

    TEST_CASE("tampered magic is rejected") {
        TempDir dir("ser_magic");
        const fs::path file = dir.path / "net.drcn";
        save(sample_checkpoint(nn::Variant::Plain, 70), file.string());
        std::string bytes = read_file(file);
        bytes[0] = 'X';
        write_file(file, bytes);
        CHECK_THROWS_WITH_AS(load(file.string()), doctest::Contains("bad magic"), IoError);
    }

    TEST_CASE("unknown version is named in the error") {
        TempDir dir("ser_version");
        const fs::path file = dir.path / "net.drcn";
        save(sample_checkpoint(nn::Variant::Plain, 71), file.string());
        std::string bytes = read_file(file);
        put_u32(bytes, 4, 9);
        write_file(file, bytes);
        CHECK_THROWS_WITH_AS(load(file.string()), doctest::Contains("version 9"), IoError);
    }

    TEST_CASE("a missing tensor is reported by name") {
        TempDir dir("ser_missing");
        const fs::path file = dir.path / "net.drcn";
        save(sample_checkpoint(nn::Variant::Dirac, 72), file.string());
        ParsedFile parsed = parse_checkpoint(file);
        // Drop the last blob and patch the metadata so the container still
        // parses; only the network fill-in can notice the hole.
        const BlobSpan& victim = parsed.blobs.back();
        nlohmann::json meta = parsed.meta;
        meta["tensor_count"] = parsed.blobs.size() - 1;
        const std::string meta_text = meta.dump();
        std::string rebuilt = parsed.bytes.substr(0, 8);
        rebuilt.push_back(char(meta_text.size() & 0xFF));
        rebuilt.push_back(char((meta_text.size() >> 8) & 0xFF));
        rebuilt.push_back(char((meta_text.size() >> 16) & 0xFF));
        rebuilt.push_back(char((meta_text.size() >> 24) & 0xFF));
        rebuilt += meta_text;
        rebuilt += parsed.bytes.substr(parsed.blobs_at, victim.begin - parsed.blobs_at);
        write_file(file, rebuilt);
        CHECK_THROWS_WITH_AS(load(file.string()), doctest::Contains(victim.name.c_str()),
                             IoError);
    }

    TEST_CASE("a shape mismatch is reported with both shapes") {
        TempDir dir("ser_shape");
        const fs::path file = dir.path / "net.drcn";
        save(sample_checkpoint(nn::Variant::Dirac, 73), file.string());
        ParsedFile parsed = parse_checkpoint(file);
        // conv1.w is [16,3,3,3]; swapping the first two dims keeps the blob
        // length valid but breaks the shape contract.
        const BlobSpan* conv = nullptr;
        for (const auto& b : parsed.blobs)
            if (b.name == "conv1.w") conv = &b;
        REQUIRE(conv != nullptr);
        std::string bytes = parsed.bytes;
        char dims[16];
        std::memcpy(dims, bytes.data() + conv->rank_at + 4, 16);
        std::memcpy(bytes.data() + conv->rank_at + 4, dims + 8, 8);
        std::memcpy(bytes.data() + conv->rank_at + 4 + 8, dims, 8);
        write_file(file, bytes);
        CHECK_THROWS_WITH_AS(load(file.string()),
                             doctest::Contains("checkpoint tensor 'conv1.w'"), ShapeError);
    }

    TEST_CASE("truncation reports the byte offset") {
        TempDir dir("ser_trunc");
        const fs::path file = dir.path / "net.drcn";
        save(sample_checkpoint(nn::Variant::Plain, 74), file.string());
        std::string bytes = read_file(file);
        bytes.resize(bytes.size() - 10);
        write_file(file, bytes);
        CHECK_THROWS_WITH_AS(load(file.string()), doctest::Contains("truncated at byte"),
                             IoError);
    }

    TEST_CASE("trailing bytes are rejected") {
        TempDir dir("ser_trail");
        const fs::path file = dir.path / "net.drcn";
        save(sample_checkpoint(nn::Variant::Plain, 75), file.string());
        std::string bytes = read_file(file) + "junk";
        write_file(file, bytes);
        CHECK_THROWS_WITH_AS(load(file.string()), doctest::Contains("trailing"), IoError);
    }

    TEST_CASE("folded checkpoint reloads as a plain-conv net, bit for bit") {
        TempDir dir("ser_folded");
        Checkpoint ckpt = sample_checkpoint(nn::Variant::Dirac, 76);
        ckpt.net = nn::fold_network(ckpt.net);
        const fs::path file = dir.path / "folded.drcn";
        save(ckpt, file.string());

        ParsedFile parsed = parse_checkpoint(file);
        CHECK(parsed.meta.at("variant").get<std::string>() == "folded");

        Checkpoint back = load(file.string());
        CHECK(back.net.folded);
        for (const auto& layer : back.net.layers) {
            CHECK(std::string(layer->kind()) != "batchnorm");
            CHECK(std::string(layer->kind()) != "dirac_conv");
        }
        Rng rng(77);
        TensorT<float> x = random_tensor<float>({3, 3, 32, 32}, rng);
        CHECK(bitwise_equal(ckpt.net.forward(x), back.net.forward(x)));

        const fs::path again = dir.path / "folded2.drcn";
        save(back, again.string());
        CHECK(read_file(file) == read_file(again));
    }
}
