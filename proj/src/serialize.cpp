#include "diracnet/serialize.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "diracnet/errors.hpp"

namespace diracnet::serialize {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'D', 'R', 'C', 'N'};

void append_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

void append_f32_block(std::string& out, const float* data, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        out.append(reinterpret_cast<const char*>(data), count * sizeof(float));
    } else {
        for (std::size_t i = 0; i < count; ++i)
            append_u32(out, std::bit_cast<std::uint32_t>(data[i]));
    }
}

/// Bounds-checked cursor over the raw file bytes; every read names the
/// offset it failed at so truncation errors are actionable.
struct Reader {
    const std::string& bytes;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > bytes.size())
            throw IoError(msg("checkpoint truncated at byte ", pos, " (need ", n, " bytes for ",
                              what, ")"));
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(bytes[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
    void f32_block(float* dst, std::size_t count, const char* what) {
        need(count * sizeof(float), what);
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(dst, bytes.data() + pos, count * sizeof(float));
            pos += count * sizeof(float);
        } else {
            for (std::size_t i = 0; i < count; ++i)
                dst[i] = std::bit_cast<float>(u32(what));
        }
    }
};

void append_tensor_blob(std::string& out, const std::string& name, const TensorT<float>& t) {
    append_u32(out, std::uint32_t(name.size()));
    out.append(name);
    append_u32(out, std::uint32_t(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d) append_u64(out, t.dim(d));
    append_f32_block(out, t.data(), t.numel());
}

json spec_to_json(const nn::NetworkSpec& spec) {
    return json{{"blocks_per_group", spec.blocks_per_group},
                {"width_factor", spec.width_factor},
                {"num_classes", spec.num_classes},
                {"input_channels", spec.input_channels},
                {"variant", nn::variant_name(spec.variant)},
                {"init_sigma", spec.init_sigma},
                {"orthogonal_init", spec.orthogonal_init}};
}

nn::NetworkSpec spec_from_json(const json& j) {
    nn::NetworkSpec spec;
    spec.blocks_per_group = j.at("blocks_per_group").get<std::size_t>();
    spec.width_factor = j.at("width_factor").get<std::size_t>();
    spec.num_classes = j.at("num_classes").get<std::size_t>();
    spec.input_channels = j.at("input_channels").get<std::size_t>();
    spec.variant = nn::variant_from_name(j.at("variant").get<std::string>());
    spec.init_sigma = j.at("init_sigma").get<double>();
    spec.orthogonal_init = j.at("orthogonal_init").get<bool>();
    return spec;
}

}  // namespace

void save(const Checkpoint& ckpt, const std::string& path) {
    // named_tensors() hands out mutable pointers so it is non-const; saving
    // only reads through them.
    auto& net = const_cast<nn::NetworkT<float>&>(ckpt.net);
    const auto named = net.named_tensors();

    json meta;
    meta["epoch"] = ckpt.epoch;
    meta["seed"] = ckpt.seed;
    meta["variant"] =
        ckpt.net.folded ? "folded" : nn::variant_name(ckpt.net.spec.variant);
    meta["spec"] = spec_to_json(ckpt.net.spec);
    meta["normalization"] = {{"mean", ckpt.norm.mean}, {"stddev", ckpt.norm.stddev}};
    json opt_names = json::array();
    for (const auto& [name, t] : ckpt.optimizer_state) opt_names.push_back(name);
    meta["optimizer"] = std::move(opt_names);
    meta["tensor_count"] = named.size() + ckpt.optimizer_state.size();

    std::string out;
    out.append(kMagic, sizeof(kMagic));
    append_u32(out, kFormatVersion);
    const std::string meta_text = meta.dump();
    append_u32(out, std::uint32_t(meta_text.size()));
    out.append(meta_text);
    for (const auto& [name, tensor] : named) append_tensor_blob(out, name, *tensor);
    for (const auto& [name, tensor] : ckpt.optimizer_state) append_tensor_blob(out, name, tensor);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(msg("cannot open '", path, "' for writing"));
    f.write(out.data(), std::streamsize(out.size()));
    f.flush();
    if (!f) throw IoError(msg("write failed for '", path, "'"));
}

Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(msg("cannot open '", path, "'"));
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Reader r{bytes};
    const std::string magic = r.str(sizeof(kMagic), "magic");
    if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0)
        throw IoError(msg("'", path, "' is not a checkpoint (bad magic)"));
    const std::uint32_t version = r.u32("version");
    if (version != kFormatVersion)
        throw IoError(msg("unsupported checkpoint version ", version, " (this build reads ",
                          kFormatVersion, ")"));
    const std::uint32_t meta_len = r.u32("metadata length");
    const std::string meta_text = r.str(meta_len, "metadata");

    json meta;
    try {
        meta = json::parse(meta_text);
    } catch (const json::exception& e) {
        throw IoError(msg("checkpoint metadata is not valid JSON: ", e.what()));
    }

    Checkpoint ckpt;
    nn::NetworkSpec spec;
    std::string variant_tag;
    std::vector<std::string> opt_names;
    std::size_t tensor_count = 0;
    try {
        ckpt.epoch = meta.at("epoch").get<std::size_t>();
        ckpt.seed = meta.at("seed").get<std::uint64_t>();
        variant_tag = meta.at("variant").get<std::string>();
        spec = spec_from_json(meta.at("spec"));
        ckpt.norm.mean = meta.at("normalization").at("mean").get<std::vector<float>>();
        ckpt.norm.stddev = meta.at("normalization").at("stddev").get<std::vector<float>>();
        opt_names = meta.at("optimizer").get<std::vector<std::string>>();
        tensor_count = meta.at("tensor_count").get<std::size_t>();
    } catch (const json::exception& e) {
        throw IoError(msg("checkpoint metadata malformed: ", e.what()));
    }
    spec.validate();

    // Tensor blobs, each name unique.
    std::map<std::string, TensorT<float>> blobs;
    for (std::size_t i = 0; i < tensor_count; ++i) {
        const std::uint32_t nlen = r.u32("tensor name length");
        const std::string name = r.str(nlen, "tensor name");
        const std::uint32_t rank = r.u32("tensor rank");
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) shape[d] = r.u64("tensor dim");
        TensorT<float> t = TensorT<float>::uninitialized(shape);
        r.f32_block(t.data(), t.numel(), "tensor data");
        if (!blobs.emplace(name, std::move(t)).second)
            throw IoError(msg("duplicate tensor '", name, "' in checkpoint"));
    }
    if (r.pos != bytes.size())
        throw IoError(msg("checkpoint has ", bytes.size() - r.pos, " trailing bytes"));

    // Skeleton: rebuild from the spec, re-folding when the net was saved
    // folded. The fresh random weights are fully overwritten below.
    if (variant_tag == "folded") {
        ckpt.net = nn::fold_network(nn::build_network<float>(spec, 0));
    } else if (variant_tag == nn::variant_name(spec.variant)) {
        ckpt.net = nn::build_network<float>(spec, 0);
    } else {
        throw IoError(msg("checkpoint variant tag '", variant_tag, "' does not match spec variant '",
                          nn::variant_name(spec.variant), "'"));
    }
    ckpt.net.eval();

    std::size_t used = 0;
    for (auto& [name, tensor] : ckpt.net.named_tensors()) {
        auto it = blobs.find(name);
        if (it == blobs.end()) throw IoError(msg("checkpoint missing tensor '", name, "'"));
        if (it->second.shape() != tensor->shape())
            throw ShapeError(msg("checkpoint tensor '", name, "' has shape ",
                                 shape_str(it->second.shape()), ", network expects ",
                                 shape_str(tensor->shape())));
        std::memcpy(tensor->data(), it->second.data(), it->second.numel() * sizeof(float));
        ++used;
    }
    for (const auto& name : opt_names) {
        auto it = blobs.find(name);
        if (it == blobs.end())
            throw IoError(msg("checkpoint missing optimizer tensor '", name, "'"));
        ckpt.optimizer_state.emplace_back(name, std::move(it->second));
        ++used;
    }
    if (used != blobs.size()) {
        for (const auto& [name, t] : blobs) {
            const bool in_opt =
                std::find(opt_names.begin(), opt_names.end(), name) != opt_names.end();
            bool in_net = false;
            for (auto& [nname, ptr] : ckpt.net.named_tensors())
                if (nname == name) in_net = true;
            if (!in_net && !in_opt)
                throw IoError(msg("unexpected tensor '", name, "' in checkpoint"));
        }
    }
    return ckpt;
}

}  // namespace diracnet::serialize
