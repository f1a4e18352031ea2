#include "pma/checkpoint.hpp"

#include <openssl/sha.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <json.hpp>

#include "pma/errors.hpp"

namespace pma {

namespace {

using json = nlohmann::json;
constexpr char kMagic[4] = {'P', 'M', 'A', 'C'};
constexpr std::size_t kDigestLen = SHA256_DIGEST_LENGTH;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::uint8_t* p) {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
    return v;
}

void put_double(std::vector<std::uint8_t>& out, double d) { put_le(out, std::bit_cast<std::uint64_t>(d)); }

struct Writer {
    json tensors = json::array();
    std::vector<std::uint8_t> payload;

    void add(const std::string& name, const Tensor& t) {
        json shape = json::array();
        for (std::size_t i = 0; i < t.shape().rank(); ++i) shape.push_back(t.shape()[i]);
        tensors.push_back({{"name", name}, {"shape", shape}, {"offset", payload.size()}, {"count", t.size()}});
        for (double d : t.values()) put_double(payload, d);
    }
};

std::string mem_name(std::size_t l, std::size_t h, const char* what) {
    return "mem/" + std::to_string(l) + "/" + std::to_string(h) + "/" + what;
}

struct Framed {
    std::uint32_t version = 0;
    std::string header;
    const std::uint8_t* payload = nullptr;
    std::size_t payload_len = 0;
    bool digest_ok = false;
};

Framed unframe(const std::vector<std::uint8_t>& bytes) {
    Framed f;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw LoadError("magic: not a PMAC checkpoint");
    if (bytes.size() < 8) throw LoadError("version: file truncated");
    f.version = get_le<std::uint32_t>(bytes.data() + 4);
    if (f.version != kCheckpointVersion) {
        throw LoadError("version: file has format " + std::to_string(f.version) + ", expected " +
                        std::to_string(kCheckpointVersion));
    }
    if (bytes.size() < 16) throw LoadError("header_length: file truncated");
    const std::uint64_t hlen = get_le<std::uint64_t>(bytes.data() + 8);
    if (hlen > bytes.size() - 16) throw LoadError("header: file truncated");
    f.header.assign(reinterpret_cast<const char*>(bytes.data() + 16), hlen);
    const std::size_t rest = bytes.size() - 16 - hlen;
    if (rest < kDigestLen) throw LoadError("digest: file truncated");
    f.payload = bytes.data() + 16 + hlen;
    f.payload_len = rest - kDigestLen;
    std::uint8_t digest[kDigestLen];
    SHA256(f.payload, f.payload_len, digest);
    f.digest_ok = std::memcmp(digest, f.payload + f.payload_len, kDigestLen) == 0;
    return f;
}

Tensor read_tensor(const Framed& f, const json& entry, const std::string& name, const Shape& expect) {
    try {
        const auto& shape = entry.at("shape");
        std::vector<std::size_t> dims = shape.get<std::vector<std::size_t>>();
        Shape got;
        switch (dims.size()) {
            case 1: got = Shape{dims[0]}; break;
            case 2: got = Shape{dims[0], dims[1]}; break;
            default: throw LoadError("tensor " + name + ": unsupported rank " + std::to_string(dims.size()));
        }
        if (!(got == expect)) throw LoadError("tensor " + name + ": shape " + got.str() + ", expected " + expect.str());
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        const std::size_t count = entry.at("count").get<std::size_t>();
        if (count != expect.numel() || offset % 8 != 0 || offset > f.payload_len || count * 8 > f.payload_len - offset) {
            throw LoadError("tensor " + name + ": payload range out of bounds");
        }
        Tensor t(expect);
        for (std::size_t i = 0; i < count; ++i)
            t.data()[i] = std::bit_cast<double>(get_le<std::uint64_t>(f.payload + offset + 8 * i));
        return t;
    } catch (const json::exception& e) {
        throw LoadError("tensor " + name + ": malformed entry (" + e.what() + ")");
    }
}

}  // namespace

std::string sha256_hex(const std::uint8_t* data, std::size_t n) {
    std::uint8_t digest[kDigestLen];
    SHA256(data, n, digest);
    static const char* hex = "0123456789abcdef";
    std::string s;
    for (std::uint8_t b : digest) {
        s += hex[b >> 4];
        s += hex[b & 15];
    }
    return s;
}

std::vector<std::uint8_t> serialize_checkpoint(const TrainState& state) {
    Writer w;
    std::size_t i = 0;
    for (const auto& p : state.model.params()) {
        w.add("param/" + p->name, p->value);
        w.add("adam.m/" + p->name, state.optimizer.first_moments()[i]);
        w.add("adam.v/" + p->name, state.optimizer.second_moments()[i]);
        ++i;
    }
    json memories = json::array();
    const auto& mems = state.model.memories();
    for (std::size_t l = 0; l < mems.size(); ++l) {
        for (std::size_t h = 0; h < mems[l].size(); ++h) {
            w.add(mem_name(l, h, "keys"), mems[l][h].keys);
            w.add(mem_name(l, h, "values"), mems[l][h].values);
            memories.push_back({{"layer", l},
                                {"head", h},
                                {"built_at_step", mems[l][h].built_at_step},
                                {"k_used", mems[l][h].k_used}});
        }
    }
    json config = json::object();
    for (const auto& [k, v] : config_pairs(state.config)) config[k] = v;

    json header;
    header["config"] = config;
    header["step"] = state.step;
    header["refresh_count"] = state.refresh_count;
    header["adam_steps"] = state.optimizer.steps_taken();
    header["rng"] = state.rng.state();
    header["memories"] = memories;
    header["tensors"] = w.tensors;
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), w.payload.begin(), w.payload.end());
    std::uint8_t digest[kDigestLen];
    SHA256(w.payload.data(), w.payload.size(), digest);
    out.insert(out.end(), digest, digest + kDigestLen);
    return out;
}

TrainState deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    const Framed f = unframe(bytes);
    if (!f.digest_ok) throw LoadError("digest: payload SHA-256 mismatch");
    json header;
    try {
        header = json::parse(f.header);
    } catch (const json::exception& e) {
        throw LoadError(std::string("header: ") + e.what());
    }
    auto field = [&](const char* name) -> const json& {
        if (!header.contains(name)) throw LoadError(std::string(name) + ": missing from header");
        return header.at(name);
    };

    TrainConfig cfg;
    try {
        for (const auto& [k, v] : field("config").items()) apply_config_value(cfg, k, v.get<std::string>());
    } catch (const ConfigError& e) {
        throw LoadError(std::string("config: ") + e.what());
    } catch (const json::exception& e) {
        throw LoadError(std::string("config: ") + e.what());
    }

    TrainState state(cfg);
    std::map<std::string, const json*> index;
    for (const auto& entry : field("tensors")) {
        if (!entry.contains("name")) throw LoadError("tensors: entry without name");
        index[entry.at("name").get<std::string>()] = &entry;
    }
    auto take = [&](const std::string& name, const Shape& shape) {
        auto it = index.find(name);
        if (it == index.end()) throw LoadError("tensor " + name + ": missing");
        return read_tensor(f, *it->second, name, shape);
    };

    try {
        std::size_t i = 0;
        for (auto& p : state.model.params()) {
            p->value = take("param/" + p->name, p->value.shape());
            state.optimizer.first_moments()[i] = take("adam.m/" + p->name, p->value.shape());
            state.optimizer.second_moments()[i] = take("adam.v/" + p->name, p->value.shape());
            ++i;
        }
        state.step = field("step").get<std::int64_t>();
        state.refresh_count = field("refresh_count").get<std::uint64_t>();
        state.optimizer.set_steps_taken(field("adam_steps").get<std::int64_t>());
        state.rng.set_state(field("rng").get<std::string>());

        const ModelConfig& mc = state.model.config();
        std::vector<std::vector<PrototypeMemory>> mems;
        const Shape mem_shape{mc.memory_slots, mc.head_dim()};
        for (const auto& e : field("memories")) {
            const std::size_t l = e.at("layer").get<std::size_t>(), h = e.at("head").get<std::size_t>();
            if (l >= mc.layers || h >= mc.heads) throw LoadError("memories: layer/head index out of range");
            if (mems.size() <= l) mems.resize(l + 1);
            if (mems[l].size() <= h) mems[l].resize(h + 1);
            auto& mem = mems[l][h];
            mem.keys = take(mem_name(l, h, "keys"), mem_shape);
            mem.values = take(mem_name(l, h, "values"), mem_shape);
            mem.built_at_step = e.at("built_at_step").get<std::int64_t>();
            mem.k_used = e.at("k_used").get<std::size_t>();
        }
        if (!mems.empty()) state.model.install_memories(std::move(mems));
    } catch (const json::exception& e) {
        throw LoadError(std::string("header: ") + e.what());
    } catch (const DimensionError& e) {
        throw LoadError(std::string("memories: ") + e.what());
    }
    return state;
}

void save_checkpoint(const TrainState& state, const std::string& path) {
    const auto bytes = serialize_checkpoint(state);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to checkpoint '" + path + "'");
}

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("file: cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TrainState load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

CheckpointSummary inspect_checkpoint_file(const std::string& path) {
    const auto bytes = read_file(path);
    const Framed f = unframe(bytes);
    return {f.version, f.digest_ok, f.header};
}

}  // namespace pma
