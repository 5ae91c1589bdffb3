#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "campfire/binary_io.hpp"
#include "campfire/error.hpp"
#include "campfire/json_io.hpp"
#include "campfire/model.hpp"
#include "campfire/rng.hpp"

namespace campfire {

inline constexpr char kCheckpointMagic[4] = {'C', 'M', 'P', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Self-describing container: JSON header plus named f32 tensors, closed by
/// an FNV-1a checksum of every preceding byte.
struct TensorFile {
    json header = json::object();
    std::map<std::string, Mat<float>> tensors;

    std::vector<unsigned char> encode() const {
        binary::Writer w;
        w.bytes(kCheckpointMagic, 4);
        w.u16(kCheckpointVersion);
        w.str32(header.dump());
        w.u32(static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [name, m] : tensors) {
            w.str16(name);
            w.u32(static_cast<std::uint32_t>(m.rows()));
            w.u32(static_cast<std::uint32_t>(m.cols()));
            w.f32_array(std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
        }
        const auto& bytes = w.data();
        const std::uint64_t sum = fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
        w.u64(sum);
        return w.data();
    }

    static TensorFile decode(std::vector<unsigned char> bytes) {
        if (bytes.size() < 8 + 4 + 2) fail(ErrorCode::CorruptCheckpoint, "checkpoint too short");
        std::uint64_t stored = 0;
        std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
        stored = binary::to_little(stored);
        const std::uint64_t actual =
            fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size() - 8));
        if (stored != actual) fail(ErrorCode::CorruptCheckpoint, "checksum mismatch");
        bytes.resize(bytes.size() - 8);
        binary::Reader r(std::move(bytes), ErrorCode::CorruptCheckpoint);
        if (r.fixed(4) != std::string(kCheckpointMagic, 4)) fail(ErrorCode::CorruptCheckpoint, "bad magic");
        if (r.u16() != kCheckpointVersion) fail(ErrorCode::CorruptCheckpoint, "unsupported checkpoint version");
        TensorFile f;
        try {
            f.header = json::parse(r.str32());
        } catch (const json::exception& e) {
            fail(ErrorCode::CorruptCheckpoint, std::string("bad header: ") + e.what());
        }
        const std::uint32_t n = r.u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            std::string name = r.str16();
            const std::uint32_t rows = r.u32(), cols = r.u32();
            Mat<float> m(rows, cols);
            r.f32_array(std::span<float>(m.data(), static_cast<std::size_t>(m.size())));
            f.tensors.emplace(std::move(name), std::move(m));
        }
        if (r.remaining() != 0) fail(ErrorCode::CorruptCheckpoint, "trailing bytes");
        return f;
    }

    void save(const std::string& path) const {
        binary::Writer w;
        const auto bytes = encode();
        w.bytes(bytes.data(), bytes.size());
        w.save(path);
    }

    static TensorFile load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) fail(ErrorCode::IOFailure, "cannot open checkpoint: " + path);
        std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return decode(std::move(data));
    }
};

inline void put_params(TensorFile& f, const std::string& prefix, const MaeParams<float>& p) {
    for (const auto& r : p.refs()) f.tensors[prefix + r.name] = *r.value;
}

inline void get_params(const TensorFile& f, const std::string& prefix, MaeParams<float>& p) {
    for (const auto& r : p.refs()) {
        const auto it = f.tensors.find(prefix + r.name);
        if (it == f.tensors.end()) fail(ErrorCode::CorruptCheckpoint, "missing tensor " + prefix + r.name);
        if (it->second.rows() != r.value->rows() || it->second.cols() != r.value->cols())
            fail(ErrorCode::CorruptCheckpoint, "shape mismatch for " + prefix + r.name);
        *r.value = it->second;
    }
}

/// Model-only view of a checkpoint: config, normalisation statistics and
/// parameters. Training checkpoints carry extra header fields and optimizer
/// tensors that this ignores.
struct ModelBundle {
    ModelConfig config;
    ChannelStats stats;
    ChannelSet train_channels;
    MaeParams<float> params;

    MaskedAutoencoder<float> model() const { return MaskedAutoencoder<float>(config, params); }

    static ModelBundle from(const TensorFile& f) {
        ModelBundle b;
        try {
            b.config = f.header.at("model").get<ModelConfig>();
            b.stats = f.header.at("channel_stats").get<ChannelStats>();
            b.train_channels = f.header.at("train_channels").get<ChannelSet>();
        } catch (const json::exception& e) {
            fail(ErrorCode::CorruptCheckpoint, std::string("bad header: ") + e.what());
        }
        Rng rng(0);
        b.params = MaeParams<float>::init(b.config, rng);
        get_params(f, "param/", b.params);
        return b;
    }

    static ModelBundle load(const std::string& path) { return from(TensorFile::load(path)); }
};

}  // namespace campfire
