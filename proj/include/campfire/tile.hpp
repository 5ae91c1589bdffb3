#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "campfire/binary_io.hpp"
#include "campfire/error.hpp"
#include "campfire/rng.hpp"

namespace campfire {

/// Fluorescent channel tag such as "Nu" or "cyRNA".
struct ChannelId {
    std::string name;

    ChannelId() = default;
    ChannelId(std::string n) : name(std::move(n)) {}
    ChannelId(const char* n) : name(n) {}

    auto operator<=>(const ChannelId&) const = default;
};

namespace channels {
inline const ChannelId nucleus{"Nu"};
inline const ChannelId actin{"Ac"};
inline const ChannelId mito{"M"};
inline const ChannelId er{"ER"};
inline const ChannelId rna{"cyRNA"};
}  // namespace channels

using ChannelSet = std::vector<ChannelId>;

inline std::string join_channels(const ChannelSet& set, char sep = ',') {
    std::string out;
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (i) out += sep;
        out += set[i].name;
    }
    return out;
}

inline ChannelSet parse_channels(const std::string& text, char sep = ',') {
    ChannelSet out;
    std::string cur;
    for (char c : text + sep) {
        if (c == sep) {
            auto b = cur.find_first_not_of(" \t");
            auto e = cur.find_last_not_of(" \t");
            if (b != std::string::npos) out.emplace_back(cur.substr(b, e - b + 1));
            cur.clear();
        } else {
            cur += c;
        }
    }
    return out;
}

/// C x H x W float image, channel-major, with one identity label per channel.
class Tile {
public:
    Tile() = default;

    Tile(ChannelSet channels, int height, int width, std::string well_ref = {})
        : channels_(std::move(channels)), height_(height), width_(width), well_ref_(std::move(well_ref)),
          pixels_(channels_.size() * static_cast<std::size_t>(height) * width, 0.0f) {
        validate_channels();
    }

    Tile(ChannelSet channels, int height, int width, std::vector<float> pixels, std::string well_ref = {})
        : channels_(std::move(channels)), height_(height), width_(width), well_ref_(std::move(well_ref)),
          pixels_(std::move(pixels)) {
        validate_channels();
        if (pixels_.size() != channels_.size() * static_cast<std::size_t>(height_) * width_)
            fail(ErrorCode::ShapeMismatch, "pixel buffer does not match C*H*W");
    }

    int num_channels() const { return static_cast<int>(channels_.size()); }
    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t plane_size() const { return static_cast<std::size_t>(height_) * width_; }

    const ChannelSet& channels() const { return channels_; }
    const std::string& well_ref() const { return well_ref_; }
    void set_well_ref(std::string ref) { well_ref_ = std::move(ref); }

    std::span<float> plane(int c) { return {pixels_.data() + c * plane_size(), plane_size()}; }
    std::span<const float> plane(int c) const { return {pixels_.data() + c * plane_size(), plane_size()}; }

    float& at(int c, int y, int x) { return pixels_[c * plane_size() + static_cast<std::size_t>(y) * width_ + x]; }
    float at(int c, int y, int x) const { return pixels_[c * plane_size() + static_cast<std::size_t>(y) * width_ + x]; }

    std::span<float> pixels() { return pixels_; }
    std::span<const float> pixels() const { return pixels_; }

    int index_of(const ChannelId& id) const {
        for (std::size_t i = 0; i < channels_.size(); ++i)
            if (channels_[i] == id) return static_cast<int>(i);
        return -1;
    }

    /// Copy of the listed channels in the listed order.
    Tile select(const ChannelSet& wanted) const {
        if (wanted.empty()) fail(ErrorCode::ChannelMismatch, "empty channel selection");
        Tile out(wanted, height_, width_, well_ref_);
        for (std::size_t i = 0; i < wanted.size(); ++i) {
            const int src = index_of(wanted[i]);
            if (src < 0) fail(ErrorCode::UnknownChannel, "tile has no channel " + wanted[i].name);
            std::copy(plane(src).begin(), plane(src).end(), out.plane(static_cast<int>(i)).begin());
        }
        return out;
    }

    bool all_finite() const {
        for (float v : pixels_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool operator==(const Tile& o) const {
        return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_ && pixels_ == o.pixels_;
    }

private:
    void validate_channels() const {
        if (channels_.empty()) fail(ErrorCode::ChannelMismatch, "tile needs at least one channel");
        std::set<ChannelId> seen;
        for (const auto& c : channels_) {
            if (c.name.empty()) fail(ErrorCode::ChannelMismatch, "empty channel name");
            if (!seen.insert(c).second) fail(ErrorCode::ChannelMismatch, "duplicate channel " + c.name);
        }
        if (height_ <= 0 || width_ <= 0) fail(ErrorCode::ShapeMismatch, "tile dimensions must be positive");
    }

    ChannelSet channels_;
    int height_ = 0;
    int width_ = 0;
    std::string well_ref_;
    std::vector<float> pixels_;
};

// Container layout: "CMPF" | u16 version | u16 C | u32 H | u32 W |
// C x (u16 len, bytes) | C*H*W f32, all little-endian.
inline constexpr char kTileMagic[4] = {'C', 'M', 'P', 'F'};
inline constexpr std::uint16_t kTileVersion = 1;

inline std::vector<unsigned char> encode_tile(const Tile& tile) {
    if (!tile.all_finite()) fail(ErrorCode::CorruptTile, "tile contains non-finite pixels");
    binary::Writer w;
    w.bytes(kTileMagic, 4);
    w.u16(kTileVersion);
    w.u16(static_cast<std::uint16_t>(tile.num_channels()));
    w.u32(static_cast<std::uint32_t>(tile.height()));
    w.u32(static_cast<std::uint32_t>(tile.width()));
    for (const auto& c : tile.channels()) w.str16(c.name);
    w.f32_array(tile.pixels());
    return w.data();
}

inline Tile decode_tile(std::vector<unsigned char> bytes) {
    binary::Reader r(std::move(bytes), ErrorCode::CorruptTile);
    if (r.fixed(4) != std::string(kTileMagic, 4)) fail(ErrorCode::CorruptTile, "bad magic");
    if (r.u16() != kTileVersion) fail(ErrorCode::CorruptTile, "unsupported tile version");
    const int c = r.u16();
    const auto h = r.u32();
    const auto w = r.u32();
    if (c == 0 || h == 0 || w == 0 || h > 65536 || w > 65536) fail(ErrorCode::CorruptTile, "bad dimensions");
    ChannelSet ids;
    for (int i = 0; i < c; ++i) ids.emplace_back(r.str16());
    const std::size_t n = static_cast<std::size_t>(c) * h * w;
    if (r.remaining() != n * sizeof(float)) fail(ErrorCode::CorruptTile, "pixel payload size mismatch");
    std::vector<float> px(n);
    r.f32_array(px);
    try {
        Tile t(std::move(ids), static_cast<int>(h), static_cast<int>(w), std::move(px));
        if (!t.all_finite()) fail(ErrorCode::CorruptTile, "non-finite pixel");
        return t;
    } catch (const Error& e) {
        if (e.code() == ErrorCode::CorruptTile) throw;
        throw Error(ErrorCode::ChannelMismatch, e.what());
    }
}

inline void write_tile(const Tile& tile, const std::string& path) {
    binary::Writer w;
    auto bytes = encode_tile(tile);
    w.bytes(bytes.data(), bytes.size());
    w.save(path);
}

inline Tile read_tile(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IOFailure, "cannot open tile: " + path);
    std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_tile(std::move(data));
}

/// Per-channel mean and population standard deviation, keyed by channel id.
struct ChannelStats {
    struct Moments {
        double mean = 0.0;
        double std = 1.0;
    };
    std::map<ChannelId, Moments> by_channel;

    bool contains(const ChannelId& id) const { return by_channel.count(id) != 0; }
};

/// Accumulates moments over many tiles in double precision.
class ChannelStatsAccumulator {
public:
    void add(const Tile& tile) {
        for (int c = 0; c < tile.num_channels(); ++c) {
            auto& acc = acc_[tile.channels()[c]];
            for (float v : tile.plane(c)) {
                acc.n += 1;
                const double d = v - acc.mean;
                acc.mean += d / static_cast<double>(acc.n);
                acc.m2 += d * (v - acc.mean);
            }
        }
    }

    ChannelStats finish() const {
        ChannelStats s;
        for (const auto& [id, a] : acc_) {
            const double var = a.n > 0 ? a.m2 / static_cast<double>(a.n) : 0.0;
            s.by_channel[id] = {a.mean, std::sqrt(var)};
        }
        return s;
    }

private:
    struct Acc {
        std::uint64_t n = 0;
        double mean = 0.0;
        double m2 = 0.0;
    };
    std::map<ChannelId, Acc> acc_;
};

inline Tile normalize_channels(const Tile& tile, const ChannelStats& stats) {
    Tile out = tile;
    for (int c = 0; c < tile.num_channels(); ++c) {
        const auto it = stats.by_channel.find(tile.channels()[c]);
        if (it == stats.by_channel.end()) fail(ErrorCode::MissingStats, "no statistics for " + tile.channels()[c].name);
        const auto [mean, sd] = it->second;
        if (!(sd > 0.0)) fail(ErrorCode::ZeroStd, "zero std for " + tile.channels()[c].name);
        auto dst = out.plane(c);
        auto src = tile.plane(c);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>((src[i] - mean) / sd);
    }
    return out;
}

inline Tile denormalize_channels(const Tile& tile, const ChannelStats& stats) {
    Tile out = tile;
    for (int c = 0; c < tile.num_channels(); ++c) {
        const auto it = stats.by_channel.find(tile.channels()[c]);
        if (it == stats.by_channel.end()) fail(ErrorCode::MissingStats, "no statistics for " + tile.channels()[c].name);
        const auto [mean, sd] = it->second;
        auto dst = out.plane(c);
        auto src = tile.plane(c);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(src[i] * sd + mean);
    }
    return out;
}

/// One draw of the spatial augmentation: flips first, then `quarter_turns`
/// counter-clockwise rotations by 90 degrees.
struct AugmentChoice {
    bool flip_horizontal = false;
    bool flip_vertical = false;
    int quarter_turns = 0;

    static AugmentChoice draw(Rng& rng) {
        AugmentChoice a;
        a.flip_horizontal = rng.bernoulli(0.5);
        a.flip_vertical = rng.bernoulli(0.5);
        a.quarter_turns = static_cast<int>(rng.uniform_int(4));
        return a;
    }
};

inline Tile augment(const Tile& tile, const AugmentChoice& choice) {
    if (tile.height() != tile.width()) fail(ErrorCode::ShapeMismatch, "augment needs a square tile");
    const int n = tile.height();
    Tile out = tile;
    for (int c = 0; c < tile.num_channels(); ++c) {
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                // Map the output pixel back to its source coordinate.
                int sy = y, sx = x;
                for (int k = 0; k < (choice.quarter_turns & 3); ++k) {
                    const int ty = sx, tx = n - 1 - sy;
                    sy = ty;
                    sx = tx;
                }
                if (choice.flip_vertical) sy = n - 1 - sy;
                if (choice.flip_horizontal) sx = n - 1 - sx;
                out.at(c, y, x) = tile.at(c, sy, sx);
            }
        }
    }
    return out;
}

inline Tile augment(const Tile& tile, Rng& rng) { return augment(tile, AugmentChoice::draw(rng)); }

}  // namespace campfire
