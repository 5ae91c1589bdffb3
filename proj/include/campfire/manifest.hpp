#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "campfire/error.hpp"
#include "campfire/tile.hpp"

namespace campfire {

enum class WellRole { PositiveControl, NegativeControl, Standard };
enum class PlateKind { Target2, Compound };

inline std::string to_string(WellRole r) {
    switch (r) {
        case WellRole::PositiveControl: return "positive_control";
        case WellRole::NegativeControl: return "negative_control";
        case WellRole::Standard: return "standard";
    }
    return "standard";
}

inline std::optional<WellRole> parse_role(const std::string& s) {
    if (s == "positive_control") return WellRole::PositiveControl;
    if (s == "negative_control") return WellRole::NegativeControl;
    if (s == "standard") return WellRole::Standard;
    return std::nullopt;
}

inline std::string to_string(PlateKind k) { return k == PlateKind::Target2 ? "target2" : "compound"; }

inline std::optional<PlateKind> parse_plate_kind(const std::string& s) {
    if (s == "target2") return PlateKind::Target2;
    if (s == "compound") return PlateKind::Compound;
    return std::nullopt;
}

inline bool is_control(WellRole r) { return r != WellRole::Standard; }

using WellKey = std::pair<std::string, std::string>;  // (plate_id, well_id)

struct WellRecord {
    std::string plate_id;
    std::string well_id;
    std::string compound_id;
    WellRole role = WellRole::Standard;
    std::vector<std::string> tile_uris;

    WellKey key() const { return {plate_id, well_id}; }
    std::string ref() const { return plate_id + "/" + well_id; }
};

/// Wells plus plate kinds. Tile URIs are resolved relative to `root`.
struct Manifest {
    std::vector<WellRecord> wells;
    std::map<std::string, PlateKind> plate_kind;
    std::filesystem::path root;

    std::filesystem::path resolve(const std::string& uri) const {
        std::filesystem::path p(uri);
        return p.is_absolute() ? p : root / p;
    }

    const WellRecord* find(const WellKey& key) const {
        for (const auto& w : wells)
            if (w.key() == key) return &w;
        return nullptr;
    }

    std::map<WellKey, const WellRecord*> index() const {
        std::map<WellKey, const WellRecord*> out;
        for (const auto& w : wells) out[w.key()] = &w;
        return out;
    }

    std::size_t tile_count() const {
        std::size_t n = 0;
        for (const auto& w : wells) n += w.tile_uris.size();
        return n;
    }

    /// Loads a tile and stamps it with its well reference.
    Tile load_tile(const WellRecord& well, std::size_t i) const {
        Tile t = read_tile(resolve(well.tile_uris.at(i)).string());
        t.set_well_ref(well.ref());
        return t;
    }
};

inline const std::vector<std::string> kManifestColumns = {"plate_id", "well_id",    "compound_id",
                                                          "role",     "plate_kind", "tile_uri"};

namespace detail {
inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == '\t') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}
}  // namespace detail

/// Parses the tab-separated manifest. Several rows may share a well (one per
/// tile); they must agree on compound, role and plate kind, and a tile URI
/// may not repeat within a well. An empty tile_uri declares a well without
/// tiles.
inline Manifest parse_manifest(std::istream& in, std::filesystem::path root = {}) {
    Manifest m;
    m.root = std::move(root);
    std::string line;
    if (!std::getline(in, line)) fail(ErrorCode::MalformedManifest, "missing header row");
    if (detail::split_tabs(line) != kManifestColumns) fail(ErrorCode::MalformedManifest, "unexpected header: " + line);

    std::map<WellKey, std::size_t> where;
    std::map<WellKey, std::set<std::string>> uris;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto f = detail::split_tabs(line);
        const std::string at = " (line " + std::to_string(lineno) + ")";
        if (f.size() != kManifestColumns.size()) fail(ErrorCode::MalformedManifest, "bad column count" + at);
        if (f[0].empty() || f[1].empty() || f[2].empty()) fail(ErrorCode::MalformedManifest, "empty identifier" + at);
        const auto role = parse_role(f[3]);
        if (!role) fail(ErrorCode::MalformedManifest, "unknown role '" + f[3] + "'" + at);
        const auto kind = parse_plate_kind(f[4]);
        if (!kind) fail(ErrorCode::MalformedManifest, "unknown plate kind '" + f[4] + "'" + at);

        auto [kit, fresh_plate] = m.plate_kind.emplace(f[0], *kind);
        if (!fresh_plate && kit->second != *kind)
            fail(ErrorCode::MalformedManifest, "plate " + f[0] + " has conflicting kinds" + at);

        const WellKey key{f[0], f[1]};
        auto it = where.find(key);
        if (it == where.end()) {
            where[key] = m.wells.size();
            WellRecord w{f[0], f[1], f[2], *role, {}};
            m.wells.push_back(std::move(w));
            it = where.find(key);
        } else {
            const auto& w = m.wells[it->second];
            if (w.compound_id != f[2] || w.role != *role)
                fail(ErrorCode::MalformedManifest, "duplicate well " + f[0] + "/" + f[1] + " with conflicting content" + at);
            if (f[5].empty() || w.tile_uris.empty())
                fail(ErrorCode::MalformedManifest, "duplicate well " + f[0] + "/" + f[1] + at);
        }
        if (!f[5].empty()) {
            if (!uris[key].insert(f[5]).second)
                fail(ErrorCode::MalformedManifest, "duplicate well " + f[0] + "/" + f[1] + " tile " + f[5] + at);
            m.wells[it->second].tile_uris.push_back(f[5]);
        }
    }
    return m;
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IOFailure, "cannot open manifest: " + path);
    return parse_manifest(in, std::filesystem::path(path).parent_path());
}

inline void write_manifest(const Manifest& m, std::ostream& out) {
    for (std::size_t i = 0; i < kManifestColumns.size(); ++i) out << (i ? "\t" : "") << kManifestColumns[i];
    out << '\n';
    for (const auto& w : m.wells) {
        const std::string prefix = w.plate_id + '\t' + w.well_id + '\t' + w.compound_id + '\t' + to_string(w.role) +
                                   '\t' + to_string(m.plate_kind.at(w.plate_id)) + '\t';
        if (w.tile_uris.empty()) out << prefix << '\n';
        for (const auto& u : w.tile_uris) out << prefix << u << '\n';
    }
}

inline void write_manifest(const Manifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::IOFailure, "cannot write manifest: " + path);
    write_manifest(m, out);
    if (!out) fail(ErrorCode::IOFailure, "write failed: " + path);
}

/// Checks that every tile URI decodes and its channels are well formed.
inline void verify_tiles(const Manifest& m) {
    for (const auto& w : m.wells)
        for (std::size_t i = 0; i < w.tile_uris.size(); ++i) {
            Tile t = m.load_tile(w, i);
            if (t.well_ref() != w.ref()) fail(ErrorCode::MalformedManifest, "tile well mismatch for " + w.ref());
        }
}

}  // namespace campfire
