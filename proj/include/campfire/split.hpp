#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "campfire/error.hpp"
#include "campfire/manifest.hpp"
#include "campfire/rng.hpp"

namespace campfire {

enum class Split { Train, Val, Test, Excluded };
enum class Status { ID, OOD };

enum class ShiftCategory {
    IdCompoundIdPlate,
    IdCompoundOodPlate,
    OodCompoundIdPlate,
    OodCompoundOodPlate,
};

inline std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
        case Split::Excluded: return "excluded";
    }
    return "excluded";
}

inline std::optional<Split> parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    if (s == "excluded") return Split::Excluded;
    return std::nullopt;
}

inline std::string to_string(Status s) { return s == Status::ID ? "ID" : "OOD"; }

inline std::optional<Status> parse_status(const std::string& s) {
    if (s == "ID") return Status::ID;
    if (s == "OOD") return Status::OOD;
    return std::nullopt;
}

inline std::string to_string(ShiftCategory c) {
    switch (c) {
        case ShiftCategory::IdCompoundIdPlate: return "ID_compound_ID_plate";
        case ShiftCategory::IdCompoundOodPlate: return "ID_compound_OOD_plate";
        case ShiftCategory::OodCompoundIdPlate: return "OOD_compound_ID_plate";
        case ShiftCategory::OodCompoundOodPlate: return "OOD_compound_OOD_plate";
    }
    return "";
}

inline std::optional<ShiftCategory> parse_category(const std::string& s) {
    for (auto c : {ShiftCategory::IdCompoundIdPlate, ShiftCategory::IdCompoundOodPlate,
                   ShiftCategory::OodCompoundIdPlate, ShiftCategory::OodCompoundOodPlate})
        if (to_string(c) == s) return c;
    return std::nullopt;
}

inline ShiftCategory categorize(Status compound, Status plate) {
    if (compound == Status::ID)
        return plate == Status::ID ? ShiftCategory::IdCompoundIdPlate : ShiftCategory::IdCompoundOodPlate;
    return plate == Status::ID ? ShiftCategory::OodCompoundIdPlate : ShiftCategory::OodCompoundOodPlate;
}

struct SplitConfig {
    int n_heldout_compounds = 60;
    int n_ood_plates = 5;
    int plates_train = 14;
    int plates_val = 2;
    int plates_test = 4;
    double p_train = 0.5;  // compound-plate inclusion probability
    std::uint64_t seed = 0;

    int plates_per_compound() const { return plates_train + plates_val + plates_test; }

    void validate() const {
        if (n_heldout_compounds < 0 || n_ood_plates < 0 || plates_train < 0 || plates_val < 0 || plates_test < 0)
            fail(ErrorCode::InvalidConfig, "split counts must be non-negative");
        if (!(p_train >= 0.0 && p_train <= 1.0)) fail(ErrorCode::InvalidConfig, "p_t must lie in [0,1]");
        if (plates_per_compound() <= 0) fail(ErrorCode::InvalidConfig, "plates per compound must be positive");
    }
};

struct SplitAssignment {
    std::map<WellKey, Split> well_split;
    std::map<std::string, Status> compound_status;
    std::map<std::string, Status> plate_status;

    Status compound(const std::string& c) const {
        auto it = compound_status.find(c);
        return it == compound_status.end() ? Status::ID : it->second;
    }
    Status plate(const std::string& p) const {
        auto it = plate_status.find(p);
        return it == plate_status.end() ? Status::ID : it->second;
    }
    Split split_of(const WellKey& k) const {
        auto it = well_split.find(k);
        return it == well_split.end() ? Split::Excluded : it->second;
    }
    std::optional<ShiftCategory> category(const WellRecord& w) const {
        if (split_of(w.key()) != Split::Test) return std::nullopt;
        return categorize(compound(w.compound_id), plate(w.plate_id));
    }

    bool operator==(const SplitAssignment&) const = default;
};

namespace detail {

inline std::vector<const WellRecord*> sorted_wells(const Manifest& m, PlateKind kind) {
    std::vector<const WellRecord*> out;
    for (const auto& w : m.wells) {
        auto it = m.plate_kind.find(w.plate_id);
        if (it != m.plate_kind.end() && it->second == kind) out.push_back(&w);
    }
    std::sort(out.begin(), out.end(), [](const WellRecord* a, const WellRecord* b) {
        return std::tie(a->plate_id, a->well_id, a->compound_id) < std::tie(b->plate_id, b->well_id, b->compound_id);
    });
    return out;
}

/// Group sizes for a compound present on `k` ID plates. Val and test are
/// scaled down first (at least one each when configured), train takes the rest.
inline std::array<int, 3> group_sizes(int k, const SplitConfig& cfg) {
    const int total = cfg.plates_per_compound();
    if (k >= total) return {cfg.plates_train, cfg.plates_val, cfg.plates_test};
    auto scaled = [&](int want) {
        if (want == 0) return 0;
        return std::max(1, static_cast<int>(std::floor(static_cast<double>(k) * want / total)));
    };
    const int val = scaled(cfg.plates_val);
    const int test = scaled(cfg.plates_test);
    return {k - val - test, val, test};
}

}  // namespace detail

/// Distribution-shift isolating assignment for TARGET2-style plates.
/// All randomness flows from cfg.seed through the wells sorted by
/// (plate, well, compound), so the result ignores manifest row order.
inline SplitAssignment assign_target2(const Manifest& manifest, const SplitConfig& cfg,
                                      std::ostream* warnings = nullptr) {
    cfg.validate();
    const auto wells = detail::sorted_wells(manifest, PlateKind::Target2);
    for (const auto& w : manifest.wells)
        if (manifest.plate_kind.at(w.plate_id) != PlateKind::Target2)
            fail(ErrorCode::InvalidConfig, "assign_target2 given non-target2 plate " + w.plate_id);

    Rng rng(cfg.seed);
    SplitAssignment out;

    std::set<std::string> plate_set;
    std::set<std::string> compounds_all;
    std::set<std::string> non_controls;
    for (const auto* w : wells) {
        plate_set.insert(w->plate_id);
        compounds_all.insert(w->compound_id);
        if (!is_control(w->role)) non_controls.insert(w->compound_id);
    }
    for (const auto* w : wells)
        if (is_control(w->role)) non_controls.erase(w->compound_id);

    std::vector<std::string> plates(plate_set.begin(), plate_set.end());
    if (cfg.n_ood_plates > static_cast<int>(plates.size()))
        fail(ErrorCode::NotEnoughPlates, "cannot hold out more plates than exist");
    auto plate_order = plates;
    rng.shuffle(plate_order);
    for (std::size_t i = 0; i < plates.size(); ++i)
        out.plate_status[plate_order[i]] = static_cast<int>(i) < cfg.n_ood_plates ? Status::OOD : Status::ID;

    const int n_id_plates = static_cast<int>(plates.size()) - cfg.n_ood_plates;
    if (cfg.plates_per_compound() != n_id_plates)
        fail(ErrorCode::InvalidConfig, "plates_train + plates_val + plates_test (" +
                                           std::to_string(cfg.plates_per_compound()) +
                                           ") must equal the number of ID plates (" + std::to_string(n_id_plates) + ")");

    if (cfg.n_heldout_compounds > 0) {
        if (non_controls.empty()) fail(ErrorCode::NoNonControlCompounds, "no non-control compound to hold out");
        if (cfg.n_heldout_compounds > static_cast<int>(non_controls.size()))
            fail(ErrorCode::NoNonControlCompounds, "fewer non-control compounds than requested held-out compounds");
    }
    std::vector<std::string> candidates(non_controls.begin(), non_controls.end());
    rng.shuffle(candidates);
    for (const auto& c : compounds_all) out.compound_status[c] = Status::ID;
    for (int i = 0; i < cfg.n_heldout_compounds; ++i) out.compound_status[candidates[i]] = Status::OOD;

    // compound -> plate -> candidate wells (with tiles)
    std::map<std::string, std::map<std::string, std::vector<const WellRecord*>>> layout;
    for (const auto* w : wells) {
        out.well_split[w->key()] = Split::Excluded;
        if (w->tile_uris.empty()) {
            if (warnings) *warnings << "warning: well " << w->ref() << " has no tiles; excluded\n";
            continue;
        }
        const bool ood = out.plate_status[w->plate_id] == Status::OOD || out.compound_status[w->compound_id] == Status::OOD;
        if (ood) {
            out.well_split[w->key()] = Split::Test;
            continue;
        }
        layout[w->compound_id][w->plate_id].push_back(w);
    }

    for (auto& [compound, by_plate] : layout) {
        std::vector<std::string> id_plates;
        for (const auto& [p, _] : by_plate) id_plates.push_back(p);
        const int k = static_cast<int>(id_plates.size());
        if (k < 3) fail(ErrorCode::NotEnoughPlates, "compound " + compound + " appears on only " + std::to_string(k) + " ID plates");
        const auto sizes = detail::group_sizes(k, cfg);
        rng.shuffle(id_plates);
        std::size_t pos = 0;
        const Split order[3] = {Split::Train, Split::Val, Split::Test};
        for (int g = 0; g < 3; ++g) {
            for (int i = 0; i < sizes[g]; ++i, ++pos) {
                const auto& candidates_on_plate = by_plate[id_plates[pos]];
                const auto pick = rng.uniform_int(candidates_on_plate.size());
                out.well_split[candidates_on_plate[pick]->key()] = order[g];
            }
        }
    }
    return out;
}

/// COMPOUND plates only ever contribute training wells.
inline SplitAssignment assign_compound_plates(const Manifest& manifest, const SplitConfig& cfg) {
    cfg.validate();
    const auto wells = detail::sorted_wells(manifest, PlateKind::Compound);
    Rng rng = Rng::stream(cfg.seed, {0xc0de});
    SplitAssignment out;
    for (const auto* w : wells) {
        out.plate_status[w->plate_id] = Status::ID;
        out.compound_status.emplace(w->compound_id, Status::ID);
        const bool take = rng.bernoulli(cfg.p_train);
        out.well_split[w->key()] = (take && !w->tile_uris.empty()) ? Split::Train : Split::Excluded;
    }
    return out;
}

/// Full assignment for a mixed manifest. COMPOUND-plate wells of compounds
/// held out on TARGET2 plates are excluded so they cannot leak into training.
inline SplitAssignment assign(const Manifest& manifest, const SplitConfig& cfg, std::ostream* warnings = nullptr) {
    Manifest target, compound;
    target.root = compound.root = manifest.root;
    for (const auto& w : manifest.wells) {
        const auto kind = manifest.plate_kind.at(w.plate_id);
        (kind == PlateKind::Target2 ? target : compound).wells.push_back(w);
        (kind == PlateKind::Target2 ? target : compound).plate_kind[w.plate_id] = kind;
    }
    SplitAssignment out;
    if (!target.wells.empty()) out = assign_target2(target, cfg, warnings);
    if (!compound.wells.empty()) {
        auto extra = assign_compound_plates(compound, cfg);
        for (auto& [k, s] : extra.well_split) {
            const auto* w = compound.find(k);
            if (out.compound(w->compound_id) == Status::OOD) s = Split::Excluded;
            out.well_split[k] = s;
        }
        for (auto& [p, s] : extra.plate_status) out.plate_status[p] = s;
        for (auto& [c, s] : extra.compound_status) out.compound_status.emplace(c, s);
    }
    return out;
}

struct AuditReport {
    std::vector<std::string> violations;
    std::map<Split, std::size_t> split_counts;
    std::map<std::string, std::map<Split, std::size_t>> compound_counts;
    std::map<WellKey, ShiftCategory> test_categories;
    std::map<ShiftCategory, std::size_t> category_counts;

    bool clean() const { return violations.empty(); }
};

inline AuditReport audit(const SplitAssignment& a, const Manifest& m) {
    AuditReport r;
    std::set<WellKey> seen;
    for (const auto& w : m.wells) {
        const auto it = a.well_split.find(w.key());
        if (it == a.well_split.end()) {
            r.violations.push_back("well " + w.ref() + " missing from assignment");
            continue;
        }
        seen.insert(w.key());
        const Split s = it->second;
        ++r.split_counts[s];
        ++r.compound_counts[w.compound_id][s];
        const bool leaks = s == Split::Train || s == Split::Val;
        if (leaks && a.plate(w.plate_id) == Status::OOD)
            r.violations.push_back("OOD plate well " + w.ref() + " assigned to " + to_string(s));
        if (leaks && a.compound(w.compound_id) == Status::OOD)
            r.violations.push_back("OOD compound " + w.compound_id + " well " + w.ref() + " assigned to " + to_string(s));
        const auto kind = m.plate_kind.find(w.plate_id);
        if (kind != m.plate_kind.end() && kind->second == PlateKind::Compound && (s == Split::Val || s == Split::Test))
            r.violations.push_back("COMPOUND plate well " + w.ref() + " assigned to " + to_string(s));
        if (s == Split::Test) {
            const auto cat = categorize(a.compound(w.compound_id), a.plate(w.plate_id));
            r.test_categories[w.key()] = cat;
            ++r.category_counts[cat];
        }
    }
    std::set<std::string> flagged;
    for (const auto& w : m.wells)
        if (is_control(w.role) && a.compound(w.compound_id) == Status::OOD && flagged.insert(w.compound_id).second)
            r.violations.push_back("control compound " + w.compound_id + " marked OOD");
    for (const auto& [k, _] : a.well_split)
        if (!seen.count(k)) r.violations.push_back("assignment names unknown well " + k.first + "/" + k.second);
    return r;
}

inline void write_assignment(const SplitAssignment& a, const Manifest& m, std::ostream& out) {
    out << "plate_id\twell_id\tsplit\tcompound_status\tplate_status\tshift_category\n";
    std::vector<const WellRecord*> wells;
    for (const auto& w : m.wells) wells.push_back(&w);
    std::sort(wells.begin(), wells.end(), [](auto* x, auto* y) { return x->key() < y->key(); });
    for (const auto* w : wells) {
        const auto cat = a.category(*w);
        out << w->plate_id << '\t' << w->well_id << '\t' << to_string(a.split_of(w->key())) << '\t'
            << to_string(a.compound(w->compound_id)) << '\t' << to_string(a.plate(w->plate_id)) << '\t'
            << (cat ? to_string(*cat) : "") << '\n';
    }
}

inline void write_assignment(const SplitAssignment& a, const Manifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::IOFailure, "cannot write assignment: " + path);
    write_assignment(a, m, out);
}

/// Reads an assignment file; compound status is keyed through the manifest.
inline SplitAssignment read_assignment(const std::string& path, const Manifest& m) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IOFailure, "cannot open assignment: " + path);
    SplitAssignment a;
    std::string line;
    std::getline(in, line);
    const auto index = m.index();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = detail::split_tabs(line);
        if (f.size() != 6) fail(ErrorCode::InvalidConfig, "bad assignment row: " + line);
        const auto s = parse_split(f[2]);
        const auto cs = parse_status(f[3]);
        const auto ps = parse_status(f[4]);
        if (!s || !cs || !ps) fail(ErrorCode::InvalidConfig, "bad assignment row: " + line);
        const WellKey key{f[0], f[1]};
        a.well_split[key] = *s;
        a.plate_status[f[0]] = *ps;
        auto it = index.find(key);
        if (it != index.end()) a.compound_status[it->second->compound_id] = *cs;
    }
    return a;
}

}  // namespace campfire
