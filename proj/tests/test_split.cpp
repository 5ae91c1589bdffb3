#include <sstream>

#include <gtest/gtest.h>

#include "campfire/split.hpp"
#include "campfire/synth.hpp"
#include "test_support.hpp"

using namespace campfire;

namespace {

Manifest target_manifest(int plates, int compounds, int wells_per_plate, std::uint64_t seed = 7) {
    synth::SynthConfig cfg;
    cfg.n_target_plates = plates;
    cfg.n_ood_plates_hint = 0;
    cfg.n_compounds = compounds;
    cfg.wells_per_plate = wells_per_plate;
    cfg.tiles_per_well = 1;
    cfg.seed = seed;
    return synth::synthesize_manifest(cfg);
}

SplitConfig paper_split(std::uint64_t seed) {
    SplitConfig c;
    c.seed = seed;
    return c;
}

std::map<std::string, std::map<Split, int>> per_compound(const SplitAssignment& a, const Manifest& m) {
    std::map<std::string, std::map<Split, int>> out;
    for (const auto& w : m.wells) ++out[w.compound_id][a.split_of(w.key())];
    return out;
}

}  // namespace

TEST(Split, PaperConfigurationCounts) {
    const Manifest m = target_manifest(25, 302, 302);
    const SplitAssignment a = assign(m, paper_split(11));
    int ood_compounds = 0, ood_plates = 0;
    for (const auto& [_, s] : a.compound_status) ood_compounds += s == Status::OOD;
    for (const auto& [_, s] : a.plate_status) ood_plates += s == Status::OOD;
    EXPECT_EQ(ood_compounds, 60);
    EXPECT_EQ(ood_plates, 5);
    for (const auto& [c, counts] : per_compound(a, m)) {
        if (a.compound(c) == Status::OOD) {
            EXPECT_EQ(counts.at(Split::Test), 25) << c;
            continue;
        }
        EXPECT_EQ(counts.at(Split::Train), 14) << c;
        EXPECT_EQ(counts.at(Split::Val), 2) << c;
        // 4 ID-plate test wells plus one per OOD plate.
        EXPECT_EQ(counts.at(Split::Test), 4 + 5) << c;
    }
    const AuditReport r = audit(a, m);
    EXPECT_TRUE(r.clean());
    ASSERT_EQ(r.category_counts.size(), 4u);
    std::size_t total = 0;
    for (const auto& [_, n] : r.category_counts) {
        EXPECT_GT(n, 0u);
        total += n;
    }
    EXPECT_EQ(total, r.split_counts.at(Split::Test));
}

TEST(Split, ForcedOneOneOne) {
    const Manifest m = target_manifest(3, 9, 9);
    SplitConfig c;
    c.n_ood_plates = 0;
    c.n_heldout_compounds = 0;
    c.plates_train = c.plates_val = c.plates_test = 1;
    const SplitAssignment a = assign(m, c);
    for (const auto& [compound, counts] : per_compound(a, m)) {
        EXPECT_EQ(counts.at(Split::Train), 1) << compound;
        EXPECT_EQ(counts.at(Split::Val), 1) << compound;
        EXPECT_EQ(counts.at(Split::Test), 1) << compound;
    }
}

TEST(Split, DeterministicAndSeedSensitive) {
    const Manifest m = target_manifest(25, 302, 302);
    EXPECT_EQ(assign(m, paper_split(3)), assign(m, paper_split(3)));
    EXPECT_FALSE(assign(m, paper_split(3)) == assign(m, paper_split(4)));
}

TEST(Split, RowOrderInvariant) {
    Manifest m = target_manifest(10, 40, 80);
    SplitConfig c;
    c.n_heldout_compounds = 6;
    c.n_ood_plates = 2;
    c.plates_train = 5;
    c.plates_val = 1;
    c.plates_test = 2;
    const SplitAssignment a = assign(m, c);
    Rng rng(99);
    rng.shuffle(m.wells);
    EXPECT_EQ(assign(m, c), a);
}

TEST(Split, MultipleWellsPerPlateSelectOne) {
    // 9 compounds over 96 wells: ~10 wells per compound and plate.
    const Manifest m = target_manifest(10, 9, 96);
    SplitConfig c;
    c.n_heldout_compounds = 0;
    c.n_ood_plates = 2;
    c.plates_train = 6;
    c.plates_val = 1;
    c.plates_test = 1;
    const SplitAssignment a = assign(m, c);
    std::map<std::pair<std::string, std::string>, int> chosen;  // (compound, ID plate) -> wells in a split
    for (const auto& w : m.wells)
        if (a.plate(w.plate_id) == Status::ID && a.split_of(w.key()) != Split::Excluded) ++chosen[{w.compound_id, w.plate_id}];
    for (const auto& [k, n] : chosen) EXPECT_EQ(n, 1) << k.first << " " << k.second;
    for (const auto& [compound, counts] : per_compound(a, m)) {
        EXPECT_EQ(counts.at(Split::Train), 6);
        EXPECT_EQ(counts.at(Split::Val), 1);
    }
    EXPECT_TRUE(audit(a, m).clean());
}

TEST(Split, ProportionalFallback) {
    SplitConfig c;  // 14/2/4
    EXPECT_EQ(detail::group_sizes(20, c), (std::array<int, 3>{14, 2, 4}));
    EXPECT_EQ(detail::group_sizes(30, c), (std::array<int, 3>{14, 2, 4}));
    EXPECT_EQ(detail::group_sizes(10, c), (std::array<int, 3>{7, 1, 2}));
    EXPECT_EQ(detail::group_sizes(3, c), (std::array<int, 3>{1, 1, 1}));
    EXPECT_EQ(detail::group_sizes(7, c), (std::array<int, 3>{5, 1, 1}));
}

TEST(Split, Errors) {
    SplitConfig c;
    c.n_ood_plates = 0;
    c.n_heldout_compounds = 0;
    c.plates_train = c.plates_val = c.plates_test = 1;
    auto code = [](auto&& f) {
        try {
            f();
        } catch (const Error& e) {
            return e.code();
        }
        return ErrorCode::IOFailure;
    };
    // A compound missing from one of three ID plates cannot fill three splits.
    Manifest sparse = target_manifest(3, 10, 10);
    const std::string first_plate = sparse.wells[0].plate_id;
    std::erase_if(sparse.wells, [&](const WellRecord& w) { return w.compound_id == "cmpd_0001" && w.plate_id == first_plate; });
    EXPECT_EQ(code([&] { assign(sparse, c); }), ErrorCode::NotEnoughPlates);
    EXPECT_EQ(code([&] { assign(target_manifest(4, 9, 9), c); }), ErrorCode::InvalidConfig);  // 1+1+1 != 4 ID plates
    c.n_heldout_compounds = 1;
    EXPECT_EQ(code([&] { assign(target_manifest(3, 9, 9), c); }), ErrorCode::NoNonControlCompounds);
    SplitConfig bad;
    bad.p_train = 1.5;
    EXPECT_EQ(code([&] { bad.validate(); }), ErrorCode::InvalidConfig);
}

TEST(Split, MissingTilesExcludedWithWarning) {
    Manifest m = target_manifest(3, 9, 18);
    m.wells[0].tile_uris.clear();
    SplitConfig c;
    c.n_ood_plates = 0;
    c.n_heldout_compounds = 0;
    c.plates_train = c.plates_val = c.plates_test = 1;
    std::ostringstream warn;
    const SplitAssignment a = assign(m, c, &warn);
    EXPECT_EQ(a.split_of(m.wells[0].key()), Split::Excluded);
    EXPECT_NE(warn.str().find(m.wells[0].ref()), std::string::npos);
}

TEST(Split, CompoundPlates) {
    synth::SynthConfig s;
    s.n_target_plates = 0;
    s.n_ood_plates_hint = 0;
    s.n_compound_plates = 100;
    s.wells_per_plate = 100;
    s.n_compounds = 20;
    s.tiles_per_well = 1;
    const Manifest m = synth::synthesize_manifest(s);
    ASSERT_EQ(m.wells.size(), 10000u);
    auto fraction = [&](double p) {
        SplitConfig c;
        c.p_train = p;
        const auto a = assign_compound_plates(m, c);
        int train = 0;
        for (const auto& w : m.wells) {
            const Split sp = a.split_of(w.key());
            EXPECT_TRUE(sp == Split::Train || sp == Split::Excluded);
            train += sp == Split::Train;
        }
        return train / 10000.0;
    };
    EXPECT_EQ(fraction(1.0), 1.0);
    EXPECT_EQ(fraction(0.0), 0.0);
    const double half = fraction(0.5);
    EXPECT_GE(half, 0.48);
    EXPECT_LE(half, 0.52);
}

TEST(Split, MixedManifestExcludesHeldOutCompoundsOnCompoundPlates) {
    synth::SynthConfig s;
    s.n_target_plates = 10;
    s.n_ood_plates_hint = 0;
    s.n_compound_plates = 4;
    s.n_compounds = 30;
    s.wells_per_plate = 30;
    s.tiles_per_well = 1;
    const Manifest m = synth::synthesize_manifest(s);
    SplitConfig c;
    c.n_heldout_compounds = 5;
    c.n_ood_plates = 2;
    c.plates_train = 5;
    c.plates_val = 1;
    c.plates_test = 2;
    c.p_train = 1.0;
    const SplitAssignment a = assign(m, c);
    for (const auto& w : m.wells) {
        if (m.plate_kind.at(w.plate_id) != PlateKind::Compound) continue;
        EXPECT_EQ(a.split_of(w.key()), a.compound(w.compound_id) == Status::OOD ? Split::Excluded : Split::Train);
    }
    EXPECT_TRUE(audit(a, m).clean());
}

TEST(Split, InvariantsHoldOverRandomManifests) {
    Rng meta(2024);
    for (int trial = 0; trial < 40; ++trial) {
        const int plates = 4 + static_cast<int>(meta.uniform_int(10));
        const int compounds = 10 + static_cast<int>(meta.uniform_int(30));
        const int wells = compounds + static_cast<int>(meta.uniform_int(40));
        synth::SynthConfig s;
        s.n_target_plates = plates;
        s.n_ood_plates_hint = 0;
        s.n_compound_plates = static_cast<int>(meta.uniform_int(3));
        s.n_compounds = compounds;
        s.wells_per_plate = wells;
        s.tiles_per_well = 1;
        s.seed = meta.next_u64();
        const Manifest m = synth::synthesize_manifest(s);
        SplitConfig c;
        c.seed = meta.next_u64();
        c.n_ood_plates = static_cast<int>(meta.uniform_int(plates - 2));
        c.n_heldout_compounds = static_cast<int>(meta.uniform_int(compounds - 9));
        c.plates_val = 1;
        c.plates_test = 1;
        c.plates_train = plates - c.n_ood_plates - 2;
        const SplitAssignment a = assign(m, c);
        const AuditReport r = audit(a, m);
        EXPECT_TRUE(r.clean()) << "trial " << trial << ": " << (r.violations.empty() ? "" : r.violations.front());
        for (const auto& w : m.wells) {
            ASSERT_TRUE(a.well_split.count(w.key()));
            const Split sp = a.split_of(w.key());
            if (a.plate(w.plate_id) == Status::OOD || a.compound(w.compound_id) == Status::OOD)
                EXPECT_TRUE(sp == Split::Test || sp == Split::Excluded);
            if (m.plate_kind.at(w.plate_id) == PlateKind::Compound) EXPECT_TRUE(sp == Split::Train || sp == Split::Excluded);
            if (is_control(w.role)) EXPECT_EQ(a.compound(w.compound_id), Status::ID);
            if (m.plate_kind.at(w.plate_id) == PlateKind::Target2 && a.plate(w.plate_id) == Status::OOD)
                EXPECT_EQ(sp, Split::Test);
        }
    }
}

TEST(Audit, CorruptedAssignmentHasOneViolation) {
    const Manifest m = target_manifest(10, 30, 30);
    SplitConfig c;
    c.n_heldout_compounds = 4;
    c.n_ood_plates = 2;
    c.plates_train = 5;
    c.plates_val = 1;
    c.plates_test = 2;
    SplitAssignment a = assign(m, c);
    ASSERT_TRUE(audit(a, m).clean());
    for (const auto& w : m.wells) {
        if (a.plate(w.plate_id) == Status::OOD && a.compound(w.compound_id) == Status::ID) {
            a.well_split[w.key()] = Split::Train;
            break;
        }
    }
    EXPECT_EQ(audit(a, m).violations.size(), 1u);
}

TEST(Audit, AssignmentFileRoundTrip) {
    const Manifest m = target_manifest(6, 20, 25);
    SplitConfig c;
    c.n_heldout_compounds = 3;
    c.n_ood_plates = 1;
    c.plates_train = 3;
    c.plates_val = 1;
    c.plates_test = 1;
    const SplitAssignment a = assign(m, c);
    test::TempDir dir;
    const auto path = (dir / "assignment.tsv").string();
    write_assignment(a, m, path);
    const SplitAssignment back = read_assignment(path, m);
    for (const auto& w : m.wells) {
        EXPECT_EQ(back.split_of(w.key()), a.split_of(w.key()));
        EXPECT_EQ(back.compound(w.compound_id), a.compound(w.compound_id));
        EXPECT_EQ(back.plate(w.plate_id), a.plate(w.plate_id));
    }
    EXPECT_TRUE(audit(back, m).clean());
}
