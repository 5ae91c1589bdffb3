#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "campfire/evaluation.hpp"
#include "campfire/synth.hpp"
#include "test_support.hpp"

using namespace campfire;

namespace {

EmbeddingRecord record(const std::string& plate, const std::string& well, const std::string& compound, WellRole role,
                       std::vector<float> v, int tile = 0) {
    EmbeddingRecord r;
    r.plate_id = plate;
    r.well_id = well;
    r.compound_id = compound;
    r.role = role;
    r.vector = std::move(v);
    r.tile_index = tile;
    return r;
}

std::vector<const EmbeddingRecord*> ptrs(const std::vector<EmbeddingRecord>& v) {
    std::vector<const EmbeddingRecord*> out;
    for (const auto& r : v) out.push_back(&r);
    return out;
}

/// Gaussian records around per-class centres.
std::vector<EmbeddingRecord> blobs(int classes, int per_class, int dim, double separation, Rng& rng, std::vector<int>& y) {
    std::vector<EmbeddingRecord> out;
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            std::vector<float> v(dim);
            for (int j = 0; j < dim; ++j) v[j] = static_cast<float>((j == c % dim ? separation : 0.0) + rng.normal());
            out.push_back(record("p", "w", "c" + std::to_string(c), WellRole::Standard, v));
            y.push_back(c);
        }
    return out;
}

std::vector<float> onehot(int c, int dim, double noise, Rng& rng) {
    std::vector<float> v(dim, 0.0f);
    v[c] = 1.0f;
    for (auto& x : v) x += static_cast<float>(noise * rng.normal());
    return v;
}

/// Controls on plates P0-P3 (train), P4 (val), P5 (ID test), P6 (OOD), plus
/// six held-out compounds tested on P5 and P6. Features are noisy one-hots.
struct ProtocolFixture {
    std::vector<EmbeddingRecord> recs;
    SplitAssignment a;

    explicit ProtocolFixture(double noise, int tiles = 20) {
        Rng rng(3);
        a.plate_status["P6"] = Status::OOD;
        for (int p = 0; p < 7; ++p) {
            const std::string plate = "P" + std::to_string(p);
            const Split s = p < 4 ? Split::Train : p == 4 ? Split::Val : Split::Test;
            for (int c = 0; c < 9; ++c) {
                const std::string well = "C" + std::to_string(c);
                const std::string name = c < 8 ? "ctrl_pos_0" + std::to_string(c + 1) : "ctrl_neg_01";
                a.well_split[{plate, well}] = s;
                a.compound_status[name] = Status::ID;
                for (int t = 0; t < tiles; ++t)
                    recs.push_back(record(plate, well, name, c < 8 ? WellRole::PositiveControl : WellRole::NegativeControl,
                                          onehot(c, 15, noise, rng), t));
            }
            if (p < 5) continue;
            for (int h = 0; h < 6; ++h) {
                const std::string well = "H" + std::to_string(h), name = "cmpd_" + std::to_string(h);
                a.well_split[{plate, well}] = Split::Test;
                a.compound_status[name] = Status::OOD;
                for (int t = 0; t < tiles; ++t) recs.push_back(record(plate, well, name, WellRole::Standard, onehot(9 + h, 15, noise, rng), t));
            }
        }
    }
};

synth::SynthConfig tiny_synth() {
    synth::SynthConfig s;
    s.n_target_plates = 2;
    s.n_ood_plates_hint = 0;
    s.wells_per_plate = 18;
    s.tiles_per_well = 3;
    s.tile_size = 28;
    return s;
}

ModelBundle tiny_bundle(const Manifest& m) {
    ModelBundle b;
    b.config.enc_dim = 16;
    b.config.enc_depth = 1;
    b.config.enc_heads = 2;
    b.config.dec_dim = 8;
    b.config.dec_depth = 1;
    b.config.dec_heads = 1;
    b.config.mlp_ratio = 2;
    Rng rng(1);
    b.params = MaeParams<float>::init(b.config, rng);
    b.train_channels = {channels::nucleus, channels::actin, channels::mito};
    ChannelStatsAccumulator acc;
    for (const auto& w : m.wells) acc.add(m.load_tile(w, 0));
    b.stats = acc.finish();
    return b;
}

}  // namespace

TEST(Sampling, QuotasClampAndSeedsMatter) {
    SplitAssignment a;
    a.compound_status["cmpd"] = Status::OOD;
    std::vector<EmbeddingRecord> recs;
    for (int t = 0; t < 100; ++t) recs.push_back(record("P", "A01", "ctrl", WellRole::PositiveControl, {0}, t));
    for (int t = 0; t < 12; ++t) recs.push_back(record("P", "A02", "cmpd", WellRole::Standard, {0}, t));
    for (int t = 0; t < 200; ++t) recs.push_back(record("P", "A03", "ctrl", WellRole::NegativeControl, {0}, t));
    for (int t = 0; t < 5; ++t) recs.push_back(record("P", "A04", "other", WellRole::Standard, {0}, t));
    for (const auto* w : {"A01", "A02", "A03", "A04"}) a.well_split[{"P", w}] = Split::Test;
    auto count = [](const std::vector<EmbeddingRecord>& v, const std::string& well) {
        return std::count_if(v.begin(), v.end(), [&](const auto& r) { return r.well_id == well; });
    };
    const auto s1 = sample_embeddings(recs, a, 100, 30, 1);
    EXPECT_EQ(count(s1, "A01"), 100);
    EXPECT_EQ(count(s1, "A02"), 12);
    EXPECT_EQ(count(s1, "A03"), 100);
    EXPECT_EQ(count(s1, "A04"), 0);
    const auto s2 = sample_embeddings(recs, a, 100, 30, 2);
    std::set<int> t1, t2;
    for (const auto& r : s1)
        if (r.well_id == "A03") t1.insert(r.tile_index);
    for (const auto& r : s2)
        if (r.well_id == "A03") t2.insert(r.tile_index);
    EXPECT_NE(t1, t2);
    EXPECT_EQ(sample_embeddings(recs, a, 100, 30, 1).size(), s1.size());
}

TEST(Sampling, PlanMatchesRecordSampling) {
    test::TempDir dir("plan");
    const Manifest m = synth::generate_dataset(tiny_synth(), dir.path(), 1);
    SplitAssignment a;
    for (const auto& w : m.wells) a.well_split[w.key()] = Split::Test;
    const auto picks = plan_tiles(m, a, 2, 30, 9);
    std::vector<EmbeddingRecord> all;
    for (const auto& w : m.wells)
        for (std::size_t t = 0; t < w.tile_uris.size(); ++t)
            all.push_back(record(w.plate_id, w.well_id, w.compound_id, w.role, {0}, static_cast<int>(t)));
    const auto sampled = sample_embeddings(all, a, 2, 30, 9);
    ASSERT_EQ(picks.size(), sampled.size());
    std::set<std::tuple<std::string, std::string, int>> x, y;
    for (const auto& p : picks) x.insert({p.well->plate_id, p.well->well_id, static_cast<int>(p.tile)});
    for (const auto& r : sampled) y.insert({r.plate_id, r.well_id, r.tile_index});
    EXPECT_EQ(x, y);
}

TEST(Probe, SeparableClassesReachFullAccuracy) {
    Rng rng(1);
    std::vector<int> ytr, yval;
    const auto tr = blobs(2, 50, 4, 12.0, rng, ytr), val = blobs(2, 50, 4, 12.0, rng, yval);
    const auto p = train_linear_probe(stack(ptrs(tr)), ytr, stack(ptrs(val)), yval, 2);
    EXPECT_EQ(p.accuracy(stack(ptrs(val)), yval), 1.0);
}

TEST(Probe, ShuffledLabelsStayNearChance) {
    Rng rng(2);
    std::vector<int> ytr, yval, yte;
    const auto tr = blobs(9, 40, 9, 0.0, rng, ytr), val = blobs(9, 40, 9, 0.0, rng, yval), te = blobs(9, 40, 9, 0.0, rng, yte);
    rng.shuffle(ytr);
    rng.shuffle(yval);
    const auto p = train_linear_probe(stack(ptrs(tr)), ytr, stack(ptrs(val)), yval, 9);
    const double n = static_cast<double>(yte.size()), chance = 1.0 / 9.0;
    EXPECT_NEAR(p.accuracy(stack(ptrs(te)), yte), chance, 3 * std::sqrt(chance * (1 - chance) / n));
}

TEST(Probe, MemorisesOneExamplePerClass) {
    Rng rng(3);
    std::vector<int> y;
    const auto tr = blobs(5, 1, 8, 0.0, rng, y);
    const auto p = train_linear_probe(stack(ptrs(tr)), y, MatD(0, 0), {}, 5);
    EXPECT_EQ(p.accuracy(stack(ptrs(tr)), y), 1.0);
}

TEST(Probe, DegenerateLabels) {
    const MatD x = MatD::Random(4, 3);
    try {
        train_linear_probe(x, {0, 0, 1, 1}, x, {0, 0, 1, 1}, 3);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DegenerateLabels);
    }
    EXPECT_THROW(train_linear_probe(x, {0, 1}, x, {}, 2), Error);
}

TEST(Protocols, ControlsStructureOnOracleEmbeddings) {
    const ProtocolFixture f(0.0);
    EvalConfig cfg;
    const auto rep = controls_protocol(f.recs, f.a, cfg);
    ASSERT_EQ(rep.results.size(), 2u);
    for (const auto cat : {ShiftCategory::IdCompoundIdPlate, ShiftCategory::IdCompoundOodPlate}) {
        const auto* r = rep.find(cat);
        ASSERT_NE(r, nullptr);
        EXPECT_EQ(r->accuracies.size(), 10u);
        EXPECT_EQ(r->n_classes, 9);
        EXPECT_EQ(r->mean, 1.0);
    }
    for (const auto& k : rep.trained_on) EXPECT_NE(f.a.split_of(k), Split::Test) << k.first << "/" << k.second;
}

TEST(Protocols, ControlsRejectTooFewRecordsPerClass) {
    const ProtocolFixture f(0.01, 2);  // 4 train records per class < 10 subsets
    try {
        controls_protocol(f.recs, f.a, EvalConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InsufficientData);
    }
}

TEST(Protocols, HeldoutFoldsAndCategories) {
    const ProtocolFixture f(0.0);
    EvalConfig cfg;
    const auto rep = heldout_protocol(f.recs, f.a, cfg);
    ASSERT_EQ(rep.results.size(), 2u);
    for (const auto cat : {ShiftCategory::OodCompoundIdPlate, ShiftCategory::OodCompoundOodPlate}) {
        const auto* r = rep.find(cat);
        ASSERT_NE(r, nullptr);
        EXPECT_EQ(r->accuracies.size(), 5u);
        EXPECT_EQ(r->n_classes, 6);
        EXPECT_EQ(r->mean, 1.0);
    }
    for (const auto& k : rep.trained_on) EXPECT_EQ(f.a.plate(k.first), Status::ID);
    const auto controls = controls_protocol(f.recs, f.a, cfg);
    std::set<ShiftCategory> cats;
    for (const auto* r : {&controls, &rep})
        for (const auto& x : r->results) cats.insert(x.category);
    EXPECT_EQ(cats.size(), 4u);
}

TEST(Protocols, StratifiedPartsPartitionRecords) {
    Rng rng(4);
    std::vector<int> y;
    const auto recs = blobs(6, 17, 3, 1.0, rng, y);
    const auto in = ptrs(recs);
    Rng split_rng(5);
    const auto parts = detail::stratified_parts(in, 5, split_rng);
    ASSERT_EQ(parts.size(), 5u);
    std::multiset<const EmbeddingRecord*> seen;
    for (const auto& p : parts) seen.insert(p.begin(), p.end());
    EXPECT_EQ(seen.size(), in.size());
    for (const auto* r : in) EXPECT_EQ(seen.count(r), 1u);
}

TEST(Protocols, HeldoutShuffledLabelsAtChance) {
    ProtocolFixture f(1.0, 30);
    // Destroy the label signal: random features for the held-out compounds.
    Rng rng(6);
    for (auto& r : f.recs)
        if (r.role == WellRole::Standard)
            for (auto& v : r.vector) v = static_cast<float>(rng.normal());
    const auto rep = heldout_protocol(f.recs, f.a, EvalConfig{});
    const auto* id = rep.find(ShiftCategory::OodCompoundIdPlate);
    ASSERT_NE(id, nullptr);
    const double n = 6 * 30 / 5.0, chance = 1.0 / 6.0;
    EXPECT_NEAR(id->mean, chance, 3 * std::sqrt(chance * (1 - chance) / (5 * n)) + 0.02);
}

TEST(ZPrime, WorkedExamples) {
    auto v = [](double x) { return VecD::Constant(1, x); };
    const auto r = zprime({v(-1), v(1)}, {v(3), v(5)});
    ASSERT_TRUE(r.defined());
    EXPECT_NEAR(r.mu_r, 0.0, 1e-12);
    EXPECT_NEAR(r.sigma_r, 1.0, 1e-12);
    EXPECT_NEAR(r.mu_t, 4.0, 1e-12);
    EXPECT_NEAR(r.sigma_t, 1.0, 1e-12);
    EXPECT_NEAR(*r.z_prime, -0.5, 1e-9);
    EXPECT_EQ(*zprime({v(0)}, {v(1)}).z_prime, 1.0);
    EXPECT_FALSE(zprime({v(1), v(2)}, {v(1), v(2)}).defined());
    EXPECT_FALSE(zprime({v(0), v(2)}, {v(-1), v(3)}).defined());  // equal means
    try {
        zprime({VecD::Zero(2)}, {VecD::Zero(3)});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
    }
}

TEST(ZPrime, InvariantUnderRigidMotion) {
    Rng rng(7);
    const int d = 6;
    auto randn = [&](int n) {
        VecD x(n);
        for (int i = 0; i < n; ++i) x(i) = rng.normal();
        return x;
    };
    std::vector<VecD> x, y;
    for (int i = 0; i < 20; ++i) x.push_back(randn(d));
    for (int i = 0; i < 15; ++i) y.push_back(randn(d) + VecD::Constant(d, 2.0));
    const double base = *zprime(x, y).z_prime;
    for (int trial = 0; trial < 5; ++trial) {
        MatD g(d, d);
        for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
        const MatD q = Eigen::HouseholderQR<MatD>(g).householderQ();
        const VecD shift = randn(d) * 10;
        std::vector<VecD> xr, yr;
        for (const auto& v : x) xr.push_back(q * v + shift);
        for (const auto& v : y) yr.push_back(q * v + shift);
        EXPECT_NEAR(*zprime(xr, yr).z_prime, base, 1e-9);
    }
}

TEST(ZPrime, BoundedAndDecreasingInSpread) {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<VecD> x, y;
        for (int i = 0; i < 5; ++i) {
            x.push_back(VecD::Constant(3, rng.normal()));
            y.push_back(VecD::Constant(3, 1 + rng.normal()));
        }
        const auto r = zprime(x, y);
        if (r.defined()) EXPECT_LE(*r.z_prime, 1.0);
    }
    // Scale the spread about fixed group means: Z' must fall.
    auto group = [](double centre, double spread) {
        return std::vector<VecD>{VecD::Constant(2, centre - spread), VecD::Constant(2, centre + spread)};
    };
    double prev = 2.0;
    for (double s : {0.0, 0.1, 0.2, 0.5, 1.0, 2.0}) {
        const double z = *zprime(group(0, s), group(5, s)).z_prime;
        EXPECT_LT(z, prev);
        prev = z;
    }
}

TEST(ZPrime, MatrixCoversOrderedPairs) {
    std::map<std::string, std::vector<VecD>> g = {{"a", {VecD::Constant(2, 0.0)}}, {"b", {VecD::Constant(2, 1.0)}}, {"c", {VecD::Constant(2, 3.0)}}};
    const auto m = zprime_matrix(g);
    EXPECT_EQ(m.size(), 3u);
    for (const auto& [k, row] : m) {
        EXPECT_EQ(row.size(), 2u);
        EXPECT_FALSE(row.count(k));
    }
    const json j = zprime_matrix_json(m);
    EXPECT_EQ(j["a"]["b"]["z_prime"].get<double>(), 1.0);
}

TEST(WellEmbedding, MeanOfTiles) {
    const VecD a = (VecD(3) << 1, 2, 3).finished(), b = (VecD(3) << 3, 2, 1).finished();
    EXPECT_EQ(well_embedding({a}), a);
    EXPECT_EQ(well_embedding({a, b}), VecD::Constant(3, 2.0));
    EXPECT_EQ(well_embedding({a, b, a, b}), well_embedding({a, b}));
    try {
        well_embedding({});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyWell);
    }
}

TEST(Triplet, HingeIsZeroWhenNegativesAreFar) {
    Mat<float> e(4, 2);
    e << 0, 0, 0, 0, 5, 5, 5, 5;
    const auto r = batch_hard_triplet_loss(e, {0, 0, 1, 1}, 1.0);
    EXPECT_EQ(r.loss, 0.0);
    EXPECT_EQ(r.active, 4u);
    EXPECT_EQ(r.grad.cwiseAbs().maxCoeff(), 0.0f);
    try {
        batch_hard_triplet_loss(e, {1, 1, 1, 1}, 1.0);
        FAIL();
    } catch (const Error& err) {
        EXPECT_EQ(err.code(), ErrorCode::NoTriplets);
    }
    EXPECT_THROW(batch_hard_triplet_loss(e.topRows(2), {0, 1}, 1.0), Error);  // no positives
}

TEST(Triplet, GradientMatchesFiniteDifferences) {
    Rng rng(9);
    Mat<float> e(6, 3);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = static_cast<float>(rng.normal());
    const std::vector<int> y = {0, 0, 1, 1, 2, 2};
    const auto r = batch_hard_triplet_loss(e, y, 4.0);
    for (Eigen::Index i = 0; i < e.size(); ++i) {
        Mat<float> up = e, down = e;
        up.data()[i] += 1e-3f;
        down.data()[i] -= 1e-3f;
        const double fd = (batch_hard_triplet_loss(up, y, 4.0).loss - batch_hard_triplet_loss(down, y, 4.0).loss) / 2e-3;
        EXPECT_NEAR(r.grad.data()[i], fd, 2e-2);
    }
}

TEST(Triplet, FinetuneReducesLossAndSeparatesLabels) {
    Rng rng(10);
    std::vector<WellTiles> wells;
    for (int w = 0; w < 24; ++w) {
        WellTiles t{{"P", "W" + std::to_string(w)}, w % 2 ? "pos" : "neg", Mat<float>(4, 6)};
        for (Eigen::Index i = 0; i < t.tiles.size(); ++i) t.tiles.data()[i] = static_cast<float>(rng.normal());
        t.tiles.col(0).array() += w % 2 ? 0.8f : -0.8f;
        wells.push_back(std::move(t));
    }
    EvalConfig cfg;
    cfg.triplet_epochs = 40;
    cfg.triplet_hidden = 32;
    cfg.triplet_out = 8;
    cfg.triplet_wells_per_batch = 8;
    const auto res = triplet_finetune(wells, cfg);
    ASSERT_EQ(res.epoch_loss.size(), 40u);
    EXPECT_LT(res.epoch_loss.back(), res.epoch_loss.front());
    std::vector<WellTiles> one_label(wells.begin(), wells.end());
    for (auto& w : one_label) w.label = "same";
    EXPECT_THROW(triplet_finetune(one_label, cfg), Error);
}

TEST(Finetune, BackboneChecksumUnchanged) {
    test::TempDir dir("ft");
    const Manifest m = synth::generate_dataset(tiny_synth(), dir.path(), 1);
    const ModelBundle b = tiny_bundle(m);
    const auto before = b.params.checksum(true);
    EvalConfig cfg;
    cfg.triplet_epochs = 3;
    cfg.triplet_hidden = 16;
    cfg.triplet_out = 8;
    cfg.finetune_tiles_per_well = 2;
    const auto rep = finetune_protocol(m, b, "plate_002", {channels::nucleus, channels::actin, channels::mito}, cfg);
    EXPECT_EQ(rep.backbone_checksum_before, before);
    EXPECT_EQ(rep.backbone_checksum_after, before);
    EXPECT_EQ(b.params.checksum(true), before);
    EXPECT_TRUE(rep.pos_neg_before.has_value());
    EXPECT_TRUE(rep.pos_neg_after.has_value());
    EXPECT_EQ(rep.result.epoch_loss.size(), 3u);
    EXPECT_THROW(finetune_protocol(m, b, "no_such_plate", {channels::nucleus}, cfg), Error);
}

TEST(EmbedSets, IdenticalPopulationsAndPermutationInvariance) {
    test::TempDir dir("sets");
    const Manifest m = synth::generate_dataset(tiny_synth(), dir.path(), 1);
    const ModelBundle b = tiny_bundle(m);
    std::vector<const WellRecord*> wells;
    for (const auto& w : m.wells) wells.push_back(&w);
    const auto picks = plan_well_tiles(wells, 1, 0);
    std::vector<ChannelSet> sets = EvalConfig{}.channel_sets;
    sets.push_back({channels::mito, channels::nucleus, channels::actin});
    sets.push_back({channels::nucleus, channels::er, channels::rna});
    const auto out = embed_by_channel_sets(m, b, picks, sets, 2);
    ASSERT_EQ(out.size(), 8u);
    for (const auto& t : out) {
        ASSERT_EQ(t.size(), picks.size());
        for (std::size_t i = 0; i < t.size(); ++i) {
            EXPECT_EQ(t[i].well_id, out[0][i].well_id);
            EXPECT_EQ(t[i].tile_index, out[0][i].tile_index);
        }
    }
    for (std::size_t i = 0; i < picks.size(); ++i) {
        for (std::size_t j = 0; j < out[5][i].vector.size(); ++j) EXPECT_NEAR(out[5][i].vector[j], out[6][i].vector[j], 1e-5);
        for (float v : out[7][i].vector) EXPECT_TRUE(std::isfinite(v));
    }
    try {
        embed_by_channel_sets(m, b, picks, {{ChannelId("Brightfield")}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnknownChannel);
    }
}

TEST(EmbeddingTable, BinaryAndTextRoundTrip) {
    EmbeddingTable t;
    t.channel_set = {channels::nucleus, channels::mito};
    t.model_checksum = 0xfeedULL;
    t.records.push_back(record("P1", "A01", "ctrl_neg_01", WellRole::NegativeControl, {1.5f, -2.0f, 0.25f}, 3));
    t.records.push_back(record("P1", "A02", "cmpd_0001", WellRole::Standard, {0.0f, 1e-7f, 7.0f}, 0));
    test::TempDir dir("emb");
    const auto path = (dir / "e.cmpe").string();
    write_embeddings(t, path);
    const auto back = read_embeddings(path);
    EXPECT_EQ(back.channel_set, t.channel_set);
    EXPECT_EQ(back.model_checksum, t.model_checksum);
    ASSERT_EQ(back.records.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back.records[i].vector, t.records[i].vector);
        EXPECT_EQ(back.records[i].key(), t.records[i].key());
        EXPECT_EQ(back.records[i].role, t.records[i].role);
        EXPECT_EQ(back.records[i].tile_index, t.records[i].tile_index);
    }
    std::ostringstream tsv;
    export_embeddings_tsv(t, tsv);
    std::istringstream in(tsv.str());
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    EXPECT_EQ(header, "plate_id\twell_id\tcompound_id\trole\ttile_index\te0\te1\te2");
    EXPECT_EQ(row.substr(0, row.find("\t1.5")), "P1\tA01\tctrl_neg_01\tnegative_control\t3");

    t.records[1].vector.pop_back();
    EXPECT_THROW(write_embeddings(t, (dir / "ragged.cmpe").string()), Error);
    std::ofstream((dir / "bad.cmpe").string()) << "nope";
    EXPECT_THROW(read_embeddings((dir / "bad.cmpe").string()), Error);
}
