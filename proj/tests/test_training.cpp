#include <fstream>
#include <map>

#include <gtest/gtest.h>

#include "campfire/checkpoint.hpp"
#include "campfire/synth.hpp"
#include "campfire/training.hpp"
#include "test_support.hpp"

using namespace campfire;

namespace {

ModelConfig tiny_model() {
    ModelConfig c;
    c.enc_dim = 16;
    c.enc_depth = 1;
    c.enc_heads = 2;
    c.dec_dim = 8;
    c.dec_depth = 1;
    c.dec_heads = 1;
    c.mlp_ratio = 2;
    c.mask_fraction = 0.5;
    return c;
}

struct TinyData {
    test::TempDir dir{"train"};
    Manifest manifest;
    SplitAssignment assignment;

    TinyData() {
        synth::SynthConfig s;
        s.n_target_plates = 3;
        s.n_ood_plates_hint = 1;
        s.wells_per_plate = 18;
        s.tiles_per_well = 2;
        s.tile_size = 28;
        manifest = synth::generate_dataset(s, dir.path(), 1);
        SplitConfig sc;
        sc.n_heldout_compounds = 0;
        sc.n_ood_plates = 1;
        sc.plates_train = sc.plates_val = sc.plates_test = 1;
        assignment = assign(manifest, sc);
    }
};

TrainConfig tiny_train() {
    TrainConfig c;
    c.model = tiny_model();
    c.optim.total_epochs = 2;
    c.optim.batch_size = 4;
    c.optim.seed = 3;
    return c;
}

}  // namespace

TEST(ChannelSubset, UniformOverSevenSubsets) {
    const ChannelSet three = {channels::nucleus, channels::actin, channels::mito};
    Rng rng(1);
    std::map<ChannelSet, int> counts;
    const int n = 70000;
    for (int i = 0; i < n; ++i) ++counts[sample_channel_subset(three, rng)];
    ASSERT_EQ(counts.size(), 7u);
    for (const auto& [set, k] : counts) {
        EXPECT_FALSE(set.empty());
        EXPECT_NEAR(static_cast<double>(k) / n, 1.0 / 7.0, 0.01) << join_channels(set);
    }
    EXPECT_THROW(sample_channel_subset({}, rng), Error);
}

TEST(Schedule, EndpointsAndMidpoint) {
    const OptimConfig c;  // 20 warmup epochs of 50, 5e-4 peak
    const std::int64_t spe = 10;
    EXPECT_NEAR(lr_at(0, spe, c), 1e-5, 1e-12);
    EXPECT_NEAR(lr_at(200, spe, c), 5e-4, 1e-12);
    EXPECT_NEAR(lr_at(499, spe, c), 1e-6, 1e-12);
    EXPECT_NEAR(lr_at(100, spe, c), 1e-5 + 0.5 * (5e-4 - 1e-5), 1e-12);
    // Halfway through the cosine phase.
    const double mid = 200 + 299 / 2.0;
    const double expect = 1e-6 + 0.5 * (5e-4 - 1e-6) * (1 + std::cos(std::numbers::pi * (149.0 / 299.0)));
    EXPECT_NEAR(lr_at(static_cast<std::int64_t>(mid), spe, c), expect, 1e-12);
    EXPECT_THROW(lr_at(-1, spe, c), Error);
}

TEST(Schedule, ContinuousAndBounded) {
    const OptimConfig c;
    const std::int64_t spe = 7;
    double prev = lr_at(0, spe, c);
    const double warm_slope = (c.lr_peak - c.lr_warmup_start) / (c.warmup_epochs * spe);
    const double cos_slope = std::numbers::pi / 2 * (c.lr_peak - c.eta_min) / ((c.total_epochs - c.warmup_epochs) * spe - 1);
    const double max_jump = std::max(warm_slope, cos_slope) + 1e-12;
    for (std::int64_t s = 1; s < c.total_epochs * spe; ++s) {
        const double lr = lr_at(s, spe, c);
        EXPECT_LE(std::abs(lr - prev), max_jump) << s;
        EXPECT_GE(lr, c.eta_min - 1e-15);
        EXPECT_LE(lr, c.lr_peak + 1e-15);
        prev = lr;
    }
}

TEST(Optimizer, ZeroLearningRateLeavesParamsUnchanged) {
    auto m = MaskedAutoencoder<float>::init(tiny_model(), 2);
    const auto before = m.params.checksum();
    AdamW<float> adam(m.params);
    auto grads = m.params.zeros_like();
    grads.visit([](const std::string&, Mat<float>& x, bool) { x.setConstant(0.5f); });
    adam.step(m.params, grads, 0.0, OptimConfig{});
    EXPECT_EQ(m.params.checksum(), before);
    adam.step(m.params, grads, 1e-3, OptimConfig{});
    EXPECT_NE(m.params.checksum(), before);
}

TEST(Optimizer, ClippingBoundsGlobalNorm) {
    auto m = MaskedAutoencoder<float>::init(tiny_model(), 3);
    auto g = m.params.zeros_like();
    g.visit([](const std::string&, Mat<float>& x, bool) { x.setConstant(2.0f); });
    const double before = clip_global_norm(g, 1.0);
    EXPECT_GT(before, 1.0);
    EXPECT_NEAR(global_norm(g), 1.0, 1e-4);
    EXPECT_NEAR(clip_global_norm(g, 0.0), global_norm(g), 1e-9);  // 0 disables
}

TEST(TrainStep, FiniteLossAndStepCounter) {
    TinyData d;
    LoggedLoader loader(d.manifest);
    ChannelStatsAccumulator acc;
    const auto tiles = load_split_tiles(loader, d.assignment, Split::Train, {channels::nucleus, channels::actin, channels::mito}, &acc);
    ASSERT_FALSE(tiles.empty());
    TrainState st;
    st.model = MaskedAutoencoder<float>::init(tiny_model(), 4);
    st.adam = AdamW<float>(st.model.params);
    st.stats = acc.finish();
    st.rng = Rng(4);
    const TrainConfig cfg = tiny_train();
    std::vector<const Tile*> batch = {&tiles[0], &tiles[1], &tiles[2]};
    for (int i = 0; i < 3; ++i) {
        const StepResult r = train_step(st, batch, cfg, 5);
        EXPECT_TRUE(std::isfinite(r.loss));
        EXPECT_GT(r.loss, 0.0);
        EXPECT_FALSE(r.channels.empty());
        EXPECT_EQ(st.step, i + 1);
    }
    EXPECT_THROW(train_step(st, {}, cfg, 5), Error);
}

TEST(Fit, ReadsOnlyTrainingAndValidationWells) {
    TinyData d;
    test::TempDir out("fit");
    std::vector<std::string> batch_wells;
    std::set<ChannelId> batch_channels;
    const auto res = fit(d.manifest, d.assignment, tiny_train(), out.path(), {}, [&](const ChannelSet& set, const std::vector<std::string>& wells) {
        batch_channels.insert(set.begin(), set.end());
        batch_wells.insert(batch_wells.end(), wells.begin(), wells.end());
    });
    ASSERT_FALSE(res.reads.empty());
    for (const auto& [key, n] : res.reads) {
        const Split s = d.assignment.split_of(key);
        EXPECT_TRUE(s == Split::Train || s == Split::Val) << to_string(s);
    }
    std::set<std::string> train_refs;
    for (const auto& w : d.manifest.wells)
        if (d.assignment.split_of(w.key()) == Split::Train) train_refs.insert(w.ref());
    ASSERT_FALSE(batch_wells.empty());
    for (const auto& ref : batch_wells) EXPECT_TRUE(train_refs.count(ref)) << ref;
    EXPECT_FALSE(res.channels_fed.count(channels::er));
    EXPECT_FALSE(res.channels_fed.count(channels::rna));
    EXPECT_EQ(batch_channels, res.channels_fed);
    EXPECT_EQ(res.metrics.size(), 3u);
    for (const auto& m : res.metrics) EXPECT_TRUE(std::isfinite(m.val_loss));
    const ModelBundle b = ModelBundle::load(res.checkpoint.string());
    EXPECT_EQ(b.config, tiny_model());
    EXPECT_EQ(b.train_channels, tiny_train().train_channels);
}

TEST(Fit, ResumeReproducesMetrics) {
    TinyData d;
    test::TempDir a("full"), b("resumed");
    TrainConfig cfg = tiny_train();
    cfg.keep_all_checkpoints = true;
    fit(d.manifest, d.assignment, cfg, a.path());
    std::filesystem::copy_file(a / "metrics.jsonl", b / "metrics.jsonl");
    fit(d.manifest, d.assignment, cfg, b.path(), a / checkpoint_name(1));
    EXPECT_EQ(read_metrics(a / "metrics.jsonl"), read_metrics(b / "metrics.jsonl"));
    const auto fa = TensorFile::load((a / "checkpoint.cmpc").string());
    const auto fb = TensorFile::load((b / "checkpoint.cmpc").string());
    EXPECT_EQ(fa.header.at("encoder_checksum"), fb.header.at("encoder_checksum"));
    EXPECT_EQ(fa.encode(), fb.encode());
}

TEST(Fit, SameSeedSameMetrics) {
    TinyData d;
    test::TempDir a("a"), b("b");
    TrainConfig cfg = tiny_train();
    cfg.optim.total_epochs = 1;
    fit(d.manifest, d.assignment, cfg, a.path());
    fit(d.manifest, d.assignment, cfg, b.path());
    EXPECT_EQ(read_metrics(a / "metrics.jsonl"), read_metrics(b / "metrics.jsonl"));
    cfg.optim.seed = 99;
    test::TempDir c("c");
    fit(d.manifest, d.assignment, cfg, c.path());
    EXPECT_NE(read_metrics(a / "metrics.jsonl"), read_metrics(c / "metrics.jsonl"));
}

TEST(Checkpoint, RoundTripAndCorruption) {
    TrainState st;
    st.model = MaskedAutoencoder<float>::init(tiny_model(), 5);
    st.adam = AdamW<float>(st.model.params);
    st.stats.by_channel[channels::nucleus] = {1.0, 2.0};
    st.epoch = 3;
    st.step = 17;
    st.rng = Rng(5);
    st.rng.next_u64();
    TrainConfig cfg = tiny_train();
    cfg.train_channels = {channels::nucleus};
    const TensorFile f = make_checkpoint(st, cfg, 4);
    test::TempDir dir("ckpt");
    const auto path = (dir / "c.cmpc").string();
    f.save(path);
    const TrainState back = restore_state(TensorFile::load(path));
    EXPECT_EQ(back.model.params.checksum(), st.model.params.checksum());
    EXPECT_EQ(back.epoch, 3);
    EXPECT_EQ(back.step, 17);
    Rng r1 = st.rng, r2 = back.rng;
    EXPECT_EQ(r1.next_u64(), r2.next_u64());

    auto bytes = f.encode();
    bytes[bytes.size() / 2] ^= 0x40;
    try {
        TensorFile::decode(bytes);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::CorruptCheckpoint);
    }
    auto short_bytes = f.encode();
    short_bytes.resize(10);
    EXPECT_THROW(TensorFile::decode(short_bytes), Error);
    EXPECT_THROW(TensorFile::load((dir / "missing.cmpc").string()), Error);
}
