#include <optional>
#include <sstream>

#include <gtest/gtest.h>

#include "campfire/config.hpp"
#include "test_support.hpp"

using namespace campfire;

namespace {

RunConfig parse(const std::string& text, const RunConfig& base = RunConfig::desk()) {
    std::istringstream in(text);
    return parse_run_config(in, base);
}

std::optional<ErrorCode> code_of(const std::string& text) {
    try {
        parse(text);
    } catch (const Error& e) {
        return e.code();
    }
    return std::nullopt;
}

}  // namespace

TEST(Config, EmptyFileKeepsPreset) {
    const RunConfig c = parse("");
    EXPECT_EQ(c.to_json(), RunConfig::desk().to_json());
}

TEST(Config, TypedOverrides) {
    const RunConfig c = parse(
        "[synth]\nplate_effect_strength = 0.2\nn_target_plates = 4\n"
        "[optim]\nbatch_size = 8\naugment = false\n"
        "[channels]\ntrain = Nu,ER\n"
        "[eval]\nchannel_sets = Nu|Nu,Ac,M\n"
        "[data]\ndeterministic = off\n");
    EXPECT_DOUBLE_EQ(c.synth.plate_effect_strength, 0.2);
    EXPECT_EQ(c.synth.n_target_plates, 4);
    EXPECT_EQ(c.optim.batch_size, 8);
    EXPECT_FALSE(c.augment);
    EXPECT_EQ(c.channels.train, (ChannelSet{channels::nucleus, channels::er}));
    ASSERT_EQ(c.eval.channel_sets.size(), 2u);
    EXPECT_EQ(c.eval.channel_sets[1].size(), 3u);
    EXPECT_FALSE(c.data.deterministic);
    EXPECT_EQ(c.model, RunConfig::desk().model);
}

TEST(Config, RejectsUnknownAndMalformed) {
    EXPECT_EQ(code_of("[nonsense]\nx = 1\n"), ErrorCode::InvalidConfig);
    EXPECT_EQ(code_of("[model]\nembed_dim_typo = 3\n"), ErrorCode::InvalidConfig);
    EXPECT_EQ(code_of("[model]\nenc_dim = twelve\n"), ErrorCode::InvalidConfig);
    EXPECT_EQ(code_of("[model]\nenc_dim = 12.5\n"), ErrorCode::InvalidConfig);
    EXPECT_EQ(code_of("[optim]\naugment = maybe\n"), ErrorCode::InvalidConfig);
    EXPECT_EQ(code_of("[split]\np_train = 1.5\n"), ErrorCode::InvalidConfig);
    EXPECT_EQ(code_of("[model]\nenc_dim = 30\nenc_heads = 4\n"), ErrorCode::InvalidConfig);
    EXPECT_EQ(code_of("[data]\nworkers = 0\n"), ErrorCode::InvalidConfig);
}

TEST(Config, LoadFromFile) {
    test::TempDir dir("cfg");
    std::ofstream(dir / "c.ini") << "[optim]\ntotal_epochs = 3\n";
    EXPECT_EQ(load_run_config(dir / "c.ini").optim.total_epochs, 3);
    try {
        load_run_config(dir / "missing.ini");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::IOFailure);
    }
}

TEST(Config, Presets) {
    const RunConfig d = RunConfig::desk(), p = RunConfig::paper();
    d.validate();
    p.validate();
    EXPECT_EQ(d.synth.n_target_plates + d.synth.n_ood_plates_hint, 10);
    EXPECT_EQ(d.split.plates_per_compound() + d.split.n_ood_plates, 10);
    EXPECT_EQ(d.model.enc_dim, 192);
    EXPECT_EQ(d.optim.total_epochs, 10);
    EXPECT_EQ(p.synth.n_target_plates + p.synth.n_ood_plates_hint, 25);
    EXPECT_EQ(p.synth.n_compounds, 302);
    EXPECT_EQ(p.split.n_heldout_compounds, 60);
    EXPECT_EQ(p.optim.total_epochs, 50);
    EXPECT_EQ(p.optim.warmup_epochs, 20);
    EXPECT_DOUBLE_EQ(p.optim.lr_peak, 5e-4);
    EXPECT_EQ(p.eval.n_control, 100);
    EXPECT_EQ(p.eval.n_heldout, 30);
}

TEST(Config, SeedPropagatesAndJsonRoundTrips) {
    RunConfig c = RunConfig::desk();
    c.set_seed(42);
    EXPECT_EQ(c.synth.seed, 42u);
    EXPECT_EQ(c.split.seed, 42u);
    EXPECT_EQ(c.optim.seed, 42u);
    EXPECT_EQ(c.eval.seed, 42u);
    EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json(), c.to_json());
}
