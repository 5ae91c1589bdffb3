#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "campfire/checkpoint.hpp"
#include "campfire/error.hpp"
#include "campfire/json_io.hpp"
#include "campfire/manifest.hpp"
#include "campfire/model.hpp"
#include "campfire/objective.hpp"
#include "campfire/optim.hpp"
#include "campfire/parallel.hpp"
#include "campfire/rng.hpp"
#include "campfire/split.hpp"
#include "campfire/tile.hpp"

namespace campfire {

/// Uniform draw over the 2^k - 1 non-empty subsets, in `available` order.
inline ChannelSet sample_channel_subset(const ChannelSet& available, Rng& rng) {
    if (available.empty()) fail(ErrorCode::InvalidConfig, "no channels available");
    if (available.size() > 63) fail(ErrorCode::InvalidConfig, "too many channels to enumerate subsets");
    const std::uint64_t n_subsets = (std::uint64_t{1} << available.size()) - 1;
    const std::uint64_t bits = 1 + rng.uniform_int(n_subsets);
    ChannelSet out;
    for (std::size_t i = 0; i < available.size(); ++i)
        if (bits >> i & 1) out.push_back(available[i]);
    return out;
}

/// Tile loader that records every well it touches.
class LoggedLoader {
public:
    explicit LoggedLoader(const Manifest& m) : manifest_(m) {}

    Tile load(const WellRecord& well, std::size_t i) {
        {
            std::lock_guard lock(mu_);
            ++reads_[well.key()];
        }
        return manifest_.load_tile(well, i);
    }

    std::map<WellKey, std::size_t> reads() const {
        std::lock_guard lock(mu_);
        return reads_;
    }

    const Manifest& manifest() const { return manifest_; }

private:
    const Manifest& manifest_;
    mutable std::mutex mu_;
    std::map<WellKey, std::size_t> reads_;
};

/// Tiles of every well in `split`, restricted to `keep` channels, plus the
/// channel statistics of the full tiles when `stats` is given.
inline std::vector<Tile> load_split_tiles(LoggedLoader& loader, const SplitAssignment& a, Split split, const ChannelSet& keep,
                                          ChannelStatsAccumulator* stats = nullptr, std::size_t workers = 1) {
    std::vector<std::pair<const WellRecord*, std::size_t>> jobs;
    for (const auto& w : loader.manifest().wells)
        if (a.split_of(w.key()) == split)
            for (std::size_t i = 0; i < w.tile_uris.size(); ++i) jobs.emplace_back(&w, i);
    std::vector<Tile> full(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t j) { full[j] = loader.load(*jobs[j].first, jobs[j].second); }, workers);
    std::vector<Tile> out;
    out.reserve(full.size());
    for (auto& t : full) {
        if (stats) stats->add(t);
        out.push_back(t.select(keep));
    }
    return out;
}

struct TrainConfig {
    ModelConfig model;
    OptimConfig optim = OptimConfig::desk();
    objective::LossWeights loss;
    ChannelSet train_channels = {channels::nucleus, channels::actin, channels::mito};
    bool augment = true;
    std::size_t workers = 1;
    bool keep_all_checkpoints = false;
};

/// Everything needed to continue a run bit-for-bit.
struct TrainState {
    MaskedAutoencoder<float> model;
    AdamW<float> adam;
    ChannelStats stats;
    int epoch = 0;
    std::int64_t step = 0;
    Rng rng;
};

struct StepResult {
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    ChannelSet channels;
};

/// One optimisation step on raw (unnormalised) tiles carrying at least the
/// sampled channels: subset -> augment -> normalise -> mask -> loss -> AdamW.
inline StepResult train_step(TrainState& st, const std::vector<const Tile*>& batch, const TrainConfig& cfg,
                             std::int64_t steps_per_epoch) {
    if (batch.empty()) fail(ErrorCode::EmptySequence, "empty batch");
    StepResult res;
    res.channels = sample_channel_subset(cfg.train_channels, st.rng);
    std::vector<Tile> prepared;
    prepared.reserve(batch.size());
    for (const Tile* t : batch) {
        Tile x = t->select(res.channels);
        if (cfg.augment) x = augment(x, st.rng);
        prepared.push_back(normalize_channels(x, st.stats));
    }
    std::vector<MaskedAutoencoder<float>::Sample> samples;
    for (const auto& t : prepared) {
        const int side = st.model.grid_side(t);
        samples.push_back({&t, sample_mask(side * side, t.num_channels(), st.model.cfg.mask_fraction, st.model.cfg.sync_mask, st.rng)});
    }
    MaeParams<float> grads = st.model.params.zeros_like();
    const auto out = st.model.forward_backward(samples, cfg.loss, &grads, &st.rng);
    res.loss = out.loss;
    res.grad_norm = clip_global_norm(grads, cfg.optim.grad_clip);
    res.lr = lr_at(st.step, steps_per_epoch, cfg.optim);
    st.adam.step(st.model.params, grads, res.lr, cfg.optim);
    ++st.step;
    return res;
}

/// Mean loss over already normalised tiles with fixed per-tile masks.
inline double validation_loss(const MaskedAutoencoder<float>& model, const std::vector<Tile>& tiles,
                              const objective::LossWeights& loss, std::size_t batch_size, std::uint64_t seed) {
    if (tiles.empty()) return std::numeric_limits<double>::quiet_NaN();
    double total = 0.0;
    for (std::size_t start = 0; start < tiles.size(); start += batch_size) {
        const std::size_t end = std::min(tiles.size(), start + batch_size);
        std::vector<MaskedAutoencoder<float>::Sample> samples;
        for (std::size_t i = start; i < end; ++i) {
            Rng rng = Rng::stream(seed, {0x7a11d, i});
            const int side = model.grid_side(tiles[i]);
            samples.push_back(
                {&tiles[i], sample_mask(side * side, tiles[i].num_channels(), model.cfg.mask_fraction, model.cfg.sync_mask, rng)});
        }
        const auto r = model.forward_backward(samples, loss, nullptr);
        for (float v : r.per_sample) total += v;
    }
    return total / static_cast<double>(tiles.size());
}

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    std::optional<double> train_loss;
    double val_loss = 0.0;
    double wall_time = 0.0;

    json to_json() const {
        json j = {{"epoch", epoch}, {"lr", lr}, {"val_loss", val_loss}, {"wall_time", wall_time}};
        j["train_loss"] = train_loss ? json(*train_loss) : json(nullptr);
        return j;
    }
};

inline TensorFile make_checkpoint(const TrainState& st, const TrainConfig& cfg, std::int64_t steps_per_epoch) {
    TensorFile f;
    f.header = {{"kind", "campfire-train"},
                {"model", st.model.cfg},
                {"optim", cfg.optim},
                {"loss", cfg.loss},
                {"channel_stats", st.stats},
                {"train_channels", cfg.train_channels},
                {"augment", cfg.augment},
                {"epoch", st.epoch},
                {"step", st.step},
                {"steps_per_epoch", steps_per_epoch},
                {"adam_t", st.adam.t},
                {"rng", st.rng.save()},
                {"encoder_checksum", st.model.params.checksum(true)}};
    put_params(f, "param/", st.model.params);
    put_params(f, "adam_m/", st.adam.m);
    put_params(f, "adam_v/", st.adam.v);
    return f;
}

inline TrainState restore_state(const TensorFile& f) {
    const ModelBundle b = ModelBundle::from(f);
    TrainState st;
    st.model = b.model();
    st.stats = b.stats;
    st.adam = AdamW<float>(st.model.params);
    get_params(f, "adam_m/", st.adam.m);
    get_params(f, "adam_v/", st.adam.v);
    try {
        st.adam.t = f.header.at("adam_t").get<std::int64_t>();
        st.epoch = f.header.at("epoch").get<int>();
        st.step = f.header.at("step").get<std::int64_t>();
        st.rng.load(f.header.at("rng").get<std::string>());
    } catch (const json::exception& e) {
        fail(ErrorCode::CorruptCheckpoint, std::string("not a training checkpoint: ") + e.what());
    }
    return st;
}

struct FitResult {
    std::vector<EpochMetrics> metrics;
    std::filesystem::path checkpoint;
    std::map<WellKey, std::size_t> reads;  // every well the loader touched
    std::set<ChannelId> channels_fed;      // union of channels that entered a batch
};

/// Called after each step with the channels and wells of that batch.
using BatchObserver = std::function<void(const ChannelSet&, const std::vector<std::string>&)>;

inline std::string checkpoint_name(int epoch) { return "checkpoint_epoch_" + std::to_string(epoch) + ".cmpc"; }

/// Pretrains on the train split, validating on the val split each epoch.
/// Writes `out_dir`/metrics.jsonl (one object per epoch, epoch 0 holding the
/// initial validation loss) and `out_dir`/checkpoint.cmpc after every epoch.
/// With `resume_from`, training restarts from that checkpoint's state.
inline FitResult fit(const Manifest& manifest, const SplitAssignment& assignment, const TrainConfig& cfg,
                     const std::filesystem::path& out_dir, const std::optional<std::filesystem::path>& resume_from = {},
                     const BatchObserver& observer = {}) {
    cfg.model.validate();
    cfg.optim.validate();
    cfg.loss.validate();
    if (cfg.train_channels.empty()) fail(ErrorCode::InvalidConfig, "train_channels must be non-empty");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) fail(ErrorCode::IOFailure, "cannot create " + out_dir.string());

    LoggedLoader loader(manifest);
    ChannelStatsAccumulator acc;
    std::vector<Tile> train = load_split_tiles(loader, assignment, Split::Train, cfg.train_channels, &acc, cfg.workers);
    if (train.empty()) fail(ErrorCode::DataUnavailable, "no training tiles");
    std::vector<Tile> val_raw = load_split_tiles(loader, assignment, Split::Val, cfg.train_channels, nullptr, cfg.workers);

    const std::int64_t steps_per_epoch =
        static_cast<std::int64_t>((train.size() + cfg.optim.batch_size - 1) / cfg.optim.batch_size);

    TrainState st;
    std::vector<EpochMetrics> history;
    const auto metrics_path = out_dir / "metrics.jsonl";
    if (resume_from) {
        const TensorFile f = TensorFile::load(resume_from->string());
        st = restore_state(f);
        if (!(st.model.cfg == cfg.model)) fail(ErrorCode::InvalidConfig, "checkpoint model config differs from run config");
        if (f.header.at("steps_per_epoch").get<std::int64_t>() != steps_per_epoch)
            fail(ErrorCode::InvalidConfig, "training set changed since checkpoint");
        std::ifstream in(metrics_path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            if (j.at("epoch").get<int>() > st.epoch) break;
            EpochMetrics m;
            m.epoch = j.at("epoch");
            m.lr = j.at("lr");
            if (!j.at("train_loss").is_null()) m.train_loss = j.at("train_loss").get<double>();
            m.val_loss = j.at("val_loss");
            m.wall_time = j.at("wall_time");
            history.push_back(m);
        }
    } else {
        st.model = MaskedAutoencoder<float>::init(cfg.model, cfg.optim.seed);
        st.adam = AdamW<float>(st.model.params);
        st.stats = acc.finish();
        st.rng = Rng::stream(cfg.optim.seed, {0x7a14});
    }
    for (const auto& id : cfg.train_channels) {
        if (!st.stats.contains(id)) fail(ErrorCode::MissingStats, "no statistics for channel " + id.name);
    }

    std::vector<Tile> val;
    for (const auto& t : val_raw) val.push_back(normalize_channels(t, st.stats));
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    const std::uint64_t val_seed = cfg.optim.seed ^ 0x5eed7a1ULL;

    {
        std::ofstream out(metrics_path, std::ios::trunc);
        if (!out) fail(ErrorCode::IOFailure, "cannot write " + metrics_path.string());
        if (history.empty()) {
            EpochMetrics m;
            m.epoch = 0;
            m.lr = lr_at(0, steps_per_epoch, cfg.optim);
            m.val_loss = validation_loss(st.model, val, cfg.loss, cfg.optim.batch_size, val_seed);
            m.wall_time = elapsed();
            history.push_back(m);
        }
        for (const auto& m : history) out << m.to_json().dump() << '\n';
    }

    FitResult res;
    std::vector<std::size_t> order(train.size());
    while (st.epoch < cfg.optim.total_epochs) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        st.rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t n_batches = 0;
        double last_lr = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.optim.batch_size) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.optim.batch_size));
            std::vector<const Tile*> batch;
            for (std::size_t i = start; i < end; ++i) batch.push_back(&train[order[i]]);
            const StepResult r = train_step(st, batch, cfg, steps_per_epoch);
            loss_sum += r.loss;
            ++n_batches;
            last_lr = r.lr;
            res.channels_fed.insert(r.channels.begin(), r.channels.end());
            if (observer) {
                std::vector<std::string> wells;
                for (const Tile* t : batch) wells.push_back(t->well_ref());
                observer(r.channels, wells);
            }
        }
        ++st.epoch;
        EpochMetrics m;
        m.epoch = st.epoch;
        m.lr = last_lr;
        m.train_loss = loss_sum / static_cast<double>(n_batches);
        m.val_loss = validation_loss(st.model, val, cfg.loss, cfg.optim.batch_size, val_seed);
        m.wall_time = elapsed();
        history.push_back(m);
        {
            std::ofstream out(metrics_path, std::ios::app);
            out << m.to_json().dump() << '\n';
            if (!out) fail(ErrorCode::IOFailure, "cannot append to " + metrics_path.string());
        }
        const TensorFile f = make_checkpoint(st, cfg, steps_per_epoch);
        f.save((out_dir / "checkpoint.cmpc").string());
        if (cfg.keep_all_checkpoints) f.save((out_dir / checkpoint_name(st.epoch)).string());
    }
    if (!std::filesystem::exists(out_dir / "checkpoint.cmpc"))
        make_checkpoint(st, cfg, steps_per_epoch).save((out_dir / "checkpoint.cmpc").string());
    res.metrics = std::move(history);
    res.checkpoint = out_dir / "checkpoint.cmpc";
    res.reads = loader.reads();
    return res;
}

/// Metrics log lines with wall_time removed, for run-to-run comparison.
inline std::vector<json> read_metrics(const std::filesystem::path& path, bool drop_wall_time = true) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IOFailure, "cannot open " + path.string());
    std::vector<json> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        if (drop_wall_time) j.erase("wall_time");
        out.push_back(std::move(j));
    }
    return out;
}

}  // namespace campfire
