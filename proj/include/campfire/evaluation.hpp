#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "campfire/binary_io.hpp"
#include "campfire/checkpoint.hpp"
#include "campfire/error.hpp"
#include "campfire/json_io.hpp"
#include "campfire/manifest.hpp"
#include "campfire/model.hpp"
#include "campfire/nn.hpp"
#include "campfire/parallel.hpp"
#include "campfire/rng.hpp"
#include "campfire/split.hpp"
#include "campfire/tile.hpp"

namespace campfire {

struct EmbeddingRecord {
    std::vector<float> vector;
    std::string plate_id;
    std::string well_id;
    std::string compound_id;
    WellRole role = WellRole::Standard;
    int tile_index = 0;
    ChannelSet channel_set;

    WellKey key() const { return {plate_id, well_id}; }
};

struct EvalConfig {
    int n_control = 100;  // tiles per control well
    int n_heldout = 30;   // tiles per held-out-compound well
    int probe_epochs = 100;
    double probe_lr = 1e-3;
    int probe_batch = 32;
    int n_subsets = 10;
    int n_folds = 5;
    std::uint64_t seed = 0;
    std::vector<ChannelSet> channel_sets = {{channels::nucleus},
                                            {channels::mito},
                                            {channels::actin},
                                            {channels::nucleus, channels::actin},
                                            {channels::nucleus, channels::mito},
                                            {channels::nucleus, channels::actin, channels::mito}};
    // triplet finetuning
    int triplet_epochs = 500;
    double triplet_margin = 1.0;
    double triplet_lr = 1e-3;
    int triplet_hidden = 1024;
    int triplet_out = 128;
    int triplet_wells_per_batch = 32;
    int triplet_tiles_per_well = 4;
    int finetune_tiles_per_well = 8;

    static EvalConfig desk() {
        EvalConfig c;
        c.n_control = 16;
        c.n_heldout = 16;
        return c;
    }

    void validate() const {
        if (n_control < 0 || n_heldout < 0) fail(ErrorCode::InvalidConfig, "sample sizes must be >= 0");
        if (probe_epochs <= 0 || probe_lr <= 0 || probe_batch <= 0)
            fail(ErrorCode::InvalidConfig, "probe epochs, lr and batch must be positive");
        if (n_subsets <= 0 || n_folds < 2) fail(ErrorCode::InvalidConfig, "need >= 1 subset and >= 2 folds");
        if (triplet_epochs < 0 || triplet_margin < 0 || triplet_lr <= 0 || triplet_hidden <= 0 || triplet_out <= 0 ||
            triplet_wells_per_batch < 2 || triplet_tiles_per_well <= 0 || finetune_tiles_per_well <= 0)
            fail(ErrorCode::InvalidConfig, "bad triplet settings");
        for (const auto& s : channel_sets)
            if (s.empty()) fail(ErrorCode::InvalidConfig, "channel sets must be non-empty");
    }
};

// ---------------------------------------------------------------------------
// Sampling

/// A tile chosen for embedding.
struct TilePick {
    const WellRecord* well = nullptr;
    std::size_t tile = 0;
};

namespace detail {

/// Sorted choice of min(want, available) indices, keyed by the well so the
/// result does not depend on iteration order.
inline std::vector<std::size_t> choose_indices(std::uint64_t seed, const WellKey& k, std::size_t available, std::size_t want) {
    Rng rng = Rng::stream(seed, {0x5a3b1e, fnv1a64(k.first), fnv1a64(k.second)});
    auto idx = rng.sample_without_replacement(available, std::min(available, want));
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Per-well quota: n_control for control wells in any split, n_heldout for
/// test wells of held-out compounds, 0 otherwise.
inline std::size_t quota(const WellRecord& w, const SplitAssignment& a, int n_control, int n_heldout) {
    const Split s = a.split_of(w.key());
    if (s == Split::Excluded) return 0;
    if (is_control(w.role)) return static_cast<std::size_t>(n_control);
    if (a.compound(w.compound_id) == Status::OOD && s == Split::Test) return static_cast<std::size_t>(n_heldout);
    return 0;
}

}  // namespace detail

/// Samples the per-well embedding population used by the probes.
inline std::vector<EmbeddingRecord> sample_embeddings(const std::vector<EmbeddingRecord>& records, const SplitAssignment& a,
                                                      int n_control, int n_heldout, std::uint64_t seed) {
    std::map<WellKey, std::vector<const EmbeddingRecord*>> by_well;
    for (const auto& r : records) by_well[r.key()].push_back(&r);
    std::vector<EmbeddingRecord> out;
    for (auto& [key, recs] : by_well) {
        std::sort(recs.begin(), recs.end(), [](auto* x, auto* y) { return x->tile_index < y->tile_index; });
        WellRecord w;
        w.plate_id = key.first;
        w.well_id = key.second;
        w.compound_id = recs.front()->compound_id;
        w.role = recs.front()->role;
        const std::size_t q = detail::quota(w, a, n_control, n_heldout);
        for (std::size_t i : detail::choose_indices(seed, key, recs.size(), q)) out.push_back(*recs[i]);
    }
    return out;
}

/// The same selection as sample_embeddings, made before any tile is
/// embedded so only the chosen tiles are loaded.
inline std::vector<TilePick> plan_tiles(const Manifest& m, const SplitAssignment& a, int n_control, int n_heldout,
                                        std::uint64_t seed) {
    std::vector<const WellRecord*> wells;
    for (const auto& w : m.wells) wells.push_back(&w);
    std::sort(wells.begin(), wells.end(), [](auto* x, auto* y) { return x->key() < y->key(); });
    std::vector<TilePick> out;
    for (const auto* w : wells) {
        const std::size_t q = detail::quota(*w, a, n_control, n_heldout);
        for (std::size_t i : detail::choose_indices(seed, w->key(), w->tile_uris.size(), q)) out.push_back({w, i});
    }
    return out;
}

/// Every tile of the given wells, up to `per_well` each (chosen by seed).
inline std::vector<TilePick> plan_well_tiles(const std::vector<const WellRecord*>& wells, std::size_t per_well, std::uint64_t seed) {
    std::vector<TilePick> out;
    for (const auto* w : wells)
        for (std::size_t i : detail::choose_indices(seed, w->key(), w->tile_uris.size(), per_well)) out.push_back({w, i});
    return out;
}

// ---------------------------------------------------------------------------
// Embedding

/// Embeds one raw tile restricted to `set`, normalised with `stats`.
inline std::vector<float> embed_raw_tile(const MaskedAutoencoder<float>& model, const ChannelStats& stats, const Tile& raw,
                                         const ChannelSet& set) {
    const Tile t = normalize_channels(raw.select(set), stats);
    const auto e = model.embed_tile(t);
    return std::vector<float>(e.data(), e.data() + e.size());
}

/// Embeds the identical tile population once per channel set. Each tile is
/// read once; results are indexed [set][pick].
inline std::vector<std::vector<EmbeddingRecord>> embed_by_channel_sets(const Manifest& m, const ModelBundle& bundle,
                                                                       const std::vector<TilePick>& picks,
                                                                       const std::vector<ChannelSet>& sets,
                                                                       std::size_t workers = 1) {
    if (sets.empty()) fail(ErrorCode::InvalidConfig, "no channel sets requested");
    for (const auto& s : sets) {
        if (s.empty()) fail(ErrorCode::InvalidConfig, "empty channel set");
        for (const auto& id : s)
            if (!bundle.stats.contains(id)) fail(ErrorCode::UnknownChannel, "no statistics for channel " + id.name);
    }
    const auto model = bundle.model();
    std::vector<std::vector<EmbeddingRecord>> out(sets.size(), std::vector<EmbeddingRecord>(picks.size()));
    parallel_for(picks.size(), [&](std::size_t i) {
        const WellRecord& w = *picks[i].well;
        const Tile raw = m.load_tile(w, picks[i].tile);
        for (std::size_t s = 0; s < sets.size(); ++s) {
            auto& r = out[s][i];
            r.vector = embed_raw_tile(model, bundle.stats, raw, sets[s]);
            r.plate_id = w.plate_id;
            r.well_id = w.well_id;
            r.compound_id = w.compound_id;
            r.role = w.role;
            r.tile_index = static_cast<int>(picks[i].tile);
            r.channel_set = sets[s];
        }
    }, workers);
    return out;
}

// ---------------------------------------------------------------------------
// Linear probe

using MatD = Eigen::MatrixXd;
using RowD = Eigen::RowVectorXd;

inline MatD stack(const std::vector<const EmbeddingRecord*>& recs) {
    if (recs.empty()) return MatD(0, 0);
    MatD x(static_cast<Eigen::Index>(recs.size()), static_cast<Eigen::Index>(recs.front()->vector.size()));
    for (std::size_t i = 0; i < recs.size(); ++i)
        for (std::size_t j = 0; j < recs[i]->vector.size(); ++j) x(i, j) = recs[i]->vector[j];
    return x;
}

/// Affine classifier on standardised features.
struct LinearProbe {
    RowD mean, scale;  // feature standardisation from the training set
    MatD w;            // dim x classes
    RowD b;

    MatD logits(const MatD& x) const {
        MatD z = ((x.rowwise() - mean).array().rowwise() / scale.array()).matrix() * w;
        z.rowwise() += b;
        return z;
    }

    std::vector<int> predict(const MatD& x) const {
        const MatD z = logits(x);
        std::vector<int> out(static_cast<std::size_t>(z.rows()));
        for (Eigen::Index i = 0; i < z.rows(); ++i) z.row(i).maxCoeff(&out[i]);
        return out;
    }

    double accuracy(const MatD& x, const std::vector<int>& y) const {
        if (y.empty()) return std::numeric_limits<double>::quiet_NaN();
        const auto p = predict(x);
        std::size_t hit = 0;
        for (std::size_t i = 0; i < y.size(); ++i) hit += p[i] == y[i];
        return static_cast<double>(hit) / static_cast<double>(y.size());
    }
};

struct ProbeTrainConfig {
    int epochs = 100;
    double lr = 1e-3;
    int batch_size = 32;
    std::uint64_t seed = 0;
};

/// Mini-batch softmax regression with Adam on standardised features; returns
/// the parameters with the best validation accuracy seen at any epoch end.
inline LinearProbe train_linear_probe(const MatD& xtr, const std::vector<int>& ytr, const MatD& xval, const std::vector<int>& yval,
                                      int n_classes, const ProbeTrainConfig& cfg = {}) {
    if (n_classes < 1 || xtr.rows() != static_cast<Eigen::Index>(ytr.size()))
        fail(ErrorCode::DegenerateLabels, "label/feature count mismatch");
    std::vector<int> per_class(static_cast<std::size_t>(n_classes), 0);
    for (int y : ytr) {
        if (y < 0 || y >= n_classes) fail(ErrorCode::DegenerateLabels, "label out of range");
        ++per_class[y];
    }
    for (int c = 0; c < n_classes; ++c)
        if (per_class[c] == 0) fail(ErrorCode::DegenerateLabels, "class " + std::to_string(c) + " has no training records");
    if (cfg.batch_size <= 0 || cfg.epochs <= 0) fail(ErrorCode::InvalidConfig, "probe epochs and batch size must be positive");

    const Eigen::Index n = xtr.rows(), d = xtr.cols();
    LinearProbe p;
    p.mean = xtr.colwise().mean();
    p.scale = ((xtr.rowwise() - p.mean).array().square().colwise().mean()).sqrt().matrix();
    for (Eigen::Index j = 0; j < d; ++j)
        if (!(p.scale(j) > 1e-12)) p.scale(j) = 1.0;
    p.w = MatD::Zero(d, n_classes);
    p.b = RowD::Zero(n_classes);
    const MatD xs = (xtr.rowwise() - p.mean).array().rowwise() / p.scale.array();

    MatD mw = MatD::Zero(d, n_classes), vw = mw;
    RowD mb = RowD::Zero(n_classes), vb = mb;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    LinearProbe best = p;
    double best_acc = -1.0;
    Rng rng(cfg.seed);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::int64_t t = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
            const Eigen::Index m = std::min<Eigen::Index>(cfg.batch_size, n - start);
            MatD xb(m, d), z(m, n_classes);
            for (Eigen::Index i = 0; i < m; ++i) xb.row(i) = xs.row(order[static_cast<std::size_t>(start + i)]);
            z = xb * p.w;
            z.rowwise() += p.b;
            for (Eigen::Index i = 0; i < m; ++i) {
                const double mx = z.row(i).maxCoeff();
                z.row(i) = (z.row(i).array() - mx).exp();
                z.row(i) /= z.row(i).sum();
                z(i, ytr[static_cast<std::size_t>(order[static_cast<std::size_t>(start + i)])]) -= 1.0;
            }
            z /= static_cast<double>(m);
            const MatD gw = xb.transpose() * z;
            const RowD gb = z.colwise().sum();
            ++t;
            mw = b1 * mw + (1 - b1) * gw;
            vw = b2 * vw + (1 - b2) * gw.cwiseProduct(gw);
            mb = b1 * mb + (1 - b1) * gb;
            vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
            const double c1 = 1 - std::pow(b1, static_cast<double>(t)), c2 = 1 - std::pow(b2, static_cast<double>(t));
            p.w.array() -= cfg.lr * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
            p.b.array() -= cfg.lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
        }
        const double acc = yval.empty() ? p.accuracy(xtr, ytr) : p.accuracy(xval, yval);
        if (acc > best_acc) {
            best_acc = acc;
            best = p;
        }
    }
    return best;
}

enum class ProbeTask { Controls, Heldout };

inline std::string to_string(ProbeTask t) { return t == ProbeTask::Controls ? "controls_9way" : "heldout_60way"; }

struct ProbeResult {
    ProbeTask task = ProbeTask::Controls;
    ShiftCategory category = ShiftCategory::IdCompoundIdPlate;
    std::vector<double> accuracies;
    double mean = 0.0;
    double std = 0.0;  // population
    int n_classes = 0;

    void summarise() {
        mean = 0.0;
        for (double a : accuracies) mean += a;
        mean /= static_cast<double>(accuracies.size());
        double v = 0.0;
        for (double a : accuracies) v += (a - mean) * (a - mean);
        std = std::sqrt(v / static_cast<double>(accuracies.size()));
    }

    json to_json() const {
        return {{"task", to_string(task)}, {"category", to_string(category)}, {"accuracies", accuracies},
                {"mean", mean},            {"std", std},                      {"n_classes", n_classes}};
    }
};

struct ProbeReport {
    std::vector<ProbeResult> results;
    std::set<WellKey> trained_on;  // wells whose records fit probe weights or drove early stopping

    const ProbeResult* find(ShiftCategory c) const {
        for (const auto& r : results)
            if (r.category == c) return &r;
        return nullptr;
    }
};

namespace detail {

inline std::map<std::string, int> label_map(const std::vector<const EmbeddingRecord*>& recs) {
    std::set<std::string> names;
    for (const auto* r : recs) names.insert(r->compound_id);
    std::map<std::string, int> out;
    for (const auto& n : names) out.emplace(n, static_cast<int>(out.size()));
    return out;
}

inline std::vector<int> labels(const std::vector<const EmbeddingRecord*>& recs, const std::map<std::string, int>& map) {
    std::vector<int> y;
    for (const auto* r : recs) y.push_back(map.at(r->compound_id));
    return y;
}

/// Stratified partition into `k` parts: each class is shuffled and dealt
/// round-robin, so every record lands in exactly one part.
inline std::vector<std::vector<const EmbeddingRecord*>> stratified_parts(const std::vector<const EmbeddingRecord*>& recs, int k,
                                                                          Rng& rng) {
    std::map<std::string, std::vector<const EmbeddingRecord*>> by_class;
    for (const auto* r : recs) by_class[r->compound_id].push_back(r);
    std::vector<std::vector<const EmbeddingRecord*>> parts(static_cast<std::size_t>(k));
    std::size_t offset = 0;
    for (auto& [_, v] : by_class) {
        rng.shuffle(v);
        for (std::size_t i = 0; i < v.size(); ++i) parts[(i + offset) % k].push_back(v[i]);
        offset += v.size();
    }
    return parts;
}

}  // namespace detail

/// Controls task: training-well control records are divided into equal
/// class-balanced subsets, one 9-way probe per subset, early stopping on
/// validation wells, accuracy on ID-plate and OOD-plate test wells.
inline ProbeReport controls_protocol(const std::vector<EmbeddingRecord>& sample, const SplitAssignment& a, const EvalConfig& cfg) {
    std::vector<const EmbeddingRecord*> train, val, test_id, test_ood;
    for (const auto& r : sample) {
        if (!is_control(r.role)) continue;
        switch (a.split_of(r.key())) {
            case Split::Train: train.push_back(&r); break;
            case Split::Val: val.push_back(&r); break;
            case Split::Test: (a.plate(r.plate_id) == Status::OOD ? test_ood : test_id).push_back(&r); break;
            case Split::Excluded: break;
        }
    }
    if (train.empty() || val.empty()) fail(ErrorCode::InsufficientData, "controls protocol needs train and val control records");
    if (test_id.empty() && test_ood.empty()) fail(ErrorCode::InsufficientData, "controls protocol needs test control records");
    const auto classes = detail::label_map(train);
    Rng rng = Rng::stream(cfg.seed, {0xc0e7});
    // Each subset takes floor(n_c / k) records of every class c; leftovers are unused.
    std::map<std::string, std::vector<const EmbeddingRecord*>> by_class;
    for (const auto* r : train) by_class[r->compound_id].push_back(r);
    const auto k = static_cast<std::size_t>(cfg.n_subsets);
    std::vector<std::vector<const EmbeddingRecord*>> parts(k);
    for (auto& [name, v] : by_class) {
        if (v.size() < k) fail(ErrorCode::InsufficientData, "control " + name + " has fewer training records than subsets");
        rng.shuffle(v);
        const std::size_t q = v.size() / k;
        for (std::size_t i = 0; i < q * k; ++i) parts[i / q].push_back(v[i]);
    }

    auto known = [&](const std::vector<const EmbeddingRecord*>& v) {
        std::vector<const EmbeddingRecord*> out;
        for (const auto* r : v)
            if (classes.count(r->compound_id)) out.push_back(r);
        return out;
    };
    val = known(val);
    test_id = known(test_id);
    test_ood = known(test_ood);
    const MatD xval = stack(val), xid = stack(test_id), xood = stack(test_ood);
    const auto yval = detail::labels(val, classes), yid = detail::labels(test_id, classes), yood = detail::labels(test_ood, classes);

    ProbeReport rep;
    ProbeResult id{ProbeTask::Controls, ShiftCategory::IdCompoundIdPlate, {}, 0, 0, static_cast<int>(classes.size())};
    ProbeResult ood{ProbeTask::Controls, ShiftCategory::IdCompoundOodPlate, {}, 0, 0, static_cast<int>(classes.size())};
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const auto& part = parts[i];
        const std::uint64_t probe_seed = Rng::stream(cfg.seed, {0xc0e8, i}).next_u64();
        const auto probe = train_linear_probe(stack(part), detail::labels(part, classes), xval, yval,
                                              static_cast<int>(classes.size()), {cfg.probe_epochs, cfg.probe_lr, cfg.probe_batch, probe_seed});
        for (const auto* r : part) rep.trained_on.insert(r->key());
        if (!yid.empty()) id.accuracies.push_back(probe.accuracy(xid, yid));
        if (!yood.empty()) ood.accuracies.push_back(probe.accuracy(xood, yood));
    }
    for (const auto* r : val) rep.trained_on.insert(r->key());
    if (!id.accuracies.empty()) {
        id.summarise();
        rep.results.push_back(id);
    }
    if (!ood.accuracies.empty()) {
        ood.summarise();
        rep.results.push_back(ood);
    }
    return rep;
}

/// Held-out-compound task: k-fold cross-validation over ID-plate records of
/// held-out compounds; each fold is scored on its own test part and on all
/// OOD-plate records of those compounds. Early stopping uses an inner
/// validation part carved from the fold's training records.
inline ProbeReport heldout_protocol(const std::vector<EmbeddingRecord>& sample, const SplitAssignment& a, const EvalConfig& cfg) {
    std::vector<const EmbeddingRecord*> id_recs, ood_recs;
    for (const auto& r : sample) {
        if (is_control(r.role) || a.compound(r.compound_id) != Status::OOD || a.split_of(r.key()) != Split::Test) continue;
        (a.plate(r.plate_id) == Status::OOD ? ood_recs : id_recs).push_back(&r);
    }
    if (id_recs.size() < static_cast<std::size_t>(cfg.n_folds))
        fail(ErrorCode::InsufficientData, "held-out protocol needs ID-plate held-out-compound records");
    const auto classes = detail::label_map(id_recs);
    if (classes.size() < 2) fail(ErrorCode::InsufficientData, "held-out protocol needs at least two compounds");
    Rng rng = Rng::stream(cfg.seed, {0x4e1d});
    const auto folds = detail::stratified_parts(id_recs, cfg.n_folds, rng);
    std::vector<const EmbeddingRecord*> ood_known;
    for (const auto* r : ood_recs)
        if (classes.count(r->compound_id)) ood_known.push_back(r);
    const MatD xood = stack(ood_known);
    const auto yood = detail::labels(ood_known, classes);

    ProbeReport rep;
    ProbeResult id{ProbeTask::Heldout, ShiftCategory::OodCompoundIdPlate, {}, 0, 0, static_cast<int>(classes.size())};
    ProbeResult ood{ProbeTask::Heldout, ShiftCategory::OodCompoundOodPlate, {}, 0, 0, static_cast<int>(classes.size())};
    for (int f = 0; f < cfg.n_folds; ++f) {
        std::vector<const EmbeddingRecord*> rest;
        for (int g = 0; g < cfg.n_folds; ++g)
            if (g != f) rest.insert(rest.end(), folds[g].begin(), folds[g].end());
        Rng inner_rng = Rng::stream(cfg.seed, {0x4e1d, static_cast<std::uint64_t>(f)});
        auto inner = detail::stratified_parts(rest, 8, inner_rng);
        std::vector<const EmbeddingRecord*> fit_part, val_part = inner[0];
        for (std::size_t k = 1; k < inner.size(); ++k) fit_part.insert(fit_part.end(), inner[k].begin(), inner[k].end());
        // Classes too small to give the inner split a member keep all records for fitting.
        auto yfit = detail::labels(fit_part, classes);
        std::vector<int> seen(classes.size(), 0);
        for (int y : yfit) seen[y] = 1;
        for (auto it = val_part.begin(); it != val_part.end();) {
            const int y = classes.at((*it)->compound_id);
            if (!seen[y]) {
                fit_part.push_back(*it);
                seen[y] = 1;
                it = val_part.erase(it);
            } else {
                ++it;
            }
        }
        const std::uint64_t probe_seed = inner_rng.next_u64();
        const auto probe = train_linear_probe(stack(fit_part), detail::labels(fit_part, classes), stack(val_part),
                                              detail::labels(val_part, classes), static_cast<int>(classes.size()),
                                              {cfg.probe_epochs, cfg.probe_lr, cfg.probe_batch, probe_seed});
        for (const auto* r : rest) rep.trained_on.insert(r->key());
        id.accuracies.push_back(probe.accuracy(stack(folds[f]), detail::labels(folds[f], classes)));
        if (!yood.empty()) ood.accuracies.push_back(probe.accuracy(xood, yood));
    }
    id.summarise();
    rep.results.push_back(id);
    if (!ood.accuracies.empty()) {
        ood.summarise();
        rep.results.push_back(ood);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Z' score

using VecD = Eigen::VectorXd;

struct ZPrimeReport {
    double mu_r = 0.0, mu_t = 0.0, sigma_r = 0.0, sigma_t = 0.0;
    std::optional<double> z_prime;  // empty when undefined

    bool defined() const { return z_prime.has_value(); }

    json to_json() const {
        return {{"mu_r", mu_r},
                {"mu_t", mu_t},
                {"sigma_r", sigma_r},
                {"sigma_t", sigma_t},
                {"z_prime", z_prime ? json(*z_prime) : json(nullptr)},
                {"defined", defined()}};
    }
};

/// Z' of reference group X against target group Y after projecting both onto
/// the direction from mean(X) to mean(Y).
inline ZPrimeReport zprime(const std::vector<VecD>& x, const std::vector<VecD>& y) {
    if (x.empty() || y.empty()) fail(ErrorCode::InsufficientData, "Z' needs non-empty groups");
    const Eigen::Index d = x.front().size();
    for (const auto* g : {&x, &y})
        for (const auto& v : *g)
            if (v.size() != d) fail(ErrorCode::DimensionMismatch, "embedding dimensions differ");
    VecD mu_x = VecD::Zero(d), mu_y = VecD::Zero(d);
    for (const auto& v : x) mu_x += v;
    mu_x /= static_cast<double>(x.size());
    for (const auto& v : y) mu_y += v - mu_x;
    mu_y /= static_cast<double>(y.size());
    ZPrimeReport r;
    const double norm = mu_y.norm();
    if (norm == 0.0) return r;
    const VecD u = mu_y / norm;
    auto moments = [&](const std::vector<VecD>& g, double& mu, double& sigma) {
        std::vector<double> s;
        for (const auto& v : g) s.push_back((v - mu_x).dot(u));
        mu = 0.0;
        for (double t : s) mu += t;
        mu /= static_cast<double>(s.size());
        double var = 0.0;
        for (double t : s) var += (t - mu) * (t - mu);
        sigma = std::sqrt(var / static_cast<double>(s.size()));
    };
    moments(x, r.mu_r, r.sigma_r);
    moments(y, r.mu_t, r.sigma_t);
    const double gap = std::abs(r.mu_r - r.mu_t);
    if (gap == 0.0) return r;
    r.z_prime = 1.0 - 3.0 * (r.sigma_r + r.sigma_t) / gap;
    return r;
}

/// Z' for every ordered pair of labels (reference row, target column).
inline std::map<std::string, std::map<std::string, ZPrimeReport>> zprime_matrix(const std::map<std::string, std::vector<VecD>>& groups) {
    std::map<std::string, std::map<std::string, ZPrimeReport>> out;
    for (const auto& [a, ga] : groups)
        for (const auto& [b, gb] : groups)
            if (a != b) out[a][b] = zprime(ga, gb);
    return out;
}

inline json zprime_matrix_json(const std::map<std::string, std::map<std::string, ZPrimeReport>>& m) {
    json j = json::object();
    for (const auto& [a, row] : m)
        for (const auto& [b, r] : row) j[a][b] = r.to_json();
    return j;
}

/// Mean of per-tile embeddings.
inline VecD well_embedding(const std::vector<VecD>& tiles) {
    if (tiles.empty()) fail(ErrorCode::EmptyWell, "well has no tile embeddings");
    VecD m = VecD::Zero(tiles.front().size());
    for (const auto& t : tiles) {
        if (t.size() != m.size()) fail(ErrorCode::DimensionMismatch, "tile embedding dimensions differ");
        m += t;
    }
    return m / static_cast<double>(tiles.size());
}

/// Well-level embeddings (mean over each well's records) grouped by compound.
inline std::map<std::string, std::vector<VecD>> well_groups(const std::vector<EmbeddingRecord>& recs) {
    std::map<WellKey, std::pair<std::string, std::vector<VecD>>> by_well;
    for (const auto& r : recs) {
        auto& e = by_well[r.key()];
        e.first = r.compound_id;
        e.second.push_back(Eigen::Map<const Eigen::VectorXf>(r.vector.data(), static_cast<Eigen::Index>(r.vector.size())).cast<double>());
    }
    std::map<std::string, std::vector<VecD>> out;
    for (const auto& [_, e] : by_well) out[e.first].push_back(well_embedding(e.second));
    return out;
}

// ---------------------------------------------------------------------------
// Triplet finetuning

/// Two-layer MLP head on top of frozen tile embeddings.
struct TripletHead {
    nn::Linear<float> fc1, fc2;

    static TripletHead init(int in, int hidden, int out, Rng& rng) {
        return {nn::Linear<float>::init(in, hidden, rng), nn::Linear<float>::init(hidden, out, rng)};
    }

    struct Cache {
        Mat<float> x, u, g;
    };

    Mat<float> forward(const Mat<float>& x, Cache* c = nullptr) const {
        Mat<float> u = fc1.forward(x);
        Mat<float> g = u.unaryExpr([](float z) { return nn::gelu(z); });
        Mat<float> y = fc2.forward(g);
        if (c) *c = {x, std::move(u), std::move(g)};
        return y;
    }

    void backward(const Cache& c, const Mat<float>& dy, TripletHead& grads) const {
        Mat<float> dg = fc2.backward(c.g, dy, grads.fc2);
        for (Eigen::Index i = 0; i < dg.size(); ++i) dg.data()[i] *= nn::gelu_grad(c.u.data()[i]);
        fc1.backward(c.x, dg, grads.fc1);
    }

    template <class F>
    void visit(F&& f) {
        fc1.visit("head.fc1", f);
        fc2.visit("head.fc2", f);
    }

    std::vector<Mat<float>*> tensors() {
        return {&fc1.w, &fc1.b, &fc2.w, &fc2.b};
    }
};

struct TripletLoss {
    double loss = 0.0;
    std::size_t active = 0;  // anchors with both a positive and a negative
    Mat<float> grad;         // d loss / d embeddings
};

/// Batch-hard triplet loss on squared Euclidean distances: for each anchor,
/// the farthest same-label and the nearest other-label embedding.
inline TripletLoss batch_hard_triplet_loss(const Mat<float>& e, const std::vector<int>& labels, double margin) {
    const Eigen::Index n = e.rows();
    std::set<int> distinct(labels.begin(), labels.end());
    if (distinct.size() < 2) fail(ErrorCode::NoTriplets, "batch needs at least two labels");
    Mat<float> d(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) d(i, j) = (e.row(i) - e.row(j)).squaredNorm();
    TripletLoss out;
    out.grad = Mat<float>::Zero(n, e.cols());
    std::vector<std::array<Eigen::Index, 3>> hinges;
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index p = -1, q = -1;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            if (labels[j] == labels[i]) {
                if (p < 0 || d(i, j) > d(i, p)) p = j;
            } else if (q < 0 || d(i, j) < d(i, q)) {
                q = j;
            }
        }
        if (p < 0 || q < 0) continue;
        ++out.active;
        const double h = d(i, p) - d(i, q) + margin;
        if (h > 0) {
            out.loss += h;
            hinges.push_back({i, p, q});
        }
    }
    if (out.active == 0) fail(ErrorCode::NoTriplets, "no anchor has a positive");
    const float scale = 1.0f / static_cast<float>(out.active);
    out.loss /= static_cast<double>(out.active);
    for (const auto& [i, p, q] : hinges) {
        const auto dp = (e.row(i) - e.row(p)).eval(), dq = (e.row(i) - e.row(q)).eval();
        out.grad.row(i) += 2 * scale * (dp - dq);
        out.grad.row(p) -= 2 * scale * dp;
        out.grad.row(q) += 2 * scale * dq;
    }
    return out;
}

/// Cached frozen-backbone tile embeddings of one well.
struct WellTiles {
    WellKey key;
    std::string label;
    Mat<float> tiles;  // tiles x dim
};

inline std::vector<WellTiles> group_wells(const std::vector<EmbeddingRecord>& recs) {
    std::map<WellKey, std::vector<const EmbeddingRecord*>> by_well;
    for (const auto& r : recs) by_well[r.key()].push_back(&r);
    std::vector<WellTiles> out;
    for (const auto& [key, v] : by_well) {
        WellTiles w{key, v.front()->compound_id, Mat<float>(static_cast<Eigen::Index>(v.size()), static_cast<Eigen::Index>(v.front()->vector.size()))};
        for (std::size_t i = 0; i < v.size(); ++i)
            for (std::size_t j = 0; j < v[i]->vector.size(); ++j) w.tiles(i, j) = v[i]->vector[j];
        out.push_back(std::move(w));
    }
    return out;
}

/// Well embedding through the head: mean of head(tile) over the well's tiles.
inline VecD head_well_embedding(const TripletHead& head, const Mat<float>& tiles) {
    if (tiles.rows() == 0) fail(ErrorCode::EmptyWell, "well has no tiles");
    return head.forward(tiles).colwise().mean().transpose().cast<double>();
}

struct FinetuneResult {
    TripletHead head;
    std::vector<double> epoch_loss;
};

/// Trains the head with batch-hard triplet loss on well embeddings. The
/// backbone only enters through the cached tile embeddings, so it cannot
/// receive gradient.
inline FinetuneResult triplet_finetune(const std::vector<WellTiles>& wells, const EvalConfig& cfg) {
    if (wells.empty()) fail(ErrorCode::NoTriplets, "no wells to finetune on");
    std::set<std::string> labels;
    for (const auto& w : wells) labels.insert(w.label);
    if (labels.size() < 2) fail(ErrorCode::NoTriplets, "finetuning needs at least two perturbation labels");
    std::map<std::string, int> label_id;
    for (const auto& l : labels) label_id.emplace(l, static_cast<int>(label_id.size()));
    const int dim = static_cast<int>(wells.front().tiles.cols());

    Rng rng = Rng::stream(cfg.seed, {0x7219});
    FinetuneResult res;
    res.head = TripletHead::init(dim, cfg.triplet_hidden, cfg.triplet_out, rng);
    TripletHead m = res.head, v = res.head;
    for (auto* t : m.tensors()) t->setZero();
    for (auto* t : v.tensors()) t->setZero();
    std::int64_t step = 0;
    const std::size_t per_batch = static_cast<std::size_t>(cfg.triplet_wells_per_batch);

    std::vector<std::size_t> order(wells.size());
    for (int epoch = 0; epoch < cfg.triplet_epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        std::vector<std::pair<std::size_t, std::size_t>> batches;
        for (std::size_t s = 0; s < order.size(); s += per_batch) batches.emplace_back(s, std::min(order.size(), s + per_batch));
        if (batches.size() > 1 && batches.back().second - batches.back().first < per_batch / 2) {
            batches[batches.size() - 2].second = batches.back().second;
            batches.pop_back();
        }
        double epoch_loss = 0.0;
        for (const auto& [s, e] : batches) {
            // Stack sampled tiles of each well; remember which rows belong to which well.
            std::vector<std::pair<Eigen::Index, Eigen::Index>> span;
            std::vector<int> y;
            std::vector<Eigen::Index> rows;
            std::vector<const WellTiles*> ws;
            for (std::size_t k = s; k < e; ++k) {
                const auto& w = wells[order[k]];
                const auto pick = rng.sample_without_replacement(static_cast<std::size_t>(w.tiles.rows()),
                                                                 std::min<std::size_t>(w.tiles.rows(), cfg.triplet_tiles_per_well));
                span.emplace_back(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(pick.size()));
                for (auto p : pick) rows.push_back(static_cast<Eigen::Index>(p));
                ws.push_back(&w);
                y.push_back(label_id.at(w.label));
            }
            Mat<float> x(static_cast<Eigen::Index>(rows.size()), dim);
            for (std::size_t b = 0; b < ws.size(); ++b)
                for (Eigen::Index r = 0; r < span[b].second; ++r) x.row(span[b].first + r) = ws[b]->tiles.row(rows[span[b].first + r]);
            TripletHead::Cache cache;
            const Mat<float> out = res.head.forward(x, &cache);
            Mat<float> emb(static_cast<Eigen::Index>(ws.size()), out.cols());
            for (std::size_t b = 0; b < ws.size(); ++b) emb.row(b) = out.middleRows(span[b].first, span[b].second).colwise().mean();
            std::set<int> distinct(y.begin(), y.end());
            if (distinct.size() < 2) continue;
            TripletLoss tl;
            try {
                tl = batch_hard_triplet_loss(emb, y, cfg.triplet_margin);
            } catch (const Error& err) {
                if (err.code() == ErrorCode::NoTriplets) continue;
                throw;
            }
            epoch_loss += tl.loss;
            Mat<float> dout(out.rows(), out.cols());
            for (std::size_t b = 0; b < ws.size(); ++b)
                for (Eigen::Index r = 0; r < span[b].second; ++r)
                    dout.row(span[b].first + r) = tl.grad.row(b) / static_cast<float>(span[b].second);
            TripletHead g = res.head;
            for (auto* t : g.tensors()) t->setZero();
            res.head.backward(cache, dout, g);
            ++step;
            const double c1 = 1 - std::pow(0.9, static_cast<double>(step)), c2 = 1 - std::pow(0.999, static_cast<double>(step));
            auto pt = res.head.tensors(), gt = g.tensors(), mt = m.tensors(), vt = v.tensors();
            for (std::size_t k = 0; k < pt.size(); ++k) {
                *mt[k] = 0.9f * *mt[k] + 0.1f * *gt[k];
                *vt[k] = 0.999f * *vt[k] + 0.001f * gt[k]->cwiseProduct(*gt[k]);
                pt[k]->array() -= static_cast<float>(cfg.triplet_lr / c1) * mt[k]->array() /
                                  ((vt[k]->array() / static_cast<float>(c2)).sqrt() + 1e-8f);
            }
        }
        res.epoch_loss.push_back(epoch_loss / static_cast<double>(batches.size()));
    }
    return res;
}

/// Mean Z' over (negative control reference, positive control target) pairs.
inline std::optional<double> pos_neg_zprime(const std::map<std::string, std::vector<VecD>>& groups,
                                            const std::map<std::string, WellRole>& roles) {
    double sum = 0.0;
    int n = 0;
    for (const auto& [neg, gn] : groups) {
        if (roles.at(neg) != WellRole::NegativeControl) continue;
        for (const auto& [pos, gp] : groups) {
            if (roles.at(pos) != WellRole::PositiveControl) continue;
            const auto r = zprime(gn, gp);
            if (r.z_prime) {
                sum += *r.z_prime;
                ++n;
            }
        }
    }
    if (n == 0) return std::nullopt;
    return sum / n;
}

struct FinetuneReport {
    FinetuneResult result;
    std::string heldout_plate;
    std::uint64_t backbone_checksum_before = 0;
    std::uint64_t backbone_checksum_after = 0;
    std::optional<double> pos_neg_before, pos_neg_after;
    json zprime_before, zprime_after;

    json to_json() const {
        auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
        return {{"heldout_plate", heldout_plate},
                {"backbone_checksum_before", backbone_checksum_before},
                {"backbone_checksum_after", backbone_checksum_after},
                {"pos_neg_zprime_before", opt(pos_neg_before)},
                {"pos_neg_zprime_after", opt(pos_neg_after)},
                {"epoch_loss", result.epoch_loss},
                {"zprime_before", zprime_before},
                {"zprime_after", zprime_after}};
    }
};

/// Embeds wells with the frozen backbone, finetunes the triplet head on every
/// plate except `heldout_plate`, and compares well-level Z' on the held-out
/// plate before and after.
inline FinetuneReport finetune_protocol(const Manifest& m, const ModelBundle& backbone, const std::string& heldout_plate,
                                        const ChannelSet& channel_set, const EvalConfig& cfg, std::size_t workers = 1) {
    FinetuneReport rep;
    rep.heldout_plate = heldout_plate;
    rep.backbone_checksum_before = backbone.params.checksum(true);
    std::vector<const WellRecord*> train_wells, test_wells;
    std::map<std::string, WellRole> roles;
    for (const auto& w : m.wells) {
        if (w.tile_uris.empty()) continue;
        (w.plate_id == heldout_plate ? test_wells : train_wells).push_back(&w);
        roles[w.compound_id] = w.role;
    }
    if (test_wells.empty()) fail(ErrorCode::InsufficientData, "held-out plate " + heldout_plate + " has no wells");
    const auto per_well = static_cast<std::size_t>(cfg.finetune_tiles_per_well);
    const auto train_recs = embed_by_channel_sets(m, backbone, plan_well_tiles(train_wells, per_well, cfg.seed), {channel_set}, workers)[0];
    const auto test_recs = embed_by_channel_sets(m, backbone, plan_well_tiles(test_wells, per_well, cfg.seed), {channel_set}, workers)[0];

    const auto before = well_groups(test_recs);
    rep.zprime_before = zprime_matrix_json(zprime_matrix(before));
    rep.pos_neg_before = pos_neg_zprime(before, roles);

    rep.result = triplet_finetune(group_wells(train_recs), cfg);
    std::map<std::string, std::vector<VecD>> after;
    for (const auto& w : group_wells(test_recs)) after[w.label].push_back(head_well_embedding(rep.result.head, w.tiles));
    rep.zprime_after = zprime_matrix_json(zprime_matrix(after));
    rep.pos_neg_after = pos_neg_zprime(after, roles);
    rep.backbone_checksum_after = backbone.params.checksum(true);
    return rep;
}

// ---------------------------------------------------------------------------
// Embedding table files

inline constexpr char kEmbeddingMagic[4] = {'C', 'M', 'P', 'E'};
inline constexpr std::uint16_t kEmbeddingVersion = 1;

struct EmbeddingTable {
    ChannelSet channel_set;
    std::uint64_t model_checksum = 0;
    std::vector<EmbeddingRecord> records;

    int dim() const { return records.empty() ? 0 : static_cast<int>(records.front().vector.size()); }
};

inline void write_embeddings(const EmbeddingTable& t, const std::string& path) {
    binary::Writer w;
    w.bytes(kEmbeddingMagic, 4);
    w.u16(kEmbeddingVersion);
    w.u32(static_cast<std::uint32_t>(t.dim()));
    w.str16(join_channels(t.channel_set));
    w.u64(t.model_checksum);
    w.u64(t.records.size());
    for (const auto& r : t.records) {
        if (static_cast<int>(r.vector.size()) != t.dim()) fail(ErrorCode::DimensionMismatch, "ragged embedding table");
        w.str16(r.plate_id);
        w.str16(r.well_id);
        w.str16(r.compound_id);
        w.str16(to_string(r.role));
        w.u32(static_cast<std::uint32_t>(r.tile_index));
        w.f32_array(r.vector);
    }
    w.save(path);
}

inline EmbeddingTable read_embeddings(const std::string& path) {
    auto r = binary::Reader::from_file(path, ErrorCode::IOFailure);
    if (r.fixed(4) != std::string(kEmbeddingMagic, 4)) fail(ErrorCode::IOFailure, "not an embedding table: " + path);
    if (r.u16() != kEmbeddingVersion) fail(ErrorCode::IOFailure, "unsupported embedding table version");
    EmbeddingTable t;
    const std::uint32_t dim = r.u32();
    t.channel_set = parse_channels(r.str16());
    t.model_checksum = r.u64();
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        EmbeddingRecord e;
        e.plate_id = r.str16();
        e.well_id = r.str16();
        e.compound_id = r.str16();
        const auto role = parse_role(r.str16());
        if (!role) fail(ErrorCode::IOFailure, "bad role in embedding table");
        e.role = *role;
        e.tile_index = static_cast<int>(r.u32());
        e.vector.resize(dim);
        r.f32_array(e.vector);
        e.channel_set = t.channel_set;
        t.records.push_back(std::move(e));
    }
    return t;
}

inline void export_embeddings_tsv(const EmbeddingTable& t, std::ostream& out) {
    out << "plate_id\twell_id\tcompound_id\trole\ttile_index";
    for (int j = 0; j < t.dim(); ++j) out << "\te" << j;
    out << '\n';
    out.precision(9);
    for (const auto& r : t.records) {
        out << r.plate_id << '\t' << r.well_id << '\t' << r.compound_id << '\t' << to_string(r.role) << '\t' << r.tile_index;
        for (float v : r.vector) out << '\t' << v;
        out << '\n';
    }
}

}  // namespace campfire
