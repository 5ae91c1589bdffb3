#pragma once

#include <filesystem>
#include <fstream>
#include <istream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "campfire/error.hpp"
#include "campfire/evaluation.hpp"
#include "campfire/json_io.hpp"
#include "campfire/training.hpp"

namespace campfire {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, n_control, n_heldout, probe_epochs, probe_lr, probe_batch, n_subsets, n_folds, seed,
                                                channel_sets, triplet_epochs, triplet_margin, triplet_lr, triplet_hidden, triplet_out,
                                                triplet_wells_per_batch, triplet_tiles_per_well, finetune_tiles_per_well)

struct DataConfig {
    std::string dir;       // dataset root; empty means CAMPFIRE_DATA_DIR or ./data
    std::string manifest;  // defaults to <dir>/manifest.tsv
    int workers = 1;
    bool deterministic = true;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, dir, manifest, workers, deterministic)

struct ChannelConfig {
    ChannelSet train = {channels::nucleus, channels::actin, channels::mito};
    ChannelSet finetune = {channels::nucleus, channels::actin, channels::mito};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ChannelConfig, train, finetune)

struct RunConfig {
    DataConfig data;
    SplitConfig split;
    synth::SynthConfig synth;
    ModelConfig model;
    objective::LossWeights loss;
    OptimConfig optim = OptimConfig::desk();
    bool augment = true;
    ChannelConfig channels;
    EvalConfig eval = EvalConfig::desk();

    /// Workstation preset: 8 + 2 plates of 96 wells, 9 compounds, 10 epochs.
    static RunConfig desk() {
        RunConfig c;
        c.split.n_heldout_compounds = 0;
        c.split.n_ood_plates = 2;
        c.split.plates_train = 6;
        c.split.plates_val = 1;
        c.split.plates_test = 1;
        return c;
    }

    /// Full-size configuration: 25 TARGET2 plates with 302 compounds, large
    /// encoder, 50 epochs, no clipping.
    static RunConfig paper() {
        RunConfig c;
        c.synth.n_target_plates = 20;
        c.synth.n_ood_plates_hint = 5;
        c.synth.wells_per_plate = 384;
        c.synth.n_compounds = 302;
        c.model = ModelConfig::paper_large();
        c.optim = OptimConfig{};
        c.eval = EvalConfig{};
        return c;
    }

    void set_seed(std::uint64_t s) {
        synth.seed = s;
        split.seed = s;
        optim.seed = s;
        eval.seed = s;
    }

    void validate() const {
        split.validate();
        synth.validate(model.patch_size);
        model.validate();
        loss.validate();
        optim.validate();
        eval.validate();
        if (channels.train.empty() || channels.finetune.empty()) fail(ErrorCode::InvalidConfig, "channel lists must be non-empty");
        if (data.workers < 1) fail(ErrorCode::InvalidConfig, "workers must be >= 1");
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.model = model;
        t.optim = optim;
        t.loss = loss;
        t.train_channels = channels.train;
        t.augment = augment;
        t.workers = data.deterministic ? 1 : static_cast<std::size_t>(data.workers);
        return t;
    }

    std::size_t workers() const { return data.deterministic ? 1 : static_cast<std::size_t>(data.workers); }

    json to_json() const {
        json optim_j = optim;
        optim_j["augment"] = augment;
        return {{"data", data},   {"split", split}, {"synth", synth},       {"model", model},
                {"loss", loss},   {"optim", optim_j}, {"channels", channels}, {"eval", eval}};
    }

    static RunConfig from_json(const json& j) {
        RunConfig c;
        c.data = j.at("data").get<DataConfig>();
        c.split = j.at("split").get<SplitConfig>();
        c.synth = j.at("synth").get<synth::SynthConfig>();
        c.model = j.at("model").get<ModelConfig>();
        c.loss = j.at("loss").get<objective::LossWeights>();
        c.optim = j.at("optim").get<OptimConfig>();
        c.augment = j.at("optim").value("augment", true);
        c.channels = j.at("channels").get<ChannelConfig>();
        c.eval = j.at("eval").get<EvalConfig>();
        return c;
    }
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    fail(ErrorCode::InvalidConfig, key + ": expected a boolean, got '" + v + "'");
}

/// Converts an INI string to the JSON type of the existing default value.
inline json convert_value(const json& like, const std::string& v, const std::string& key) {
    try {
        switch (like.type()) {
            case json::value_t::boolean: return parse_bool(v, key);
            case json::value_t::number_unsigned: {
                std::size_t pos = 0;
                const auto x = std::stoull(v, &pos);
                if (pos != v.size()) break;
                return x;
            }
            case json::value_t::number_integer: {
                std::size_t pos = 0;
                const auto x = std::stoll(v, &pos);
                if (pos != v.size()) break;
                return x;
            }
            case json::value_t::number_float: {
                std::size_t pos = 0;
                const auto x = std::stod(v, &pos);
                if (pos != v.size()) break;
                return x;
            }
            case json::value_t::string: return v;
            case json::value_t::array: {
                // Channel list "Nu,Ac,M", or list of channel lists "Nu|Nu,Ac".
                const bool nested = !like.empty() && like.front().is_array();
                json out = json::array();
                if (nested) {
                    std::string part;
                    for (char ch : v + "|") {
                        if (ch == '|') {
                            out.push_back(parse_channels(part));
                            part.clear();
                        } else {
                            part += ch;
                        }
                    }
                } else {
                    out = parse_channels(v);
                }
                return out;
            }
            default: break;
        }
    } catch (const std::logic_error&) {
    }
    fail(ErrorCode::InvalidConfig, key + ": cannot parse value '" + v + "'");
}

}  // namespace detail

/// Overlays an INI file onto `base`. Every key must name an existing field;
/// unknown sections or keys are rejected.
inline RunConfig parse_run_config(std::istream& in, const RunConfig& base = RunConfig::desk()) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        fail(ErrorCode::InvalidConfig, std::string("bad config file: ") + e.what());
    }
    json j = base.to_json();
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) fail(ErrorCode::InvalidConfig, "key outside a section: " + section);
        if (!j.contains(section)) fail(ErrorCode::InvalidConfig, "unknown section [" + section + "]");
        for (const auto& [key, node] : body) {
            if (!j[section].contains(key)) fail(ErrorCode::InvalidConfig, "unknown key " + section + "." + key);
            j[section][key] = detail::convert_value(j[section][key], node.data(), section + "." + key);
        }
    }
    RunConfig c;
    try {
        c = RunConfig::from_json(j);
    } catch (const json::exception& e) {
        fail(ErrorCode::InvalidConfig, std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base = RunConfig::desk()) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IOFailure, "cannot open config " + path.string());
    return parse_run_config(in, base);
}

}  // namespace campfire
