#pragma once

#include <json.hpp>

#include "campfire/model.hpp"
#include "campfire/objective.hpp"
#include "campfire/optim.hpp"
#include "campfire/split.hpp"
#include "campfire/synth.hpp"
#include "campfire/tile.hpp"

namespace campfire {

using nlohmann::json;

inline void to_json(json& j, const ChannelId& c) { j = c.name; }
inline void from_json(const json& j, ChannelId& c) { c.name = j.get<std::string>(); }

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, patch_size, enc_dim, enc_depth, enc_heads, dec_dim, dec_depth,
                                                dec_heads, mlp_ratio, mask_fraction, sync_mask, drop_path_rate, rope_base,
                                                loss_on_masked_only)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimConfig, lr_peak, lr_warmup_start, eta_min, weight_decay, warmup_epochs,
                                                total_epochs, batch_size, beta1, beta2, eps, grad_clip, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SplitConfig, n_heldout_compounds, n_ood_plates, plates_train, plates_val,
                                                plates_test, p_train, seed)

inline void to_json(json& j, const ChannelStats& s) {
    j = json::object();
    for (const auto& [id, m] : s.by_channel) j[id.name] = {{"mean", m.mean}, {"std", m.std}};
}
inline void from_json(const json& j, ChannelStats& s) {
    s.by_channel.clear();
    for (const auto& [name, m] : j.items()) s.by_channel[ChannelId(name)] = {m.at("mean").get<double>(), m.at("std").get<double>()};
}

}  // namespace campfire

namespace campfire::objective {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, lambda_s, lambda_h, lambda_l, lambda_f, h, l)
}

namespace campfire::synth {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, n_target_plates, n_ood_plates_hint, n_compound_plates,
                                                wells_per_plate, n_compounds, n_pos_controls, n_neg_controls, tiles_per_well,
                                                tile_size, channel_set, plate_effect_strength, noise_std, seed)
}
