#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include "campfire/error.hpp"
#include "campfire/manifest.hpp"
#include "campfire/parallel.hpp"
#include "campfire/rng.hpp"
#include "campfire/tile.hpp"

namespace campfire::synth {

struct SynthConfig {
    int n_target_plates = 8;
    int n_ood_plates_hint = 2;  // extra TARGET2 plates, intended to be held out
    int n_compound_plates = 0;
    int wells_per_plate = 96;
    int n_compounds = 9;
    int n_pos_controls = 8;
    int n_neg_controls = 1;
    int tiles_per_well = 16;
    int tile_size = 112;
    ChannelSet channel_set = {channels::nucleus, channels::actin, channels::mito, channels::er, channels::rna};
    double plate_effect_strength = 0.05;
    double noise_std = 0.05;
    std::uint64_t seed = 7;

    int total_target_plates() const { return n_target_plates + n_ood_plates_hint; }

    void validate(int patch_size = 1) const {
        if (n_target_plates < 0 || n_ood_plates_hint < 0 || n_compound_plates < 0)
            fail(ErrorCode::InvalidConfig, "plate counts must be non-negative");
        if (wells_per_plate <= 0 || tiles_per_well < 0) fail(ErrorCode::InvalidConfig, "bad well/tile counts");
        if (n_pos_controls < 0 || n_neg_controls < 0 || n_compounds < n_pos_controls + n_neg_controls)
            fail(ErrorCode::InvalidConfig, "n_compounds must cover the controls");
        if (n_compounds <= 0) fail(ErrorCode::InvalidConfig, "need at least one compound");
        if (tile_size <= 0 || (patch_size > 0 && tile_size % patch_size != 0))
            fail(ErrorCode::InvalidConfig, "tile_size must be divisible by the patch size");
        if (channel_set.empty()) fail(ErrorCode::InvalidConfig, "channel_set must be non-empty");
        if (plate_effect_strength < 0 || noise_std < 0) fail(ErrorCode::InvalidConfig, "strengths must be >= 0");
    }
};

/// Morphology parameters of one compound.
struct CompoundLatent {
    double nu_radius = 13.0;  // px
    double nu_ecc = 0.25;     // [0, 0.5]
    double ac_freq = 0.12;    // cycles / px
    double m_spots = 6.0;     // spot count

    static constexpr double kRadius[2] = {8.0, 18.0};
    static constexpr double kEcc[2] = {0.0, 0.5};
    static constexpr double kFreq[2] = {0.06, 0.2};
    static constexpr double kSpots[2] = {0.0, 12.0};

    bool in_range() const {
        auto in = [](double v, const double (&r)[2]) { return v >= r[0] && v <= r[1]; };
        return in(nu_radius, kRadius) && in(nu_ecc, kEcc) && in(ac_freq, kFreq) && in(m_spots, kSpots);
    }

    std::vector<double> as_vector() const { return {nu_radius, nu_ecc, ac_freq, m_spots}; }
};

/// Per-channel affine batch effect of one plate.
struct PlateEffect {
    std::vector<double> gain;
    std::vector<double> offset;

    static PlateEffect identity(std::size_t channels) { return {std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0)}; }
};

inline std::string compound_name(int index, const SynthConfig& cfg) {
    char buf[32];
    if (index < cfg.n_pos_controls) {
        std::snprintf(buf, sizeof buf, "ctrl_pos_%02d", index + 1);
    } else if (index < cfg.n_pos_controls + cfg.n_neg_controls) {
        std::snprintf(buf, sizeof buf, "ctrl_neg_%02d", index - cfg.n_pos_controls + 1);
    } else {
        std::snprintf(buf, sizeof buf, "cmpd_%04d", index - cfg.n_pos_controls - cfg.n_neg_controls + 1);
    }
    return buf;
}

inline WellRole compound_role(int index, const SynthConfig& cfg) {
    if (index < cfg.n_pos_controls) return WellRole::PositiveControl;
    if (index < cfg.n_pos_controls + cfg.n_neg_controls) return WellRole::NegativeControl;
    return WellRole::Standard;
}

/// Controls sit on a 3-level Latin-square design over (radius, spots, texture
/// frequency): any single channel resolves at most three groups while any two
/// channels together separate all nine. The negative control takes the middle
/// level everywhere; standard compounds draw uniformly from the ranges.
inline CompoundLatent compound_latent(int index, const SynthConfig& cfg) {
    static constexpr double radius_levels[3] = {8.0, 13.0, 18.0};
    static constexpr double spot_levels[3] = {0.0, 6.0, 12.0};
    static constexpr double freq_levels[3] = {0.06, 0.12, 0.2};
    const int n_controls = cfg.n_pos_controls + cfg.n_neg_controls;
    CompoundLatent t;
    if (index < n_controls) {
        int i = 1, j = 1;
        if (compound_role(index, cfg) == WellRole::PositiveControl) {
            // Positive controls fill the 8 non-centre cells of the 3x3 grid.
            int cell = index % 8;
            if (cell >= 4) ++cell;
            i = cell / 3;
            j = cell % 3;
        }
        const int k = (i + 2 * j + 1) % 3;
        t.nu_radius = radius_levels[i];
        t.m_spots = spot_levels[j];
        t.ac_freq = freq_levels[k];
        t.nu_ecc = 0.25;
        return t;
    }
    Rng rng = Rng::stream(cfg.seed, {0x7e7a, static_cast<std::uint64_t>(index)});
    t.nu_radius = rng.uniform(CompoundLatent::kRadius[0], CompoundLatent::kRadius[1]);
    t.nu_ecc = rng.uniform(CompoundLatent::kEcc[0], CompoundLatent::kEcc[1]);
    t.ac_freq = rng.uniform(CompoundLatent::kFreq[0], CompoundLatent::kFreq[1]);
    t.m_spots = rng.uniform(CompoundLatent::kSpots[0], CompoundLatent::kSpots[1]);
    return t;
}

inline PlateEffect plate_effect(int plate_index, const SynthConfig& cfg) {
    PlateEffect e;
    for (std::size_t c = 0; c < cfg.channel_set.size(); ++c) {
        Rng rng = Rng::stream(cfg.seed, {0x91a7e, static_cast<std::uint64_t>(plate_index), c});
        e.gain.push_back(std::exp(cfg.plate_effect_strength * rng.normal()));
        e.offset.push_back(0.3 * cfg.plate_effect_strength * rng.normal());
    }
    return e;
}

/// Renders one cell-centred tile. Channels "Nu", "Ac", "M", "ER" and "cyRNA"
/// have dedicated generators; any other id gets an independent texture.
inline Tile render_tile(const CompoundLatent& theta, const PlateEffect& effect, const ChannelSet& channel_set, Rng& rng,
                        int tile_size = 112, double noise_std = 0.0) {
    if (channel_set.empty()) fail(ErrorCode::InvalidConfig, "channel_set must be non-empty");
    if (effect.gain.size() != channel_set.size() || effect.offset.size() != channel_set.size())
        fail(ErrorCode::ShapeMismatch, "plate effect does not match channel set");
    const int n = tile_size;
    const double pi = std::numbers::pi;

    const double cx = (n - 1) / 2.0 + rng.uniform(-3.0, 3.0);
    const double cy = (n - 1) / 2.0 + rng.uniform(-3.0, 3.0);
    const double phi = rng.uniform(0.0, pi);
    const double radius = theta.nu_radius * (1.0 + 0.05 * rng.normal());
    const double a = radius * (1.0 + theta.nu_ecc);
    const double b = radius * (1.0 - 0.8 * theta.nu_ecc);
    const double ac_phase = rng.uniform(0.0, 2.0 * pi);
    const double cos_phi = std::cos(phi), sin_phi = std::sin(phi);
    // Cell outline is independent of theta so each channel only shows its
    // own factor. Integrated intensity does not depend on theta either:
    // larger nuclei are dimmer and spots share a fixed total.
    const double cell_scale = 1.0 + 0.05 * rng.normal();
    const double cell_a = (0.18 * n + 19.5) * cell_scale, cell_b = (0.18 * n + 12.5) * cell_scale;
    const double nu_amp = 169.0 / (a * b);

    const int n_spots = std::max(0, static_cast<int>(std::lround(theta.m_spots)));
    const double spot_amp = 6.0 / std::max(n_spots, 1);
    std::vector<std::pair<double, double>> spots;
    while (static_cast<int>(spots.size()) < n_spots) {
        const double su = rng.uniform(-1.0, 1.0), sv = rng.uniform(-1.0, 1.0);
        if (su * su + sv * sv > 1.0) continue;
        spots.emplace_back(su * 0.8 * cell_a, sv * 0.8 * cell_b);
    }

    struct Wave {
        double kx, ky, phase;
    };
    auto texture_waves = [&rng, pi] {
        std::vector<Wave> w;
        for (int i = 0; i < 4; ++i) {
            const double f = rng.uniform(0.03, 0.1), dir = rng.uniform(0.0, pi), ph = rng.uniform(0.0, 2 * pi);
            w.push_back({2 * pi * f * std::cos(dir), 2 * pi * f * std::sin(dir), ph});
        }
        return w;
    };
    const auto tex1 = texture_waves();
    const auto tex2 = texture_waves();
    std::vector<std::vector<Wave>> extra_tex;
    for (std::size_t c = 0; c < channel_set.size(); ++c) extra_tex.push_back(texture_waves());

    const std::size_t plane = static_cast<std::size_t>(n) * n;
    std::vector<double> nu(plane), ac(plane), mi(plane), mask(plane), t1(plane), t2(plane);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * n + x;
            const double dx = x - cx, dy = y - cy;
            const double u = dx * cos_phi + dy * sin_phi;
            const double v = -dx * sin_phi + dy * cos_phi;
            nu[i] = nu_amp * std::exp(-0.5 * (u * u / (a * a) + v * v / (b * b)));
            const double rho = std::sqrt(u * u / (cell_a * cell_a) + v * v / (cell_b * cell_b));
            mask[i] = 1.0 / (1.0 + std::exp((rho - 1.0) * 10.0));
            ac[i] = mask[i] * (0.5 + 0.5 * std::sin(2 * pi * theta.ac_freq * u + ac_phase));
            double m = 0.0;
            for (const auto& [su, sv] : spots) {
                const double du = u - su, dv = v - sv;
                m += std::exp(-(du * du + dv * dv) / (2.0 * 1.6 * 1.6));
            }
            mi[i] = spot_amp * m;
            auto tex = [&](const std::vector<Wave>& ws) {
                double s = 0.0;
                for (const auto& w : ws) s += std::sin(w.kx * x + w.ky * y + w.phase);
                return mask[i] * (0.5 + 0.25 * s);
            };
            t1[i] = tex(tex1);
            t2[i] = tex(tex2);
        }
    }

    Tile tile(channel_set, n, n);
    for (std::size_t c = 0; c < channel_set.size(); ++c) {
        const auto& id = channel_set[c].name;
        auto dst = tile.plane(static_cast<int>(c));
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * n + x;
                double v;
                if (id == "Nu") v = nu[i];
                else if (id == "Ac") v = ac[i];
                else if (id == "M") v = mi[i];
                else if (id == "ER") v = 0.5 * nu[i] + 0.5 * ac[i] + 0.6 * t1[i];
                else if (id == "cyRNA") v = 0.6 * nu[i] + 0.3 * ac[i] + 0.6 * t2[i];
                else {
                    double s = 0.0;
                    for (const auto& w : extra_tex[c]) s += std::sin(w.kx * x + w.ky * y + w.phase);
                    v = mask[i] * (0.5 + 0.25 * s);
                }
                dst[i] = static_cast<float>(effect.gain[c] * v + effect.offset[c]);
            }
        }
    }
    if (noise_std > 0)
        for (auto& p : tile.pixels()) p = static_cast<float>(p + noise_std * rng.normal());
    return tile;
}

inline std::string well_name(int index, int wells_per_plate) {
    const int cols = wells_per_plate >= 384 ? 24 : 12;
    const int row = index / cols, col = index % cols;
    std::string r;
    if (row >= 26) r += static_cast<char>('A' + row / 26 - 1);
    r += static_cast<char>('A' + row % 26);
    char buf[8];
    std::snprintf(buf, sizeof buf, "%02d", col + 1);
    return r + buf;
}

inline std::string plate_name(int index) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "plate_%03d", index + 1);
    return buf;
}

inline std::string tile_uri(const std::string& plate, const std::string& well, int t) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d", t);
    return "tiles/" + plate + "/" + well + "_" + buf + ".cmpf";
}

/// Plate layout: compounds are repeated round-robin over the wells and the
/// positions are shuffled per plate. TARGET2 plates come first, then
/// COMPOUND plates, whose wells carry standard compounds only.
inline Manifest synthesize_manifest(const SynthConfig& cfg) {
    cfg.validate();
    Manifest m;
    const int n_target = cfg.total_target_plates();
    const int n_controls = cfg.n_pos_controls + cfg.n_neg_controls;
    for (int p = 0; p < n_target + cfg.n_compound_plates; ++p) {
        const std::string plate = plate_name(p);
        const bool target = p < n_target;
        m.plate_kind[plate] = target ? PlateKind::Target2 : PlateKind::Compound;
        std::vector<int> layout(cfg.wells_per_plate);
        for (int w = 0; w < cfg.wells_per_plate; ++w) {
            if (target || cfg.n_compounds == n_controls) {
                layout[w] = w % cfg.n_compounds;
            } else {
                layout[w] = n_controls + w % (cfg.n_compounds - n_controls);
            }
        }
        Rng rng = Rng::stream(cfg.seed, {0x1a70, static_cast<std::uint64_t>(p)});
        rng.shuffle(layout);
        for (int w = 0; w < cfg.wells_per_plate; ++w) {
            WellRecord rec;
            rec.plate_id = plate;
            rec.well_id = well_name(w, cfg.wells_per_plate);
            rec.compound_id = compound_name(layout[w], cfg);
            rec.role = compound_role(layout[w], cfg);
            for (int t = 0; t < cfg.tiles_per_well; ++t) rec.tile_uris.push_back(tile_uri(plate, rec.well_id, t));
            m.wells.push_back(std::move(rec));
        }
    }
    return m;
}

/// Index of a compound id produced by compound_name, or -1.
inline int compound_index(const std::string& id, const SynthConfig& cfg) {
    for (int i = 0; i < cfg.n_compounds; ++i)
        if (compound_name(i, cfg) == id) return i;
    return -1;
}

/// Renders tile `t` of a well. The stream is keyed by (plate, well, tile) so
/// any traversal order yields identical pixels.
inline Tile render_well_tile(const SynthConfig& cfg, int plate_index, int well_index, const WellRecord& well, int t) {
    const int ci = compound_index(well.compound_id, cfg);
    if (ci < 0) fail(ErrorCode::InvalidConfig, "unknown compound " + well.compound_id);
    Rng rng = Rng::stream(cfg.seed, {0x711e, static_cast<std::uint64_t>(plate_index),
                                     static_cast<std::uint64_t>(well_index), static_cast<std::uint64_t>(t)});
    Tile tile = render_tile(compound_latent(ci, cfg), plate_effect(plate_index, cfg), cfg.channel_set, rng, cfg.tile_size,
                            cfg.noise_std);
    tile.set_well_ref(well.ref());
    return tile;
}

/// Writes `out_dir`/manifest.tsv and every tile container below `out_dir`/tiles.
inline Manifest generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir,
                                 std::size_t workers = default_workers()) {
    Manifest m = synthesize_manifest(cfg);
    m.root = out_dir;
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) fail(ErrorCode::IOFailure, "cannot create " + out_dir.string() + ": " + ec.message());
    for (const auto& [plate, _] : m.plate_kind) {
        std::filesystem::create_directories(out_dir / "tiles" / plate, ec);
        if (ec) fail(ErrorCode::IOFailure, "cannot create tile directory: " + ec.message());
    }
    std::map<std::string, int> plate_index;
    for (const auto& [plate, _] : m.plate_kind) plate_index[plate] = static_cast<int>(plate_index.size());
    const std::size_t per_plate = static_cast<std::size_t>(cfg.wells_per_plate);
    parallel_for(m.wells.size(), [&](std::size_t wi) {
        const auto& well = m.wells[wi];
        for (int t = 0; t < static_cast<int>(well.tile_uris.size()); ++t) {
            Tile tile = render_well_tile(cfg, plate_index.at(well.plate_id), static_cast<int>(wi % per_plate), well, t);
            write_tile(tile, m.resolve(well.tile_uris[t]).string());
        }
    }, workers);
    write_manifest(m, (out_dir / "manifest.tsv").string());
    return m;
}

}  // namespace campfire::synth
