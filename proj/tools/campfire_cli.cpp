#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "campfire/campfire.hpp"

namespace fs = std::filesystem;
using namespace campfire;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitIo = 2;

struct Globals {
    std::string config;
    std::string preset = "desk";
    std::optional<std::uint64_t> seed;
    std::string out;
    bool deterministic = false;
};

std::uint64_t file_checksum(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return 0;
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes);
}

fs::path data_root(const RunConfig& cfg) {
    if (!cfg.data.dir.empty()) return cfg.data.dir;
    if (const char* env = std::getenv("CAMPFIRE_DATA_DIR"); env && *env) return env;
    return "data";
}

fs::path manifest_path(const RunConfig& cfg, const std::string& flag) {
    if (!flag.empty()) return flag;
    if (!cfg.data.manifest.empty()) return cfg.data.manifest;
    return data_root(cfg) / "manifest.tsv";
}

/// Writes the JSON run record next to (or inside) the artifact.
class RunRecord {
public:
    RunRecord(std::string command, const RunConfig& cfg, const Globals& g)
        : start_(std::chrono::steady_clock::now()) {
        j_["command"] = std::move(command);
        j_["config"] = cfg.to_json();
        j_["seeds"] = {{"synth", cfg.synth.seed}, {"split", cfg.split.seed}, {"optim", cfg.optim.seed}, {"eval", cfg.eval.seed}};
        j_["deterministic"] = cfg.data.deterministic;
        j_["config_file"] = g.config;
        j_["preset"] = g.preset;
        j_["inputs"] = json::object();
        j_["outputs"] = json::array();
    }

    void input(const std::string& name, const fs::path& p) {
        j_["inputs"][name] = {{"path", p.string()}, {"fnv1a64", file_checksum(p)}};
    }
    void output(const fs::path& p) { j_["outputs"].push_back(p.string()); }
    json& extra() { return j_; }

    void write(const fs::path& where) {
        j_["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        std::ofstream out(where);
        if (!out) fail(ErrorCode::IOFailure, "cannot write run record " + where.string());
        out << j_.dump(2) << '\n';
    }

private:
    json j_;
    std::chrono::steady_clock::time_point start_;
};

void write_json(const fs::path& p, const json& j) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) fail(ErrorCode::IOFailure, "cannot write " + p.string());
    out << j.dump(2) << '\n';
}

RunConfig resolve_config(const Globals& g) {
    RunConfig base;
    if (g.preset == "desk") base = RunConfig::desk();
    else if (g.preset == "paper") base = RunConfig::paper();
    else fail(ErrorCode::InvalidConfig, "unknown preset " + g.preset);
    RunConfig cfg = g.config.empty() ? base : load_run_config(g.config, base);
    if (g.seed) cfg.set_seed(*g.seed);
    if (g.deterministic) cfg.data.deterministic = true;
    cfg.validate();
    return cfg;
}

json audit_json(const AuditReport& r) {
    json j;
    j["violations"] = r.violations;
    j["clean"] = r.clean();
    for (const auto& [s, n] : r.split_counts) j["split_counts"][to_string(s)] = n;
    for (const auto& [c, n] : r.category_counts) j["category_counts"][to_string(c)] = n;
    for (const auto& [comp, counts] : r.compound_counts)
        for (const auto& [s, n] : counts) j["compound_counts"][comp][to_string(s)] = n;
    return j;
}

std::string set_label(const ChannelSet& s) {
    std::string out;
    for (const auto& c : s) out += (out.empty() ? "" : "+") + c.name;
    return out;
}

// --- commands --------------------------------------------------------------

int cmd_synth(const Globals& g) {
    const RunConfig cfg = resolve_config(g);
    const fs::path out = g.out.empty() ? data_root(cfg) : fs::path(g.out);
    RunRecord rec("synth", cfg, g);
    const Manifest m = synth::generate_dataset(cfg.synth, out, cfg.workers());
    std::cout << "wrote " << m.wells.size() << " wells, " << m.tile_count() << " tiles on " << m.plate_kind.size()
              << " plates (" << cfg.synth.n_compounds << " compounds) to " << out.string() << '\n';
    rec.output(out / "manifest.tsv");
    rec.extra()["summary"] = {{"wells", m.wells.size()}, {"tiles", m.tile_count()}, {"plates", m.plate_kind.size()}};
    rec.write(out / "run_synth.json");
    return kExitOk;
}

int cmd_split(const Globals& g, const std::string& manifest_flag) {
    const RunConfig cfg = resolve_config(g);
    const fs::path mpath = manifest_path(cfg, manifest_flag);
    const Manifest m = read_manifest(mpath.string());
    const fs::path out = g.out.empty() ? mpath.parent_path() / "assignment.tsv" : fs::path(g.out);
    RunRecord rec("split", cfg, g);
    rec.input("manifest", mpath);
    const SplitAssignment a = assign(m, cfg.split, &std::cerr);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_assignment(a, m, out.string());
    const AuditReport r = audit(a, m);
    std::cout << "assignment: " << out.string() << '\n';
    for (const auto& [s, n] : r.split_counts) std::cout << "  " << to_string(s) << ": " << n << " wells\n";
    rec.output(out);
    rec.extra()["audit"] = audit_json(r);
    rec.write(fs::path(out.string() + ".run.json"));
    return kExitOk;
}

int cmd_audit(const Globals& g, const std::string& manifest_flag, const std::string& assignment_flag) {
    const RunConfig cfg = resolve_config(g);
    const fs::path mpath = manifest_path(cfg, manifest_flag);
    const Manifest m = read_manifest(mpath.string());
    const fs::path apath = assignment_flag.empty() ? mpath.parent_path() / "assignment.tsv" : fs::path(assignment_flag);
    const SplitAssignment a = read_assignment(apath.string(), m);
    const AuditReport r = audit(a, m);
    const fs::path out = g.out.empty() ? fs::path(apath.string() + ".audit.json") : fs::path(g.out);
    RunRecord rec("audit", cfg, g);
    rec.input("manifest", mpath);
    rec.input("assignment", apath);
    write_json(out, audit_json(r));
    rec.output(out);
    rec.write(fs::path(out.string() + ".run.json"));
    std::cout << r.violations.size() << " violations\n";
    for (const auto& v : r.violations) std::cout << "  " << v << '\n';
    for (const auto& [c, n] : r.category_counts) std::cout << "  " << to_string(c) << ": " << n << " test wells\n";
    return r.clean() ? kExitOk : kExitInvalid;
}

int cmd_train(const Globals& g, const std::string& manifest_flag, const std::string& assignment_flag, int epochs,
              const std::string& resume) {
    RunConfig cfg = resolve_config(g);
    if (epochs > 0) {
        cfg.optim.total_epochs = epochs;
        cfg.optim.warmup_epochs = std::min(cfg.optim.warmup_epochs, epochs);
    }
    const fs::path mpath = manifest_path(cfg, manifest_flag);
    const Manifest m = read_manifest(mpath.string());
    const fs::path apath = assignment_flag.empty() ? mpath.parent_path() / "assignment.tsv" : fs::path(assignment_flag);
    const SplitAssignment a = read_assignment(apath.string(), m);
    const AuditReport r = audit(a, m);
    if (!r.clean()) fail(ErrorCode::InvalidConfig, "assignment fails audit: " + r.violations.front());
    const fs::path out = g.out.empty() ? fs::path("runs/train") : fs::path(g.out);
    RunRecord rec("train", cfg, g);
    rec.input("manifest", mpath);
    rec.input("assignment", apath);
    std::optional<fs::path> resume_from;
    if (!resume.empty()) {
        resume_from = resume;
        rec.input("resume", resume);
    }
    const FitResult res = fit(m, a, cfg.train_config(), out, resume_from, {});
    for (const auto& e : res.metrics)
        std::cout << "epoch " << e.epoch << " lr " << e.lr << " train "
                  << (e.train_loss ? std::to_string(*e.train_loss) : std::string("-")) << " val " << e.val_loss << '\n';
    rec.output(res.checkpoint);
    rec.output(out / "metrics.jsonl");
    rec.write(out / "run_train.json");
    return kExitOk;
}

int cmd_embed(const Globals& g, const std::string& manifest_flag, const std::string& assignment_flag, const std::string& ckpt,
              const std::vector<std::string>& set_flags, bool tsv) {
    const RunConfig cfg = resolve_config(g);
    const fs::path mpath = manifest_path(cfg, manifest_flag);
    const Manifest m = read_manifest(mpath.string());
    const fs::path apath = assignment_flag.empty() ? mpath.parent_path() / "assignment.tsv" : fs::path(assignment_flag);
    const SplitAssignment a = read_assignment(apath.string(), m);
    const ModelBundle bundle = ModelBundle::load(ckpt);
    std::vector<ChannelSet> sets = cfg.eval.channel_sets;
    if (!set_flags.empty()) {
        sets.clear();
        for (const auto& s : set_flags) sets.push_back(parse_channels(s));
    }
    const fs::path out = g.out.empty() ? fs::path("runs/embeddings") : fs::path(g.out);
    fs::create_directories(out);
    RunRecord rec("embed", cfg, g);
    rec.input("manifest", mpath);
    rec.input("assignment", apath);
    rec.input("checkpoint", ckpt);
    const auto picks = plan_tiles(m, a, cfg.eval.n_control, cfg.eval.n_heldout, cfg.eval.seed);
    const auto tables = embed_by_channel_sets(m, bundle, picks, sets, cfg.workers());
    const std::uint64_t checksum = bundle.params.checksum(true);
    for (std::size_t s = 0; s < sets.size(); ++s) {
        EmbeddingTable t{sets[s], checksum, tables[s]};
        const fs::path p = out / ("embeddings_" + set_label(sets[s]) + ".cmpe");
        write_embeddings(t, p.string());
        rec.output(p);
        if (tsv) {
            const fs::path tp = out / ("embeddings_" + set_label(sets[s]) + ".tsv");
            std::ofstream o(tp);
            export_embeddings_tsv(t, o);
            rec.output(tp);
        }
        std::cout << set_label(sets[s]) << ": " << t.records.size() << " embeddings\n";
    }
    rec.write(out / "run_embed.json");
    return kExitOk;
}

int cmd_probe(const Globals& g, const std::string& manifest_flag, const std::string& assignment_flag,
              const std::vector<std::string>& tables) {
    const RunConfig cfg = resolve_config(g);
    const fs::path mpath = manifest_path(cfg, manifest_flag);
    const Manifest m = read_manifest(mpath.string());
    const fs::path apath = assignment_flag.empty() ? mpath.parent_path() / "assignment.tsv" : fs::path(assignment_flag);
    const SplitAssignment a = read_assignment(apath.string(), m);
    const fs::path out = g.out.empty() ? fs::path("runs/probe_report.json") : fs::path(g.out);
    RunRecord rec("probe", cfg, g);
    rec.input("assignment", apath);
    json report = json::array();
    for (const auto& path : tables) {
        rec.input("embeddings:" + path, path);
        const EmbeddingTable t = read_embeddings(path);
        const auto sample = sample_embeddings(t.records, a, cfg.eval.n_control, cfg.eval.n_heldout, cfg.eval.seed);
        json entry = {{"channel_set", t.channel_set}, {"embeddings", path}, {"results", json::array()}};
        const ProbeReport c = controls_protocol(sample, a, cfg.eval);
        for (const auto& r : c.results) entry["results"].push_back(r.to_json());
        try {
            const ProbeReport h = heldout_protocol(sample, a, cfg.eval);
            for (const auto& r : h.results) entry["results"].push_back(r.to_json());
        } catch (const Error& e) {
            if (e.code() != ErrorCode::InsufficientData) throw;
            entry["heldout_skipped"] = e.what();
        }
        for (const auto& r : entry["results"])
            std::cout << set_label(t.channel_set) << "  " << r["task"].get<std::string>() << "  " << r["category"].get<std::string>()
                      << "  " << r["mean"].get<double>() << " +- " << r["std"].get<double>() << '\n';
        report.push_back(std::move(entry));
    }
    write_json(out, report);
    rec.output(out);
    rec.write(fs::path(out.string() + ".run.json"));
    return kExitOk;
}

int cmd_zprime(const Globals& g, const std::string& table, const std::string& plate) {
    const RunConfig cfg = resolve_config(g);
    const EmbeddingTable t = read_embeddings(table);
    std::vector<EmbeddingRecord> recs;
    std::map<std::string, WellRole> roles;
    for (const auto& r : t.records) {
        if (!plate.empty() && r.plate_id != plate) continue;
        recs.push_back(r);
        roles[r.compound_id] = r.role;
    }
    if (recs.empty()) fail(ErrorCode::InsufficientData, "no embeddings selected");
    const auto groups = well_groups(recs);
    const fs::path out = g.out.empty() ? fs::path("runs/zprime_report.json") : fs::path(g.out);
    RunRecord rec("zprime", cfg, g);
    rec.input("embeddings", table);
    const auto pn = pos_neg_zprime(groups, roles);
    write_json(out, {{"channel_set", t.channel_set},
                     {"plate", plate},
                     {"pos_neg_zprime", pn ? json(*pn) : json(nullptr)},
                     {"matrix", zprime_matrix_json(zprime_matrix(groups))}});
    std::cout << "mean Z'(negative vs positive controls): " << (pn ? std::to_string(*pn) : "undefined") << '\n';
    rec.output(out);
    rec.write(fs::path(out.string() + ".run.json"));
    return kExitOk;
}

int cmd_finetune(const Globals& g, const std::string& manifest_flag, const std::string& ckpt, std::string heldout_plate) {
    const RunConfig cfg = resolve_config(g);
    const fs::path mpath = manifest_path(cfg, manifest_flag);
    const Manifest m = read_manifest(mpath.string());
    if (heldout_plate.empty()) heldout_plate = m.plate_kind.rbegin()->first;
    const ModelBundle bundle = ModelBundle::load(ckpt);
    const fs::path out = g.out.empty() ? fs::path("runs/finetune") : fs::path(g.out);
    fs::create_directories(out);
    RunRecord rec("finetune", cfg, g);
    rec.input("manifest", mpath);
    rec.input("checkpoint", ckpt);
    const FinetuneReport rep = finetune_protocol(m, bundle, heldout_plate, cfg.channels.finetune, cfg.eval, cfg.workers());
    TensorFile head;
    head.header = {{"kind", "campfire-triplet-head"}, {"backbone_checksum", rep.backbone_checksum_before}, {"eval", cfg.eval}};
    auto h = rep.result.head;
    h.visit([&](const std::string& name, Mat<float>& w, bool) { head.tensors[name] = w; });
    head.save((out / "head.cmpc").string());
    write_json(out / "finetune_report.json", rep.to_json());
    auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("undefined"); };
    std::cout << "held-out plate " << heldout_plate << ": Z'(neg vs pos) before " << show(rep.pos_neg_before) << ", after "
              << show(rep.pos_neg_after) << '\n';
    rec.output(out / "head.cmpc");
    rec.output(out / "finetune_report.json");
    rec.write(out / "run_finetune.json");
    return kExitOk;
}

/// Grey-scale PGM grid: one row per channel, columns masked input /
/// reconstruction / original, each scaled by the original's range.
void write_pgm_grid(const fs::path& p, const std::vector<objective::Plane<float>>& masked,
                    const std::vector<objective::Plane<float>>& recon, const std::vector<objective::Plane<float>>& orig) {
    const int h = static_cast<int>(orig.front().rows()), w = static_cast<int>(orig.front().cols());
    const int gap = 2, rows = static_cast<int>(orig.size());
    const int W = 3 * w + 2 * gap, H = rows * h + (rows - 1) * gap;
    std::vector<unsigned char> img(static_cast<std::size_t>(W) * H, 255);
    for (int c = 0; c < rows; ++c) {
        const float lo = orig[c].minCoeff(), hi = orig[c].maxCoeff();
        const float scale = hi > lo ? 255.0f / (hi - lo) : 0.0f;
        const objective::Plane<float>* cols[3] = {&masked[c], &recon[c], &orig[c]};
        for (int k = 0; k < 3; ++k)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const float v = std::clamp(((*cols[k])(y, x) - lo) * scale, 0.0f, 255.0f);
                    img[static_cast<std::size_t>(c * (h + gap) + y) * W + k * (w + gap) + x] = static_cast<unsigned char>(v);
                }
    }
    std::ofstream out(p, std::ios::binary);
    if (!out) fail(ErrorCode::IOFailure, "cannot write " + p.string());
    out << "P5\n" << W << ' ' << H << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

int cmd_reconstruct(const Globals& g, const std::string& manifest_flag, const std::string& ckpt, const std::string& well_ref,
                    int tile_index, const std::string& channel_flag) {
    const RunConfig cfg = resolve_config(g);
    const fs::path mpath = manifest_path(cfg, manifest_flag);
    const Manifest m = read_manifest(mpath.string());
    const ModelBundle bundle = ModelBundle::load(ckpt);
    const WellRecord* well = nullptr;
    for (const auto& w : m.wells)
        if (w.ref() == well_ref || well_ref.empty()) {
            well = &w;
            break;
        }
    if (!well) fail(ErrorCode::InvalidConfig, "no well " + well_ref);
    const ChannelSet set = channel_flag.empty() ? bundle.train_channels : parse_channels(channel_flag);
    const Tile t = normalize_channels(m.load_tile(*well, static_cast<std::size_t>(tile_index)).select(set), bundle.stats);
    const auto model = bundle.model();
    Rng rng = Rng::stream(cfg.optim.seed, {0x4ec0});
    const int side = model.grid_side(t);
    const MaskSpec mask = sample_mask(side * side, t.num_channels(), model.cfg.mask_fraction, model.cfg.sync_mask, rng);
    const auto res = model.forward_backward({{&t, mask}}, cfg.loss, nullptr, nullptr, true);
    const auto orig = tile_planes<float>(t);
    auto masked = orig;
    const int P = model.cfg.patch_size;
    for (int c = 0; c < t.num_channels(); ++c)
        for (int p : mask.masked[c]) masked[c].block((p / side) * P, (p % side) * P, P, P).setConstant(orig[c].minCoeff());
    const fs::path out = g.out.empty() ? fs::path("runs/reconstruction.pgm") : fs::path(g.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    RunRecord rec("reconstruct", cfg, g);
    rec.input("checkpoint", ckpt);
    write_pgm_grid(out, masked, res.reconstructions.front(), orig);
    rec.extra()["loss"] = res.loss;
    rec.extra()["well"] = well->ref();
    rec.output(out);
    rec.write(fs::path(out.string() + ".run.json"));
    std::cout << "reconstruction of " << well->ref() << " tile " << tile_index << " (loss " << res.loss << ") -> " << out.string() << '\n';
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"campfire: channel-agnostic masked autoencoder for multi-channel cell images"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "INI run config overlaid on the preset");
    app.add_option("--preset", g.preset, "base preset: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    app.add_option("--seed", g.seed, "seed for synth, split, optim and eval");
    app.add_option("--out", g.out, "output artifact (file or directory, per command)");
    app.add_flag("--deterministic", g.deterministic, "single-threaded, fixed-order execution");

    std::string manifest, assignment, checkpoint, resume, plate, well, channel_list;
    std::vector<std::string> tables, sets;
    int epochs = 0, tile_index = 0;
    bool tsv = false;

    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
    auto* split_cmd = app.add_subcommand("split", "assign wells to train/val/test");
    split_cmd->add_option("--manifest", manifest);
    auto* audit_cmd = app.add_subcommand("audit", "check an assignment for leakage");
    audit_cmd->add_option("--manifest", manifest);
    audit_cmd->add_option("--assignment", assignment);
    auto* train_cmd = app.add_subcommand("train", "pretrain the masked autoencoder");
    train_cmd->add_option("--manifest", manifest);
    train_cmd->add_option("--assignment", assignment);
    train_cmd->add_option("--epochs", epochs, "override optim.total_epochs");
    train_cmd->add_option("--resume", resume, "training checkpoint to continue from");
    auto* embed_cmd = app.add_subcommand("embed", "embed sampled tiles per channel set");
    embed_cmd->add_option("--manifest", manifest);
    embed_cmd->add_option("--assignment", assignment);
    embed_cmd->add_option("--checkpoint", checkpoint)->required();
    embed_cmd->add_option("--channels", sets, "channel set such as Nu,Ac,M (repeatable)");
    embed_cmd->add_flag("--tsv", tsv, "also export tab-separated tables");
    auto* probe_cmd = app.add_subcommand("probe", "linear probes on embedding tables");
    probe_cmd->add_option("--manifest", manifest);
    probe_cmd->add_option("--assignment", assignment);
    probe_cmd->add_option("--embeddings", tables)->required();
    auto* zprime_cmd = app.add_subcommand("zprime", "Z' matrices from an embedding table");
    zprime_cmd->add_option("--embeddings", tables)->required()->expected(1);
    zprime_cmd->add_option("--plate", plate, "restrict to one plate");
    auto* finetune_cmd = app.add_subcommand("finetune", "triplet-finetune a head on a frozen backbone");
    finetune_cmd->add_option("--manifest", manifest);
    finetune_cmd->add_option("--checkpoint", checkpoint)->required();
    finetune_cmd->add_option("--heldout-plate", plate, "plate kept out of finetuning (default: last)");
    auto* recon_cmd = app.add_subcommand("reconstruct", "render masked input / reconstruction / original");
    recon_cmd->add_option("--manifest", manifest);
    recon_cmd->add_option("--checkpoint", checkpoint)->required();
    recon_cmd->add_option("--well", well, "plate/well (default: first well)");
    recon_cmd->add_option("--tile", tile_index);
    recon_cmd->add_option("--channels", channel_list);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInvalid;
    }

    try {
        if (synth_cmd->parsed()) return cmd_synth(g);
        if (split_cmd->parsed()) return cmd_split(g, manifest);
        if (audit_cmd->parsed()) return cmd_audit(g, manifest, assignment);
        if (train_cmd->parsed()) return cmd_train(g, manifest, assignment, epochs, resume);
        if (embed_cmd->parsed()) return cmd_embed(g, manifest, assignment, checkpoint, sets, tsv);
        if (probe_cmd->parsed()) return cmd_probe(g, manifest, assignment, tables);
        if (zprime_cmd->parsed()) return cmd_zprime(g, tables.front(), plate);
        if (finetune_cmd->parsed()) return cmd_finetune(g, manifest, checkpoint, plate);
        if (recon_cmd->parsed()) return cmd_reconstruct(g, manifest, checkpoint, well, tile_index, channel_list);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.is_io() ? kExitIo : kExitInvalid;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    }
    return kExitInvalid;
}
