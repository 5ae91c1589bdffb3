#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "campfire/error.hpp"
#include "campfire/nn.hpp"
#include "campfire/objective.hpp"
#include "campfire/positions.hpp"
#include "campfire/rng.hpp"
#include "campfire/tile.hpp"

namespace campfire {

using nn::Mat;
using nn::Col;

struct ModelConfig {
    int patch_size = 14;
    int enc_dim = 192;
    int enc_depth = 6;
    int enc_heads = 4;
    int dec_dim = 96;
    int dec_depth = 2;
    int dec_heads = 4;
    int mlp_ratio = 4;
    double mask_fraction = 0.8;
    bool sync_mask = true;
    double drop_path_rate = 0.0;
    double rope_base = 100.0;
    bool loss_on_masked_only = false;

    /// Large-encoder preset of the full-size configuration. Too big to
    /// train on a workstation; kept so configs can name it.
    static ModelConfig paper_large() {
        ModelConfig c;
        c.enc_dim = 1024;
        c.enc_depth = 24;
        c.enc_heads = 16;
        c.dec_dim = 512;
        c.dec_depth = 8;
        c.dec_heads = 16;
        return c;
    }

    void validate() const {
        if (patch_size <= 0) fail(ErrorCode::InvalidConfig, "patch_size must be positive");
        if (enc_depth < 0 || dec_depth < 0 || enc_heads <= 0 || dec_heads <= 0 || mlp_ratio <= 0)
            fail(ErrorCode::InvalidConfig, "depths/heads must be positive");
        if (!(dec_dim < enc_dim)) fail(ErrorCode::InvalidConfig, "decoder dim must be smaller than encoder dim");
        if (enc_dim % enc_heads || dec_dim % dec_heads) fail(ErrorCode::InvalidConfig, "dims must divide by heads");
        if ((enc_dim / enc_heads) % 4 || (dec_dim / dec_heads) % 4)
            fail(ErrorCode::InvalidConfig, "head dims must be divisible by 4 for axial RoPE");
        if (enc_dim % 4 || dec_dim % 4) fail(ErrorCode::InvalidConfig, "dims must be divisible by 4");
        if (!(mask_fraction >= 0.0 && mask_fraction < 1.0)) fail(ErrorCode::InvalidConfig, "mask fraction must lie in [0,1)");
        if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) fail(ErrorCode::InvalidConfig, "drop path rate must lie in [0,1)");
    }

    bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameters

template <class S>
struct Block {
    nn::LayerNorm<S> ln1;
    nn::Linear<S> qkv;
    nn::Linear<S> proj;
    nn::LayerNorm<S> ln2;
    nn::Linear<S> fc1;
    nn::Linear<S> fc2;

    static Block init(int d, int mlp_ratio, Rng& rng) {
        return {nn::LayerNorm<S>::init(d),          nn::Linear<S>::init(d, 3 * d, rng),
                nn::Linear<S>::init(d, d, rng),      nn::LayerNorm<S>::init(d),
                nn::Linear<S>::init(d, mlp_ratio * d, rng), nn::Linear<S>::init(mlp_ratio * d, d, rng)};
    }

    template <class F>
    void visit(const std::string& p, F&& f) {
        ln1.visit(p + ".ln1", f);
        qkv.visit(p + ".qkv", f);
        proj.visit(p + ".proj", f);
        ln2.visit(p + ".ln2", f);
        fc1.visit(p + ".fc1", f);
        fc2.visit(p + ".fc2", f);
    }
};

template <class S>
struct MaeParams {
    nn::Linear<S> patch;  // P*P -> enc_dim, shared by every channel
    std::vector<Block<S>> encoder;
    nn::LayerNorm<S> enc_norm;
    nn::Linear<S> enc_to_dec;
    Mat<S> mask_token;     // 1 x dec_dim
    nn::Linear<S> channel;  // dec_dim -> dec_dim, shared by every channel
    std::vector<Block<S>> decoder;
    nn::LayerNorm<S> dec_norm;
    nn::Linear<S> head;  // dec_dim -> P*P

    static MaeParams init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        const int pp = cfg.patch_size * cfg.patch_size;
        MaeParams p;
        p.patch = nn::Linear<S>::init(pp, cfg.enc_dim, rng);
        for (int i = 0; i < cfg.enc_depth; ++i) p.encoder.push_back(Block<S>::init(cfg.enc_dim, cfg.mlp_ratio, rng));
        p.enc_norm = nn::LayerNorm<S>::init(cfg.enc_dim);
        p.enc_to_dec = nn::Linear<S>::init(cfg.enc_dim, cfg.dec_dim, rng);
        p.mask_token = Mat<S>(1, cfg.dec_dim);
        for (Eigen::Index i = 0; i < p.mask_token.size(); ++i) p.mask_token(i) = static_cast<S>(0.02 * rng.normal());
        p.channel = nn::Linear<S>::init(cfg.dec_dim, cfg.dec_dim, rng);
        for (int i = 0; i < cfg.dec_depth; ++i) p.decoder.push_back(Block<S>::init(cfg.dec_dim, cfg.mlp_ratio, rng));
        p.dec_norm = nn::LayerNorm<S>::init(cfg.dec_dim);
        p.head = nn::Linear<S>::init(cfg.dec_dim, pp, rng);
        return p;
    }

    /// f(name, matrix, decay) for every tensor in a fixed order.
    template <class F>
    void visit(F&& f) {
        patch.visit("patch", f);
        for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].visit("encoder." + std::to_string(i), f);
        enc_norm.visit("enc_norm", f);
        enc_to_dec.visit("enc_to_dec", f);
        f(std::string("mask_token"), mask_token, false);
        channel.visit("channel", f);
        for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].visit("decoder." + std::to_string(i), f);
        dec_norm.visit("dec_norm", f);
        head.visit("head", f);
    }

    struct Ref {
        std::string name;
        Mat<S>* value;
        bool decay;
        bool encoder_side;  // belongs to the inference path (patch + encoder)
    };

    std::vector<Ref> refs() const {
        std::vector<Ref> out;
        const_cast<MaeParams*>(this)->visit([&](const std::string& name, Mat<S>& m, bool decay) {
            const bool enc = name.rfind("patch", 0) == 0 || name.rfind("encoder.", 0) == 0 || name.rfind("enc_norm", 0) == 0;
            out.push_back({name, &m, decay, enc});
        });
        return out;
    }

    MaeParams zeros_like() const {
        MaeParams z = *this;
        z.visit([](const std::string&, Mat<S>& m, bool) { m.setZero(); });
        return z;
    }

    template <class T>
    MaeParams<T> cast() const {
        MaeParams<T> out;
        out.patch = {patch.w.template cast<T>(), patch.b.template cast<T>()};
        auto cast_block = [](const Block<S>& b) {
            auto lin = [](const nn::Linear<S>& l) { return nn::Linear<T>{l.w.template cast<T>(), l.b.template cast<T>()}; };
            auto ln = [](const nn::LayerNorm<S>& l) {
                return nn::LayerNorm<T>{l.gamma.template cast<T>(), l.beta.template cast<T>()};
            };
            return Block<T>{ln(b.ln1), lin(b.qkv), lin(b.proj), ln(b.ln2), lin(b.fc1), lin(b.fc2)};
        };
        for (const auto& b : encoder) out.encoder.push_back(cast_block(b));
        out.enc_norm = {enc_norm.gamma.template cast<T>(), enc_norm.beta.template cast<T>()};
        out.enc_to_dec = {enc_to_dec.w.template cast<T>(), enc_to_dec.b.template cast<T>()};
        out.mask_token = mask_token.template cast<T>();
        out.channel = {channel.w.template cast<T>(), channel.b.template cast<T>()};
        for (const auto& b : decoder) out.decoder.push_back(cast_block(b));
        out.dec_norm = {dec_norm.gamma.template cast<T>(), dec_norm.beta.template cast<T>()};
        out.head = {head.w.template cast<T>(), head.b.template cast<T>()};
        return out;
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& r : refs()) n += static_cast<std::size_t>(r.value->size());
        return n;
    }

    /// FNV-1a over the raw bytes of the selected tensors.
    std::uint64_t checksum(bool encoder_only = false) const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& r : refs()) {
            if (encoder_only && !r.encoder_side) continue;
            h = fnv1a64(r.name, h);
            h = fnv1a64(std::string_view(reinterpret_cast<const char*>(r.value->data()), r.value->size() * sizeof(S)), h);
        }
        return h;
    }
};

// ---------------------------------------------------------------------------
// Transformer block

template <class S>
struct BlockCache {
    typename nn::LayerNorm<S>::Cache ln1, ln2;
    Mat<S> h1, q, k, v, attn, x1, h2, u, g;
    std::vector<Mat<S>> probs;
    S scale1 = 1, scale2 = 1;
};

/// Pre-norm block: x + s1*Attn(LN(x)), then + s2*MLP(LN(.)). The scales carry
/// the stochastic-depth decision (0 or 1/(1-rate)); both are 1 at inference.
template <class S>
Mat<S> block_forward(const Block<S>& p, const Mat<S>& x, const RopeTable<S>& rope, int heads, BlockCache<S>* cache,
                     S scale1 = 1, S scale2 = 1) {
    const Eigen::Index t = x.rows(), d = x.cols();
    const int dh = static_cast<int>(d) / heads;
    typename nn::LayerNorm<S>::Cache c1, c2;
    Mat<S> h1 = p.ln1.forward(x, cache ? &c1 : nullptr);
    Mat<S> qkv = p.qkv.forward(h1);
    Mat<S> q = qkv.leftCols(d), k = qkv.middleCols(d, d), v = qkv.rightCols(d);
    apply_rope(q, rope);
    apply_rope(k, rope);
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
    Mat<S> attn(t, d);
    std::vector<Mat<S>> probs;
    for (int h = 0; h < heads; ++h) {
        Mat<S> logits = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * inv_sqrt;
        nn::softmax_rows(logits);
        attn.middleCols(h * dh, dh).noalias() = logits * v.middleCols(h * dh, dh);
        if (cache) probs.push_back(std::move(logits));
    }
    Mat<S> x1 = x + scale1 * p.proj.forward(attn);
    Mat<S> h2 = p.ln2.forward(x1, cache ? &c2 : nullptr);
    Mat<S> u = p.fc1.forward(h2);
    Mat<S> g = u.unaryExpr([](S z) { return nn::gelu(z); });
    Mat<S> out = x1 + scale2 * p.fc2.forward(g);
    if (cache) {
        cache->ln1 = std::move(c1);
        cache->ln2 = std::move(c2);
        cache->h1 = std::move(h1);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
        cache->x1 = std::move(x1);
        cache->h2 = std::move(h2);
        cache->u = std::move(u);
        cache->g = std::move(g);
        cache->probs = std::move(probs);
        cache->scale1 = scale1;
        cache->scale2 = scale2;
    }
    return out;
}

template <class S>
Mat<S> block_backward(const Block<S>& p, const BlockCache<S>& c, const RopeTable<S>& rope, int heads, const Mat<S>& dout,
                      Block<S>& g) {
    const Eigen::Index t = dout.rows(), d = dout.cols();
    const int dh = static_cast<int>(d) / heads;
    Mat<S> dx1 = dout;
    {
        const Mat<S> dy2 = c.scale2 * dout;
        Mat<S> dg = p.fc2.backward(c.g, dy2, g.fc2);
        for (Eigen::Index i = 0; i < dg.size(); ++i) dg.data()[i] *= nn::gelu_grad(c.u.data()[i]);
        const Mat<S> dh2 = p.fc1.backward(c.h2, dg, g.fc1);
        dx1 += p.ln2.backward(c.ln2, dh2, g.ln2);
    }
    const Mat<S> dy1 = c.scale1 * dx1;
    const Mat<S> dattn = p.proj.backward(c.attn, dy1, g.proj);
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
    Mat<S> dqkv(t, 3 * d);
    Mat<S> dq(t, d), dk(t, d);
    for (int h = 0; h < heads; ++h) {
        const Mat<S>& a = c.probs[h];
        const auto dO = dattn.middleCols(h * dh, dh);
        dqkv.middleCols(2 * d + h * dh, dh).noalias() = a.transpose() * dO;
        Mat<S> da = dO * c.v.middleCols(h * dh, dh).transpose();
        const Col<S> row_dot = (da.array() * a.array()).rowwise().sum();
        Mat<S> dlogits = (a.array() * (da.array().colwise() - row_dot.array())).matrix() * inv_sqrt;
        dq.middleCols(h * dh, dh).noalias() = dlogits * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() = dlogits.transpose() * c.q.middleCols(h * dh, dh);
    }
    apply_rope(dq, rope, true);
    apply_rope(dk, rope, true);
    dqkv.leftCols(d) = dq;
    dqkv.middleCols(d, d) = dk;
    const Mat<S> dh1 = p.qkv.backward(c.h1, dqkv, g.qkv);
    return dx1 + p.ln1.backward(c.ln1, dh1, g.ln1);
}

// ---------------------------------------------------------------------------
// Patches and masks

/// Which grid positions are hidden from the encoder, per channel.
struct MaskSpec {
    int n_positions = 0;
    std::vector<std::vector<int>> masked;   // per channel, ascending
    std::vector<std::vector<int>> visible;  // per channel, ascending

    int n_channels() const { return static_cast<int>(masked.size()); }

    std::size_t masked_count() const {
        std::size_t n = 0;
        for (const auto& m : masked) n += m.size();
        return n;
    }
    std::size_t visible_count() const {
        std::size_t n = 0;
        for (const auto& v : visible) n += v.size();
        return n;
    }

    static MaskSpec none(int n_positions, int channels) {
        MaskSpec m;
        m.n_positions = n_positions;
        m.masked.assign(channels, {});
        std::vector<int> all(n_positions);
        for (int i = 0; i < n_positions; ++i) all[i] = i;
        m.visible.assign(channels, all);
        return m;
    }

    static MaskSpec from_masked(int n_positions, std::vector<std::vector<int>> masked) {
        MaskSpec m;
        m.n_positions = n_positions;
        for (auto& set : masked) {
            std::sort(set.begin(), set.end());
            std::vector<int> vis;
            std::size_t j = 0;
            for (int p = 0; p < n_positions; ++p) {
                if (j < set.size() && set[j] == p) ++j;
                else vis.push_back(p);
            }
            m.visible.push_back(std::move(vis));
        }
        m.masked = std::move(masked);
        return m;
    }
};

inline int masked_position_count(int n_positions, double mask_fraction) {
    return static_cast<int>(std::floor(mask_fraction * n_positions + 1e-9));
}

/// floor(p_m * N) positions per channel; one shared set when `sync`.
inline MaskSpec sample_mask(int n_positions, int channels, double mask_fraction, bool sync, Rng& rng) {
    if (!(mask_fraction >= 0.0 && mask_fraction < 1.0)) fail(ErrorCode::InvalidConfig, "mask fraction must lie in [0,1)");
    const int k = masked_position_count(n_positions, mask_fraction);
    auto draw = [&] {
        auto idx = rng.sample_without_replacement(static_cast<std::size_t>(n_positions), static_cast<std::size_t>(k));
        return std::vector<int>(idx.begin(), idx.end());
    };
    std::vector<std::vector<int>> masked;
    if (sync) {
        masked.assign(channels, draw());
    } else {
        for (int c = 0; c < channels; ++c) masked.push_back(draw());
    }
    return MaskSpec::from_masked(n_positions, std::move(masked));
}

/// Pixels of every P x P patch: one row per token, channel-major then
/// row-major over the patch grid.
template <class S>
Mat<S> extract_patches(const Tile& tile, int patch) {
    if (tile.height() % patch || tile.width() % patch)
        fail(ErrorCode::IndivisibleTile, "tile " + std::to_string(tile.height()) + "x" + std::to_string(tile.width()) +
                                             " not divisible by patch " + std::to_string(patch));
    const int gh = tile.height() / patch, gw = tile.width() / patch;
    Mat<S> out(tile.num_channels() * gh * gw, patch * patch);
    for (int c = 0; c < tile.num_channels(); ++c)
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                const Eigen::Index row = (static_cast<Eigen::Index>(c) * gh + gy) * gw + gx;
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        out(row, y * patch + x) = static_cast<S>(tile.at(c, gy * patch + y, gx * patch + x));
            }
    return out;
}

/// Inverse of extract_patches into per-channel planes.
template <class S>
std::vector<objective::Plane<S>> assemble_patches(const Mat<S>& tokens, int channels, int height, int width, int patch) {
    const int gh = height / patch, gw = width / patch;
    if (tokens.rows() != static_cast<Eigen::Index>(channels) * gh * gw || tokens.cols() != patch * patch)
        fail(ErrorCode::ShapeMismatch, "token grid does not match image shape");
    std::vector<objective::Plane<S>> planes(channels, objective::Plane<S>(height, width));
    for (int c = 0; c < channels; ++c)
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                const Eigen::Index row = (static_cast<Eigen::Index>(c) * gh + gy) * gw + gx;
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x) planes[c](gy * patch + y, gx * patch + x) = tokens(row, y * patch + x);
            }
    return planes;
}

template <class S>
std::vector<objective::Plane<S>> tile_planes(const Tile& tile) {
    std::vector<objective::Plane<S>> out;
    for (int c = 0; c < tile.num_channels(); ++c) {
        objective::Plane<S> p(tile.height(), tile.width());
        const auto src = tile.plane(c);
        for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = static_cast<S>(src[i]);
        out.push_back(std::move(p));
    }
    return out;
}

/// Shared per-channel patch projection: N*C token embeddings plus the
/// channel index and grid position of every token.
template <class S>
struct PatchGrid {
    int n_positions = 0;
    int n_channels = 0;
    int grid_side = 0;
    Mat<S> tokens;
    std::vector<int> channel_of;
    std::vector<GridPos> pos_of;
};

// ---------------------------------------------------------------------------
// Model

/// Channel-agnostic masked autoencoder.
///
/// The encoder never sees channel identity: every channel goes through the
/// same patch projection and tokens only carry spatial positions, so the
/// pooled embedding is invariant to channel order. Channel identity enters
/// the decoder through embeddings computed from the batch mean of each
/// channel's projected tokens.
template <class S>
class MaskedAutoencoder {
public:
    ModelConfig cfg;
    MaeParams<S> params;

    MaskedAutoencoder() = default;
    MaskedAutoencoder(ModelConfig c, MaeParams<S> p) : cfg(std::move(c)), params(std::move(p)) { cfg.validate(); }

    static MaskedAutoencoder init(const ModelConfig& c, std::uint64_t seed) {
        Rng rng(seed);
        return MaskedAutoencoder(c, MaeParams<S>::init(c, rng));
    }

    int grid_side(const Tile& t) const {
        if (t.height() != t.width()) fail(ErrorCode::IndivisibleTile, "tile must be square");
        if (t.height() % cfg.patch_size) fail(ErrorCode::IndivisibleTile, "tile not divisible by patch size");
        return t.height() / cfg.patch_size;
    }

    PatchGrid<S> patchify(const Tile& tile) const {
        PatchGrid<S> g;
        g.grid_side = grid_side(tile);
        g.n_positions = g.grid_side * g.grid_side;
        g.n_channels = tile.num_channels();
        g.tokens = params.patch.forward(extract_patches<S>(tile, cfg.patch_size));
        for (int c = 0; c < g.n_channels; ++c)
            for (int p = 0; p < g.n_positions; ++p) {
                g.channel_of.push_back(c);
                g.pos_of.push_back({p / g.grid_side, p % g.grid_side});
            }
        return g;
    }

    /// Encoder over an already embedded token sequence (sinusoidal positions
    /// not yet added). Returns the normalised latents, one per token.
    Mat<S> encode(const Mat<S>& tokens, const std::vector<GridPos>& pos, int grid_side_) const {
        if (tokens.rows() == 0) fail(ErrorCode::EmptySequence, "encoder received no tokens");
        const Mat<S> table = sinusoidal_positions<S>(grid_side_, cfg.enc_dim);
        Mat<S> x = tokens;
        for (std::size_t t = 0; t < pos.size(); ++t) x.row(t) += table.row(pos[t].row * grid_side_ + pos[t].col);
        const RopeTable<S> rope(pos, cfg.enc_dim / cfg.enc_heads, cfg.rope_base);
        for (const auto& b : params.encoder) x = block_forward<S>(b, x, rope, cfg.enc_heads, nullptr);
        return params.enc_norm.forward(x);
    }

    /// Inference representation: all N*C tokens through the encoder, then the
    /// mean over tokens. Expects a normalised tile.
    Eigen::Matrix<S, 1, Eigen::Dynamic> embed_tile(const Tile& tile) const {
        const PatchGrid<S> g = patchify(tile);
        const Mat<S> latent = encode(g.tokens, g.pos_of, g.grid_side);
        return latent.colwise().mean();
    }

    /// Per-token latents for the full unmasked tile.
    Mat<S> encode_tile(const Tile& tile) const {
        const PatchGrid<S> g = patchify(tile);
        return encode(g.tokens, g.pos_of, g.grid_side);
    }

    struct ChannelEmbeddings {
        std::map<ChannelId, Eigen::Matrix<S, 1, Eigen::Dynamic>> mean;  // batch mean of decoder-width tokens
        std::map<ChannelId, Eigen::Matrix<S, 1, Eigen::Dynamic>> embedding;
        std::map<ChannelId, std::size_t> count;
    };

    /// embedding(c) = mean(tokens of channel c across the batch) * W + b.
    ChannelEmbeddings make_channel_embeddings(const std::vector<const Mat<S>*>& tokens,
                                              const std::vector<std::vector<ChannelId>>& channel_of) const {
        ChannelEmbeddings ce;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            for (Eigen::Index r = 0; r < tokens[i]->rows(); ++r) {
                const auto& id = channel_of[i][r];
                auto it = ce.mean.find(id);
                if (it == ce.mean.end()) it = ce.mean.emplace(id, Eigen::Matrix<S, 1, Eigen::Dynamic>::Zero(tokens[i]->cols())).first;
                it->second += tokens[i]->row(r);
                ++ce.count[id];
            }
        }
        for (auto& [id, m] : ce.mean) {
            if (ce.count[id] == 0) fail(ErrorCode::EmptyChannel, "channel " + id.name + " has no tokens");
            m /= static_cast<S>(ce.count[id]);
            ce.embedding[id] = m * params.channel.w + params.channel.b;
        }
        return ce;
    }

    struct Sample {
        const Tile* tile = nullptr;  // normalised input and reconstruction target
        MaskSpec mask;
    };

    struct Result {
        S loss = 0;
        std::vector<S> per_sample;
        std::vector<std::vector<objective::Plane<S>>> reconstructions;
    };

    /// Masked forward pass over a batch, optionally followed by backward.
    /// The batch loss is the mean per-sample loss; gradients are accumulated
    /// into `grads` when given. Stochastic depth draws come from `drop_rng`.
    Result forward_backward(const std::vector<Sample>& batch, const objective::LossWeights& weights, MaeParams<S>* grads,
                            Rng* drop_rng = nullptr, bool keep_reconstructions = false) const {
        if (batch.empty()) fail(ErrorCode::EmptySequence, "empty batch");
        weights.validate();
        const std::size_t n = batch.size();
        const int P = cfg.patch_size;
        const int dh_enc = cfg.enc_dim / cfg.enc_heads, dh_dec = cfg.dec_dim / cfg.dec_heads;

        struct TileState {
            int side = 0, n_pos = 0, channels = 0;
            Mat<S> patches_vis;
            std::vector<GridPos> vis_pos;
            std::vector<int> vis_channel;
            std::vector<ChannelId> vis_channel_id;
            RopeTable<S> enc_rope;
            std::vector<BlockCache<S>> enc_cache;
            typename nn::LayerNorm<S>::Cache enc_norm_cache;
            Mat<S> latent;
            Mat<S> z;  // projected to decoder width
            std::vector<int> slot_of_visible;  // full-sequence row of each visible token
            RopeTable<S> dec_rope;
            std::vector<BlockCache<S>> dec_cache;
            typename nn::LayerNorm<S>::Cache dec_norm_cache;
            Mat<S> dec_out;
            Mat<S> dec_in_rows;  // unused placeholder for symmetry
        };
        std::vector<TileState> st(n);
        const bool train = grads != nullptr;

        // Encoder, per sample.
        for (std::size_t i = 0; i < n; ++i) {
            const Tile& tile = *batch[i].tile;
            auto& s = st[i];
            s.side = grid_side(tile);
            s.n_pos = s.side * s.side;
            s.channels = tile.num_channels();
            const MaskSpec& m = batch[i].mask;
            if (m.n_positions != s.n_pos || m.n_channels() != s.channels)
                fail(ErrorCode::ShapeMismatch, "mask does not match tile");
            const Mat<S> all_patches = extract_patches<S>(tile, P);
            s.patches_vis.resize(static_cast<Eigen::Index>(m.visible_count()), P * P);
            Eigen::Index row = 0;
            for (int c = 0; c < s.channels; ++c)
                for (int p : m.visible[c]) {
                    s.patches_vis.row(row++) = all_patches.row(static_cast<Eigen::Index>(c) * s.n_pos + p);
                    s.vis_pos.push_back({p / s.side, p % s.side});
                    s.vis_channel.push_back(c);
                    s.vis_channel_id.push_back(tile.channels()[c]);
                    s.slot_of_visible.push_back(c * s.n_pos + p);
                }
            if (s.patches_vis.rows() == 0) fail(ErrorCode::EmptySequence, "all tokens masked");
            const Mat<S> table = sinusoidal_positions<S>(s.side, cfg.enc_dim);
            Mat<S> x = params.patch.forward(s.patches_vis);
            for (std::size_t t = 0; t < s.vis_pos.size(); ++t) x.row(t) += table.row(s.vis_pos[t].row * s.side + s.vis_pos[t].col);
            s.enc_rope = RopeTable<S>(s.vis_pos, dh_enc, cfg.rope_base);
            s.enc_cache.resize(params.encoder.size());
            for (std::size_t b = 0; b < params.encoder.size(); ++b) {
                S s1 = 1, s2 = 1;
                if (train && drop_rng && cfg.drop_path_rate > 0) {
                    const S keep = static_cast<S>(1.0 / (1.0 - cfg.drop_path_rate));
                    s1 = drop_rng->bernoulli(cfg.drop_path_rate) ? S(0) : keep;
                    s2 = drop_rng->bernoulli(cfg.drop_path_rate) ? S(0) : keep;
                }
                x = block_forward(params.encoder[b], x, s.enc_rope, cfg.enc_heads, train ? &s.enc_cache[b] : nullptr, s1, s2);
            }
            s.latent = params.enc_norm.forward(x, train ? &s.enc_norm_cache : nullptr);
            s.z = params.enc_to_dec.forward(s.latent);
        }

        // Channel embeddings from the whole batch.
        std::vector<const Mat<S>*> zs;
        std::vector<std::vector<ChannelId>> ids;
        for (auto& s : st) {
            zs.push_back(&s.z);
            ids.push_back(s.vis_channel_id);
        }
        const ChannelEmbeddings ce = make_channel_embeddings(zs, ids);

        Result res;
        res.per_sample.resize(n);
        std::map<ChannelId, Eigen::Matrix<S, 1, Eigen::Dynamic>> d_embedding;
        std::vector<Mat<S>> dz(n);

        // Decoder and loss, per sample.
        for (std::size_t i = 0; i < n; ++i) {
            const Tile& tile = *batch[i].tile;
            auto& s = st[i];
            const Eigen::Index total = static_cast<Eigen::Index>(s.channels) * s.n_pos;
            const Mat<S> table = sinusoidal_positions<S>(s.side, cfg.dec_dim);
            Mat<S> x(total, cfg.dec_dim);
            for (Eigen::Index r = 0; r < total; ++r) x.row(r) = params.mask_token.row(0);
            for (std::size_t t = 0; t < s.slot_of_visible.size(); ++t) x.row(s.slot_of_visible[t]) = s.z.row(t);
            std::vector<GridPos> pos;
            for (int c = 0; c < s.channels; ++c) {
                const auto& emb = ce.embedding.at(tile.channels()[c]);
                for (int p = 0; p < s.n_pos; ++p) {
                    const Eigen::Index r = static_cast<Eigen::Index>(c) * s.n_pos + p;
                    x.row(r) += table.row(p) + emb;
                    pos.push_back({p / s.side, p % s.side});
                }
            }
            s.dec_rope = RopeTable<S>(pos, dh_dec, cfg.rope_base);
            s.dec_cache.resize(params.decoder.size());
            for (std::size_t b = 0; b < params.decoder.size(); ++b)
                x = block_forward(params.decoder[b], x, s.dec_rope, cfg.dec_heads, train ? &s.dec_cache[b] : nullptr);
            s.dec_out = params.dec_norm.forward(x, train ? &s.dec_norm_cache : nullptr);
            const Mat<S> pred_tokens = params.head.forward(s.dec_out);
            auto pred = assemble_patches<S>(pred_tokens, s.channels, tile.height(), tile.width(), P);
            auto target = tile_planes<S>(tile);
            std::vector<objective::Plane<S>> pixel_mask;
            if (cfg.loss_on_masked_only) {
                // Visible patches take the target value, so only masked patches
                // contribute to the loss and receive gradient.
                const MaskSpec& m = batch[i].mask;
                for (int c = 0; c < s.channels; ++c) {
                    objective::Plane<S> pm = objective::Plane<S>::Zero(tile.height(), tile.width());
                    for (int p : m.masked[c]) pm.block((p / s.side) * P, (p % s.side) * P, P, P).setOnes();
                    pred[c] = (pm.array() * pred[c].array() + (S(1) - pm.array()) * target[c].array()).matrix();
                    pixel_mask.push_back(std::move(pm));
                }
            }
            auto lr = objective::total_loss<S>(target, pred, weights, train);
            res.per_sample[i] = lr.loss;
            res.loss += lr.loss / static_cast<S>(n);
            if (keep_reconstructions) res.reconstructions.push_back(std::move(pred));
            if (!train) continue;

            Mat<S> dpred_tokens(total, P * P);
            {
                for (auto& g : lr.grad) g /= static_cast<S>(n);
                if (cfg.loss_on_masked_only)
                    for (int c = 0; c < s.channels; ++c) lr.grad[c] = (lr.grad[c].array() * pixel_mask[c].array()).matrix();
                dpred_tokens = extract_patch_grads(lr.grad, s.side);
            }
            Mat<S> dx = params.head.backward(s.dec_out, dpred_tokens, grads->head);
            dx = params.dec_norm.backward(s.dec_norm_cache, dx, grads->dec_norm);
            for (std::size_t b = params.decoder.size(); b-- > 0;)
                dx = block_backward(params.decoder[b], s.dec_cache[b], s.dec_rope, cfg.dec_heads, dx, grads->decoder[b]);
            // Split the decoder-input gradient over its sources.
            std::vector<char> visible(static_cast<std::size_t>(total), 0);
            for (int slot : s.slot_of_visible) visible[slot] = 1;
            for (Eigen::Index r = 0; r < total; ++r)
                if (!visible[r]) grads->mask_token += dx.row(r);
            for (int c = 0; c < s.channels; ++c) {
                const auto& id = tile.channels()[c];
                auto it = d_embedding.find(id);
                if (it == d_embedding.end()) it = d_embedding.emplace(id, Eigen::Matrix<S, 1, Eigen::Dynamic>::Zero(cfg.dec_dim)).first;
                it->second += dx.middleRows(static_cast<Eigen::Index>(c) * s.n_pos, s.n_pos).colwise().sum();
            }
            dz[i].resize(s.z.rows(), s.z.cols());
            for (std::size_t t = 0; t < s.slot_of_visible.size(); ++t) dz[i].row(t) = dx.row(s.slot_of_visible[t]);
        }
        if (!train) return res;

        // Channel-embedding map and the batch means feeding it.
        std::map<ChannelId, Eigen::Matrix<S, 1, Eigen::Dynamic>> d_mean;
        for (const auto& [id, de] : d_embedding) {
            grads->channel.w.noalias() += ce.mean.at(id).transpose() * de;
            grads->channel.b += de;
            d_mean[id] = (de * params.channel.w.transpose()) / static_cast<S>(ce.count.at(id));
        }

        // Encoder backward, per sample.
        for (std::size_t i = 0; i < n; ++i) {
            auto& s = st[i];
            for (Eigen::Index t = 0; t < dz[i].rows(); ++t) dz[i].row(t) += d_mean.at(s.vis_channel_id[t]);
            Mat<S> dx = params.enc_to_dec.backward(s.latent, dz[i], grads->enc_to_dec);
            dx = params.enc_norm.backward(s.enc_norm_cache, dx, grads->enc_norm);
            for (std::size_t b = params.encoder.size(); b-- > 0;)
                dx = block_backward(params.encoder[b], s.enc_cache[b], s.enc_rope, cfg.enc_heads, dx, grads->encoder[b]);
            params.patch.backward(s.patches_vis, dx, grads->patch);
        }
        return res;
    }

private:
    Mat<S> extract_patch_grads(const std::vector<objective::Plane<S>>& planes, int side) const {
        const int P = cfg.patch_size;
        const int channels = static_cast<int>(planes.size());
        Mat<S> out(static_cast<Eigen::Index>(channels) * side * side, P * P);
        for (int c = 0; c < channels; ++c)
            for (int gy = 0; gy < side; ++gy)
                for (int gx = 0; gx < side; ++gx) {
                    const Eigen::Index row = (static_cast<Eigen::Index>(c) * side + gy) * side + gx;
                    for (int y = 0; y < P; ++y)
                        for (int x = 0; x < P; ++x) out(row, y * P + x) = planes[c](gy * P + y, gx * P + x);
                }
        return out;
    }
};

}  // namespace campfire
