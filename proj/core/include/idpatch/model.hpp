#ifndef IDPATCH_MODEL_HPP
#define IDPATCH_MODEL_HPP

#include <array>
#include <optional>
#include <string>

#include "idpatch/diffusion.hpp"
#include "idpatch/errors.hpp"
#include "idpatch/nn.hpp"
#include "idpatch/synthid.hpp"

namespace idpatch {

struct ModelConfig {
    int feature_dim = 64;   // identity feature dimension
    int d_text      = 128;  // token embedding width
    int d_model     = 64;   // resampler latent width
    int m_tokens    = 16;   // latents per identity == ID tokens per identity
    int n_in_tokens = 4;    // feature tokens fed to the resampler
    int patch_size  = 16;
    int text_len    = 8;    // L text tokens per caption label
    int n_labels    = 6;
    int img_size    = 128;
    std::array<int, 3> widths = {32, 64, 128};
    int heads           = 4;
    int timesteps       = 256;
    double beta_min     = 1e-3;
    double beta_max     = 0.03;
    int temb_dim        = 128;
    int resampler_depth = 2;

    void validate() const;
    uint64_t hash() const;
    std::string to_json_string() const;
    static ModelConfig from_json_string(const std::string& s);
    bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Perceiver-style resampler with two output heads. Learned latent queries
// cross-attend into tokens derived from the identity feature; the shared
// trunk output feeds both the patch head and the token head.
// ---------------------------------------------------------------------------
template <typename T>
struct ResamplerT {
    struct Block {
        nn::CrossAttentionT<T> attn;
        nn::LayerNormT<T> ff_norm;
        nn::LinearT<T> ff1, ff2;
    };

    ModelConfig cfg;
    ParamT<T>* latents = nullptr;
    nn::LinearT<T> in_proj;
    std::vector<Block> blocks;
    nn::LayerNormT<T> final_norm;
    nn::LinearT<T> patch_head;
    nn::LinearT<T> token_head;

    void build(nn::ParamSetT<T>& ps, const std::string& prefix, const ModelConfig& c, Rng& rng) {
        cfg     = c;
        latents = &ps.add_normal(prefix + ".latents", {c.m_tokens, c.d_model}, rng, 0.02);
        in_proj.build(ps, prefix + ".in_proj", c.feature_dim, c.n_in_tokens * c.d_model, rng);
        blocks.resize(c.resampler_depth);
        for (int i = 0; i < c.resampler_depth; i++) {
            const std::string name = prefix + ".blk" + std::to_string(i);
            blocks[i].attn.build(ps, name + ".attn", c.d_model, c.d_model, c.heads, rng);
            blocks[i].ff_norm.build(ps, name + ".ff_norm", c.d_model);
            blocks[i].ff1.build(ps, name + ".ff1", c.d_model, 4 * c.d_model, rng);
            blocks[i].ff2.build(ps, name + ".ff2", 4 * c.d_model, c.d_model, rng);
        }
        final_norm.build(ps, prefix + ".final_norm", c.d_model);
        patch_head.build(ps, prefix + ".patch_head", c.m_tokens * c.d_model,
                         3 * c.patch_size * c.patch_size, rng);
        token_head.build(ps, prefix + ".token_head", c.d_model, c.d_text, rng);
    }

    // f:[1,D] -> latent block [M, d_model]
    NodeRef<T> trunk(GraphT<T>& g, NodeRef<T> f) const {
        if (f->val().rank() != 2 || f->val().dim(1) != cfg.feature_dim)
            throw ShapeError("resampler: feature dim mismatch, got " + f->val().shape_str());
        auto in_tok = ops::reshape(g, in_proj.fwd(g, f), {cfg.n_in_tokens, cfg.d_model});
        auto lat    = g.leaf(*latents);
        for (const auto& blk : blocks) {
            lat     = blk.attn.fwd(g, lat, in_tok);
            auto h  = blk.ff2.fwd(g, ops::silu(g, blk.ff1.fwd(g, blk.ff_norm.fwd(g, lat))));
            lat     = ops::add(g, lat, h);
        }
        return final_norm.fwd(g, lat);
    }

    // [M, d_model] -> [3, P, P] in [-1,1]
    NodeRef<T> patch(GraphT<T>& g, NodeRef<T> trunk_out) const {
        auto flat = ops::reshape(g, trunk_out, {1, cfg.m_tokens * cfg.d_model});
        auto px   = ops::tanh_act(g, patch_head.fwd(g, flat));
        return ops::reshape(g, px, {3, cfg.patch_size, cfg.patch_size});
    }

    // [M, d_model] -> [M, d_text]
    NodeRef<T> tokens(GraphT<T>& g, NodeRef<T> trunk_out) const {
        return token_head.fwd(g, trunk_out);
    }
};

// ---------------------------------------------------------------------------
// 3-level UNet, eps-prediction. Cross-attention sits at the two lowest
// resolutions (mid and the middle decoder level).
// ---------------------------------------------------------------------------
template <typename T>
struct UNetT {
    ModelConfig cfg;
    nn::LinearT<T> time_mlp1, time_mlp2;
    nn::Conv2dT<T> stem;
    nn::ConvBlockT<T> enc0, enc1, enc2;
    nn::Conv2dT<T> down0, down1;
    nn::ConvBlockT<T> mid_block;
    nn::SpatialAttnT<T> mid_attn;
    nn::FuseBlockT<T> dec2, dec1, dec0;
    nn::ConvBlockT<T> dec1b, dec0b;  // refinement at the two finest levels
    nn::SpatialAttnT<T> attn1;
    nn::Conv2dT<T> up1, up0;
    nn::GroupNormT<T> out_norm;
    nn::Conv2dT<T> out_conv;

    static constexpr int kSinDim = 64;

    void build(nn::ParamSetT<T>& ps, const std::string& p, const ModelConfig& c, Rng& rng) {
        cfg = c;
        const auto [c0, c1, c2] = std::tuple{c.widths[0], c.widths[1], c.widths[2]};
        time_mlp1.build(ps, p + ".time1", kSinDim, c.temb_dim, rng);
        time_mlp2.build(ps, p + ".time2", c.temb_dim, c.temb_dim, rng);
        stem.build(ps, p + ".stem", 3, c0, 3, rng);
        enc0.build(ps, p + ".enc0", c0, c.temb_dim, rng);
        down0.build(ps, p + ".down0", c0, c1, 3, rng, 2);
        enc1.build(ps, p + ".enc1", c1, c.temb_dim, rng);
        down1.build(ps, p + ".down1", c1, c2, 3, rng, 2);
        enc2.build(ps, p + ".enc2", c2, c.temb_dim, rng);
        mid_block.build(ps, p + ".mid", c2, c.temb_dim, rng);
        mid_attn.build(ps, p + ".mid_attn", c2, c.d_text, c.heads, rng);
        dec2.build(ps, p + ".dec2", 2 * c2, c2, c.temb_dim, rng);
        up1.build(ps, p + ".up1", c2, c1, 1, rng, 1, 0);
        dec1.build(ps, p + ".dec1", 2 * c1, c1, c.temb_dim, rng);
        dec1b.build(ps, p + ".dec1b", c1, c.temb_dim, rng);
        attn1.build(ps, p + ".attn1", c1, c.d_text, c.heads, rng);
        up0.build(ps, p + ".up0", c1, c0, 1, rng, 1, 0);
        dec0.build(ps, p + ".dec0", 2 * c0, c0, c.temb_dim, rng);
        dec0b.build(ps, p + ".dec0b", c0, c.temb_dim, rng);
        out_norm.build(ps, p + ".out_norm", c0, std::min(8, c0));
        out_conv.build_zero(ps, p + ".out_conv", c0, 3, 3);
    }

    NodeRef<T> time_embed(GraphT<T>& g, int t) const {
        auto sin = g.input(diffusion::sinusoidal_embedding<T>(t, kSinDim));
        return time_mlp2.fwd(g, ops::silu(g, time_mlp1.fwd(g, sin)));
    }

    // ctrl holds the zero-conv residuals injected after each encoder level
    // and after the mid block.
    NodeRef<T> forward(GraphT<T>& g, NodeRef<T> x, NodeRef<T> temb, NodeRef<T> ctx,
                       const std::array<NodeRef<T>, 4>* ctrl) const {
        auto h0 = enc0.fwd(g, stem.fwd(g, x), temb);
        if (ctrl) h0 = ops::add(g, h0, (*ctrl)[0]);
        auto h1 = enc1.fwd(g, down0.fwd(g, h0), temb);
        if (ctrl) h1 = ops::add(g, h1, (*ctrl)[1]);
        auto h2 = enc2.fwd(g, down1.fwd(g, h1), temb);
        if (ctrl) h2 = ops::add(g, h2, (*ctrl)[2]);
        auto m = mid_block.fwd(g, h2, temb);
        if (ctx) m = mid_attn.fwd(g, m, ctx);
        if (ctrl) m = ops::add(g, m, (*ctrl)[3]);
        auto d2 = dec2.fwd(g, ops::concat_channels(g, m, h2), temb);
        auto u1 = up1.fwd(g, ops::upsample_nearest2(g, d2));
        auto d1 = dec1.fwd(g, ops::concat_channels(g, u1, h1), temb);
        if (ctx) d1 = attn1.fwd(g, d1, ctx);
        d1      = dec1b.fwd(g, d1, temb);
        auto u0 = up0.fwd(g, ops::upsample_nearest2(g, d1));
        auto d0 = dec0.fwd(g, ops::concat_channels(g, u0, h0), temb);
        d0      = dec0b.fwd(g, d0, temb);
        return out_conv.fwd(g, ops::silu(g, out_norm.fwd(g, d0)));
    }
};

// ---------------------------------------------------------------------------
// Trainable copy of the UNet encoder driven by the conditioning image.
// Output projections are zero convolutions, so a fresh model ignores the
// conditioning input exactly.
// ---------------------------------------------------------------------------
template <typename T>
struct ControlBranchT {
    ModelConfig cfg;
    nn::Conv2dT<T> stem_z, stem_hint;
    nn::ConvBlockT<T> enc0, enc1, enc2;
    nn::Conv2dT<T> down0, down1;
    nn::ConvBlockT<T> mid_block;
    nn::SpatialAttnT<T> mid_attn;
    nn::Conv2dT<T> zc0, zc1, zc2, zc_mid;

    void build(nn::ParamSetT<T>& ps, const std::string& p, const ModelConfig& c, Rng& rng) {
        cfg = c;
        const auto [c0, c1, c2] = std::tuple{c.widths[0], c.widths[1], c.widths[2]};
        stem_z.build(ps, p + ".stem_z", 3, c0, 3, rng);
        stem_hint.build(ps, p + ".stem_hint", 3, c0, 3, rng);
        enc0.build(ps, p + ".enc0", c0, c.temb_dim, rng);
        down0.build(ps, p + ".down0", c0, c1, 3, rng, 2);
        enc1.build(ps, p + ".enc1", c1, c.temb_dim, rng);
        down1.build(ps, p + ".down1", c1, c2, 3, rng, 2);
        enc2.build(ps, p + ".enc2", c2, c.temb_dim, rng);
        mid_block.build(ps, p + ".mid", c2, c.temb_dim, rng);
        mid_attn.build(ps, p + ".mid_attn", c2, c.d_text, c.heads, rng);
        zc0.build_zero(ps, p + ".zc0", c0, c0, 1, 1, 0);
        zc1.build_zero(ps, p + ".zc1", c1, c1, 1, 1, 0);
        zc2.build_zero(ps, p + ".zc2", c2, c2, 1, 1, 0);
        zc_mid.build_zero(ps, p + ".zc_mid", c2, c2, 1, 1, 0);
    }

    std::array<NodeRef<T>, 4> forward(GraphT<T>& g, NodeRef<T> cond, NodeRef<T> x,
                                      NodeRef<T> temb, NodeRef<T> ctx) const {
        auto h0 = enc0.fwd(g, ops::add(g, stem_z.fwd(g, x), stem_hint.fwd(g, cond)), temb);
        auto h1 = enc1.fwd(g, down0.fwd(g, h0), temb);
        auto h2 = enc2.fwd(g, down1.fwd(g, h1), temb);
        auto m  = mid_block.fwd(g, h2, temb);
        if (ctx) m = mid_attn.fwd(g, m, ctx);
        return {zc0.fwd(g, h0), zc1.fwd(g, h1), zc2.fwd(g, h2), zc_mid.fwd(g, m)};
    }
};

// Full trainable bundle: projector, denoiser, control branch and the learned
// caption-token table (row n_labels is the null row for guidance dropout).
template <typename T>
struct ModelT {
    ModelConfig cfg;
    nn::ParamSetT<T> params;
    ResamplerT<T> projector;
    UNetT<T> unet;
    ControlBranchT<T> control;
    ParamT<T>* text_table = nullptr;

    void build(const ModelConfig& c, uint64_t init_seed) {
        c.validate();
        cfg = c;
        Rng rng(mix_seed({0x6d6f64656c494e49ULL, init_seed}));
        projector.build(params, "proj", c, rng);
        unet.build(params, "unet", c, rng);
        control.build(params, "ctrl", c, rng);
        text_table = &params.add_normal("text.table", {c.n_labels + 1, c.text_len * c.d_text},
                                        rng, 0.02);
        copy_encoder_into_control();
    }

    // ControlNet-style init: the control branch starts as an exact copy of
    // the base encoder; only the hint stem and zero convs are its own.
    void copy_encoder_into_control() {
        auto cp = [](const nn::Conv2dT<T>& a, nn::Conv2dT<T>& b) {
            b.w->value = a.w->value;
            b.b->value = a.b->value;
        };
        auto cpb = [&](const nn::ConvBlockT<T>& a, nn::ConvBlockT<T>& b) {
            b.norm.gamma->value = a.norm.gamma->value;
            b.norm.beta->value  = a.norm.beta->value;
            cp(a.conv, b.conv);
            b.time_proj.w->value = a.time_proj.w->value;
            b.time_proj.b->value = a.time_proj.b->value;
        };
        auto cpl = [](const nn::LinearT<T>& a, nn::LinearT<T>& b) {
            b.w->value = a.w->value;
            b.b->value = a.b->value;
        };
        auto cpa = [&](const nn::SpatialAttnT<T>& a, nn::SpatialAttnT<T>& b) {
            b.attn.norm_q.gamma->value   = a.attn.norm_q.gamma->value;
            b.attn.norm_q.beta->value    = a.attn.norm_q.beta->value;
            b.attn.norm_ctx.gamma->value = a.attn.norm_ctx.gamma->value;
            b.attn.norm_ctx.beta->value  = a.attn.norm_ctx.beta->value;
            cpl(a.attn.q, b.attn.q);
            cpl(a.attn.k, b.attn.k);
            cpl(a.attn.v, b.attn.v);
            cpl(a.attn.o, b.attn.o);
        };
        cp(unet.stem, control.stem_z);
        cpb(unet.enc0, control.enc0);
        cp(unet.down0, control.down0);
        cpb(unet.enc1, control.enc1);
        cp(unet.down1, control.down1);
        cpb(unet.enc2, control.enc2);
        cpb(unet.mid_block, control.mid_block);
        cpa(unet.mid_attn, control.mid_attn);
    }

    // eps prediction; cond/ctx may be null. NaN inputs are rejected.
    NodeRef<T> denoise(GraphT<T>& g, NodeRef<T> x_t, int t, NodeRef<T> cond,
                       NodeRef<T> ctx) const {
        if (t < 0 || t >= cfg.timesteps) throw PreconditionError("denoise: t out of range");
        check_shape(x_t->val(), {3, cfg.img_size, cfg.img_size}, "denoise: x_t");
        if (!x_t->val().all_finite()) throw NumericalError("denoise: non-finite values in x_t");
        if (cond) check_shape(cond->val(), {3, cfg.img_size, cfg.img_size}, "denoise: cond");
        auto temb = unet.time_embed(g, t);
        if (cond) {
            auto res = control.forward(g, cond, x_t, temb, ctx);
            return unet.forward(g, x_t, temb, ctx, &res);
        }
        return unet.forward(g, x_t, temb, ctx, nullptr);
    }

    NodeRef<T> caption_tokens(GraphT<T>& g, int label) const {
        if (label < 0 || label > cfg.n_labels)
            throw PreconditionError("caption label out of range");
        return ops::embed_row(g, g.leaf(*text_table), label, cfg.text_len, cfg.d_text);
    }
    int null_label() const { return cfg.n_labels; }

    // convenience non-graph wrappers ------------------------------------

    TensorT<T> project_patch(const synthid::IdentityFeature& f) {
        GraphT<T> g;
        return projector.patch(g, projector.trunk(g, feature_node(g, f)))->val();
    }
    TensorT<T> project_tokens(const synthid::IdentityFeature& f) {
        GraphT<T> g;
        return projector.tokens(g, projector.trunk(g, feature_node(g, f)))->val();
    }
    TensorT<T> resampler_forward(const synthid::IdentityFeature& f) {
        GraphT<T> g;
        return projector.trunk(g, feature_node(g, f))->val();
    }

    NodeRef<T> feature_node(GraphT<T>& g, const synthid::IdentityFeature& f) const {
        if (f.dim() != cfg.feature_dim)
            throw ShapeError("feature dim " + std::to_string(f.dim()) + " != configured " +
                             std::to_string(cfg.feature_dim));
        TensorT<T> t({1, cfg.feature_dim});
        for (int i = 0; i < cfg.feature_dim; i++) t[i] = static_cast<T>(f.values[i]);
        return g.input(std::move(t));
    }
};

using Model = ModelT<float>;

}  // namespace idpatch

#endif  // IDPATCH_MODEL_HPP
