#ifndef IDPATCH_NN_HPP
#define IDPATCH_NN_HPP

#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "idpatch/graph.hpp"
#include "idpatch/rng.hpp"

namespace idpatch::nn {

// Registry of named parameters. Uses a deque so parameter addresses stay
// stable; graphs memoize leaves by address.
template <typename T>
class ParamSetT {
public:
    ParamT<T>& add(const std::string& name, std::vector<int> shape) {
        params_.emplace_back(name, TensorT<T>(std::move(shape)));
        return params_.back();
    }

    ParamT<T>& add_normal(const std::string& name, std::vector<int> shape, Rng& rng, double std) {
        ParamT<T>& p = add(name, std::move(shape));
        for (size_t i = 0; i < p.value.numel(); i++)
            p.value[i] = static_cast<T>(rng.normal() * std);
        return p;
    }

    ParamT<T>& add_const(const std::string& name, std::vector<int> shape, T v) {
        ParamT<T>& p = add(name, std::move(shape));
        p.value.fill(v);
        return p;
    }

    ParamT<T>* find(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    size_t size() const { return params_.size(); }
    size_t total_elements() const {
        size_t n = 0;
        for (auto& p : params_) n += p.numel();
        return n;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    ParamT<T>& operator[](size_t i) { return params_[i]; }
    const ParamT<T>& operator[](size_t i) const { return params_[i]; }

private:
    std::deque<ParamT<T>> params_;
};

// fan-in scaled init, the default for every weight matrix/kernel here
inline double fanin_std(int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

template <typename T>
struct LinearT {
    ParamT<T>* w = nullptr;
    ParamT<T>* b = nullptr;

    void build(ParamSetT<T>& ps, const std::string& name, int in, int out, Rng& rng,
               double std_scale = 1.0) {
        w = &ps.add_normal(name + ".w", {out, in}, rng, fanin_std(in) * std_scale);
        b = &ps.add_const(name + ".b", {out}, T(0));
    }
    void build_zero(ParamSetT<T>& ps, const std::string& name, int in, int out) {
        w = &ps.add_const(name + ".w", {out, in}, T(0));
        b = &ps.add_const(name + ".b", {out}, T(0));
    }
    NodeRef<T> fwd(GraphT<T>& g, NodeRef<T> x) const {
        return ops::linear(g, x, g.leaf(*w), g.leaf(*b));
    }
};

template <typename T>
struct Conv2dT {
    ParamT<T>* w = nullptr;
    ParamT<T>* b = nullptr;
    int stride = 1, pad = 1;

    void build(ParamSetT<T>& ps, const std::string& name, int cin, int cout, int k, Rng& rng,
               int stride_ = 1, int pad_ = -1, double std_scale = 1.0) {
        stride = stride_;
        pad    = pad_ < 0 ? k / 2 : pad_;
        w = &ps.add_normal(name + ".w", {cout, cin, k, k}, rng, fanin_std(cin * k * k) * std_scale);
        b = &ps.add_const(name + ".b", {cout}, T(0));
    }
    void build_zero(ParamSetT<T>& ps, const std::string& name, int cin, int cout, int k,
                    int stride_ = 1, int pad_ = -1) {
        stride = stride_;
        pad    = pad_ < 0 ? k / 2 : pad_;
        w      = &ps.add_const(name + ".w", {cout, cin, k, k}, T(0));
        b      = &ps.add_const(name + ".b", {cout}, T(0));
    }
    NodeRef<T> fwd(GraphT<T>& g, NodeRef<T> x) const {
        return ops::conv2d(g, x, g.leaf(*w), g.leaf(*b), stride, pad);
    }
};

template <typename T>
struct GroupNormT {
    ParamT<T>* gamma = nullptr;
    ParamT<T>* beta  = nullptr;
    int groups       = 8;

    void build(ParamSetT<T>& ps, const std::string& name, int channels, int groups_ = 8) {
        groups = groups_;
        gamma  = &ps.add_const(name + ".g", {channels}, T(1));
        beta   = &ps.add_const(name + ".b", {channels}, T(0));
    }
    NodeRef<T> fwd(GraphT<T>& g, NodeRef<T> x) const {
        return ops::group_norm(g, x, g.leaf(*gamma), g.leaf(*beta), groups);
    }
};

template <typename T>
struct LayerNormT {
    ParamT<T>* gamma = nullptr;
    ParamT<T>* beta  = nullptr;

    void build(ParamSetT<T>& ps, const std::string& name, int dim) {
        gamma = &ps.add_const(name + ".g", {dim}, T(1));
        beta  = &ps.add_const(name + ".b", {dim}, T(0));
    }
    NodeRef<T> fwd(GraphT<T>& g, NodeRef<T> x) const {
        return ops::layer_norm(g, x, g.leaf(*gamma), g.leaf(*beta));
    }
};

// Pre-norm cross-attention with residual: tokens attend into ctx.
template <typename T>
struct CrossAttentionT {
    LayerNormT<T> norm_q, norm_ctx;
    LinearT<T> q, k, v, o;
    int heads = 4;

    void build(ParamSetT<T>& ps, const std::string& name, int dim, int ctx_dim, int heads_,
               Rng& rng) {
        heads = heads_;
        norm_q.build(ps, name + ".ln_q", dim);
        norm_ctx.build(ps, name + ".ln_ctx", ctx_dim);
        q.build(ps, name + ".q", dim, dim, rng);
        k.build(ps, name + ".k", ctx_dim, dim, rng);
        v.build(ps, name + ".v", ctx_dim, dim, rng);
        o.build(ps, name + ".o", dim, dim, rng);
    }
    // tokens:[n,dim] ctx:[m,ctx_dim] -> [n,dim]
    NodeRef<T> fwd(GraphT<T>& g, NodeRef<T> tokens, NodeRef<T> ctx) const {
        auto qn = norm_q.fwd(g, tokens);
        auto cn = norm_ctx.fwd(g, ctx);
        auto a  = ops::mha(g, q.fwd(g, qn), k.fwd(g, cn), v.fwd(g, cn), heads);
        return ops::add(g, tokens, o.fwd(g, a));
    }
};

// GN -> SiLU -> conv3x3 -> FiLM(time) with residual; channel count preserved.
template <typename T>
struct ConvBlockT {
    GroupNormT<T> norm;
    Conv2dT<T> conv;
    LinearT<T> time_proj;  // temb -> [scale, shift], zero-init so FiLM starts as identity

    void build(ParamSetT<T>& ps, const std::string& name, int channels, int temb_dim, Rng& rng) {
        norm.build(ps, name + ".norm", channels, std::min(8, channels));
        conv.build(ps, name + ".conv", channels, channels, 3, rng);
        time_proj.build_zero(ps, name + ".time", temb_dim, 2 * channels);
    }
    NodeRef<T> fwd(GraphT<T>& g, NodeRef<T> x, NodeRef<T> temb) const {
        auto h = conv.fwd(g, ops::silu(g, norm.fwd(g, x)));
        h      = ops::film(g, h, time_proj.fwd(g, temb));
        return ops::add(g, x, h);
    }
};

// Decoder fuse block: GN -> SiLU -> conv3x3 (2C -> C) -> FiLM(time).
template <typename T>
struct FuseBlockT {
    GroupNormT<T> norm;
    Conv2dT<T> conv;
    LinearT<T> time_proj;

    void build(ParamSetT<T>& ps, const std::string& name, int cin, int cout, int temb_dim,
               Rng& rng) {
        norm.build(ps, name + ".norm", cin, std::min(8, cin));
        conv.build(ps, name + ".conv", cin, cout, 3, rng);
        time_proj.build_zero(ps, name + ".time", temb_dim, 2 * cout);
    }
    NodeRef<T> fwd(GraphT<T>& g, NodeRef<T> x, NodeRef<T> temb) const {
        auto h = conv.fwd(g, ops::silu(g, norm.fwd(g, x)));
        return ops::film(g, h, time_proj.fwd(g, temb));
    }
};

// Cross-attention applied to a [C,H,W] feature map against token context.
template <typename T>
struct SpatialAttnT {
    CrossAttentionT<T> attn;

    void build(ParamSetT<T>& ps, const std::string& name, int channels, int ctx_dim, int heads,
               Rng& rng) {
        attn.build(ps, name, channels, ctx_dim, heads, rng);
    }
    NodeRef<T> fwd(GraphT<T>& g, NodeRef<T> x, NodeRef<T> ctx) const {
        const int c = x->val().dim(0), h = x->val().dim(1), w = x->val().dim(2);
        auto t  = ops::transpose2(g, ops::reshape(g, x, {c, h * w}));
        auto t2 = attn.fwd(g, t, ctx);
        return ops::reshape(g, ops::transpose2(g, t2), {c, h, w});
    }
};

// Decoupled weight decay Adam with cosine learning-rate decay.
template <typename T>
class AdamWT {
public:
    struct Options {
        double lr           = 1e-4;
        double beta1        = 0.9;
        double beta2        = 0.999;
        double eps          = 1e-8;
        double weight_decay = 0.01;
        int total_steps     = 0;  // >0 enables cosine decay to lr_min
        double lr_min_frac  = 0.1;
    };

    AdamWT(ParamSetT<T>& params, Options opt) : params_(&params), opt_(opt) {
        slots_.resize(params.size());
        for (size_t i = 0; i < params.size(); i++) {
            slots_[i].m = TensorT<T>(params[i].value.shape());
            slots_[i].v = TensorT<T>(params[i].value.shape());
        }
    }

    double lr_at(int64_t step) const {
        if (opt_.total_steps <= 0) return opt_.lr;
        const double f = std::min(1.0, static_cast<double>(step) / opt_.total_steps);
        const double c = 0.5 * (1.0 + std::cos(3.14159265358979323846 * f));
        return opt_.lr * (opt_.lr_min_frac + (1.0 - opt_.lr_min_frac) * c);
    }

    // grads[i] pairs with (*params_)[i]; empty tensor means no gradient.
    void step(const std::vector<TensorT<T>>& grads) {
        t_++;
        const double lr    = lr_at(t_ - 1);
        const double bc1   = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2   = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_->size(); i++) {
            ParamT<T>& p = (*params_)[i];
            if (!p.trainable || grads[i].empty()) continue;
            auto& s = slots_[i];
            for (size_t j = 0; j < p.value.numel(); j++) {
                const double gj = static_cast<double>(grads[i][j]);
                const double mj = opt_.beta1 * s.m[j] + (1.0 - opt_.beta1) * gj;
                const double vj = opt_.beta2 * s.v[j] + (1.0 - opt_.beta2) * gj * gj;
                s.m[j]          = static_cast<T>(mj);
                s.v[j]          = static_cast<T>(vj);
                const double mh = mj / bc1;
                const double vh = vj / bc2;
                double w = static_cast<double>(p.value[j]);
                w -= lr * (mh / (std::sqrt(vh) + opt_.eps) + opt_.weight_decay * w);
                p.value[j] = static_cast<T>(w);
            }
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    struct Slot {
        TensorT<T> m, v;
    };
    ParamSetT<T>* params_;
    Options opt_;
    std::vector<Slot> slots_;
    int64_t t_ = 0;
};

}  // namespace idpatch::nn

#endif  // IDPATCH_NN_HPP
