#ifndef IDPATCH_GRAPH_HPP
#define IDPATCH_GRAPH_HPP

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "idpatch/tensor.hpp"

namespace idpatch {

// A named, trainable tensor. Parameter values are shared across graphs
// (read-only during forward/backward); gradients live on the tape so that
// several worker threads can differentiate through the same weights.
template <typename T>
struct ParamT {
    std::string name;
    TensorT<T> value;
    bool trainable = true;

    ParamT() = default;
    ParamT(std::string n, TensorT<T> v) : name(std::move(n)), value(std::move(v)) {}
    size_t numel() const { return value.numel(); }
};

template <typename T>
struct NodeT;

template <typename T>
using NodeRef = std::shared_ptr<NodeT<T>>;

template <typename T>
struct NodeT {
    TensorT<T> value;                   // owned value (empty for param leaves)
    const TensorT<T>* external = nullptr;  // set for param leaves
    TensorT<T> grad;
    bool grad_alloc    = false;
    bool requires_grad = false;
    std::vector<NodeRef<T>> parents;
    std::function<void(NodeT<T>&)> backward_fn;

    const TensorT<T>& val() const { return external ? *external : value; }

    TensorT<T>& ensure_grad() {
        if (!grad_alloc) {
            grad       = TensorT<T>(val().shape());
            grad_alloc = true;
        }
        return grad;
    }
};

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
AlignedVec<T>& scratch_a() {
    thread_local AlignedVec<T> buf;
    return buf;
}
template <typename T>
AlignedVec<T>& scratch_b() {
    thread_local AlignedVec<T> buf;
    return buf;
}

// cols[(c*k+i)*k+j, oy*wo+ox] = x[c, oy*s+i-p, ox*s+j-p], zero outside.
template <typename T>
void im2col(const TensorT<T>& x, int k, int stride, int pad, int ho, int wo, T* cols) {
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const size_t plane = static_cast<size_t>(ho) * wo;
    for (int c = 0; c < ci; c++) {
        for (int i = 0; i < k; i++) {
            for (int j = 0; j < k; j++) {
                T* dst = cols + ((static_cast<size_t>(c) * k + i) * k + j) * plane;
                for (int oy = 0; oy < ho; oy++) {
                    const int iy = oy * stride + i - pad;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < wo; ox++) dst[oy * wo + ox] = T(0);
                        continue;
                    }
                    const T* src = &x.at3(c, iy, 0);
                    for (int ox = 0; ox < wo; ox++) {
                        const int ix       = ox * stride + j - pad;
                        dst[oy * wo + ox] = (ix < 0 || ix >= w) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

// adjoint of im2col: scatter-add columns back into the image
template <typename T>
void col2im_add(const T* cols, int k, int stride, int pad, int ho, int wo, TensorT<T>& dx) {
    const int ci = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
    const size_t plane = static_cast<size_t>(ho) * wo;
    for (int c = 0; c < ci; c++) {
        for (int i = 0; i < k; i++) {
            for (int j = 0; j < k; j++) {
                const T* src = cols + ((static_cast<size_t>(c) * k + i) * k + j) * plane;
                for (int oy = 0; oy < ho; oy++) {
                    const int iy = oy * stride + i - pad;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = &dx.at3(c, iy, 0);
                    for (int ox = 0; ox < wo; ox++) {
                        const int ix = ox * stride + j - pad;
                        if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Reverse-mode tape. Creation order is a topological order, so backward()
// is a single reverse sweep. One graph per thread; parameters are shared.
template <typename T>
class GraphT {
public:
    NodeRef<T> input(TensorT<T> v) {
        auto n   = std::make_shared<NodeT<T>>();
        n->value = std::move(v);
        nodes_.push_back(n);
        return n;
    }

    // Leaf for a parameter; memoized so every use shares one grad slot.
    NodeRef<T> leaf(ParamT<T>& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return it->second;
        auto n           = std::make_shared<NodeT<T>>();
        n->external      = &p.value;
        n->requires_grad = true;
        nodes_.push_back(n);
        param_nodes_.emplace(&p, n);
        return n;
    }

    NodeRef<T> make(TensorT<T> v, std::vector<NodeRef<T>> parents,
                    std::function<void(NodeT<T>&)> bwd) {
        auto n   = std::make_shared<NodeT<T>>();
        n->value = std::move(v);
        n->parents = std::move(parents);
        for (auto& p : n->parents)
            if (p->requires_grad) n->requires_grad = true;
        if (n->requires_grad) n->backward_fn = std::move(bwd);
        nodes_.push_back(n);
        return n;
    }

    // Seeds d(root)/d(root) = 1 and sweeps the tape once.
    void backward(const NodeRef<T>& root) {
        if (root->val().numel() != 1) throw ShapeError("backward root must be scalar");
        root->ensure_grad()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            NodeT<T>& n = **it;
            if (!n.requires_grad || !n.grad_alloc || !n.backward_fn) continue;
            n.backward_fn(n);
        }
    }

    // Gradient of the last backward() w.r.t. p, or nullptr if p was unused.
    const TensorT<T>* grad_for(const ParamT<T>& p) const {
        auto it = param_nodes_.find(const_cast<ParamT<T>*>(&p));
        if (it == param_nodes_.end() || !it->second->grad_alloc) return nullptr;
        return &it->second->grad;
    }

    size_t size() const { return nodes_.size(); }

private:
    std::vector<NodeRef<T>> nodes_;
    std::unordered_map<const void*, NodeRef<T>> param_nodes_;
};

using Graph  = GraphT<float>;
using GraphD = GraphT<double>;

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------
namespace ops {

using detail::ECMap;
using detail::EMap;
using detail::EMat;

// y = x * W^T + b;  x:[n,in]  W:[out,in]  b:[out]  ->  [n,out]
template <typename T>
NodeRef<T> linear(GraphT<T>& g, NodeRef<T> x, NodeRef<T> w, NodeRef<T> b) {
    const int n  = x->val().dim(0);
    const int in = x->val().dim(1);
    const int out = w->val().dim(0);
    if (w->val().dim(1) != in) throw ShapeError("linear: weight/input dim mismatch");
    TensorT<T> y({n, out});
    ECMap<T> xm(x->val().data(), n, in);
    ECMap<T> wm(w->val().data(), out, in);
    EMap<T> ym(y.data(), n, out);
    ym.noalias() = xm * wm.transpose();
    if (b) {
        ECMap<T> bm(b->val().data(), 1, out);
        ym.rowwise() += bm.row(0);
    }
    std::vector<NodeRef<T>> parents = b ? std::vector<NodeRef<T>>{x, w, b}
                                        : std::vector<NodeRef<T>>{x, w};
    return g.make(std::move(y), std::move(parents), [n, in, out](NodeT<T>& self) {
        auto& xp = self.parents[0];
        auto& wp = self.parents[1];
        ECMap<T> dy(self.grad.data(), n, out);
        ECMap<T> xm(xp->val().data(), n, in);
        ECMap<T> wm(wp->val().data(), out, in);
        if (xp->requires_grad) {
            EMap<T> dx(xp->ensure_grad().data(), n, in);
            dx.noalias() += dy * wm;
        }
        if (wp->requires_grad) {
            EMap<T> dw(wp->ensure_grad().data(), out, in);
            dw.noalias() += dy.transpose() * xm;
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            EMap<T> db(self.parents[2]->ensure_grad().data(), 1, out);
            db.row(0) += dy.colwise().sum();
        }
    });
}

namespace conv_detail {

using detail::ECMap;
using detail::EMap;

template <typename T>
using StridedCMap = Eigen::Map<const detail::EMat<T>, Eigen::Unaligned,
                               Eigen::OuterStride<Eigen::Dynamic>>;
template <typename T>
using StridedMap =
    Eigen::Map<detail::EMat<T>, Eigen::Unaligned, Eigen::OuterStride<Eigen::Dynamic>>;

// Copies [C,H,W] into a zero-padded [C, H+2p, W+2p] scratch plane.
template <typename T>
void pad_image(const T* x, int c, int h, int w, int pad, AlignedVec<T>& out) {
    const int hp = h + 2 * pad, wp = w + 2 * pad;
    out.assign(static_cast<size_t>(c) * hp * wp, T(0));
    for (int ch = 0; ch < c; ch++)
        for (int y = 0; y < h; y++)
            std::copy(x + (static_cast<size_t>(ch) * h + y) * w,
                      x + (static_cast<size_t>(ch) * h + y) * w + w,
                      out.data() + (static_cast<size_t>(ch) * hp + y + pad) * wp + pad);
}

// stride-1 convolution as k*k shifted whole-image GEMMs over the padded
// input. Outputs are computed in padded-row layout [co, h*wp]; the pad
// columns hold wrapped junk and are dropped on extraction.
template <typename T>
AlignedVec<T>& scratch_ypad() {
    thread_local AlignedVec<T> buf;
    return buf;
}

template <typename T>
void conv_s1_forward(const T* xpad, const T* w, T* y, int ci, int co, int h, int wd, int k,
                     int pad) {
    const int wp          = wd + 2 * pad;
    const size_t in_plane = static_cast<size_t>(h + 2 * pad) * wp;
    const int flat        = h * wp;
    auto& ypad            = scratch_ypad<T>();
    ypad.resize(static_cast<size_t>(co) * flat);
    EMap<T> ym(ypad.data(), co, flat);
    ECMap<T> wk_full(w, co, ci * k * k);
    detail::EMat<T> wk(co, ci);
    for (int ky = 0; ky < k; ky++)
        for (int kx = 0; kx < k; kx++) {
            for (int cin = 0; cin < ci; cin++)
                wk.col(cin) = wk_full.col((cin * k + ky) * k + kx);
            StridedCMap<T> bm(xpad + static_cast<size_t>(ky) * wp + kx, ci, flat,
                              Eigen::OuterStride<Eigen::Dynamic>(
                                  static_cast<Eigen::Index>(in_plane)));
            if (ky == 0 && kx == 0)
                ym.noalias() = wk * bm;
            else
                ym.noalias() += wk * bm;
        }
    for (int c = 0; c < co; c++)
        for (int oy = 0; oy < h; oy++)
            std::copy(ypad.data() + (static_cast<size_t>(c) * h + oy) * wp,
                      ypad.data() + (static_cast<size_t>(c) * h + oy) * wp + wd,
                      y + (static_cast<size_t>(c) * h + oy) * wd);
}

template <typename T>
void conv_s1_backward(const T* xpad, const T* w, const T* dy, T* dw, AlignedVec<T>* dxpad,
                      int ci, int co, int h, int wd, int k, int pad) {
    const int wp          = wd + 2 * pad;
    const size_t in_plane = static_cast<size_t>(h + 2 * pad) * wp;
    const int flat        = h * wp;
    // dy in padded-row layout, junk columns zeroed so they contribute nothing
    auto& dypad = scratch_ypad<T>();
    dypad.assign(static_cast<size_t>(co) * flat, T(0));
    for (int c = 0; c < co; c++)
        for (int oy = 0; oy < h; oy++)
            std::copy(dy + (static_cast<size_t>(c) * h + oy) * wd,
                      dy + (static_cast<size_t>(c) * h + oy) * wd + wd,
                      dypad.data() + (static_cast<size_t>(c) * h + oy) * wp);
    ECMap<T> dym(dypad.data(), co, flat);
    ECMap<T> wk_full(w, co, ci * k * k);
    detail::EMat<T> wk(co, ci), dwk(co, ci);
    for (int ky = 0; ky < k; ky++)
        for (int kx = 0; kx < k; kx++) {
            const size_t base = static_cast<size_t>(ky) * wp + kx;
            if (dw) {
                StridedCMap<T> bm(xpad + base, ci, flat,
                                  Eigen::OuterStride<Eigen::Dynamic>(
                                      static_cast<Eigen::Index>(in_plane)));
                dwk.noalias() = dym * bm.transpose();
                EMap<T> dwm(dw, co, ci * k * k);
                for (int cin = 0; cin < ci; cin++)
                    dwm.col((cin * k + ky) * k + kx) += dwk.col(cin);
            }
            if (dxpad) {
                for (int cin = 0; cin < ci; cin++)
                    wk.col(cin) = wk_full.col((cin * k + ky) * k + kx);
                StridedMap<T> dxm(dxpad->data() + base, ci, flat,
                                  Eigen::OuterStride<Eigen::Dynamic>(
                                      static_cast<Eigen::Index>(in_plane)));
                dxm.noalias() += wk.transpose() * dym;
            }
        }
}

// accumulate the interior of the padded gradient back into [C,H,W]
template <typename T>
void unpad_add(const AlignedVec<T>& dxpad, int c, int h, int w, int pad, T* dx) {
    const int hp = h + 2 * pad, wp = w + 2 * pad;
    (void)hp;
    for (int ch = 0; ch < c; ch++)
        for (int y = 0; y < h; y++) {
            const T* src = dxpad.data() + (static_cast<size_t>(ch) * (h + 2 * pad) + y + pad) *
                               wp + pad;
            T* dst = dx + (static_cast<size_t>(ch) * h + y) * w;
            for (int x = 0; x < w; x++) dst[x] += src[x];
        }
}

}  // namespace conv_detail

// x:[Cin,H,W]  W:[Cout,Cin,k,k]  b:[Cout] (optional) -> [Cout,Ho,Wo]
// Three code paths: direct GEMM for 1x1/s1, shifted row GEMMs for k>1/s1,
// im2col for strided convolutions.
template <typename T>
NodeRef<T> conv2d(GraphT<T>& g, NodeRef<T> x, NodeRef<T> w, NodeRef<T> b, int stride, int pad) {
    const int ci = x->val().dim(0), h = x->val().dim(1), wd = x->val().dim(2);
    const int co = w->val().dim(0), k = w->val().dim(2);
    if (w->val().dim(1) != ci) throw ShapeError("conv2d: channel mismatch");
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wd + 2 * pad - k) / stride + 1;
    const int ck = ci * k * k;
    const size_t plane = static_cast<size_t>(ho) * wo;

    TensorT<T> y({co, ho, wo});
    EMap<T> ym(y.data(), co, static_cast<int>(plane));

    if (stride == 1 && k == 1 && pad == 0) {
        ECMap<T> wm(w->val().data(), co, ci);
        ECMap<T> xm(x->val().data(), ci, static_cast<int>(plane));
        ym.noalias() = wm * xm;
    } else if (stride == 1) {
        auto& xpad = detail::scratch_a<T>();
        conv_detail::pad_image(x->val().data(), ci, h, wd, pad, xpad);
        conv_detail::conv_s1_forward(xpad.data(), w->val().data(), y.data(), ci, co, h, wd, k,
                                     pad);
    } else {
        auto& cols = detail::scratch_a<T>();
        cols.resize(static_cast<size_t>(ck) * plane);
        detail::im2col(x->val(), k, stride, pad, ho, wo, cols.data());
        ECMap<T> wm(w->val().data(), co, ck);
        ECMap<T> cm(cols.data(), ck, static_cast<int>(plane));
        ym.noalias() = wm * cm;
    }
    if (b) {
        for (int c = 0; c < co; c++) ym.row(c).array() += b->val()[c];
    }
    std::vector<NodeRef<T>> parents = b ? std::vector<NodeRef<T>>{x, w, b}
                                        : std::vector<NodeRef<T>>{x, w};
    return g.make(std::move(y), std::move(parents),
                  [ci, co, k, stride, pad, h, wd, ho, wo, ck, plane](NodeT<T>& self) {
        auto& xp = self.parents[0];
        auto& wp = self.parents[1];
        ECMap<T> dy(self.grad.data(), co, static_cast<int>(plane));
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            auto& db = self.parents[2]->ensure_grad();
            for (int c = 0; c < co; c++) db[c] += dy.row(c).sum();
        }
        const bool need_dw = wp->requires_grad;
        const bool need_dx = xp->requires_grad;
        if (!need_dw && !need_dx) return;

        if (stride == 1 && k == 1 && pad == 0) {
            ECMap<T> xm(xp->val().data(), ci, static_cast<int>(plane));
            ECMap<T> wm(wp->val().data(), co, ci);
            if (need_dw) {
                EMap<T> dw(wp->ensure_grad().data(), co, ci);
                dw.noalias() += dy * xm.transpose();
            }
            if (need_dx) {
                EMap<T> dx(xp->ensure_grad().data(), ci, static_cast<int>(plane));
                dx.noalias() += wm.transpose() * dy;
            }
        } else if (stride == 1) {
            auto& xpad = detail::scratch_a<T>();
            conv_detail::pad_image(xp->val().data(), ci, h, wd, pad, xpad);
            auto& dxpad = detail::scratch_b<T>();
            if (need_dx) dxpad.assign(xpad.size(), T(0));
            conv_detail::conv_s1_backward(
                xpad.data(), wp->val().data(), self.grad.data(),
                need_dw ? wp->ensure_grad().data() : nullptr, need_dx ? &dxpad : nullptr, ci, co,
                h, wd, k, pad);
            if (need_dx)
                conv_detail::unpad_add(dxpad, ci, h, wd, pad, xp->ensure_grad().data());
        } else {
            if (need_dw) {
                auto& cols = detail::scratch_a<T>();
                cols.resize(static_cast<size_t>(ck) * plane);
                detail::im2col(xp->val(), k, stride, pad, ho, wo, cols.data());
                ECMap<T> cm(cols.data(), ck, static_cast<int>(plane));
                EMap<T> dw(wp->ensure_grad().data(), co, ck);
                dw.noalias() += dy * cm.transpose();
            }
            if (need_dx) {
                auto& dcols = detail::scratch_b<T>();
                dcols.resize(static_cast<size_t>(ck) * plane);
                ECMap<T> wm(wp->val().data(), co, ck);
                EMap<T> dcm(dcols.data(), ck, static_cast<int>(plane));
                dcm.noalias() = wm.transpose() * dy;
                detail::col2im_add(dcols.data(), k, stride, pad, ho, wo, xp->ensure_grad());
            }
        }
    });
}

// GroupNorm over [C,H,W]; gamma/beta per channel.
template <typename T>
NodeRef<T> group_norm(GraphT<T>& g, NodeRef<T> x, NodeRef<T> gamma, NodeRef<T> beta, int groups,
                      T eps = T(1e-5)) {
    const int c = x->val().dim(0), h = x->val().dim(1), w = x->val().dim(2);
    if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    const int cg = c / groups;
    const size_t hw = static_cast<size_t>(h) * w;
    const size_t m  = cg * hw;

    TensorT<T> y({c, h, w});
    std::vector<T> mu(groups), inv(groups);
    const T* xd = x->val().data();
    for (int gi = 0; gi < groups; gi++) {
        const T* base = xd + static_cast<size_t>(gi) * m;
        double s = 0.0, s2 = 0.0;
        for (size_t i = 0; i < m; i++) {
            s += base[i];
            s2 += static_cast<double>(base[i]) * base[i];
        }
        const double mean = s / static_cast<double>(m);
        const double var  = s2 / static_cast<double>(m) - mean * mean;
        mu[gi]  = static_cast<T>(mean);
        inv[gi] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    }
    const T* gm = gamma->val().data();
    const T* bt = beta->val().data();
    T* yd       = y.data();
    for (int ch = 0; ch < c; ch++) {
        const int gi = ch / cg;
        const T a    = gm[ch] * inv[gi];
        const T off  = bt[ch] - mu[gi] * a;
        const T* src = xd + ch * hw;
        T* dst       = yd + ch * hw;
        for (size_t i = 0; i < hw; i++) dst[i] = a * src[i] + off;
    }
    return g.make(std::move(y), {x, gamma, beta},
                  [c, cg, groups, hw, m, mu, inv](NodeT<T>& self) {
        auto& xp  = self.parents[0];
        auto& gp  = self.parents[1];
        auto& bp  = self.parents[2];
        const T* xd = xp->val().data();
        const T* dyd = self.grad.data();
        const T* gm = gp->val().data();
        T* dgamma = gp->requires_grad ? gp->ensure_grad().data() : nullptr;
        T* dbeta  = bp->requires_grad ? bp->ensure_grad().data() : nullptr;
        T* dxd    = xp->requires_grad ? xp->ensure_grad().data() : nullptr;
        for (int gi = 0; gi < groups; gi++) {
            const T mean = mu[gi], iv = inv[gi];
            // accumulate the two group-wide reductions over dxhat
            T sum1 = T(0), sum2 = T(0);
            for (int cc = 0; cc < cg; cc++) {
                const int ch  = gi * cg + cc;
                const T* xrow = xd + ch * hw;
                const T* dyr  = dyd + ch * hw;
                T dg = T(0), db = T(0);
                const T gch = gm[ch];
                for (size_t i = 0; i < hw; i++) {
                    const T xhat = (xrow[i] - mean) * iv;
                    const T dxh  = dyr[i] * gch;
                    sum1 += dxh;
                    sum2 += dxh * xhat;
                    dg += dyr[i] * xhat;
                    db += dyr[i];
                }
                if (dgamma) dgamma[ch] += dg;
                if (dbeta) dbeta[ch] += db;
            }
            if (!dxd) continue;
            const T inv_m = T(1) / T(m);
            for (int cc = 0; cc < cg; cc++) {
                const int ch  = gi * cg + cc;
                const T* xrow = xd + ch * hw;
                const T* dyr  = dyd + ch * hw;
                T* dxr        = dxd + ch * hw;
                const T gch   = gm[ch];
                for (size_t i = 0; i < hw; i++) {
                    const T xhat = (xrow[i] - mean) * iv;
                    const T dxh  = dyr[i] * gch;
                    dxr[i] += iv * (dxh - inv_m * (sum1 + xhat * sum2));
                }
            }
        }
    });
}

// LayerNorm over the last dim of [n,d]; gamma/beta per column.
template <typename T>
NodeRef<T> layer_norm(GraphT<T>& g, NodeRef<T> x, NodeRef<T> gamma, NodeRef<T> beta,
                      T eps = T(1e-5)) {
    const int n = x->val().dim(0), d = x->val().dim(1);
    TensorT<T> y({n, d});
    std::vector<T> mu(n), inv(n);
    const T* xd = x->val().data();
    const T* gm = gamma->val().data();
    const T* bt = beta->val().data();
    T* yd       = y.data();
    for (int r = 0; r < n; r++) {
        const T* row = xd + static_cast<size_t>(r) * d;
        double s = 0.0, s2 = 0.0;
        for (int j = 0; j < d; j++) {
            s += row[j];
            s2 += static_cast<double>(row[j]) * row[j];
        }
        const double mean = s / static_cast<double>(d);
        const double var  = s2 / static_cast<double>(d) - mean * mean;
        mu[r]  = static_cast<T>(mean);
        inv[r] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        T* out = yd + static_cast<size_t>(r) * d;
        for (int j = 0; j < d; j++) out[j] = (row[j] - mu[r]) * inv[r] * gm[j] + bt[j];
    }
    return g.make(std::move(y), {x, gamma, beta}, [n, d, mu, inv](NodeT<T>& self) {
        auto& xp = self.parents[0];
        auto& gp = self.parents[1];
        auto& bp = self.parents[2];
        const T* xd  = xp->val().data();
        const T* dyd = self.grad.data();
        const T* gm  = gp->val().data();
        T* dgamma = gp->requires_grad ? gp->ensure_grad().data() : nullptr;
        T* dbeta  = bp->requires_grad ? bp->ensure_grad().data() : nullptr;
        T* dxd    = xp->requires_grad ? xp->ensure_grad().data() : nullptr;
        for (int r = 0; r < n; r++) {
            const T* xrow = xd + static_cast<size_t>(r) * d;
            const T* dyr  = dyd + static_cast<size_t>(r) * d;
            const T mean = mu[r], iv = inv[r];
            T sum1 = T(0), sum2 = T(0);
            for (int j = 0; j < d; j++) {
                const T xhat = (xrow[j] - mean) * iv;
                const T dxh  = dyr[j] * gm[j];
                sum1 += dxh;
                sum2 += dxh * xhat;
                if (dgamma) dgamma[j] += dyr[j] * xhat;
                if (dbeta) dbeta[j] += dyr[j];
            }
            if (!dxd) continue;
            T* dxr = dxd + static_cast<size_t>(r) * d;
            const T inv_d = T(1) / T(d);
            for (int j = 0; j < d; j++) {
                const T xhat = (xrow[j] - mean) * iv;
                const T dxh  = dyr[j] * gm[j];
                dxr[j] += iv * (dxh - inv_d * (sum1 + xhat * sum2));
            }
        }
    });
}

template <typename T>
NodeRef<T> silu(GraphT<T>& g, NodeRef<T> x) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto n = static_cast<Eigen::Index>(x->val().numel());
    TensorT<T> y(x->val().shape());
    Eigen::Map<const Arr> xm(x->val().data(), n);
    Eigen::Map<Arr> ym(y.data(), n);
    ym = xm / (T(1) + (-xm).exp());
    return g.make(std::move(y), {x}, [n](NodeT<T>& self) {
        auto& xp = self.parents[0];
        if (!xp->requires_grad) return;
        Eigen::Map<const Arr> xm(xp->val().data(), n);
        Eigen::Map<const Arr> dy(self.grad.data(), n);
        Eigen::Map<Arr> dx(xp->ensure_grad().data(), n);
        const Arr s = T(1) / (T(1) + (-xm).exp());
        dx += dy * s * (T(1) + xm * (T(1) - s));
    });
}

template <typename T>
NodeRef<T> tanh_act(GraphT<T>& g, NodeRef<T> x) {
    TensorT<T> y(x->val().shape());
    const T* xd = x->val().data();
    for (size_t i = 0; i < y.numel(); i++) y[i] = std::tanh(xd[i]);
    return g.make(std::move(y), {x}, [](NodeT<T>& self) {
        auto& xp = self.parents[0];
        if (!xp->requires_grad) return;
        T* dx       = xp->ensure_grad().data();
        const T* dy = self.grad.data();
        const T* yd = self.value.data();
        for (size_t i = 0; i < self.value.numel(); i++) dx[i] += dy[i] * (T(1) - yd[i] * yd[i]);
    });
}

template <typename T>
NodeRef<T> add(GraphT<T>& g, NodeRef<T> a, NodeRef<T> b) {
    if (!a->val().same_shape(b->val())) throw ShapeError("add: shape mismatch");
    TensorT<T> y(a->val().shape());
    const T* ad = a->val().data();
    const T* bd = b->val().data();
    for (size_t i = 0; i < y.numel(); i++) y[i] = ad[i] + bd[i];
    return g.make(std::move(y), {a, b}, [](NodeT<T>& self) {
        const T* dy = self.grad.data();
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            T* dp = p->ensure_grad().data();
            for (size_t i = 0; i < self.value.numel(); i++) dp[i] += dy[i];
        }
    });
}

template <typename T>
NodeRef<T> scale(GraphT<T>& g, NodeRef<T> x, T s) {
    TensorT<T> y(x->val().shape());
    const T* xd = x->val().data();
    for (size_t i = 0; i < y.numel(); i++) y[i] = xd[i] * s;
    return g.make(std::move(y), {x}, [s](NodeT<T>& self) {
        auto& xp = self.parents[0];
        if (!xp->requires_grad) return;
        T* dx       = xp->ensure_grad().data();
        const T* dy = self.grad.data();
        for (size_t i = 0; i < self.value.numel(); i++) dx[i] += dy[i] * s;
    });
}

template <typename T>
NodeRef<T> reshape(GraphT<T>& g, NodeRef<T> x, std::vector<int> shape) {
    TensorT<T> y = x->val().reshaped(std::move(shape));
    return g.make(std::move(y), {x}, [](NodeT<T>& self) {
        auto& xp = self.parents[0];
        if (!xp->requires_grad) return;
        T* dx       = xp->ensure_grad().data();
        const T* dy = self.grad.data();
        for (size_t i = 0; i < self.value.numel(); i++) dx[i] += dy[i];
    });
}

// [a,b] -> [b,a]
template <typename T>
NodeRef<T> transpose2(GraphT<T>& g, NodeRef<T> x) {
    const int a = x->val().dim(0), b = x->val().dim(1);
    TensorT<T> y({b, a});
    ECMap<T> xm(x->val().data(), a, b);
    EMap<T> ym(y.data(), b, a);
    ym = xm.transpose();
    return g.make(std::move(y), {x}, [a, b](NodeT<T>& self) {
        auto& xp = self.parents[0];
        if (!xp->requires_grad) return;
        ECMap<T> dy(self.grad.data(), b, a);
        EMap<T> dx(xp->ensure_grad().data(), a, b);
        dx += dy.transpose();
    });
}

// [C1,H,W] ++ [C2,H,W] -> [C1+C2,H,W]
template <typename T>
NodeRef<T> concat_channels(GraphT<T>& g, NodeRef<T> a, NodeRef<T> b) {
    const int c1 = a->val().dim(0), c2 = b->val().dim(0);
    const int h = a->val().dim(1), w = a->val().dim(2);
    if (b->val().dim(1) != h || b->val().dim(2) != w)
        throw ShapeError("concat_channels: spatial mismatch");
    TensorT<T> y({c1 + c2, h, w});
    const size_t na = a->val().numel(), nb = b->val().numel();
    std::copy(a->val().data(), a->val().data() + na, y.data());
    std::copy(b->val().data(), b->val().data() + nb, y.data() + na);
    return g.make(std::move(y), {a, b}, [na, nb](NodeT<T>& self) {
        const T* dy = self.grad.data();
        if (self.parents[0]->requires_grad) {
            T* da = self.parents[0]->ensure_grad().data();
            for (size_t i = 0; i < na; i++) da[i] += dy[i];
        }
        if (self.parents[1]->requires_grad) {
            T* db = self.parents[1]->ensure_grad().data();
            for (size_t i = 0; i < nb; i++) db[i] += dy[na + i];
        }
    });
}

// Concatenates [n_i, d] blocks along rows.
template <typename T>
NodeRef<T> concat_rows(GraphT<T>& g, const std::vector<NodeRef<T>>& blocks) {
    if (blocks.empty()) throw ShapeError("concat_rows: empty");
    const int d = blocks[0]->val().dim(1);
    int total   = 0;
    for (auto& blk : blocks) {
        if (blk->val().rank() != 2 || blk->val().dim(1) != d)
            throw ShapeError("concat_rows: width mismatch");
        total += blk->val().dim(0);
    }
    TensorT<T> y({total, d});
    size_t off = 0;
    for (auto& blk : blocks) {
        std::copy(blk->val().data(), blk->val().data() + blk->val().numel(), y.data() + off);
        off += blk->val().numel();
    }
    return g.make(std::move(y), blocks, [](NodeT<T>& self) {
        const T* dy = self.grad.data();
        size_t off  = 0;
        for (auto& p : self.parents) {
            const size_t n = p->val().numel();
            if (p->requires_grad) {
                T* dp = p->ensure_grad().data();
                for (size_t i = 0; i < n; i++) dp[i] += dy[off + i];
            }
            off += n;
        }
    });
}

template <typename T>
NodeRef<T> slice_rows(GraphT<T>& g, NodeRef<T> x, int r0, int r1) {
    const int n = x->val().dim(0), d = x->val().dim(1);
    if (r0 < 0 || r1 > n || r0 >= r1) throw ShapeError("slice_rows: bad range");
    TensorT<T> y({r1 - r0, d});
    std::copy(x->val().data() + static_cast<size_t>(r0) * d,
              x->val().data() + static_cast<size_t>(r1) * d, y.data());
    return g.make(std::move(y), {x}, [r0, d](NodeT<T>& self) {
        auto& xp = self.parents[0];
        if (!xp->requires_grad) return;
        T* dx       = xp->ensure_grad().data() + static_cast<size_t>(r0) * d;
        const T* dy = self.grad.data();
        for (size_t i = 0; i < self.value.numel(); i++) dx[i] += dy[i];
    });
}

// nearest-neighbour 2x upsample, [C,H,W] -> [C,2H,2W]
template <typename T>
NodeRef<T> upsample_nearest2(GraphT<T>& g, NodeRef<T> x) {
    const int c = x->val().dim(0), h = x->val().dim(1), w = x->val().dim(2);
    TensorT<T> y({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ch++)
        for (int i = 0; i < h; i++)
            for (int j = 0; j < w; j++) {
                const T v = x->val().at3(ch, i, j);
                y.at3(ch, 2 * i, 2 * j)         = v;
                y.at3(ch, 2 * i, 2 * j + 1)     = v;
                y.at3(ch, 2 * i + 1, 2 * j)     = v;
                y.at3(ch, 2 * i + 1, 2 * j + 1) = v;
            }
    return g.make(std::move(y), {x}, [c, h, w](NodeT<T>& self) {
        auto& xp = self.parents[0];
        if (!xp->requires_grad) return;
        auto& dx = xp->ensure_grad();
        for (int ch = 0; ch < c; ch++)
            for (int i = 0; i < h; i++)
                for (int j = 0; j < w; j++)
                    dx.at3(ch, i, j) += self.grad.at3(ch, 2 * i, 2 * j) +
                                        self.grad.at3(ch, 2 * i, 2 * j + 1) +
                                        self.grad.at3(ch, 2 * i + 1, 2 * j) +
                                        self.grad.at3(ch, 2 * i + 1, 2 * j + 1);
    });
}

// Multi-head scaled dot-product attention core.
// q:[nq,d] k:[nk,d] v:[nk,d], d = heads*dh -> [nq,d]
template <typename T>
NodeRef<T> mha(GraphT<T>& g, NodeRef<T> q, NodeRef<T> k, NodeRef<T> v, int heads) {
    const int nq = q->val().dim(0), d = q->val().dim(1), nk = k->val().dim(0);
    if (d % heads != 0) throw ShapeError("mha: dim not divisible by heads");
    if (k->val().dim(1) != d || v->val().dim(1) != d || v->val().dim(0) != nk)
        throw ShapeError("mha: k/v shape mismatch");
    const int dh = d / heads;
    const T scl = T(1) / std::sqrt(T(dh));

    TensorT<T> y({nq, d});
    auto probs = std::make_shared<TensorT<T>>(std::vector<int>{heads, nq, nk});
    ECMap<T> qm(q->val().data(), nq, d);
    ECMap<T> km(k->val().data(), nk, d);
    ECMap<T> vm(v->val().data(), nk, d);
    EMap<T> ym(y.data(), nq, d);
    for (int hd = 0; hd < heads; hd++) {
        EMap<T> pm(probs->data() + static_cast<size_t>(hd) * nq * nk, nq, nk);
        pm.noalias() = qm.middleCols(hd * dh, dh) * km.middleCols(hd * dh, dh).transpose() * scl;
        for (int r = 0; r < nq; r++) {
            auto row    = pm.row(r);
            const T mx  = row.maxCoeff();
            row         = (row.array() - mx).exp();
            const T sum = row.sum();
            row /= sum;
        }
        ym.middleCols(hd * dh, dh).noalias() = pm * vm.middleCols(hd * dh, dh);
    }
    return g.make(std::move(y), {q, k, v}, [nq, nk, d, dh, heads, scl, probs](NodeT<T>& self) {
        auto& qp = self.parents[0];
        auto& kp = self.parents[1];
        auto& vp = self.parents[2];
        ECMap<T> dy(self.grad.data(), nq, d);
        ECMap<T> qm(qp->val().data(), nq, d);
        ECMap<T> km(kp->val().data(), nk, d);
        ECMap<T> vm(vp->val().data(), nk, d);
        EMat<T> dp(nq, nk), ds(nq, nk);
        for (int hd = 0; hd < heads; hd++) {
            ECMap<T> pm(probs->data() + static_cast<size_t>(hd) * nq * nk, nq, nk);
            dp.noalias() = dy.middleCols(hd * dh, dh) * vm.middleCols(hd * dh, dh).transpose();
            // softmax jacobian: ds = p .* (dp - rowsum(dp .* p))
            for (int r = 0; r < nq; r++) {
                const T dot = dp.row(r).cwiseProduct(pm.row(r)).sum();
                ds.row(r)   = pm.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
            }
            if (vp->requires_grad) {
                EMap<T> dv(vp->ensure_grad().data(), nk, d);
                dv.middleCols(hd * dh, dh).noalias() += pm.transpose() * dy.middleCols(hd * dh, dh);
            }
            if (qp->requires_grad) {
                EMap<T> dq(qp->ensure_grad().data(), nq, d);
                dq.middleCols(hd * dh, dh).noalias() += ds * km.middleCols(hd * dh, dh) * scl;
            }
            if (kp->requires_grad) {
                EMap<T> dk(kp->ensure_grad().data(), nk, d);
                dk.middleCols(hd * dh, dh).noalias() +=
                    ds.transpose() * qm.middleCols(hd * dh, dh) * scl;
            }
        }
    });
}

// Row idx of a [V, L*d] table, reshaped to [L, d].
template <typename T>
NodeRef<T> embed_row(GraphT<T>& g, NodeRef<T> table, int idx, int l, int d) {
    const int v = table->val().dim(0);
    if (table->val().dim(1) != l * d) throw ShapeError("embed_row: table width mismatch");
    if (idx < 0 || idx >= v) throw PreconditionError("embed_row: index out of range");
    TensorT<T> y({l, d});
    std::copy(table->val().data() + static_cast<size_t>(idx) * l * d,
              table->val().data() + static_cast<size_t>(idx + 1) * l * d, y.data());
    return g.make(std::move(y), {table}, [idx, l, d](NodeT<T>& self) {
        auto& tp = self.parents[0];
        if (!tp->requires_grad) return;
        T* dt       = tp->ensure_grad().data() + static_cast<size_t>(idx) * l * d;
        const T* dy = self.grad.data();
        for (size_t i = 0; i < self.value.numel(); i++) dt[i] += dy[i];
    });
}

// FiLM conditioning: sb = [scale(C), shift(C)], y = x*(1+scale) + shift.
// sb arrives as [1, 2C] straight from a linear layer.
template <typename T>
NodeRef<T> film(GraphT<T>& g, NodeRef<T> x, NodeRef<T> sb) {
    const int c = x->val().dim(0), h = x->val().dim(1), w = x->val().dim(2);
    if (static_cast<size_t>(sb->val().numel()) != static_cast<size_t>(2 * c))
        throw ShapeError("film: conditioning size mismatch");
    const size_t hw = static_cast<size_t>(h) * w;
    TensorT<T> y({c, h, w});
    const T* xd = x->val().data();
    const T* sd = sb->val().data();
    for (int ch = 0; ch < c; ch++) {
        const T a = T(1) + sd[ch];
        const T o = sd[c + ch];
        const T* src = xd + ch * hw;
        T* dst       = y.data() + ch * hw;
        for (size_t i = 0; i < hw; i++) dst[i] = a * src[i] + o;
    }
    return g.make(std::move(y), {x, sb}, [c, hw](NodeT<T>& self) {
        auto& xp = self.parents[0];
        auto& sp = self.parents[1];
        const T* dy = self.grad.data();
        const T* xd = xp->val().data();
        const T* sd = sp->val().data();
        if (sp->requires_grad) {
            T* dsb = sp->ensure_grad().data();
            for (int ch = 0; ch < c; ch++) {
                const T* dyr = dy + ch * hw;
                const T* xr  = xd + ch * hw;
                T da = T(0), dofs = T(0);
                for (size_t i = 0; i < hw; i++) {
                    da += dyr[i] * xr[i];
                    dofs += dyr[i];
                }
                dsb[ch] += da;
                dsb[c + ch] += dofs;
            }
        }
        if (xp->requires_grad) {
            T* dx = xp->ensure_grad().data();
            for (int ch = 0; ch < c; ch++) {
                const T a    = T(1) + sd[ch];
                const T* dyr = dy + ch * hw;
                T* dxr       = dx + ch * hw;
                for (size_t i = 0; i < hw; i++) dxr[i] += a * dyr[i];
            }
        }
    });
}

// mean((a-b)^2) -> scalar [1]; accumulated in double
template <typename T>
NodeRef<T> mse(GraphT<T>& g, NodeRef<T> a, NodeRef<T> b) {
    if (!a->val().same_shape(b->val())) throw ShapeError("mse: shape mismatch");
    const size_t n = a->val().numel();
    double acc     = 0.0;
    const T* ad    = a->val().data();
    const T* bd    = b->val().data();
    for (size_t i = 0; i < n; i++) {
        const double dif = static_cast<double>(ad[i]) - static_cast<double>(bd[i]);
        acc += dif * dif;
    }
    TensorT<T> y({1});
    y[0] = static_cast<T>(acc / static_cast<double>(n));
    return g.make(std::move(y), {a, b}, [n](NodeT<T>& self) {
        const T dl  = self.grad[0] * T(2) / T(n);
        const T* ad = self.parents[0]->val().data();
        const T* bd = self.parents[1]->val().data();
        if (self.parents[0]->requires_grad) {
            T* da = self.parents[0]->ensure_grad().data();
            for (size_t i = 0; i < n; i++) da[i] += dl * (ad[i] - bd[i]);
        }
        if (self.parents[1]->requires_grad) {
            T* db = self.parents[1]->ensure_grad().data();
            for (size_t i = 0; i < n; i++) db[i] -= dl * (ad[i] - bd[i]);
        }
    });
}

// mean of all elements -> scalar [1]
template <typename T>
NodeRef<T> mean_all(GraphT<T>& g, NodeRef<T> x) {
    const size_t n = x->val().numel();
    double acc     = 0.0;
    for (size_t i = 0; i < n; i++) acc += static_cast<double>(x->val()[i]);
    TensorT<T> y({1});
    y[0] = static_cast<T>(acc / static_cast<double>(n));
    return g.make(std::move(y), {x}, [n](NodeT<T>& self) {
        auto& xp = self.parents[0];
        if (!xp->requires_grad) return;
        const T dl = self.grad[0] / T(n);
        T* dx      = xp->ensure_grad().data();
        for (size_t i = 0; i < n; i++) dx[i] += dl;
    });
}

}  // namespace ops
}  // namespace idpatch

#endif  // IDPATCH_GRAPH_HPP
