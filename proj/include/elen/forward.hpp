#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "elen/encoder.hpp"
#include "elen/packing.hpp"

namespace elen {

// Per-segment positions: RoPE restarts at 0 at each document start, so a
// document's geometry does not depend on where packing placed it.
inline std::vector<uint32_t> segment_positions(const BoundaryMask& bm) {
    std::vector<uint32_t> pos(bm.segment.size(), 0);
    size_t start = 0;
    for (size_t i = 0; i < bm.segment.size(); ++i) {
        if (bm.segment[i] < 0) continue;
        if (i == 0 || bm.segment[i] != bm.segment[i - 1]) start = i;
        pos[i] = uint32_t(i - start);
    }
    return pos;
}

// In-place rotary transform on [L x n_heads*head_dim]; pair (2t, 2t+1) of
// every head rotates by pos * theta^(-2t/head_dim).  `inverse` applies the
// transpose rotation (used by the backward pass).
template <typename T>
void rope_apply(Mat<T>& qk, std::span<const uint32_t> pos, double theta,
                uint32_t head_dim, bool inverse = false) {
    if (head_dim == 0 || head_dim % 2 != 0)
        throw std::invalid_argument("rope_apply: head_dim must be even");
    if (qk.rows != pos.size() || qk.cols % head_dim != 0)
        throw std::invalid_argument("rope_apply: shape mismatch");
    const uint32_t half = head_dim / 2;
    const uint32_t n_heads = qk.cols / head_dim;
    std::vector<double> inv_freq(half);
    for (uint32_t t = 0; t < half; ++t)
        inv_freq[t] = std::pow(theta, -2.0 * t / head_dim);
    for (uint32_t i = 0; i < qk.rows; ++i) {
        if (pos[i] == 0) continue;  // rotation by angle 0 is the identity
        T* ri = qk.row(i);
        for (uint32_t t = 0; t < half; ++t) {
            double ang = double(pos[i]) * inv_freq[t];
            T c = T(std::cos(ang));
            T s = T(inverse ? -std::sin(ang) : std::sin(ang));
            for (uint32_t h = 0; h < n_heads; ++h) {
                T* p = ri + h * head_dim + 2 * t;
                T x = p[0], y = p[1];
                p[0] = c * x - s * y;
                p[1] = s * x + c * y;
            }
        }
    }
}

namespace detail {

// RMS norm (scale only): y = x * g / sqrt(mean(x^2) + eps).
template <typename T>
void rmsnorm(const Mat<T>& x, const std::vector<T>& g, double eps, Mat<T>& y) {
    const uint32_t d = x.cols;
    for (uint32_t i = 0; i < x.rows; ++i) {
        const T* xi = x.row(i);
        T* yi = y.row(i);
        double ss = 0;
        for (uint32_t c = 0; c < d; ++c) ss += double(xi[c]) * double(xi[c]);
        T rinv = T(1.0 / std::sqrt(ss / d + eps));
        for (uint32_t c = 0; c < d; ++c) yi[c] = xi[c] * g[c] * rinv;
    }
}

// Accumulates dx += dnorm/dx and dg += dnorm/dg given upstream dy.
template <typename T>
void rmsnorm_backward(const Mat<T>& x, const std::vector<T>& g, double eps,
                      const Mat<T>& dy, Mat<T>& dx, std::vector<T>& dg) {
    const uint32_t d = x.cols;
    for (uint32_t i = 0; i < x.rows; ++i) {
        const T* xi = x.row(i);
        const T* dyi = dy.row(i);
        T* dxi = dx.row(i);
        double ss = 0;
        for (uint32_t c = 0; c < d; ++c) ss += double(xi[c]) * double(xi[c]);
        const double rinv = 1.0 / std::sqrt(ss / d + eps);
        double s = 0;  // sum of dy*g*x
        for (uint32_t c = 0; c < d; ++c)
            s += double(dyi[c]) * double(g[c]) * double(xi[c]);
        const double k = s * rinv * rinv * rinv / d;
        for (uint32_t c = 0; c < d; ++c) {
            dxi[c] += T(double(dyi[c]) * double(g[c]) * rinv - double(xi[c]) * k);
            dg[c] += T(double(dyi[c]) * double(xi[c]) * rinv);
        }
    }
}

// Allowed key range per query: the enclosing segment, clamped to the local
// window when the layer is local.  PAD queries get an empty range.
struct AttnRange {
    std::vector<uint32_t> lo, hi;  // [L]; empty range lo==hi for PAD
};

inline AttnRange attn_ranges(const BoundaryMask& bm, bool is_global,
                             uint32_t window) {
    const uint32_t L = uint32_t(bm.segment.size());
    AttnRange r;
    r.lo.assign(L, 0);
    r.hi.assign(L, 0);
    uint32_t seg_lo = 0;
    for (uint32_t i = 0; i < L; ++i) {
        if (bm.segment[i] < 0) continue;
        if (i == 0 || bm.segment[i] != bm.segment[i - 1]) seg_lo = i;
        r.lo[i] = seg_lo;
    }
    uint32_t seg_hi = L;
    for (uint32_t i = L; i-- > 0;) {
        if (bm.segment[i] < 0) continue;
        if (i + 1 == L || bm.segment[i] != bm.segment[i + 1]) seg_hi = i + 1;
        r.hi[i] = seg_hi;
        if (!is_global) {
            r.lo[i] = std::max(r.lo[i], i > window ? i - window : 0);
            r.hi[i] = std::min(r.hi[i], i + window + 1);
        }
    }
    return r;
}

// Softmax(QK^T/sqrt(hd))V restricted to each query's allowed range, one
// query row at a time (no L x L score matrix is ever materialized).
template <typename T>
void attention_ctx(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v,
                   const AttnRange& rng, uint32_t head_dim, Mat<T>& ctx,
                   std::vector<T>& sbuf) {
    const uint32_t n_heads = q.cols / head_dim;
    const T inv_scale = T(1.0 / std::sqrt(double(head_dim)));
    for (uint32_t i = 0; i < q.rows; ++i) {
        T* ci = ctx.row(i);
        std::fill(ci, ci + ctx.cols, T(0));
        const uint32_t j0 = rng.lo[i], j1 = rng.hi[i];
        if (j0 == j1) continue;  // PAD query: zero context
        for (uint32_t h = 0; h < n_heads; ++h) {
            const T* qh = q.row(i) + h * head_dim;
            double m = -std::numeric_limits<double>::infinity();
            for (uint32_t j = j0; j < j1; ++j) {
                T s = dot(qh, k.row(j) + h * head_dim, head_dim) * inv_scale;
                sbuf[j - j0] = s;
                m = std::max(m, double(s));
            }
            double den = 0;
            T* ch = ci + h * head_dim;
            for (uint32_t j = j0; j < j1; ++j) {
                double e = std::exp(double(sbuf[j - j0]) - m);
                den += e;
                axpy(T(e), v.row(j) + h * head_dim, ch, head_dim);
            }
            const T inv = T(1.0 / den);
            for (uint32_t t = 0; t < head_dim; ++t) ch[t] *= inv;
        }
    }
}

// Backward of attention_ctx.  Probabilities are recomputed row by row from
// the cached post-RoPE q/k, so memory stays linear in L.
template <typename T>
void attention_backward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v,
                        const Mat<T>& dctx, const AttnRange& rng,
                        uint32_t head_dim, Mat<T>& dq, Mat<T>& dk, Mat<T>& dv,
                        std::vector<T>& sbuf, std::vector<double>& pbuf,
                        std::vector<double>& dpbuf) {
    const uint32_t n_heads = q.cols / head_dim;
    const T inv_scale = T(1.0 / std::sqrt(double(head_dim)));
    for (uint32_t i = 0; i < q.rows; ++i) {
        const uint32_t j0 = rng.lo[i], j1 = rng.hi[i];
        if (j0 == j1) continue;
        for (uint32_t h = 0; h < n_heads; ++h) {
            const T* qh = q.row(i) + h * head_dim;
            const T* dch = dctx.row(i) + h * head_dim;
            double m = -std::numeric_limits<double>::infinity();
            for (uint32_t j = j0; j < j1; ++j) {
                T s = dot(qh, k.row(j) + h * head_dim, head_dim) * inv_scale;
                sbuf[j - j0] = s;
                m = std::max(m, double(s));
            }
            double den = 0;
            for (uint32_t j = j0; j < j1; ++j) {
                pbuf[j - j0] = std::exp(double(sbuf[j - j0]) - m);
                den += pbuf[j - j0];
            }
            double sum_pd = 0;
            for (uint32_t j = j0; j < j1; ++j) {
                pbuf[j - j0] /= den;
                dpbuf[j - j0] = double(dot(dch, v.row(j) + h * head_dim, head_dim));
                sum_pd += pbuf[j - j0] * dpbuf[j - j0];
            }
            T* dqh = dq.row(i) + h * head_dim;
            for (uint32_t j = j0; j < j1; ++j) {
                const double p = pbuf[j - j0];
                const T ds = T(p * (dpbuf[j - j0] - sum_pd)) * inv_scale;
                axpy(ds, k.row(j) + h * head_dim, dqh, head_dim);
                axpy(ds, qh, dk.row(j) + h * head_dim, head_dim);
                axpy(T(p), dch, dv.row(j) + h * head_dim, head_dim);
            }
        }
    }
}

}  // namespace detail

template <typename T>
struct LayerTrace {
    Mat<T> x_in;        // layer input
    Mat<T> xh;          // after attention pre-norm
    Mat<T> q, k, v;     // projections, q/k post-RoPE  [L x kept_attn]
    Mat<T> ctx;         // attention context           [L x kept_attn]
    Mat<T> x_mid;       // after attention residual
    Mat<T> xh2;         // after MLP pre-norm
    Mat<T> gpre, upre;  // gate/up pre-activations     [L x kept_ff]
    Mat<T> act;         // gelu(gpre) * upre
};

template <typename T>
struct ForwardTrace {
    Mat<T> logits;   // [L x V]
    Mat<T> x_final;  // input of the final norm
    Mat<T> hfin;     // output of the final norm
    std::vector<LayerTrace<T>> layers;  // filled only when caches are kept
    std::vector<int32_t> segment;
    std::vector<uint32_t> positions;
};

// Full forward pass over one packed row at granularity g.  keep_caches
// stores per-layer activations for the backward pass; evaluation and
// benchmarking run with it off.
template <typename T>
ForwardTrace<T> forward_mlm(const EncoderConfig& cfg, const ParamSet<T>& ps,
                            const PackedRow& row, const Granularity& g,
                            bool keep_caches = true) {
    cfg.validate();
    const uint32_t L = row.seq_len();
    if (L == 0 || L > cfg.max_len)
        throw std::invalid_argument("forward_mlm: row length out of range");
    for (uint32_t id : row.ids)
        if (id >= cfg.vocab_size)
            throw std::invalid_argument("forward_mlm: token id out of range");
    const uint32_t kh = kept_heads(cfg, g);
    const uint32_t kf = kept_ff(cfg, g);
    const uint32_t hd = cfg.head_dim;
    const uint32_t ka = kh * hd;
    const uint32_t d = cfg.d_model;

    ForwardTrace<T> tr;
    BoundaryMask bm = boundary_mask(row);
    tr.segment = bm.segment;
    tr.positions = segment_positions(bm);

    Mat<T> x(L, d);
    for (uint32_t i = 0; i < L; ++i) {
        const T* e = ps.tok_emb.row(row.ids[i]);
        std::copy(e, e + d, x.row(i));
    }

    // Scratch reused across layers when caches are not kept.
    Mat<T> s_xh, s_q, s_k, s_v, s_ctx, s_xh2, s_gpre, s_upre, s_act;
    if (!keep_caches) {
        s_xh = Mat<T>(L, d);
        s_q = Mat<T>(L, ka);
        s_k = Mat<T>(L, ka);
        s_v = Mat<T>(L, ka);
        s_ctx = Mat<T>(L, ka);
        s_xh2 = Mat<T>(L, d);
        s_gpre = Mat<T>(L, kf);
        s_upre = Mat<T>(L, kf);
        s_act = Mat<T>(L, kf);
    }
    std::vector<T> sbuf(L);

    for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = ps.layers[l];
        LayerTrace<T>* lt = nullptr;
        if (keep_caches) {
            tr.layers.emplace_back();
            lt = &tr.layers.back();
            lt->x_in = x;
            lt->xh = Mat<T>(L, d);
            lt->q = Mat<T>(L, ka);
            lt->k = Mat<T>(L, ka);
            lt->v = Mat<T>(L, ka);
            lt->ctx = Mat<T>(L, ka);
            lt->xh2 = Mat<T>(L, d);
            lt->gpre = Mat<T>(L, kf);
            lt->upre = Mat<T>(L, kf);
            lt->act = Mat<T>(L, kf);
        }
        Mat<T>& xh = lt ? lt->xh : s_xh;
        Mat<T>& q = lt ? lt->q : s_q;
        Mat<T>& k = lt ? lt->k : s_k;
        Mat<T>& v = lt ? lt->v : s_v;
        Mat<T>& ctx = lt ? lt->ctx : s_ctx;
        Mat<T>& xh2 = lt ? lt->xh2 : s_xh2;
        Mat<T>& gpre = lt ? lt->gpre : s_gpre;
        Mat<T>& upre = lt ? lt->upre : s_upre;
        Mat<T>& act = lt ? lt->act : s_act;

        detail::rmsnorm(x, lp.attn_norm, cfg.norm_eps, xh);
        q.zero();
        k.zero();
        v.zero();
        matmul(xh, lp.wq, q, ka);
        matmul(xh, lp.wk, k, ka);
        matmul(xh, lp.wv, v, ka);
        const double theta = cfg.rope_theta(l);
        rope_apply(q, tr.positions, theta, hd);
        rope_apply(k, tr.positions, theta, hd);
        auto rng = detail::attn_ranges(bm, cfg.is_global_layer(l), cfg.local_window);
        detail::attention_ctx(q, k, v, rng, hd, ctx, sbuf);
        matmul(ctx, lp.wo, x);  // accumulating matmul = residual add
        if (lt) lt->x_mid = x;

        detail::rmsnorm(x, lp.mlp_norm, cfg.norm_eps, xh2);
        gpre.zero();
        upre.zero();
        matmul(xh2, lp.wgate, gpre, kf);
        matmul(xh2, lp.wup, upre, kf);
        for (size_t t = 0; t < act.a.size(); ++t)
            act.a[t] = gelu(gpre.a[t]) * upre.a[t];
        matmul(act, lp.wdown, x);
    }

    tr.x_final = std::move(x);
    tr.hfin = Mat<T>(L, d);
    detail::rmsnorm(tr.x_final, ps.final_norm, cfg.norm_eps, tr.hfin);

    tr.logits = Mat<T>(L, cfg.vocab_size);
    for (uint32_t i = 0; i < L; ++i) {
        T* li = tr.logits.row(i);
        const T* hi = tr.hfin.row(i);
        for (uint32_t vv = 0; vv < cfg.vocab_size; ++vv)
            li[vv] = dot(hi, ps.tok_emb.row(vv), d);  // tied lm head
    }
    if (!all_finite(std::span<const T>(tr.logits.a)))
        throw std::runtime_error("forward_mlm: non-finite logits");
    return tr;
}

// Mean cross-entropy over masked positions, no gradient.
template <typename T>
double mlm_loss(const EncoderConfig& cfg, const ParamSet<T>& ps,
                const PackedRow& row, const Granularity& g) {
    if (row.mask_positions.empty())
        throw std::invalid_argument("mlm_loss: no masked positions");
    ForwardTrace<T> tr = forward_mlm(cfg, ps, row, g, /*keep_caches=*/false);
    double sum = 0;
    for (uint32_t p : row.mask_positions) {
        const T* lg = tr.logits.row(p);
        double m = -std::numeric_limits<double>::infinity();
        for (uint32_t vv = 0; vv < cfg.vocab_size; ++vv)
            m = std::max(m, double(lg[vv]));
        double den = 0;
        for (uint32_t vv = 0; vv < cfg.vocab_size; ++vv)
            den += std::exp(double(lg[vv]) - m);
        sum += m + std::log(den) - double(lg[row.labels[p]]);
    }
    return sum / double(row.mask_positions.size());
}

// Backward pass for the SUM of cross-entropies over masked positions;
// gradients accumulate into `gr` (ParamSet-shaped, caller-zeroed).  Returns
// (sum, count) so callers can average over any batch composition exactly.
template <typename T>
std::pair<double, uint64_t> mlm_loss_grad_sum(const EncoderConfig& cfg,
                                              const ParamSet<T>& ps,
                                              const PackedRow& row,
                                              const Granularity& g,
                                              ParamSet<T>& gr) {
    if (row.mask_positions.empty())
        throw std::invalid_argument("mlm_loss_grad_sum: no masked positions");
    ForwardTrace<T> tr = forward_mlm(cfg, ps, row, g, /*keep_caches=*/true);
    const uint32_t L = row.seq_len();
    const uint32_t kh = kept_heads(cfg, g);
    const uint32_t kf = kept_ff(cfg, g);
    const uint32_t hd = cfg.head_dim;
    const uint32_t ka = kh * hd;
    const uint32_t d = cfg.d_model;
    const uint32_t V = cfg.vocab_size;

    // d(sum CE)/d(logits) is nonzero only on masked rows; fold the tied
    // lm-head backward directly into dhfin and the embedding gradient.
    double loss_sum = 0;
    Mat<T> dhfin(L, d);
    for (uint32_t p : row.mask_positions) {
        const T* lg = tr.logits.row(p);
        const uint32_t y = uint32_t(row.labels[p]);
        double m = -std::numeric_limits<double>::infinity();
        for (uint32_t vv = 0; vv < V; ++vv) m = std::max(m, double(lg[vv]));
        double den = 0;
        for (uint32_t vv = 0; vv < V; ++vv) den += std::exp(double(lg[vv]) - m);
        loss_sum += m + std::log(den) - double(lg[y]);
        T* dh = dhfin.row(p);
        const T* hf = tr.hfin.row(p);
        for (uint32_t vv = 0; vv < V; ++vv) {
            double dl = std::exp(double(lg[vv]) - m) / den - (vv == y ? 1.0 : 0.0);
            axpy(T(dl), ps.tok_emb.row(vv), dh, d);
            axpy(T(dl), hf, gr.tok_emb.row(vv), d);
        }
    }

    Mat<T> dx(L, d);
    detail::rmsnorm_backward(tr.x_final, ps.final_norm, cfg.norm_eps, dhfin, dx,
                             gr.final_norm);

    BoundaryMask bm;
    bm.segment = tr.segment;
    Mat<T> dxh(L, d), dxh2(L, d), dq(L, ka), dk(L, ka), dv(L, ka), dctx(L, ka);
    Mat<T> dgpre(L, kf), dupre(L, kf), dact(L, kf);
    std::vector<T> sbuf(L);
    std::vector<double> pbuf(L), dpbuf(L);

    for (uint32_t l = cfg.n_layers; l-- > 0;) {
        const auto& lp = ps.layers[l];
        auto& glr = gr.layers[l];
        const auto& lt = tr.layers[l];

        // FFN: x_out = x_mid + act * wdown
        dact.zero();
        matmul_grad_x(dx, lp.wdown, dact, d);
        matmul_grad_w(lt.act, dx, glr.wdown, d);
        for (size_t t = 0; t < dact.a.size(); ++t) {
            dgpre.a[t] = dact.a[t] * lt.upre.a[t] * gelu_deriv(lt.gpre.a[t]);
            dupre.a[t] = dact.a[t] * gelu(lt.gpre.a[t]);
        }
        dxh2.zero();
        matmul_grad_x(dgpre, lp.wgate, dxh2, kf);
        matmul_grad_x(dupre, lp.wup, dxh2, kf);
        matmul_grad_w(lt.xh2, dgpre, glr.wgate, kf);
        matmul_grad_w(lt.xh2, dupre, glr.wup, kf);
        detail::rmsnorm_backward(lt.x_mid, lp.mlp_norm, cfg.norm_eps, dxh2, dx,
                                 glr.mlp_norm);

        // Attention: x_mid = x_in + ctx * wo
        dctx.zero();
        matmul_grad_x(dx, lp.wo, dctx, d);
        matmul_grad_w(lt.ctx, dx, glr.wo, d);
        dq.zero();
        dk.zero();
        dv.zero();
        auto rng = detail::attn_ranges(bm, cfg.is_global_layer(l), cfg.local_window);
        detail::attention_backward(lt.q, lt.k, lt.v, dctx, rng, hd, dq, dk, dv,
                                   sbuf, pbuf, dpbuf);
        const double theta = cfg.rope_theta(l);
        rope_apply(dq, tr.positions, theta, hd, /*inverse=*/true);
        rope_apply(dk, tr.positions, theta, hd, /*inverse=*/true);
        dxh.zero();
        matmul_grad_x(dq, lp.wq, dxh, ka);
        matmul_grad_x(dk, lp.wk, dxh, ka);
        matmul_grad_x(dv, lp.wv, dxh, ka);
        matmul_grad_w(lt.xh, dq, glr.wq, ka);
        matmul_grad_w(lt.xh, dk, glr.wk, ka);
        matmul_grad_w(lt.xh, dv, glr.wv, ka);
        detail::rmsnorm_backward(lt.x_in, lp.attn_norm, cfg.norm_eps, dxh, dx,
                                 glr.attn_norm);
    }

    // Input embedding rows (the other half of the tied embedding gradient).
    for (uint32_t i = 0; i < L; ++i)
        axpy(T(1), dx.row(i), gr.tok_emb.row(row.ids[i]), d);

    return {loss_sum, row.mask_positions.size()};
}

// Mean-CE loss and matching gradients for a single row.
template <typename T>
std::pair<double, ParamSet<T>> mlm_loss_and_grad(const EncoderConfig& cfg,
                                                 const ParamSet<T>& ps,
                                                 const PackedRow& row,
                                                 const Granularity& g) {
    ParamSet<T> gr = alloc_params<T>(cfg);
    auto [sum, n] = mlm_loss_grad_sum(cfg, ps, row, g, gr);
    const T inv = T(1.0 / double(n));
    for_each_tensor(gr, [&](const TensorView<T>& t) {
        for (size_t i = 0; i < t.size; ++i) t.data[i] *= inv;
    });
    return {sum / double(n), std::move(gr)};
}

}  // namespace elen
