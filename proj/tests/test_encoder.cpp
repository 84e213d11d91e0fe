#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "elen/forward.hpp"

using namespace elen;

namespace {

ParamSet<double> widen(const ParamSet<float>& ps) {
    ParamSet<double> out;
    out.tok_emb = Mat<double>(ps.tok_emb.rows, ps.tok_emb.cols);
    for (size_t i = 0; i < ps.tok_emb.a.size(); ++i)
        out.tok_emb.a[i] = double(ps.tok_emb.a[i]);
    out.layers.resize(ps.layers.size());
    for (size_t l = 0; l < ps.layers.size(); ++l) {
        auto cp = [](const Mat<float>& m) {
            Mat<double> r(m.rows, m.cols);
            for (size_t i = 0; i < m.a.size(); ++i) r.a[i] = double(m.a[i]);
            return r;
        };
        out.layers[l].wq = cp(ps.layers[l].wq);
        out.layers[l].wk = cp(ps.layers[l].wk);
        out.layers[l].wv = cp(ps.layers[l].wv);
        out.layers[l].wo = cp(ps.layers[l].wo);
        out.layers[l].wgate = cp(ps.layers[l].wgate);
        out.layers[l].wup = cp(ps.layers[l].wup);
        out.layers[l].wdown = cp(ps.layers[l].wdown);
        out.layers[l].attn_norm.assign(ps.layers[l].attn_norm.begin(),
                                       ps.layers[l].attn_norm.end());
        out.layers[l].mlp_norm.assign(ps.layers[l].mlp_norm.begin(),
                                      ps.layers[l].mlp_norm.end());
    }
    out.final_norm.assign(ps.final_norm.begin(), ps.final_norm.end());
    return out;
}

// Straight-line reference forward: full L x L mask matrix, plain loops, all
// double.  Shares no code with the implementation under test.
struct Ref {
    static int seg_of(const std::vector<uint32_t>& bounds, uint32_t i) {
        uint32_t start = 0;
        for (size_t s = 0; s < bounds.size(); ++s) {
            if (i >= start && i < bounds[s]) return int(s);
            start = bounds[s];
        }
        return -1;
    }
    static uint32_t pos_of(const std::vector<uint32_t>& bounds, uint32_t i) {
        uint32_t start = 0;
        for (uint32_t b : bounds) {
            if (i < b) return i - start;
            start = b;
        }
        return 0;
    }
    static double gelu_ref(double x) {
        return 0.5 * x *
               (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
    }

    static std::vector<std::vector<double>> run(const EncoderConfig& cfg,
                                                const ParamSet<double>& ps,
                                                const PackedRow& row,
                                                uint32_t kept_h, uint32_t kept_f) {
        const uint32_t L = row.seq_len(), d = cfg.d_model, hd = cfg.head_dim;
        const uint32_t ka = kept_h * hd;
        std::vector<std::vector<double>> x(L, std::vector<double>(d));
        for (uint32_t i = 0; i < L; ++i)
            for (uint32_t c = 0; c < d; ++c)
                x[i][c] = ps.tok_emb.at(row.ids[i], c);

        auto norm = [&](const std::vector<std::vector<double>>& in,
                        const std::vector<double>& g) {
            std::vector<std::vector<double>> out(L, std::vector<double>(d));
            for (uint32_t i = 0; i < L; ++i) {
                double ss = 0;
                for (uint32_t c = 0; c < d; ++c) ss += in[i][c] * in[i][c];
                double rinv = 1.0 / std::sqrt(ss / d + cfg.norm_eps);
                for (uint32_t c = 0; c < d; ++c) out[i][c] = in[i][c] * g[c] * rinv;
            }
            return out;
        };

        for (uint32_t l = 0; l < cfg.n_layers; ++l) {
            const auto& lp = ps.layers[l];
            std::vector<double> an(lp.attn_norm.begin(), lp.attn_norm.end());
            auto xh = norm(x, an);

            // q/k/v over the first ka columns
            std::vector<std::vector<double>> q(L, std::vector<double>(ka, 0.0)), k = q,
                v = q;
            for (uint32_t i = 0; i < L; ++i)
                for (uint32_t c = 0; c < ka; ++c)
                    for (uint32_t j = 0; j < d; ++j) {
                        q[i][c] += xh[i][j] * lp.wq.at(j, c);
                        k[i][c] += xh[i][j] * lp.wk.at(j, c);
                        v[i][c] += xh[i][j] * lp.wv.at(j, c);
                    }

            const double theta = (l % cfg.global_period == 0) ? cfg.rope_theta_global
                                                              : cfg.rope_theta_local;
            auto rot = [&](std::vector<std::vector<double>>& m) {
                for (uint32_t i = 0; i < L; ++i) {
                    double p = pos_of(row.boundaries, i);
                    for (uint32_t h = 0; h < kept_h; ++h)
                        for (uint32_t t = 0; t < hd / 2; ++t) {
                            double ang = p * std::pow(theta, -2.0 * t / hd);
                            double c0 = std::cos(ang), s0 = std::sin(ang);
                            double& a = m[i][h * hd + 2 * t];
                            double& b = m[i][h * hd + 2 * t + 1];
                            double na = c0 * a - s0 * b, nb = s0 * a + c0 * b;
                            a = na;
                            b = nb;
                        }
                }
            };
            rot(q);
            rot(k);

            const bool global = (l % cfg.global_period == 0);
            std::vector<std::vector<double>> allowed(L, std::vector<double>(L, 0.0));
            for (uint32_t i = 0; i < L; ++i)
                for (uint32_t j = 0; j < L; ++j) {
                    int si = seg_of(row.boundaries, i), sj = seg_of(row.boundaries, j);
                    bool ok = si >= 0 && si == sj;
                    if (!global)
                        ok = ok && (i >= j ? i - j : j - i) <= cfg.local_window;
                    allowed[i][j] = ok ? 1.0 : 0.0;
                }

            std::vector<std::vector<double>> ctx(L, std::vector<double>(ka, 0.0));
            for (uint32_t i = 0; i < L; ++i)
                for (uint32_t h = 0; h < kept_h; ++h) {
                    std::vector<double> e(L, 0.0);
                    double den = 0;
                    for (uint32_t j = 0; j < L; ++j) {
                        if (allowed[i][j] == 0.0) continue;
                        double s = 0;
                        for (uint32_t t = 0; t < hd; ++t)
                            s += q[i][h * hd + t] * k[j][h * hd + t];
                        e[j] = std::exp(s / std::sqrt(double(hd)));
                        den += e[j];
                    }
                    if (den == 0) continue;  // PAD
                    for (uint32_t j = 0; j < L; ++j)
                        for (uint32_t t = 0; t < hd; ++t)
                            ctx[i][h * hd + t] += e[j] / den * v[j][h * hd + t];
                }

            for (uint32_t i = 0; i < L; ++i)
                for (uint32_t c = 0; c < d; ++c) {
                    double s = 0;
                    for (uint32_t j = 0; j < ka; ++j) s += ctx[i][j] * lp.wo.at(j, c);
                    x[i][c] += s;
                }

            std::vector<double> mn(lp.mlp_norm.begin(), lp.mlp_norm.end());
            auto xh2 = norm(x, mn);
            for (uint32_t i = 0; i < L; ++i) {
                std::vector<double> gp(kept_f, 0.0), up(kept_f, 0.0);
                for (uint32_t c = 0; c < kept_f; ++c)
                    for (uint32_t j = 0; j < d; ++j) {
                        gp[c] += xh2[i][j] * lp.wgate.at(j, c);
                        up[c] += xh2[i][j] * lp.wup.at(j, c);
                    }
                for (uint32_t c = 0; c < d; ++c) {
                    double s = 0;
                    for (uint32_t j = 0; j < kept_f; ++j)
                        s += gelu_ref(gp[j]) * up[j] * lp.wdown.at(j, c);
                    x[i][c] += s;
                }
            }
        }

        std::vector<double> fn(ps.final_norm.begin(), ps.final_norm.end());
        auto h = norm(x, fn);
        std::vector<std::vector<double>> logits(L,
                                                std::vector<double>(cfg.vocab_size));
        for (uint32_t i = 0; i < L; ++i)
            for (uint32_t vv = 0; vv < cfg.vocab_size; ++vv) {
                double s = 0;
                for (uint32_t c = 0; c < d; ++c) s += h[i][c] * ps.tok_emb.at(vv, c);
                logits[i][vv] = s;
            }
        return logits;
    }
};

EncoderConfig test_cfg() {
    EncoderConfig c = make_encoder_config(2, 64, 8, 128, 300, 64);
    c.local_window = 4;
    c.rope_theta_global = 160000.0;
    return c;
}

PackedRow test_row(uint32_t seed = 1) {
    std::mt19937_64 rng(seed);
    std::vector<uint32_t> d1(12), d2(10);
    for (auto& t : d1) t = uint32_t(rng() % 256);
    for (auto& t : d2) t = uint32_t(rng() % 256);
    Vocab v = make_byte_vocab();
    auto rows = pack_documents({d1, d2}, 32, v);
    REQUIRE(rows.size() == 1);
    REQUIRE(rows[0].boundaries == std::vector<uint32_t>{14, 26});
    return apply_mlm(rows[0], 0.3, v, seed + 99);
}

}  // namespace

TEST_CASE("forward matches the straight-line double reference") {
    EncoderConfig cfg = test_cfg();
    ParamSet<float> psf = init_params<float>(cfg, 5);
    ParamSet<double> psd = widen(psf);
    PackedRow row = test_row();

    for (Granularity g : {Granularity{1.0, 1.0}, Granularity{0.5, 1.0},
                          Granularity{1.0, 0.25}, Granularity{0.5, 0.5}}) {
        auto ref = Ref::run(cfg, psd, row, kept_heads(cfg, g), kept_ff(cfg, g));
        auto trd = forward_mlm(cfg, psd, row, g);
        auto trf = forward_mlm(cfg, psf, row, g);
        double worst_d = 0, worst_f = 0;
        for (uint32_t i = 0; i < row.seq_len(); ++i)
            for (uint32_t vv = 0; vv < cfg.vocab_size; ++vv) {
                worst_d = std::max(worst_d, std::abs(trd.logits.at(i, vv) - ref[i][vv]));
                worst_f =
                    std::max(worst_f, std::abs(double(trf.logits.at(i, vv)) - ref[i][vv]));
            }
        INFO("f_head=" << g.f_head << " f_mlp=" << g.f_mlp);
        REQUIRE(worst_d < 1e-10);
        REQUIRE(worst_f < 1e-3);
    }
}

TEST_CASE("rope rotates the first pair of a position-1 token by one radian") {
    Mat<double> m(2, 2);
    m.at(0, 0) = 1.0;  // position 0: untouched
    m.at(1, 0) = 1.0;  // position 1, theta^0 = 1 -> rotate by exactly 1 rad
    std::vector<uint32_t> pos = {0, 1};
    rope_apply(m, pos, 10000.0, 2);
    REQUIRE(m.at(0, 0) == 1.0);
    REQUIRE(m.at(0, 1) == 0.0);
    REQUIRE(m.at(1, 0) == Catch::Approx(std::cos(1.0)).margin(1e-15));
    REQUIRE(m.at(1, 1) == Catch::Approx(std::sin(1.0)).margin(1e-15));
}

TEST_CASE("rope preserves norms and inverts exactly") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0.0, 1.0);
    Mat<double> m(16, 32);  // 2 heads x head_dim 16
    for (auto& x : m.a) x = g(rng);
    Mat<double> orig = m;
    std::vector<uint32_t> pos(16);
    for (uint32_t i = 0; i < 16; ++i) pos[i] = i * 7 % 13;
    rope_apply(m, pos, 10000.0, 16);
    for (uint32_t i = 0; i < 16; ++i) {
        double n0 = 0, n1 = 0;
        for (uint32_t c = 0; c < 32; ++c) {
            n0 += orig.at(i, c) * orig.at(i, c);
            n1 += m.at(i, c) * m.at(i, c);
        }
        REQUIRE(n1 == Catch::Approx(n0).epsilon(1e-12));
    }
    rope_apply(m, pos, 10000.0, 16, /*inverse=*/true);
    for (size_t t = 0; t < m.a.size(); ++t)
        REQUIRE(m.a[t] == Catch::Approx(orig.a[t]).margin(1e-12));
    REQUIRE_THROWS_AS(rope_apply(m, pos, 10000.0, 7), std::invalid_argument);
}

TEST_CASE("positions restart at each segment") {
    BoundaryMask bm = boundary_mask({5, 9}, 12);
    auto pos = segment_positions(bm);
    REQUIRE(pos == std::vector<uint32_t>{0, 1, 2, 3, 4, 0, 1, 2, 3, 0, 0, 0});
}

TEST_CASE("attention ranges match the quadratic mask oracle") {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 10; ++t) {
        const uint32_t L = 48;
        std::vector<uint32_t> bounds;
        uint32_t at = 0;
        while ((at += 3 + rng() % 14) <= L - 4) bounds.push_back(at);
        if (bounds.empty()) bounds.push_back(20);
        BoundaryMask bm = boundary_mask(bounds, L);
        for (bool global : {true, false}) {
            uint32_t w = 1 + uint32_t(rng() % 6);
            auto r = detail::attn_ranges(bm, global, w);
            for (uint32_t i = 0; i < L; ++i)
                for (uint32_t j = 0; j < L; ++j) {
                    bool want = bm.allowed(i, j);
                    if (!global) want = want && (i >= j ? i - j : j - i) <= w;
                    bool got = j >= r.lo[i] && j < r.hi[i];
                    REQUIRE(got == want);
                }
        }
    }
}

TEST_CASE("segments are isolated bit-exactly") {
    EncoderConfig cfg = test_cfg();
    ParamSet<float> ps = init_params<float>(cfg, 7);
    Vocab v = make_byte_vocab();

    std::vector<uint32_t> shared(12), tail_a(10), tail_b(10);
    std::mt19937_64 rng(11);
    for (auto& t : shared) t = uint32_t(rng() % 256);
    for (auto& t : tail_a) t = uint32_t(rng() % 256);
    for (auto& t : tail_b) t = uint32_t(rng() % 256);

    auto rows_a = pack_documents({shared, tail_a}, 32, v);
    auto rows_b = pack_documents({shared, tail_b}, 32, v);
    auto tra = forward_mlm(cfg, ps, rows_a[0], {1.0, 1.0});
    auto trb = forward_mlm(cfg, ps, rows_b[0], {1.0, 1.0});

    // First segment spans [0,14); its logits cannot see the second segment.
    for (uint32_t i = 0; i < 14; ++i)
        for (uint32_t vv = 0; vv < cfg.vocab_size; ++vv)
            REQUIRE(tra.logits.at(i, vv) == trb.logits.at(i, vv));
    // The differing segment does produce different logits.
    bool any_diff = false;
    for (uint32_t i = 14; i < 26 && !any_diff; ++i)
        for (uint32_t vv = 0; vv < cfg.vocab_size; ++vv)
            if (tra.logits.at(i, vv) != trb.logits.at(i, vv)) {
                any_diff = true;
                break;
            }
    REQUIRE(any_diff);
}

TEST_CASE("local attention drops keys beyond the window") {
    // Single 24-token segment, window 4: context row 0 only sees keys 0..4.
    const uint32_t L = 24, hd = 8, ka = 16;
    BoundaryMask bm = boundary_mask({L}, L);
    auto r = detail::attn_ranges(bm, /*is_global=*/false, 4);
    std::mt19937_64 rng(13);
    std::normal_distribution<float> g(0.0f, 1.0f);
    Mat<float> q(L, ka), k(L, ka), v(L, ka), ctx1(L, ka), ctx2(L, ka);
    for (auto& x : q.a) x = g(rng);
    for (auto& x : k.a) x = g(rng);
    for (auto& x : v.a) x = g(rng);
    std::vector<float> sbuf(L);
    detail::attention_ctx(q, k, v, r, hd, ctx1, sbuf);
    for (uint32_t c = 0; c < ka; ++c) {
        k.at(9, c) += 3.0f;  // |0-9| > 4: invisible to query 0, visible to query 5
        v.at(9, c) -= 2.0f;
    }
    detail::attention_ctx(q, k, v, r, hd, ctx2, sbuf);
    for (uint32_t c = 0; c < ka; ++c) REQUIRE(ctx1.at(0, c) == ctx2.at(0, c));
    bool changed = false;
    for (uint32_t c = 0; c < ka; ++c)
        if (ctx1.at(5, c) != ctx2.at(5, c)) changed = true;
    REQUIRE(changed);

    // Global ranges see the whole segment.
    auto rg = detail::attn_ranges(bm, /*is_global=*/true, 4);
    detail::attention_ctx(q, k, v, rg, hd, ctx1, sbuf);
    detail::attention_ctx(q, k, v, rg, hd, ctx2, sbuf);  // deterministic
    REQUIRE(ctx1.a == ctx2.a);
}

TEST_CASE("slice then forward is bit-identical to sliced forward") {
    EncoderConfig cfg = test_cfg();
    ParamSet<float> ps = init_params<float>(cfg, 23);
    PackedRow row = test_row(2);
    for (double fh : kGranularitySteps)
        for (double fm : kGranularitySteps) {
            Granularity g{fh, fm};
            auto full = forward_mlm(cfg, ps, row, g);
            auto [scfg, sps] = slice_params(ps, cfg, g);
            REQUIRE(scfg.n_heads == kept_heads(cfg, g));
            REQUIRE(scfg.d_ff == kept_ff(cfg, g));
            REQUIRE(scfg.head_dim == cfg.head_dim);
            auto sliced = forward_mlm(scfg, sps, row, {1.0, 1.0});
            REQUIRE(full.logits.a == sliced.logits.a);
        }
}

TEST_CASE("slicing composes: half of half equals a quarter") {
    EncoderConfig cfg = test_cfg();
    ParamSet<float> ps = init_params<float>(cfg, 29);
    auto [cfg_half, ps_half] = slice_params(ps, cfg, {0.5, 0.5});
    auto [cfg_q1, ps_q1] = slice_params(ps_half, cfg_half, {0.5, 0.5});
    auto [cfg_q2, ps_q2] = slice_params(ps, cfg, {0.25, 0.25});
    REQUIRE(cfg_q1 == cfg_q2);
    bool equal = true;
    for_each_tensor(ps_q1, [&](const TensorView<float>& t) {
        const float* other = nullptr;
        for_each_tensor(ps_q2, [&](const TensorView<float>& u) {
            if (u.name == t.name) other = u.data;
        });
        REQUIRE(other != nullptr);
        for (size_t i = 0; i < t.size; ++i)
            if (t.data[i] != other[i]) equal = false;
    });
    REQUIRE(equal);
}

TEST_CASE("different granularities give different logits") {
    EncoderConfig cfg = test_cfg();
    ParamSet<float> ps = init_params<float>(cfg, 31);
    PackedRow row = test_row(3);
    auto full = forward_mlm(cfg, ps, row, {1.0, 1.0});
    auto half = forward_mlm(cfg, ps, row, {0.5, 0.5});
    REQUIRE(full.logits.a != half.logits.a);
}

TEST_CASE("sliced parameter count shrinks correctly") {
    EncoderConfig cfg = test_cfg();
    ParamSet<float> ps = init_params<float>(cfg, 37);
    // Per layer: wq+wk+wv (d*ka each) + wo (ka*d) + norms (2d) + wgate+wup
    // (d*kf each) + wdown (kf*d); plus tok_emb (V*d) and final_norm (d).
    auto expect = [&](uint32_t ka, uint32_t kf) {
        uint64_t per_layer = 4ull * cfg.d_model * ka + 3ull * cfg.d_model * kf +
                             2ull * cfg.d_model;
        return uint64_t(cfg.vocab_size) * cfg.d_model + cfg.d_model +
               cfg.n_layers * per_layer;
    };
    REQUIRE(param_count(ps) == expect(64, 128));
    auto [scfg, sps] = slice_params(ps, cfg, {0.25, 0.5});
    REQUIRE(param_count(sps) == expect(16, 64));
    REQUIRE(param_count(sps) < param_count(ps));
}

TEST_CASE("granularity validation") {
    EncoderConfig cfg = test_cfg();
    REQUIRE(kept_heads(cfg, {0.25, 1.0}) == 2);
    REQUIRE(kept_ff(cfg, {1.0, 0.75}) == 96);
    REQUIRE_THROWS_AS(kept_heads(cfg, {0.3, 1.0}), std::invalid_argument);
    REQUIRE_THROWS_AS(kept_ff(cfg, {1.0, 0.0}), std::invalid_argument);
    REQUIRE_THROWS_AS(kept_ff(cfg, {1.0, 1.1}), std::invalid_argument);
    EncoderConfig c3 = make_encoder_config(1, 30, 3, 16, 100, 32);
    REQUIRE_THROWS_AS(kept_heads(c3, {0.5, 1.0}), std::invalid_argument);  // 1.5 heads
}

TEST_CASE("config json roundtrip and validation") {
    EncoderConfig cfg = test_cfg();
    EncoderConfig back = EncoderConfig::from_json(cfg.to_json());
    REQUIRE(back == cfg);
    EncoderConfig bad = cfg;
    bad.head_dim = 7;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.n_heads = 9;  // attn_dim 72 > d_model 64
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.local_window = 0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    REQUIRE_THROWS_AS(make_encoder_config(2, 64, 5, 128, 300, 64),
                      std::invalid_argument);
    // Sliced configs keep head_dim explicit: 2 heads * 8 dims < d_model 64.
    auto [scfg, sps] = slice_params(init_params<float>(cfg, 1), cfg, {0.25, 1.0});
    REQUIRE(scfg.attn_dim() == 16);
    scfg.validate();
}

TEST_CASE("init is deterministic, truncated, and sets norms to one") {
    EncoderConfig cfg = test_cfg();
    ParamSet<float> a = init_params<float>(cfg, 41);
    ParamSet<float> b = init_params<float>(cfg, 41);
    ParamSet<float> c = init_params<float>(cfg, 42);
    REQUIRE(a.tok_emb.a == b.tok_emb.a);
    REQUIRE(a.layers[1].wdown.a == b.layers[1].wdown.a);
    REQUIRE(a.tok_emb.a != c.tok_emb.a);
    for (float x : a.tok_emb.a) REQUIRE(std::abs(x) <= 0.06f);
    for (float x : a.layers[0].wq.a) REQUIRE(std::abs(x) <= 0.06f);
    for (float x : a.final_norm) REQUIRE(x == 1.0f);
    for (float x : a.layers[0].attn_norm) REQUIRE(x == 1.0f);
    double mean = 0;
    for (float x : a.tok_emb.a) mean += x;
    mean /= double(a.tok_emb.a.size());
    REQUIRE(std::abs(mean) < 0.002);
}

TEST_CASE("forward input validation") {
    EncoderConfig cfg = test_cfg();
    ParamSet<float> ps = init_params<float>(cfg, 1);
    PackedRow row = test_row();
    PackedRow bad = row;
    bad.ids[3] = cfg.vocab_size;  // out of range
    REQUIRE_THROWS_AS(forward_mlm(cfg, ps, bad, {1.0, 1.0}), std::invalid_argument);
    PackedRow long_row;
    long_row.ids.assign(cfg.max_len + 1, 1);
    long_row.boundaries = {cfg.max_len + 1};
    long_row.labels.assign(cfg.max_len + 1, -1);
    REQUIRE_THROWS_AS(forward_mlm(cfg, ps, long_row, {1.0, 1.0}),
                      std::invalid_argument);
    PackedRow unmasked = row;
    unmasked.mask_positions.clear();
    unmasked.labels.assign(row.seq_len(), -1);
    REQUIRE_THROWS_AS(mlm_loss(cfg, ps, unmasked, {1.0, 1.0}), std::invalid_argument);

    auto tr = forward_mlm(cfg, ps, row, {1.0, 1.0}, /*keep_caches=*/false);
    REQUIRE(tr.layers.empty());
    REQUIRE(tr.logits.rows == row.seq_len());
    REQUIRE(tr.logits.cols == cfg.vocab_size);
    auto cached = forward_mlm(cfg, ps, row, {0.5, 1.0});
    REQUIRE(cached.layers.size() == cfg.n_layers);
    REQUIRE(cached.layers[0].q.cols == 32);
    REQUIRE(cached.layers[0].gpre.cols == 128);
}
