#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "elen/forward.hpp"
#include "test_util.hpp"

using namespace elen;

namespace {

EncoderConfig toy_cfg() {
    EncoderConfig c = make_encoder_config(2, 8, 4, 8, 16, 16);
    c.local_window = 2;  // layer 1 is local with a tight window
    c.rope_theta_global = 160000.0;
    return c;
}

PackedRow toy_row(const Vocab& v, bool with_pad, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::vector<uint32_t>> streams;
    if (with_pad) {
        streams = {{uint32_t(rng() % 10), uint32_t(rng() % 10), uint32_t(rng() % 10)}};
    } else {
        streams = {{uint32_t(rng() % 10), uint32_t(rng() % 10), uint32_t(rng() % 10)},
                   {uint32_t(rng() % 10)}};
    }
    auto rows = pack_documents(streams, 8, v);
    REQUIRE(rows.size() == 1);
    PackedRow row = apply_mlm(rows[0], 0.6, v, seed + 1);
    if (row.mask_positions.empty()) row = apply_mlm(rows[0], 0.6, v, seed + 2);
    REQUIRE(!row.mask_positions.empty());
    return row;
}

// Central finite differences against the analytic gradient, in f64.
void check_grads(const EncoderConfig& cfg, ParamSet<double>& ps,
                 const PackedRow& row, const Granularity& g) {
    auto [loss, grads] = mlm_loss_and_grad(cfg, ps, row, g);
    REQUIRE(std::isfinite(loss));
    const double eps = 1e-5;
    double worst = 0.0;

    std::vector<TensorView<double>> pviews, gviews;
    for_each_tensor(ps, [&](const TensorView<double>& t) { pviews.push_back(t); });
    for_each_tensor(grads, [&](const TensorView<double>& t) { gviews.push_back(t); });
    REQUIRE(pviews.size() == gviews.size());

    for (size_t t = 0; t < pviews.size(); ++t) {
        REQUIRE(pviews[t].name == gviews[t].name);
        for (size_t i = 0; i < pviews[t].size; ++i) {
            double* p = pviews[t].data + i;
            const double orig = *p;
            *p = orig + eps;
            double lp = mlm_loss(cfg, ps, row, g);
            *p = orig - eps;
            double lm = mlm_loss(cfg, ps, row, g);
            *p = orig;
            double fd = (lp - lm) / (2 * eps);
            double an = gviews[t].data[i];
            // FD roundoff is ~ulp(loss)/eps, so tiny gradients need an
            // absolute floor under the relative test.
            double scale = std::max(std::abs(fd), std::abs(an));
            INFO(pviews[t].name << "[" << i << "] fd=" << fd << " an=" << an);
            REQUIRE(std::abs(fd - an) < 1e-9 + 1e-5 * scale);
            if (scale > 1e-6) worst = std::max(worst, std::abs(fd - an) / scale);
        }
    }
    // Headline check on gradients big enough for the relative error to mean
    // anything; the per-element bound above already covered the rest.
    REQUIRE(worst < 1e-4);
}

}  // namespace

TEST_CASE("gelu derivative matches finite differences") {
    for (double x : {-3.0, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0}) {
        double h = 1e-6;
        double fd = (gelu(x + h) - gelu(x - h)) / (2 * h);
        REQUIRE(gelu_deriv(x) == Catch::Approx(fd).margin(1e-8));
    }
}

TEST_CASE("analytic gradients match finite differences at full granularity") {
    EncoderConfig cfg = toy_cfg();
    Vocab v = testutil::tiny_vocab();
    ParamSet<double> ps = testutil::cast_params<double>(init_params<float>(cfg, 3));
    check_grads(cfg, ps, toy_row(v, /*with_pad=*/false, 10), {1.0, 1.0});
}

TEST_CASE("analytic gradients match finite differences on a padded row") {
    EncoderConfig cfg = toy_cfg();
    Vocab v = testutil::tiny_vocab();
    ParamSet<double> ps = testutil::cast_params<double>(init_params<float>(cfg, 5));
    check_grads(cfg, ps, toy_row(v, /*with_pad=*/true, 20), {1.0, 1.0});
}

TEST_CASE("analytic gradients match finite differences at half granularity") {
    EncoderConfig cfg = toy_cfg();
    Vocab v = testutil::tiny_vocab();
    ParamSet<double> ps = testutil::cast_params<double>(init_params<float>(cfg, 7));
    check_grads(cfg, ps, toy_row(v, /*with_pad=*/false, 30), {0.5, 0.5});
}

TEST_CASE("unused slices receive exactly zero gradient") {
    EncoderConfig cfg = toy_cfg();
    Vocab v = testutil::tiny_vocab();
    ParamSet<double> ps = testutil::cast_params<double>(init_params<float>(cfg, 9));
    PackedRow row = toy_row(v, false, 40);
    Granularity g{0.5, 0.5};
    auto [loss, grads] = mlm_loss_and_grad(cfg, ps, row, g);
    (void)loss;
    const uint32_t ka = kept_heads(cfg, g) * cfg.head_dim;
    const uint32_t kf = kept_ff(cfg, g);
    for (const auto& l : grads.layers) {
        for (uint32_t r = 0; r < l.wq.rows; ++r)
            for (uint32_t c = ka; c < l.wq.cols; ++c) {
                REQUIRE(l.wq.at(r, c) == 0.0);
                REQUIRE(l.wk.at(r, c) == 0.0);
                REQUIRE(l.wv.at(r, c) == 0.0);
            }
        for (uint32_t r = ka; r < l.wo.rows; ++r)
            for (uint32_t c = 0; c < l.wo.cols; ++c) REQUIRE(l.wo.at(r, c) == 0.0);
        for (uint32_t r = 0; r < l.wgate.rows; ++r)
            for (uint32_t c = kf; c < l.wgate.cols; ++c) {
                REQUIRE(l.wgate.at(r, c) == 0.0);
                REQUIRE(l.wup.at(r, c) == 0.0);
            }
        for (uint32_t r = kf; r < l.wdown.rows; ++r)
            for (uint32_t c = 0; c < l.wdown.cols; ++c)
                REQUIRE(l.wdown.at(r, c) == 0.0);
    }
    // The used prefix is not all zeros.
    double mag = 0;
    for (uint32_t r = 0; r < grads.layers[0].wq.rows; ++r)
        for (uint32_t c = 0; c < ka; ++c)
            mag += std::abs(grads.layers[0].wq.at(r, c));
    REQUIRE(mag > 0.0);
}

TEST_CASE("zero embeddings give exactly ln V") {
    EncoderConfig cfg = toy_cfg();
    Vocab v = testutil::tiny_vocab();
    ParamSet<double> ps = testutil::cast_params<double>(init_params<float>(cfg, 11));
    ps.tok_emb.zero();
    PackedRow row = toy_row(v, false, 50);
    double loss = mlm_loss(cfg, ps, row, {1.0, 1.0});
    REQUIRE(loss == Catch::Approx(std::log(16.0)).margin(1e-12));
}

TEST_CASE("gradient accumulation is additive across rows") {
    EncoderConfig cfg = toy_cfg();
    Vocab v = testutil::tiny_vocab();
    ParamSet<double> ps = testutil::cast_params<double>(init_params<float>(cfg, 13));
    PackedRow r1 = toy_row(v, false, 60);
    PackedRow r2 = toy_row(v, true, 70);

    ParamSet<double> combined = alloc_params<double>(cfg);
    auto [s1, n1] = mlm_loss_grad_sum(cfg, ps, r1, {1.0, 1.0}, combined);
    auto [s2, n2] = mlm_loss_grad_sum(cfg, ps, r2, {1.0, 1.0}, combined);

    ParamSet<double> ga = alloc_params<double>(cfg);
    ParamSet<double> gb = alloc_params<double>(cfg);
    auto [s1b, n1b] = mlm_loss_grad_sum(cfg, ps, r1, {1.0, 1.0}, ga);
    auto [s2b, n2b] = mlm_loss_grad_sum(cfg, ps, r2, {1.0, 1.0}, gb);
    REQUIRE(s1 == s1b);
    REQUIRE(s2 == s2b);
    REQUIRE(n1 == n1b);
    REQUIRE(n2 == n2b);

    std::vector<TensorView<double>> vc, va, vb;
    for_each_tensor(combined, [&](const TensorView<double>& t) { vc.push_back(t); });
    for_each_tensor(ga, [&](const TensorView<double>& t) { va.push_back(t); });
    for_each_tensor(gb, [&](const TensorView<double>& t) { vb.push_back(t); });
    for (size_t t = 0; t < vc.size(); ++t)
        for (size_t i = 0; i < vc[t].size; ++i) {
            double want = va[t].data[i] + vb[t].data[i];
            double got = vc[t].data[i];
            REQUIRE(got == Catch::Approx(want).margin(1e-9).epsilon(1e-9));
        }

    // The mean-form wrapper is the sum result scaled by 1/n.
    auto [mean_loss, mean_grads] = mlm_loss_and_grad(cfg, ps, r1, {1.0, 1.0});
    REQUIRE(mean_loss == Catch::Approx(s1 / double(n1)).epsilon(1e-15));
    std::vector<TensorView<double>> vm;
    for_each_tensor(mean_grads, [&](const TensorView<double>& t) { vm.push_back(t); });
    for (size_t t = 0; t < vm.size(); ++t)
        for (size_t i = 0; i < vm[t].size; ++i)
            REQUIRE(vm[t].data[i] ==
                    Catch::Approx(va[t].data[i] / double(n1)).margin(1e-15));
}
