#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "elen/bpe.hpp"
#include "elen/transplant.hpp"

using namespace elen;

namespace {

Mat<float> random_emb(uint32_t rows, uint32_t cols, uint64_t seed) {
    Mat<float> m(rows, cols);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& x : m.a) x = float(g(rng));
    return m;
}

}  // namespace

TEST_CASE("identity transplant copies everything bit-exactly") {
    Vocab v = train_bpe({"solo solo solo duet duet"}, 268);
    auto plan = build_transplant_plan(v, v);
    REQUIRE(plan.overlap == 1.0);
    REQUIRE(plan.shared.size() == v.size());
    REQUIRE(plan.fresh.empty());
    Mat<float> src = random_emb(v.size(), 16, 1);
    Mat<float> dst = transplant_embeddings(plan, src);
    REQUIRE(dst.a == src.a);
}

TEST_CASE("fresh rows average their source tokenization") {
    Vocab src = make_byte_vocab();
    // dst adds a two-byte token "ab"; in src it encodes to bytes 'a','b'.
    Vocab dst = train_bpe({"ab ab ab"}, 263);
    REQUIRE(dst.tokens[262] == "ab");
    auto plan = build_transplant_plan(src, dst);
    REQUIRE(plan.shared.size() == 262);
    REQUIRE(plan.fresh.size() == 1);
    REQUIRE(plan.fresh[0].first == 262);
    REQUIRE(plan.fresh[0].second == std::vector<uint32_t>{uint32_t('a'), uint32_t('b')});

    Mat<float> emb(src.size(), 4);
    for (uint32_t r = 0; r < emb.rows; ++r)
        for (uint32_t c = 0; c < 4; ++c) emb.at(r, c) = float(r) + float(c) * 0.25f;
    Mat<float> out = transplant_embeddings(plan, emb);
    for (uint32_t c = 0; c < 4; ++c) {
        float want = (emb.at(uint32_t('a'), c) + emb.at(uint32_t('b'), c)) / 2.0f;
        REQUIRE(out.at(262, c) == want);
    }
    // Every shared row is a bit-exact copy.
    for (auto [s, d] : plan.shared)
        for (uint32_t c = 0; c < 4; ++c) REQUIRE(out.at(d, c) == emb.at(s, c));
}

TEST_CASE("plan overlap matches a set-intersection oracle") {
    std::mt19937_64 rng(5);
    static const char* bases[] = {"aa bb cc aa bb", "xy xy zw zw xy",
                                  "foo bar foo baz", "lorem ipsum lorem",
                                  "qq rr qq ss qq rr"};
    for (int t = 0; t < 50; ++t) {
        Vocab a = train_bpe({bases[rng() % 5], bases[rng() % 5]}, 262 + rng() % 12);
        Vocab b = train_bpe({bases[rng() % 5], bases[rng() % 5]}, 262 + rng() % 12);
        std::set<std::string> sa(a.tokens.begin(), a.tokens.end());
        size_t shared = 0;
        for (const auto& tok : b.tokens) shared += sa.count(tok);
        auto plan = build_transplant_plan(a, b);
        REQUIRE(plan.shared.size() == shared);
        REQUIRE(plan.overlap == Catch::Approx(double(shared) / b.size()).epsilon(1e-12));
        REQUIRE(plan.overlap == Catch::Approx(vocab_overlap(a, b)).epsilon(1e-12));
    }
}

TEST_CASE("bit-identical row fraction equals the overlap") {
    Vocab src = train_bpe({"the the the cat cat sat sat"}, 270);
    Vocab dst = train_bpe({"the the the dog dog ran ran"}, 270);
    auto plan = build_transplant_plan(src, dst);
    REQUIRE(plan.overlap < 1.0);
    REQUIRE(plan.overlap > 0.9);  // byte alphabet always carries over

    Mat<float> emb = random_emb(src.size(), 8, 2);
    Mat<float> out = transplant_embeddings(plan, emb);
    size_t identical = 0;
    for (uint32_t d = 0; d < dst.size(); ++d) {
        auto it = src.index.find(dst.tokens[d]);
        if (it == src.index.end()) continue;
        bool same = true;
        for (uint32_t c = 0; c < 8; ++c)
            if (out.at(d, c) != emb.at(it->second, c)) same = false;
        identical += same;
    }
    REQUIRE(double(identical) / dst.size() == Catch::Approx(plan.overlap).epsilon(1e-12));
}

TEST_CASE("empty recipe draws gaussian rows at the matched scale") {
    TransplantPlan plan;
    plan.src_size = 4;
    plan.dst_size = 5;
    for (uint32_t i = 0; i < 4; ++i) plan.shared.emplace_back(i, i);
    plan.fresh.emplace_back(4, std::vector<uint32_t>{});
    plan.overlap = 0.8;

    const uint32_t d = 4096;
    Mat<float> src(4, d);
    for (auto& x : src.a) x = 1.0f;  // row norm sqrt(d) => sigma = 1
    Mat<float> out = transplant_embeddings(plan, src, 9);
    double mean = 0.0, var = 0.0;
    for (uint32_t c = 0; c < d; ++c) mean += out.at(4, c);
    mean /= d;
    for (uint32_t c = 0; c < d; ++c) {
        double e = out.at(4, c) - mean;
        var += e * e;
    }
    double stddev = std::sqrt(var / (d - 1));
    REQUIRE(std::abs(mean) < 0.06);
    REQUIRE(stddev > 0.93);
    REQUIRE(stddev < 1.07);

    Mat<float> again = transplant_embeddings(plan, src, 9);
    REQUIRE(again.a == out.a);  // same seed, same rows
    Mat<float> other = transplant_embeddings(plan, src, 10);
    REQUIRE(other.a != out.a);
}

TEST_CASE("transplant validation errors") {
    Vocab v = make_byte_vocab();
    auto plan = build_transplant_plan(v, v);
    Mat<float> wrong(v.size() - 1, 4);
    REQUIRE_THROWS_AS(transplant_embeddings(plan, wrong), std::invalid_argument);

    TransplantPlan hole;
    hole.src_size = 2;
    hole.dst_size = 2;
    hole.shared.emplace_back(0, 0);  // dst id 1 uncovered
    REQUIRE_THROWS_AS(hole.validate(), std::runtime_error);

    TransplantPlan bad;
    bad.src_size = 2;
    bad.dst_size = 1;
    bad.fresh.emplace_back(0, std::vector<uint32_t>{5});  // recipe id out of range
    REQUIRE_THROWS_AS(bad.validate(), std::runtime_error);
}
