#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "elen/forward.hpp"

namespace elen {

// Fig.-2-style reference throughput of the 308M model on one H100
// (samples/s at 8192-token samples), used as a comparison column.
inline constexpr std::array<std::pair<double, double>, 4> kReferenceSamplesPerS = {
    {{0.25, 34.2}, {0.5, 23.4}, {0.75, 17.7}, {1.0, 14.2}}};

struct BenchRow {
    double f_head = 1.0;
    double f_mlp = 1.0;
    uint32_t seq_len = 0;
    uint32_t batch = 0;
    double samples_per_s = 0;
    double wall_ms_p50 = 0;
    double wall_ms_p90 = 0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::string environment;
    uint32_t repeats = 0;

    nlohmann::json to_json() const {
        nlohmann::json rs = nlohmann::json::array();
        for (const auto& r : rows)
            rs.push_back({{"f_head", r.f_head},
                          {"f_mlp", r.f_mlp},
                          {"seq_len", r.seq_len},
                          {"batch", r.batch},
                          {"samples_per_s", r.samples_per_s},
                          {"wall_ms_p50", r.wall_ms_p50},
                          {"wall_ms_p90", r.wall_ms_p90}});
        return {{"rows", rs}, {"environment", environment}, {"repeats", repeats}};
    }

    static BenchReport from_json(const nlohmann::json& j) {
        BenchReport rep;
        rep.environment = j.value("environment", "");
        rep.repeats = j.value("repeats", 0u);
        for (const auto& r : j.at("rows"))
            rep.rows.push_back({r.at("f_head").get<double>(),
                                r.at("f_mlp").get<double>(),
                                r.at("seq_len").get<uint32_t>(),
                                r.at("batch").get<uint32_t>(),
                                r.at("samples_per_s").get<double>(),
                                r.at("wall_ms_p50").get<double>(),
                                r.at("wall_ms_p90").get<double>()});
        return rep;
    }
};

// Synthetic single-segment rows of uniform random ids (mask geometry changes
// cost, so benchmarking uses the simplest shape).
inline std::vector<PackedRow> bench_rows(uint32_t seq_len, uint32_t batch,
                                         uint32_t vocab_size, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<uint32_t> tok(0, vocab_size - 1);
    std::vector<PackedRow> rows(batch);
    for (auto& r : rows) {
        r.ids.resize(seq_len);
        for (auto& id : r.ids) id = tok(rng);
        r.boundaries = {seq_len};
        r.labels.assign(seq_len, -1);
    }
    return rows;
}

// Forward-only wall time at granularity g.  The model is physically sliced
// first (the same slice_params the equivalence oracle validates), so the
// measured work is what a deployed sub-network would do.
template <typename T>
BenchRow throughput(const EncoderConfig& cfg, const ParamSet<T>& ps,
                    const Granularity& g, uint32_t seq_len, uint32_t batch,
                    uint32_t repeats, uint32_t warmup_iters,
                    uint64_t seed = 42) {
    if (repeats < 5) throw std::invalid_argument("throughput: need repeats >= 5");
    if (batch == 0) throw std::invalid_argument("throughput: batch = 0");
    if (seq_len > cfg.max_len)
        throw std::invalid_argument("throughput: seq_len exceeds model max_len");
    auto [scfg, sps] = slice_params(ps, cfg, g);
    auto rows = bench_rows(seq_len, batch, scfg.vocab_size, seed);
    const Granularity full{1.0, 1.0};

    volatile double sink = 0;  // keep the forward pass observable
    auto run_batch = [&] {
        double acc = 0;
        for (const auto& r : rows) {
            ForwardTrace<T> tr = forward_mlm(scfg, sps, r, full, /*keep_caches=*/false);
            acc += double(tr.logits.at(0, 0));
        }
        sink = sink + acc;
    };

    for (uint32_t i = 0; i < warmup_iters; ++i) run_batch();
    std::vector<double> wall_ms(repeats);
    for (uint32_t i = 0; i < repeats; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        run_batch();
        auto t1 = std::chrono::steady_clock::now();
        wall_ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    std::sort(wall_ms.begin(), wall_ms.end());
    auto nearest_rank = [&](double q) {
        size_t k = size_t(std::ceil(q * repeats));
        return wall_ms[std::min(wall_ms.size() - 1, k == 0 ? 0 : k - 1)];
    };
    BenchRow row;
    row.f_head = g.f_head;
    row.f_mlp = g.f_mlp;
    row.seq_len = seq_len;
    row.batch = batch;
    row.wall_ms_p50 = nearest_rank(0.5);
    row.wall_ms_p90 = nearest_rank(0.9);
    row.samples_per_s = double(batch) / (row.wall_ms_p50 / 1000.0);
    return row;
}

struct SpeedupRow {
    double f_head, f_mlp;
    double samples_per_s;
    double ratio;            // vs the (1,1) baseline
    double reference_ratio;  // H100/308M column when the grid matches; else 0
};

// Ratios vs the full-granularity baseline at matching seq_len/batch.
inline std::vector<SpeedupRow> speedup_report(const BenchReport& rep) {
    const BenchRow* base = nullptr;
    for (const auto& r : rep.rows)
        if (r.f_head == 1.0 && r.f_mlp == 1.0) {
            base = &r;
            break;
        }
    if (!base) throw std::runtime_error("speedup_report: missing (1,1) baseline");
    std::vector<SpeedupRow> out;
    for (const auto& r : rep.rows) {
        if (r.seq_len != base->seq_len || r.batch != base->batch)
            throw std::runtime_error("speedup_report: rows measured at mixed shapes");
        SpeedupRow s{r.f_head, r.f_mlp, r.samples_per_s,
                     r.samples_per_s / base->samples_per_s, 0.0};
        if (r.f_mlp == 1.0) {
            for (const auto& [f, v] : kReferenceSamplesPerS)
                if (f == r.f_head)
                    s.reference_ratio = v / kReferenceSamplesPerS.back().second;
        }
        out.push_back(s);
    }
    return out;
}

inline nlohmann::json speedup_json(const std::vector<SpeedupRow>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json j = {{"f_head", r.f_head},
                            {"f_mlp", r.f_mlp},
                            {"samples_per_s", r.samples_per_s},
                            {"ratio", r.ratio}};
        if (r.reference_ratio > 0) j["reference_ratio"] = r.reference_ratio;
        out.push_back(j);
    }
    return out;
}

inline std::string render_speedup_table(const std::vector<SpeedupRow>& rows) {
    std::ostringstream os;
    os << "f_head  f_mlp  samples/s      ratio   ref-ratio\n";
    char buf[128];
    for (const auto& r : rows) {
        if (r.reference_ratio > 0)
            std::snprintf(buf, sizeof(buf), "%6.2f %6.2f %10.3f %9.2fx %8.2fx\n",
                          r.f_head, r.f_mlp, r.samples_per_s, r.ratio,
                          r.reference_ratio);
        else
            std::snprintf(buf, sizeof(buf), "%6.2f %6.2f %10.3f %9.2fx %9s\n",
                          r.f_head, r.f_mlp, r.samples_per_s, r.ratio, "-");
        os << buf;
    }
    return os.str();
}

}  // namespace elen
