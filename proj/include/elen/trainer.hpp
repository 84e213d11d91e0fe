#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "elen/checkpoint.hpp"
#include "elen/forward.hpp"
#include "elen/optimizer.hpp"
#include "elen/packing.hpp"
#include "elen/schedule.hpp"
#include "elen/vocab.hpp"

namespace elen {

inline constexpr uint64_t kCurriculumNever = std::numeric_limits<uint64_t>::max();

// Matryoshka granularity curriculum: full model until enable_from_token,
// then deterministic round-robin over the grid, one granularity per step.
struct CurriculumSpec {
    std::vector<Granularity> grid = {{1.0, 1.0}};
    uint64_t enable_from_token = 0;  // 0 = whole run; kCurriculumNever = off

    void validate(const EncoderConfig& cfg) const {
        if (grid.empty()) throw std::invalid_argument("curriculum: empty grid");
        for (const auto& g : grid) validate_granularity(cfg, g);
    }

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& g : grid) rows.push_back({{"f_head", g.f_head}, {"f_mlp", g.f_mlp}});
        nlohmann::json j = {{"grid", rows}};
        if (enable_from_token == kCurriculumNever)
            j["enable_from_token"] = "never";
        else
            j["enable_from_token"] = enable_from_token;
        return j;
    }

    static CurriculumSpec from_json(const nlohmann::json& j) {
        CurriculumSpec c;
        c.grid.clear();
        for (const auto& r : j.at("grid"))
            c.grid.push_back({r.at("f_head").get<double>(), r.at("f_mlp").get<double>()});
        const auto& e = j.at("enable_from_token");
        c.enable_from_token = e.is_string() ? kCurriculumNever : e.get<uint64_t>();
        return c;
    }
};

inline Granularity next_granularity(const CurriculumSpec& cur, uint64_t step,
                                    uint64_t tokens_seen) {
    if (tokens_seen < cur.enable_from_token) return {1.0, 1.0};
    return cur.grid[step % cur.grid.size()];
}

// Builds the standard quarter grids along one axis.
inline std::vector<Granularity> granularity_grid_heads() {
    std::vector<Granularity> g;
    for (double f : kGranularitySteps) g.push_back({f, 1.0});
    return g;
}
inline std::vector<Granularity> granularity_grid_mlp() {
    std::vector<Granularity> g;
    for (double f : kGranularitySteps) g.push_back({1.0, f});
    return g;
}

struct StepLog {
    uint64_t step;
    uint64_t tokens;
    double lr;
    Granularity g;
    double loss;
};

inline void write_step_log(std::ostream& os, const StepLog& s) {
    nlohmann::json j = {{"step", s.step}, {"tokens", s.tokens}, {"lr", s.lr},
                        {"f_head", s.g.f_head}, {"f_mlp", s.g.f_mlp}, {"loss", s.loss}};
    os << j.dump() << "\n";
}

struct TrainOptions {
    ScheduleSpec schedule;
    CurriculumSpec curriculum;
    OptHyper optimizer;
    uint64_t target_tokens = 0;  // non-PAD token budget for this run
    uint32_t batch_rows = 8;
    uint64_t seed = 42;
    // Stage MLM rates; re-masking happens per epoch when a vocabulary is
    // available, otherwise the masks baked into the PACK rows are used.
    double mlm_prob_ws = 0.3;
    double mlm_prob_decay = 0.1;
    bool remask_each_epoch = true;

    double mlm_prob_at(uint64_t tokens_seen) const {
        const uint64_t decay_start =
            schedule.warmup_tokens +
            (schedule.shape == ScheduleShape::Wsd ? schedule.stable_tokens : 0);
        return tokens_seen < decay_start ? mlm_prob_ws : mlm_prob_decay;
    }
};

// Position of a run between optimizer steps; everything needed to resume
// bit-exactly (masking seeds are derived, not stored).
struct TrainerCursor {
    uint64_t tokens_seen = 0;
    uint64_t step = 0;
    uint64_t row_cursor = 0;  // absolute rows consumed; epoch = cursor / n_rows
    uint64_t base_seed = 42;
};

namespace detail {

// splitmix64 over (base, epoch, row): deterministic per-epoch mask seeds.
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
    uint64_t x = a + 0x9e3779b97f4a7c15ull * (b + 1) + 0xbf58476d1ce4e5b9ull * (c + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

}  // namespace detail

template <typename T>
struct TrainResult {
    ParamSet<T> params;
    OptState<T> opt;
    TrainerCursor cursor;
    std::vector<StepLog> logs;
};

// Single-worker training driver.  Consumes rows round-robin, one granularity
// per optimizer step, until the non-PAD token budget is reached.
template <typename T>
TrainResult<T> train_run(const EncoderConfig& cfg, ParamSet<T> params,
                         const PackedBatch& data, const TrainOptions& opt,
                         const Vocab* vocab = nullptr,
                         std::ostream* metrics = nullptr,
                         std::type_identity_t<std::optional<OptState<T>>> resume_opt =
                             std::nullopt,
                         TrainerCursor cursor = {}) {
    cfg.validate();
    opt.schedule.validate();
    opt.curriculum.validate(cfg);
    opt.optimizer.validate();
    if (data.rows.empty()) throw std::invalid_argument("train_run: no data");
    if (opt.batch_rows == 0) throw std::invalid_argument("train_run: batch_rows = 0");
    if (data.vocab_size > cfg.vocab_size)
        throw std::invalid_argument("train_run: data vocab exceeds model vocab");

    TrainResult<T> res;
    res.params = std::move(params);
    res.opt = resume_opt ? std::move(*resume_opt)
                         : init_opt_state<T>(cfg, opt.optimizer);
    res.cursor = cursor;
    ParamSet<T> grads = alloc_params<T>(cfg);

    const uint64_t n_rows = data.rows.size();
    const bool remask = opt.remask_each_epoch && vocab != nullptr;

    while (res.cursor.tokens_seen < opt.target_tokens) {
        const uint64_t tokens_before = res.cursor.tokens_seen;
        const Granularity g =
            next_granularity(opt.curriculum, res.cursor.step, tokens_before);
        const double lr = lr_at(opt.schedule, tokens_before);
        const double mlm_p = opt.mlm_prob_at(tokens_before);

        for_each_tensor(grads, [&](const TensorView<T>& t) {
            std::fill(t.data, t.data + t.size, T(0));
        });
        double loss_sum = 0;
        uint64_t n_masked = 0;
        uint64_t batch_tokens = 0;
        for (uint32_t b = 0; b < opt.batch_rows; ++b) {
            const uint64_t cur = res.cursor.row_cursor + b;
            const uint64_t epoch = cur / n_rows;
            const PackedRow* row = &data.rows[cur % n_rows];
            PackedRow remasked;
            if (remask) {
                remasked = *row;
                remasked.ids = restore_ids(*row);
                remasked.mask_positions.clear();
                remasked.labels.assign(remasked.ids.size(), -1);
                remasked = apply_mlm(
                    remasked, mlm_p, *vocab,
                    detail::mix_seed(res.cursor.base_seed, epoch, cur % n_rows));
                row = &remasked;
            }
            batch_tokens += row->pad_start();
            if (row->mask_positions.empty()) continue;
            auto [s, n] = mlm_loss_grad_sum(cfg, res.params, *row, g, grads);
            loss_sum += s;
            n_masked += n;
        }
        res.cursor.row_cursor += opt.batch_rows;
        res.cursor.tokens_seen += batch_tokens;
        if (n_masked == 0) continue;  // nothing to learn from in this batch

        const T inv = T(1.0 / double(n_masked));
        for_each_tensor(grads, [&](const TensorView<T>& t) {
            for (size_t i = 0; i < t.size; ++i) t.data[i] *= inv;
        });
        stable_adamw_step(res.params, grads, res.opt, lr);
        res.cursor.step += 1;

        StepLog log{res.cursor.step, res.cursor.tokens_seen, lr, g,
                    loss_sum / double(n_masked)};
        if (!std::isfinite(log.loss))
            throw std::runtime_error("train_run: non-finite loss");
        res.logs.push_back(log);
        if (metrics) write_step_log(*metrics, log);
    }
    return res;
}

// Mean held-out loss at a fixed granularity (no masking changes, no updates).
template <typename T>
double evaluate_mlm(const EncoderConfig& cfg, const ParamSet<T>& ps,
                    const PackedBatch& data, const Granularity& g) {
    double sum = 0;
    uint64_t n = 0;
    for (const auto& row : data.rows) {
        if (row.mask_positions.empty()) continue;
        ForwardTrace<T> tr = forward_mlm(cfg, ps, row, g, /*keep_caches=*/false);
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
        n += row.mask_positions.size();
    }
    if (n == 0) throw std::invalid_argument("evaluate_mlm: no masked positions");
    return sum / double(n);
}

// Trainer checkpoint = model + optimizer moments + cursor, one container.
template <typename T>
void save_train_checkpoint(const std::string& path, const EncoderConfig& cfg,
                           const ParamSet<T>& params, const OptState<T>& opt,
                           const TrainerCursor& cursor) {
    nlohmann::json meta = {
        {"format", "train"},
        {"model", cfg.to_json()},
        {"trainer",
         {{"tokens_seen", cursor.tokens_seen},
          {"step", cursor.step},
          {"row_cursor", cursor.row_cursor},
          {"base_seed", cursor.base_seed},
          {"opt_t", opt.t},
          {"optimizer", opt.hyper.to_json()}}}};
    auto ts = detail::collect_tensors(params);
    auto ms = detail::collect_tensors(opt.m, "opt.m.");
    auto vs = detail::collect_tensors(opt.v, "opt.v.");
    ts.insert(ts.end(), ms.begin(), ms.end());
    ts.insert(ts.end(), vs.begin(), vs.end());
    write_elen_container(path, meta, ts);
}

template <typename T>
struct TrainCheckpoint {
    EncoderConfig cfg;
    ParamSet<T> params;
    OptState<T> opt;
    TrainerCursor cursor;
};

template <typename T>
TrainCheckpoint<T> load_train_checkpoint(const std::string& path) {
    ElenReader r(path);
    if (r.meta().value("format", "") != "train")
        throw std::runtime_error(path + ": not a trainer checkpoint");
    TrainCheckpoint<T> out;
    out.cfg = EncoderConfig::from_json(r.meta().at("model"));
    out.params = alloc_params<T>(out.cfg);
    out.opt.m = alloc_params<T>(out.cfg);
    out.opt.v = alloc_params<T>(out.cfg);
    detail::fill_tensors(r, out.params);
    detail::fill_tensors(r, out.opt.m, "opt.m.");
    detail::fill_tensors(r, out.opt.v, "opt.v.");
    const auto& tj = r.meta().at("trainer");
    out.cursor.tokens_seen = tj.at("tokens_seen").get<uint64_t>();
    out.cursor.step = tj.at("step").get<uint64_t>();
    out.cursor.row_cursor = tj.at("row_cursor").get<uint64_t>();
    out.cursor.base_seed = tj.at("base_seed").get<uint64_t>();
    out.opt.t = tj.at("opt_t").get<uint64_t>();
    out.opt.hyper = OptHyper::from_json(tj.at("optimizer"));
    return out;
}

}  // namespace elen
