#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "elen/optimizer.hpp"
#include "elen/schedule.hpp"
#include "elen/trainer.hpp"

namespace elen {

// Tokenizer size used by the full-scale recipes (V ~ 50,000).
inline constexpr uint32_t kVocabTargetSize = 50000;

// A training recipe: schedule, curriculum, stage MLM rates, sequence length
// and RoPE treatment.  Token counts are at reference scale; scale_to_budget
// shrinks them proportionally for desk-scale runs.
struct Preset {
    std::string name;
    ScheduleSpec schedule;
    CurriculumSpec curriculum;
    double mlm_prob_ws = 0.3;
    double mlm_prob_decay = 0.1;
    uint32_t seq_len = 1024;
    double rope_theta_global = 10000.0;
    uint32_t epochs = 1;
    uint64_t stage_tokens = 0;
    OptHyper optimizer;

    void validate() const {
        schedule.validate();
        if (name.empty()) throw std::invalid_argument("preset: empty name");
        if (seq_len == 0 || epochs == 0 || stage_tokens == 0)
            throw std::invalid_argument("preset " + name + ": zero seq_len/epochs/tokens");
        if (!(mlm_prob_ws > 0 && mlm_prob_ws < 1) ||
            !(mlm_prob_decay > 0 && mlm_prob_decay < 1))
            throw std::invalid_argument("preset " + name + ": MLM rate out of (0,1)");
        if (curriculum.grid.empty())
            throw std::invalid_argument("preset " + name + ": empty curriculum grid");
        optimizer.validate();
        const uint64_t sched = schedule.warmup_tokens + schedule.stable_tokens +
                               schedule.decay_tokens;
        if (sched != stage_tokens)
            throw std::invalid_argument("preset " + name +
                                        ": schedule does not cover the stage budget");
    }

    TrainOptions train_options(uint64_t seed) const {
        TrainOptions o;
        o.schedule = schedule;
        o.curriculum = curriculum;
        o.optimizer = optimizer;
        o.target_tokens = stage_tokens;
        o.seed = seed;
        o.mlm_prob_ws = mlm_prob_ws;
        o.mlm_prob_decay = mlm_prob_decay;
        return o;
    }
};

inline std::vector<std::string> preset_names() {
    return {"pretrain-short",     "pretrain-long",       "anneal-matryoshka",
            "adapt-lang",         "adapt-domain-legal",  "adapt-domain-biomed"};
}

// Reference-scale recipes.  Base pretraining: three WSD stages (short 5.5T at
// L=1024; long-context 500B at L=8192 with global RoPE theta 160k; annealing
// 100B of 1-sqrt decay with the matryoshka curriculum).  Adaptation rows:
// language (WSD, peak 4e-4, 615B) and the two domain CPT recipes
// (warmup+cosine; legal 10 epochs of 9B at MLM 0.3, biomedical 2 epochs of
// ~24B at MLM 0.1).
inline Preset preset_by_name(const std::string& name) {
    Preset p;
    p.name = name;
    p.curriculum.grid = {{1.0, 1.0}};
    p.curriculum.enable_from_token = kCurriculumNever;
    if (name == "pretrain-short") {
        p.schedule = {ScheduleShape::Wsd, 1e-3, 3'000'000'000ull,
                      5'497'000'000'000ull, 0, 0.0};
        p.stage_tokens = 5'500'000'000'000ull;
        p.seq_len = 1024;
        p.rope_theta_global = 10000.0;
    } else if (name == "pretrain-long") {
        p.schedule = {ScheduleShape::Wsd, 1e-3, 0, 500'000'000'000ull, 0, 0.0};
        p.stage_tokens = 500'000'000'000ull;
        p.seq_len = 8192;
        p.rope_theta_global = 160000.0;
    } else if (name == "anneal-matryoshka") {
        p.schedule = {ScheduleShape::Wsd, 1e-3, 0, 0, 100'000'000'000ull, 0.0};
        p.stage_tokens = 100'000'000'000ull;
        p.seq_len = 8192;
        p.rope_theta_global = 160000.0;
        p.curriculum.grid = granularity_grid_heads();
        p.curriculum.enable_from_token = 0;  // the whole stage is the decay leg
    } else if (name == "adapt-lang") {
        p.schedule = {ScheduleShape::Wsd, 4e-4, 3'000'000'000ull,
                      512'000'000'000ull, 100'000'000'000ull, 0.0};
        p.stage_tokens = 615'000'000'000ull;
        p.seq_len = 1024;
        p.rope_theta_global = 160000.0;
    } else if (name == "adapt-domain-legal") {
        p.schedule = {ScheduleShape::WarmupCosine, 3e-3, 9'000'000'000ull, 0,
                      81'000'000'000ull, 0.0};
        p.stage_tokens = 90'000'000'000ull;
        p.seq_len = 1024;
        p.rope_theta_global = 160000.0;
        p.epochs = 10;
        p.mlm_prob_ws = 0.3;
        p.mlm_prob_decay = 0.3;
    } else if (name == "adapt-domain-biomed") {
        p.schedule = {ScheduleShape::WarmupCosine, 2e-3, 2'400'000'000ull, 0,
                      45'900'000'000ull, 0.0};
        p.stage_tokens = 48'300'000'000ull;
        p.seq_len = 1024;
        p.rope_theta_global = 160000.0;
        p.epochs = 2;
        p.mlm_prob_ws = 0.1;
        p.mlm_prob_decay = 0.1;
    } else {
        throw std::invalid_argument("unknown preset: " + name);
    }
    p.validate();
    return p;
}

// Shrinks every schedule boundary proportionally so the recipe fits a
// desk-scale token budget; rates, peaks and the grid are untouched.
inline Preset scale_to_budget(Preset p, uint64_t budget) {
    if (budget == 0) throw std::invalid_argument("scale_to_budget: zero budget");
    const double f = double(budget) / double(p.stage_tokens);
    auto scaled = [&](uint64_t v) { return uint64_t(std::llround(double(v) * f)); };
    uint64_t w = scaled(p.schedule.warmup_tokens);
    if (w > budget) w = budget;
    uint64_t s, d;
    if (p.schedule.decay_tokens > 0) {
        s = std::min(scaled(p.schedule.stable_tokens), budget - w);
        d = budget - w - s;
    } else {
        s = budget - w;
        d = 0;
    }
    p.schedule.warmup_tokens = w;
    p.schedule.stable_tokens = s;
    p.schedule.decay_tokens = d;
    if (p.curriculum.enable_from_token != 0 &&
        p.curriculum.enable_from_token != kCurriculumNever)
        p.curriculum.enable_from_token = scaled(p.curriculum.enable_from_token);
    p.stage_tokens = budget;
    p.validate();
    return p;
}

}  // namespace elen
