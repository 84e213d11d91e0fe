#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace elen {

enum class ScheduleShape { Wsd, WarmupCosine };

inline std::string to_string(ScheduleShape s) {
    return s == ScheduleShape::Wsd ? "wsd" : "warmup-cosine";
}

inline ScheduleShape schedule_shape_from_string(const std::string& s) {
    if (s == "wsd") return ScheduleShape::Wsd;
    if (s == "warmup-cosine") return ScheduleShape::WarmupCosine;
    throw std::invalid_argument("unknown schedule shape: " + s);
}

// Warmup-Stable-Decay (1-sqrt decay) or warmup+cosine.  All boundaries are
// expressed in tokens seen, so the curve is a pure function of progress and
// resuming a run cannot bend it.
struct ScheduleSpec {
    ScheduleShape shape = ScheduleShape::Wsd;
    double peak_lr = 1e-3;
    uint64_t warmup_tokens = 0;
    uint64_t stable_tokens = 0;  // WSD only; ignored by warmup-cosine
    uint64_t decay_tokens = 0;
    double min_lr = 0.0;

    void validate() const {
        if (!(peak_lr > min_lr) || !(min_lr >= 0.0))
            throw std::invalid_argument("schedule: need peak_lr > min_lr >= 0");
    }

    nlohmann::json to_json() const {
        return {{"shape", to_string(shape)},   {"peak_lr", peak_lr},
                {"warmup_tokens", warmup_tokens}, {"stable_tokens", stable_tokens},
                {"decay_tokens", decay_tokens},   {"min_lr", min_lr}};
    }

    static ScheduleSpec from_json(const nlohmann::json& j) {
        ScheduleSpec s;
        s.shape = schedule_shape_from_string(j.at("shape").get<std::string>());
        s.peak_lr = j.at("peak_lr").get<double>();
        s.warmup_tokens = j.at("warmup_tokens").get<uint64_t>();
        s.stable_tokens = j.value("stable_tokens", uint64_t(0));
        s.decay_tokens = j.at("decay_tokens").get<uint64_t>();
        s.min_lr = j.value("min_lr", 0.0);
        s.validate();
        return s;
    }

    bool operator==(const ScheduleSpec&) const = default;
};

inline double lr_at(const ScheduleSpec& s, uint64_t tokens_seen) {
    s.validate();
    if (tokens_seen < s.warmup_tokens)
        return s.peak_lr * (double(tokens_seen) / double(s.warmup_tokens));
    const uint64_t decay_start =
        s.warmup_tokens + (s.shape == ScheduleShape::Wsd ? s.stable_tokens : 0);
    if (tokens_seen < decay_start) return s.peak_lr;
    if (s.decay_tokens == 0 || tokens_seen >= decay_start + s.decay_tokens)
        return s.min_lr;
    const double u = double(tokens_seen - decay_start) / double(s.decay_tokens);
    if (s.shape == ScheduleShape::Wsd)
        return s.min_lr + (s.peak_lr - s.min_lr) * (1.0 - std::sqrt(u));
    return s.min_lr + (s.peak_lr - s.min_lr) * (1.0 + std::cos(M_PI * u)) / 2.0;
}

}  // namespace elen
