#pragma once

#include <cmath>
#include <random>

#include "elen/bpe.hpp"
#include "elen/numutil.hpp"
#include "elen/vocab.hpp"

namespace elen {

// How to fill each destination embedding row: byte-identical tokens copy the
// source row, everything else averages the rows of its source tokenization.
struct TransplantPlan {
    uint32_t src_size = 0;
    uint32_t dst_size = 0;
    std::vector<std::pair<uint32_t, uint32_t>> shared;  // (src_id, dst_id)
    std::vector<std::pair<uint32_t, std::vector<uint32_t>>> fresh;  // (dst_id, recipe)
    double overlap = 0.0;

    void validate() const {
        std::vector<char> seen(dst_size, 0);
        for (auto [s, d] : shared) {
            if (s >= src_size || d >= dst_size || seen[d])
                throw std::runtime_error("transplant plan: bad shared entry");
            seen[d] = 1;
        }
        for (const auto& [d, recipe] : fresh) {
            if (d >= dst_size || seen[d])
                throw std::runtime_error("transplant plan: bad fresh entry");
            for (uint32_t s : recipe)
                if (s >= src_size)
                    throw std::runtime_error("transplant plan: recipe id out of range");
            seen[d] = 1;
        }
        for (char c : seen)
            if (!c) throw std::runtime_error("transplant plan: uncovered dst id");
    }
};

inline TransplantPlan build_transplant_plan(const Vocab& src, const Vocab& dst) {
    TransplantPlan plan;
    plan.src_size = src.size();
    plan.dst_size = dst.size();
    for (uint32_t d = 0; d < dst.size(); ++d) {
        auto it = src.index.find(dst.tokens[d]);
        if (it != src.index.end()) {
            plan.shared.emplace_back(it->second, d);
        } else {
            plan.fresh.emplace_back(d, encode(src, dst.tokens[d]));
        }
    }
    plan.overlap = double(plan.shared.size()) / double(dst.size());
    return plan;
}

// Shared rows are copied bit-exactly.  Fresh rows take the arithmetic mean of
// their recipe's source rows; an empty recipe draws from N(0, sigma^2) with
// sigma matched to the mean source row norm.
template <typename T>
inline Mat<T> transplant_embeddings(const TransplantPlan& plan,
                                    const Mat<T>& src_emb,
                                    uint64_t seed = 42) {
    if (src_emb.rows != plan.src_size)
        throw std::invalid_argument("transplant_embeddings: row count mismatch");
    plan.validate();
    const uint32_t d = src_emb.cols;

    Mat<T> dst(plan.dst_size, d);
    for (auto [s, t] : plan.shared) {
        const T* from = src_emb.row(s);
        std::copy(from, from + d, dst.row(t));
    }

    double mean_norm = 0.0;
    for (uint32_t r = 0; r < src_emb.rows; ++r)
        mean_norm += std::sqrt(double(dot(src_emb.row(r), src_emb.row(r), d)));
    mean_norm /= std::max<uint32_t>(1, src_emb.rows);
    const double sigma = mean_norm / std::sqrt(double(d));

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, sigma);
    for (const auto& [t, recipe] : plan.fresh) {
        T* out = dst.row(t);
        if (recipe.empty()) {
            for (uint32_t c = 0; c < d; ++c) out[c] = T(gauss(rng));
            continue;
        }
        for (uint32_t s : recipe) axpy(T(1), src_emb.row(s), out, d);
        const T n = T(recipe.size());
        for (uint32_t c = 0; c < d; ++c) out[c] /= n;
    }
    return dst;
}

}  // namespace elen
