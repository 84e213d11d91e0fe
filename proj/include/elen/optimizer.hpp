#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "elen/encoder.hpp"

namespace elen {

struct OptHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double kappa = 1.0;  // per-tensor RMS clip of the update; inf = plain AdamW

    void validate() const {
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
            throw std::invalid_argument("optimizer: betas must be in [0,1)");
        if (!(eps > 0) || !(weight_decay >= 0) || !(kappa > 0))
            throw std::invalid_argument("optimizer: bad eps/weight_decay/kappa");
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"beta1", beta1},
                            {"beta2", beta2},
                            {"eps", eps},
                            {"weight_decay", weight_decay}};
        if (std::isinf(kappa))
            j["kappa"] = "inf";
        else
            j["kappa"] = kappa;
        return j;
    }

    static OptHyper from_json(const nlohmann::json& j) {
        OptHyper h;
        h.beta1 = j.value("beta1", 0.9);
        h.beta2 = j.value("beta2", 0.999);
        h.eps = j.value("eps", 1e-8);
        h.weight_decay = j.value("weight_decay", 0.0);
        if (j.contains("kappa")) {
            if (j["kappa"].is_string())
                h.kappa = std::numeric_limits<double>::infinity();
            else
                h.kappa = j["kappa"].get<double>();
        }
        h.validate();
        return h;
    }
};

template <typename T>
struct OptState {
    ParamSet<T> m, v;
    uint64_t t = 0;
    OptHyper hyper;
};

template <typename T>
OptState<T> init_opt_state(const EncoderConfig& cfg, const OptHyper& hyper) {
    hyper.validate();
    OptState<T> st;
    st.m = alloc_params<T>(cfg);
    st.v = alloc_params<T>(cfg);
    st.hyper = hyper;
    return st;
}

template <typename T>
std::vector<TensorView<T>> tensor_views(ParamSet<T>& ps) {
    std::vector<TensorView<T>> out;
    for_each_tensor(ps, [&](const TensorView<T>& t) { out.push_back(t); });
    return out;
}

// AdamW with decoupled weight decay, plus a per-tensor RMS clip of the
// bias-corrected update at threshold kappa.
template <typename T>
void stable_adamw_step(ParamSet<T>& params, const ParamSet<T>& grads,
                       OptState<T>& st, double lr) {
    if (lr < 0) throw std::invalid_argument("stable_adamw_step: negative lr");
    const OptHyper& h = st.hyper;
    st.t += 1;
    const double bc1 = 1.0 - std::pow(h.beta1, double(st.t));
    const double bc2 = 1.0 - std::pow(h.beta2, double(st.t));

    auto pv = tensor_views(params);
    auto gv = tensor_views(const_cast<ParamSet<T>&>(grads));
    auto mv = tensor_views(st.m);
    auto vv = tensor_views(st.v);
    std::vector<T> u;  // bias-corrected raw update, one tensor at a time
    for (size_t ti = 0; ti < pv.size(); ++ti) {
        T* p = pv[ti].data;
        const T* g = gv[ti].data;
        T* m = mv[ti].data;
        T* v = vv[ti].data;
        const size_t n = pv[ti].size;
        if (!all_finite(std::span<const T>(g, n)))
            throw std::runtime_error("stable_adamw_step: non-finite gradient in " +
                                     pv[ti].name);
        u.resize(n);
        double sumsq = 0;
        for (size_t i = 0; i < n; ++i) {
            m[i] = T(h.beta1) * m[i] + T(1.0 - h.beta1) * g[i];
            v[i] = T(h.beta2) * v[i] + T(1.0 - h.beta2) * g[i] * g[i];
            const double mhat = double(m[i]) / bc1;
            const double vhat = double(v[i]) / bc2;
            const double ui = mhat / (std::sqrt(vhat) + h.eps);
            u[i] = T(ui);
            sumsq += ui * ui;
        }
        const double rms = std::sqrt(sumsq / double(n));
        const double scale = 1.0 / std::max(1.0, rms / h.kappa);
        const T decay = T(1.0 - lr * h.weight_decay);
        const T step = T(lr * scale);
        for (size_t i = 0; i < n; ++i) {
            p[i] *= decay;
            p[i] -= step * u[i];
        }
    }
}

}  // namespace elen
