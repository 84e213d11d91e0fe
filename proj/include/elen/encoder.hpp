#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "elen/numutil.hpp"

namespace elen {

struct EncoderConfig {
    uint32_t n_layers = 2;
    uint32_t d_model = 64;
    uint32_t n_heads = 4;
    uint32_t head_dim = 16;
    uint32_t d_ff = 128;
    uint32_t vocab_size = 262;
    uint32_t max_len = 1024;
    uint32_t local_window = 128;
    uint32_t global_period = 3;   // layer l is global iff l % global_period == 0
    double rope_theta_local = 10000.0;
    double rope_theta_global = 10000.0;
    double norm_eps = 1e-5;

    // Width of the concatenated kept heads.  Equals d_model for base models;
    // smaller for the standalone output of slice_params.
    uint32_t attn_dim() const { return n_heads * head_dim; }

    bool is_global_layer(uint32_t layer) const {
        return layer % global_period == 0;
    }
    double rope_theta(uint32_t layer) const {
        return is_global_layer(layer) ? rope_theta_global : rope_theta_local;
    }

    void validate() const {
        if (n_layers == 0 || d_model == 0 || n_heads == 0 || head_dim == 0 ||
            d_ff == 0 || vocab_size == 0 || max_len == 0 || global_period == 0)
            throw std::invalid_argument("encoder config: zero dimension");
        if (head_dim % 2 != 0)
            throw std::invalid_argument("encoder config: head_dim must be even");
        if (attn_dim() > d_model)
            throw std::invalid_argument("encoder config: n_heads*head_dim exceeds d_model");
        if (local_window == 0 || local_window > max_len)
            throw std::invalid_argument("encoder config: local_window out of range");
        if (!(rope_theta_local > 0.0) || !(rope_theta_global > 0.0) || !(norm_eps > 0.0))
            throw std::invalid_argument("encoder config: non-positive real parameter");
    }

    nlohmann::json to_json() const {
        return {{"n_layers", n_layers},
                {"d_model", d_model},
                {"n_heads", n_heads},
                {"head_dim", head_dim},
                {"d_ff", d_ff},
                {"vocab_size", vocab_size},
                {"max_len", max_len},
                {"local_window", local_window},
                {"global_period", global_period},
                {"rope_theta_local", rope_theta_local},
                {"rope_theta_global", rope_theta_global},
                {"norm_eps", norm_eps}};
    }

    static EncoderConfig from_json(const nlohmann::json& j) {
        EncoderConfig c;
        c.n_layers = j.at("n_layers").get<uint32_t>();
        c.d_model = j.at("d_model").get<uint32_t>();
        c.n_heads = j.at("n_heads").get<uint32_t>();
        c.head_dim = j.at("head_dim").get<uint32_t>();
        c.d_ff = j.at("d_ff").get<uint32_t>();
        c.vocab_size = j.at("vocab_size").get<uint32_t>();
        c.max_len = j.at("max_len").get<uint32_t>();
        c.local_window = j.at("local_window").get<uint32_t>();
        c.global_period = j.at("global_period").get<uint32_t>();
        c.rope_theta_local = j.at("rope_theta_local").get<double>();
        c.rope_theta_global = j.at("rope_theta_global").get<double>();
        c.norm_eps = j.at("norm_eps").get<double>();
        c.validate();
        return c;
    }

    bool operator==(const EncoderConfig&) const = default;
};

// Convenience builder for base (unsliced) models: head_dim = d_model/n_heads.
inline EncoderConfig make_encoder_config(uint32_t n_layers, uint32_t d_model,
                                         uint32_t n_heads, uint32_t d_ff,
                                         uint32_t vocab_size, uint32_t max_len) {
    if (n_heads == 0 || d_model % n_heads != 0)
        throw std::invalid_argument("make_encoder_config: d_model not divisible by n_heads");
    EncoderConfig c;
    c.n_layers = n_layers;
    c.d_model = d_model;
    c.n_heads = n_heads;
    c.head_dim = d_model / n_heads;
    c.d_ff = d_ff;
    c.vocab_size = vocab_size;
    c.max_len = max_len;
    // The stock window saturates on short-context models.
    c.local_window = std::min(c.local_window, max_len);
    c.validate();
    return c;
}

// Fraction of attention heads / MLP units active.  The standard grid is
// quarters, but any fraction that yields whole counts is admissible.
struct Granularity {
    double f_head = 1.0;
    double f_mlp = 1.0;
    bool operator==(const Granularity&) const = default;
};

constexpr std::array<double, 4> kGranularitySteps = {0.25, 0.5, 0.75, 1.0};

inline uint32_t scaled_count(double frac, uint32_t total, const char* what) {
    if (!(frac > 0.0) || frac > 1.0)
        throw std::invalid_argument(std::string(what) + " fraction must be in (0,1]");
    double exact = frac * total;
    double rounded = std::round(exact);
    if (rounded < 1.0 || std::abs(exact - rounded) > 1e-6 * total)
        throw std::invalid_argument(std::string(what) +
                                    " fraction does not give a whole count");
    return uint32_t(rounded);
}

inline uint32_t kept_heads(const EncoderConfig& c, const Granularity& g) {
    return scaled_count(g.f_head, c.n_heads, "head");
}
inline uint32_t kept_ff(const EncoderConfig& c, const Granularity& g) {
    return scaled_count(g.f_mlp, c.d_ff, "mlp");
}

inline void validate_granularity(const EncoderConfig& c, const Granularity& g) {
    kept_heads(c, g);
    kept_ff(c, g);
}

// Projections are stored input-major ([in x out]): the first kept_heads head
// blocks are the leading columns of wq/wk/wv and the leading rows of wo; the
// first kept_ff units are the leading columns of wgate/wup and the leading
// rows of wdown.  Nested sub-networks are therefore literal array prefixes.
template <typename T>
struct LayerParams {
    Mat<T> wq, wk, wv;   // [d_model x attn_dim]
    Mat<T> wo;           // [attn_dim x d_model]
    Mat<T> wgate, wup;   // [d_model x d_ff]
    Mat<T> wdown;        // [d_ff x d_model]
    std::vector<T> attn_norm, mlp_norm;  // [d_model]
};

template <typename T>
struct ParamSet {
    Mat<T> tok_emb;  // [V x d_model]; also the tied lm head
    std::vector<LayerParams<T>> layers;
    std::vector<T> final_norm;  // [d_model]
};

template <typename T>
struct TensorView {
    std::string name;
    std::vector<uint64_t> shape;
    T* data;
    size_t size;
};

// Visits every named tensor in a fixed order (the order is part of the
// checkpoint and optimizer-state contracts).
template <typename P, typename F>
void for_each_tensor(P& ps, F&& fn) {
    using T = std::remove_reference_t<decltype(ps.final_norm[0])>;
    auto mat = [&](std::string name, auto& m) {
        fn(TensorView<T>{std::move(name), {m.rows, m.cols}, m.a.data(), m.a.size()});
    };
    auto vec = [&](std::string name, auto& v) {
        fn(TensorView<T>{std::move(name), {v.size()}, v.data(), v.size()});
    };
    mat("tok_emb", ps.tok_emb);
    for (size_t i = 0; i < ps.layers.size(); ++i) {
        auto& l = ps.layers[i];
        std::string p = "layers." + std::to_string(i) + ".";
        mat(p + "wq", l.wq);
        mat(p + "wk", l.wk);
        mat(p + "wv", l.wv);
        mat(p + "wo", l.wo);
        vec(p + "attn_norm", l.attn_norm);
        mat(p + "wgate", l.wgate);
        mat(p + "wup", l.wup);
        mat(p + "wdown", l.wdown);
        vec(p + "mlp_norm", l.mlp_norm);
    }
    vec("final_norm", ps.final_norm);
}

template <typename T>
ParamSet<T> alloc_params(const EncoderConfig& c) {
    c.validate();
    ParamSet<T> ps;
    ps.tok_emb = Mat<T>(c.vocab_size, c.d_model);
    ps.layers.resize(c.n_layers);
    const uint32_t a = c.attn_dim();
    for (auto& l : ps.layers) {
        l.wq = Mat<T>(c.d_model, a);
        l.wk = Mat<T>(c.d_model, a);
        l.wv = Mat<T>(c.d_model, a);
        l.wo = Mat<T>(a, c.d_model);
        l.wgate = Mat<T>(c.d_model, c.d_ff);
        l.wup = Mat<T>(c.d_model, c.d_ff);
        l.wdown = Mat<T>(c.d_ff, c.d_model);
        l.attn_norm.assign(c.d_model, T(0));
        l.mlp_norm.assign(c.d_model, T(0));
    }
    ps.final_norm.assign(c.d_model, T(0));
    return ps;
}

// Truncated-normal init (std 0.02, +-3 sigma) for projections and embeddings;
// norm scales start at 1.
template <typename T>
ParamSet<T> init_params(const EncoderConfig& c, uint64_t seed) {
    ParamSet<T> ps = alloc_params<T>(c);
    std::mt19937_64 rng(seed);
    fill_trunc_normal(ps.tok_emb.a, 0.02, rng);
    for (auto& l : ps.layers) {
        fill_trunc_normal(l.wq.a, 0.02, rng);
        fill_trunc_normal(l.wk.a, 0.02, rng);
        fill_trunc_normal(l.wv.a, 0.02, rng);
        fill_trunc_normal(l.wo.a, 0.02, rng);
        fill_trunc_normal(l.wgate.a, 0.02, rng);
        fill_trunc_normal(l.wup.a, 0.02, rng);
        fill_trunc_normal(l.wdown.a, 0.02, rng);
        std::fill(l.attn_norm.begin(), l.attn_norm.end(), T(1));
        std::fill(l.mlp_norm.begin(), l.mlp_norm.end(), T(1));
    }
    std::fill(ps.final_norm.begin(), ps.final_norm.end(), T(1));
    return ps;
}

template <typename T>
uint64_t param_count(const ParamSet<T>& ps) {
    uint64_t n = 0;
    for_each_tensor(ps, [&](const auto& t) { n += t.size; });
    return n;
}

namespace detail {

template <typename T>
Mat<T> prefix_cols(const Mat<T>& m, uint32_t keep) {
    Mat<T> out(m.rows, keep);
    for (uint32_t r = 0; r < m.rows; ++r)
        std::copy(m.row(r), m.row(r) + keep, out.row(r));
    return out;
}

template <typename T>
Mat<T> prefix_rows(const Mat<T>& m, uint32_t keep) {
    Mat<T> out(keep, m.cols);
    std::copy(m.a.begin(), m.a.begin() + size_t(keep) * m.cols, out.a.begin());
    return out;
}

}  // namespace detail

// Extracts the nested sub-network as a standalone model.  Its forward at full
// granularity reproduces forward_mlm(original, g) exactly: the kept weights
// are byte-for-byte prefixes and the compute loops do not change shape-wise.
template <typename T>
std::pair<EncoderConfig, ParamSet<T>> slice_params(const ParamSet<T>& ps,
                                                   const EncoderConfig& c,
                                                   const Granularity& g) {
    const uint32_t kh = kept_heads(c, g);
    const uint32_t kf = kept_ff(c, g);
    EncoderConfig sc = c;
    sc.n_heads = kh;
    sc.d_ff = kf;
    sc.validate();

    ParamSet<T> out;
    out.tok_emb = ps.tok_emb;
    out.final_norm = ps.final_norm;
    out.layers.reserve(ps.layers.size());
    const uint32_t ka = kh * c.head_dim;
    for (const auto& l : ps.layers) {
        LayerParams<T> s;
        s.wq = detail::prefix_cols(l.wq, ka);
        s.wk = detail::prefix_cols(l.wk, ka);
        s.wv = detail::prefix_cols(l.wv, ka);
        s.wo = detail::prefix_rows(l.wo, ka);
        s.wgate = detail::prefix_cols(l.wgate, kf);
        s.wup = detail::prefix_cols(l.wup, kf);
        s.wdown = detail::prefix_rows(l.wdown, kf);
        s.attn_norm = l.attn_norm;
        s.mlp_norm = l.mlp_norm;
        out.layers.push_back(std::move(s));
    }
    return {sc, std::move(out)};
}

}  // namespace elen
