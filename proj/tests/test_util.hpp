#pragma once

#include <string>

#include "elen/encoder.hpp"
#include "elen/vocab.hpp"

namespace elen::testutil {

// A 16-token vocabulary: digits 0-9 plus the six specials.  Small enough for
// finite-difference checks while still exercising every special-token path.
inline Vocab tiny_vocab() {
    Vocab v;
    for (int i = 0; i < 10; ++i) v.tokens.push_back(std::string(1, char('0' + i)));
    for (size_t s = 0; s < kNumSpecials; ++s) {
        v.specials[s] = uint32_t(v.tokens.size());
        v.tokens.emplace_back(kSpecialLiteral[s]);
    }
    v.rebuild_index();
    v.validate();
    return v;
}

template <typename To, typename From>
Mat<To> cast_mat(const Mat<From>& m) {
    Mat<To> out(m.rows, m.cols);
    for (size_t i = 0; i < m.a.size(); ++i) out.a[i] = To(m.a[i]);
    return out;
}

template <typename To, typename From>
ParamSet<To> cast_params(const ParamSet<From>& ps) {
    ParamSet<To> out;
    out.tok_emb = cast_mat<To>(ps.tok_emb);
    out.layers.resize(ps.layers.size());
    for (size_t l = 0; l < ps.layers.size(); ++l) {
        const auto& in = ps.layers[l];
        auto& o = out.layers[l];
        o.wq = cast_mat<To>(in.wq);
        o.wk = cast_mat<To>(in.wk);
        o.wv = cast_mat<To>(in.wv);
        o.wo = cast_mat<To>(in.wo);
        o.wgate = cast_mat<To>(in.wgate);
        o.wup = cast_mat<To>(in.wup);
        o.wdown = cast_mat<To>(in.wdown);
        o.attn_norm.assign(in.attn_norm.begin(), in.attn_norm.end());
        o.mlp_norm.assign(in.mlp_norm.begin(), in.mlp_norm.end());
    }
    out.final_norm.assign(ps.final_norm.begin(), ps.final_norm.end());
    return out;
}

}  // namespace elen::testutil
