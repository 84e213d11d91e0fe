#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace elen {

enum class Special : uint32_t { Pad = 0, Bos, Eos, Mask, Unk, Translation };
inline constexpr size_t kNumSpecials = 6;

inline constexpr std::array<std::string_view, kNumSpecials> kSpecialLiteral = {
    "<|pad|>", "<|bos|>", "<|eos|>", "<|mask|>", "<|unk|>", "<|translation|>"};

inline constexpr std::array<std::string_view, kNumSpecials> kSpecialKey = {
    "PAD", "BOS", "EOS", "MASK", "UNK", "TRANSLATION"};

namespace detail {

inline std::string base64_encode(std::string_view in) {
    static const char tbl[] =
        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= in.size(); i += 3) {
        uint32_t v = (uint8_t(in[i]) << 16) | (uint8_t(in[i + 1]) << 8) |
                     uint8_t(in[i + 2]);
        out += tbl[(v >> 18) & 63];
        out += tbl[(v >> 12) & 63];
        out += tbl[(v >> 6) & 63];
        out += tbl[v & 63];
    }
    size_t rem = in.size() - i;
    if (rem == 1) {
        uint32_t v = uint8_t(in[i]) << 16;
        out += tbl[(v >> 18) & 63];
        out += tbl[(v >> 12) & 63];
        out += "==";
    } else if (rem == 2) {
        uint32_t v = (uint8_t(in[i]) << 16) | (uint8_t(in[i + 1]) << 8);
        out += tbl[(v >> 18) & 63];
        out += tbl[(v >> 12) & 63];
        out += tbl[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

inline std::string base64_decode(std::string_view in) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        if (c == '=') return -1;
        throw std::runtime_error("base64: bad character");
    };
    if (in.size() % 4 != 0) throw std::runtime_error("base64: bad length");
    std::string out;
    out.reserve(in.size() / 4 * 3);
    for (size_t i = 0; i < in.size(); i += 4) {
        int a = val(in[i]), b = val(in[i + 1]), c = val(in[i + 2]),
            d = val(in[i + 3]);
        if (a < 0 || b < 0) throw std::runtime_error("base64: bad padding");
        uint32_t v = (uint32_t(a) << 18) | (uint32_t(b) << 12) |
                     (c < 0 ? 0 : uint32_t(c) << 6) | (d < 0 ? 0 : uint32_t(d));
        out += char((v >> 16) & 0xff);
        if (c >= 0) out += char((v >> 8) & 0xff);
        if (d >= 0) out += char(v & 0xff);
    }
    return out;
}

}  // namespace detail

// Byte-level vocabulary: 256 single-byte tokens, six specials, then merge
// outputs in training order.  Token ids are dense indexes into `tokens`.
struct Vocab {
    std::vector<std::string> tokens;  // raw byte sequences
    std::vector<std::pair<uint32_t, uint32_t>> merges;
    std::array<uint32_t, kNumSpecials> specials{};

    // bytes -> id, rebuilt after any structural change
    std::unordered_map<std::string, uint32_t> index;

    uint32_t size() const { return uint32_t(tokens.size()); }
    uint32_t special_id(Special s) const { return specials[size_t(s)]; }

    bool is_special(uint32_t id) const {
        for (uint32_t s : specials)
            if (s == id) return true;
        return false;
    }

    void rebuild_index() {
        index.clear();
        index.reserve(tokens.size() * 2);
        for (uint32_t i = 0; i < tokens.size(); ++i) index.emplace(tokens[i], i);
    }

    void validate() const {
        if (index.size() != tokens.size())
            throw std::runtime_error("vocab: duplicate token byte sequences");
        for (auto [a, b] : merges) {
            if (a >= size() || b >= size())
                throw std::runtime_error("vocab: merge references unknown id");
            std::string joined = tokens[a] + tokens[b];
            if (!index.count(joined))
                throw std::runtime_error("vocab: merge output token missing");
        }
        for (size_t s = 0; s < kNumSpecials; ++s) {
            uint32_t id = specials[s];
            if (id >= size() || tokens[id] != kSpecialLiteral[s])
                throw std::runtime_error("vocab: special token missing");
            for (size_t t = s + 1; t < kNumSpecials; ++t)
                if (specials[t] == id)
                    throw std::runtime_error("vocab: special ids not distinct");
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["tokens"] = nlohmann::json::array();
        for (const auto& t : tokens) j["tokens"].push_back(detail::base64_encode(t));
        j["merges"] = nlohmann::json::array();
        for (auto [a, b] : merges) j["merges"].push_back({a, b});
        j["specials"] = nlohmann::json::object();
        for (size_t s = 0; s < kNumSpecials; ++s)
            j["specials"][std::string(kSpecialKey[s])] = specials[s];
        return j;
    }

    static Vocab from_json(const nlohmann::json& j) {
        Vocab v;
        for (const auto& t : j.at("tokens"))
            v.tokens.push_back(detail::base64_decode(t.get<std::string>()));
        for (const auto& m : j.at("merges"))
            v.merges.emplace_back(m.at(0).get<uint32_t>(), m.at(1).get<uint32_t>());
        for (size_t s = 0; s < kNumSpecials; ++s)
            v.specials[s] = j.at("specials").at(std::string(kSpecialKey[s])).get<uint32_t>();
        v.rebuild_index();
        v.validate();
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("vocab: cannot write " + path);
        f << to_json().dump(1) << '\n';
    }

    static Vocab load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("vocab: cannot read " + path);
        nlohmann::json j;
        f >> j;
        return from_json(j);
    }
};

// The byte alphabet plus specials; the starting point of BPE training.
inline Vocab make_byte_vocab() {
    Vocab v;
    v.tokens.reserve(256 + kNumSpecials);
    for (int b = 0; b < 256; ++b) v.tokens.push_back(std::string(1, char(b)));
    for (size_t s = 0; s < kNumSpecials; ++s) {
        v.specials[s] = uint32_t(v.tokens.size());
        v.tokens.push_back(std::string(kSpecialLiteral[s]));
    }
    v.rebuild_index();
    return v;
}

// Fraction of `b`'s tokens whose byte sequences also appear in `a`.
// The numerator is symmetric; the denominator is the second argument's size.
inline double vocab_overlap(const Vocab& a, const Vocab& b) {
    size_t shared = 0;
    for (const auto& t : b.tokens)
        if (a.index.count(t)) ++shared;
    return double(shared) / double(b.size());
}

}  // namespace elen
