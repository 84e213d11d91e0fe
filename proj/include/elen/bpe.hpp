#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <queue>
#include <span>
#include <unordered_map>
#include <unordered_set>

#include "elen/vocab.hpp"

namespace elen {

namespace detail {

inline uint64_t pair_key(uint32_t a, uint32_t b) {
    return (uint64_t(a) << 32) | b;
}

}  // namespace detail

// Trains a byte-level BPE vocabulary.  Documents are never merged across
// their boundaries.  The most frequent adjacent pair wins each round; ties
// break on the lexicographic order of the pair's byte sequences.  Pairs seen
// only once are never merged, so the result can stop short of target_size.
inline Vocab train_bpe(const std::vector<std::string>& corpus,
                       uint32_t target_size) {
    if (corpus.empty())
        throw std::invalid_argument("train_bpe: empty corpus");
    Vocab vocab = make_byte_vocab();
    if (target_size < vocab.size())
        throw std::invalid_argument(
            "train_bpe: target_size below byte alphabet plus specials");

    std::vector<std::vector<uint32_t>> docs;
    docs.reserve(corpus.size());
    for (const auto& text : corpus) {
        std::vector<uint32_t> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(c);
        docs.push_back(std::move(ids));
    }

    std::unordered_map<uint64_t, int64_t> counts;
    std::unordered_map<uint64_t, std::unordered_set<uint32_t>> where;
    for (uint32_t d = 0; d < docs.size(); ++d) {
        const auto& ids = docs[d];
        for (size_t i = 0; i + 1 < ids.size(); ++i) {
            uint64_t k = detail::pair_key(ids[i], ids[i + 1]);
            ++counts[k];
            where[k].insert(d);
        }
    }

    auto pair_less = [&vocab](uint64_t x, uint64_t y) {
        uint32_t xa = uint32_t(x >> 32), xb = uint32_t(x);
        uint32_t ya = uint32_t(y >> 32), yb = uint32_t(y);
        if (vocab.tokens[xa] != vocab.tokens[ya])
            return vocab.tokens[xa] < vocab.tokens[ya];
        return vocab.tokens[xb] < vocab.tokens[yb];
    };

    std::unordered_map<std::string, uint32_t> tok_index;
    tok_index.reserve(vocab.tokens.size() * 2);
    for (uint32_t i = 0; i < vocab.tokens.size(); ++i)
        tok_index.emplace(vocab.tokens[i], i);

    while (vocab.size() < target_size) {
        int64_t best_count = 1;  // require count >= 2
        uint64_t best = 0;
        bool found = false;
        for (auto [k, c] : counts) {
            if (c > best_count || (c == best_count && found && pair_less(k, best))) {
                best_count = c;
                best = k;
                found = true;
            }
        }
        if (!found) break;

        uint32_t a = uint32_t(best >> 32), b = uint32_t(best);
        // Distinct pairs can join to the same byte string (e.g. a+bc and
        // ab+c); the surface form keeps one id and both merges point at it.
        std::string joined = vocab.tokens[a] + vocab.tokens[b];
        uint32_t merged;
        if (auto it = tok_index.find(joined); it != tok_index.end()) {
            merged = it->second;
        } else {
            merged = vocab.size();
            vocab.tokens.push_back(joined);
            tok_index.emplace(std::move(joined), merged);
        }
        vocab.merges.emplace_back(a, b);

        auto touched = where[best];  // copy: rewrite invalidates the index
        for (uint32_t d : touched) {
            auto& ids = docs[d];
            bool has = false;
            for (size_t i = 0; i + 1 < ids.size(); ++i)
                if (ids[i] == a && ids[i + 1] == b) { has = true; break; }
            if (!has) continue;  // stale index entry

            for (size_t i = 0; i + 1 < ids.size(); ++i)
                --counts[detail::pair_key(ids[i], ids[i + 1])];

            std::vector<uint32_t> out;
            out.reserve(ids.size());
            for (size_t i = 0; i < ids.size();) {
                if (i + 1 < ids.size() && ids[i] == a && ids[i + 1] == b) {
                    out.push_back(merged);
                    i += 2;
                } else {
                    out.push_back(ids[i]);
                    ++i;
                }
            }
            ids = std::move(out);

            for (size_t i = 0; i + 1 < ids.size(); ++i) {
                uint64_t k = detail::pair_key(ids[i], ids[i + 1]);
                ++counts[k];
                where[k].insert(d);
            }
        }
        counts[best] = 0;
        std::erase_if(counts, [](const auto& kv) { return kv.second <= 0; });
    }

    vocab.rebuild_index();
    vocab.validate();
    return vocab;
}

namespace detail {

// Merge a raw byte span; lowest merge rank first, leftmost occurrence first.
inline void encode_span(std::string_view span,
                        const std::unordered_map<uint64_t, std::pair<uint32_t, uint32_t>>& ranks,
                        std::vector<uint32_t>& out) {
    const size_t n = span.size();
    if (n == 0) return;
    std::vector<uint32_t> id(n), prev(n), next(n);
    std::vector<char> alive(n, 1);
    for (size_t i = 0; i < n; ++i) {
        id[i] = uint8_t(span[i]);
        prev[i] = uint32_t(i == 0 ? n : i - 1);
        next[i] = uint32_t(i + 1);
    }

    using Entry = std::pair<uint32_t, uint32_t>;  // (rank, position)
    std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
    auto push_pair = [&](uint32_t i) {
        uint32_t j = next[i];
        if (j >= n) return;
        auto it = ranks.find(pair_key(id[i], id[j]));
        if (it != ranks.end()) heap.emplace(it->second.first, i);
    };
    for (size_t i = 0; i + 1 < n; ++i) push_pair(uint32_t(i));

    while (!heap.empty()) {
        auto [rank, i] = heap.top();
        heap.pop();
        if (!alive[i]) continue;
        uint32_t j = next[i];
        if (j >= n || !alive[j]) continue;
        auto it = ranks.find(pair_key(id[i], id[j]));
        if (it == ranks.end() || it->second.first != rank) continue;

        id[i] = it->second.second;
        alive[j] = 0;
        next[i] = next[j];
        if (next[j] < n) prev[next[j]] = i;
        if (prev[i] < n) push_pair(prev[i]);
        push_pair(i);
    }

    // Head node is never the right half of a merge, so the list starts at 0.
    for (uint32_t i = 0; i < n; i = next[i]) out.push_back(id[i]);
}

}  // namespace detail

// Greedy BPE encode.  Special-token literals in the text map to their ids;
// everything else falls back to the byte alphabet, so nothing is ever OOV.
inline std::vector<uint32_t> encode(const Vocab& vocab, std::string_view text) {
    std::unordered_map<uint64_t, std::pair<uint32_t, uint32_t>> ranks;
    ranks.reserve(vocab.merges.size() * 2);
    for (uint32_t r = 0; r < vocab.merges.size(); ++r) {
        auto [a, b] = vocab.merges[r];
        uint32_t out_id = vocab.index.at(vocab.tokens[a] + vocab.tokens[b]);
        ranks.emplace(detail::pair_key(a, b), std::make_pair(r, out_id));
    }

    // Longest literal first so one special cannot shadow a longer one.
    std::vector<size_t> order(kNumSpecials);
    for (size_t s = 0; s < kNumSpecials; ++s) order[s] = s;
    std::sort(order.begin(), order.end(), [](size_t x, size_t y) {
        return kSpecialLiteral[x].size() > kSpecialLiteral[y].size();
    });

    std::vector<uint32_t> out;
    size_t start = 0, i = 0;
    while (i < text.size()) {
        bool matched = false;
        if (text[i] == '<') {
            for (size_t s : order) {
                std::string_view lit = kSpecialLiteral[s];
                if (text.substr(i, lit.size()) == lit) {
                    detail::encode_span(text.substr(start, i - start), ranks, out);
                    out.push_back(vocab.specials[s]);
                    i += lit.size();
                    start = i;
                    matched = true;
                    break;
                }
            }
        }
        if (!matched) ++i;
    }
    detail::encode_span(text.substr(start, i - start), ranks, out);
    return out;
}

inline std::string decode(const Vocab& vocab, std::span<const uint32_t> ids) {
    std::string out;
    for (uint32_t id : ids) {
        if (id >= vocab.size())
            throw std::out_of_range("decode: id out of range");
        out += vocab.tokens[id];
    }
    return out;
}

}  // namespace elen
