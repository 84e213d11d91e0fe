#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <vector>

#include "elen/vocab.hpp"

namespace elen {

// One fixed-length training row: packed document segments, the end offset of
// each segment, and MLM labels (-1 everywhere except masked positions).
struct PackedRow {
    std::vector<uint32_t> ids;
    std::vector<uint32_t> boundaries;
    std::vector<uint32_t> mask_positions;
    std::vector<int32_t> labels;

    uint32_t seq_len() const { return uint32_t(ids.size()); }

    uint32_t pad_start() const {
        return boundaries.empty() ? 0 : boundaries.back();
    }

    void validate() const {
        uint32_t prev = 0;
        for (uint32_t b : boundaries) {
            if (b <= prev || b > ids.size())
                throw std::runtime_error("packed row: boundaries not strictly increasing");
            prev = b;
        }
        if (labels.size() != ids.size())
            throw std::runtime_error("packed row: label length mismatch");
        std::vector<char> masked(ids.size(), 0);
        for (uint32_t p : mask_positions) {
            if (p >= ids.size()) throw std::runtime_error("packed row: mask position out of range");
            masked[p] = 1;
        }
        for (size_t i = 0; i < ids.size(); ++i)
            if ((labels[i] != -1) != bool(masked[i]))
                throw std::runtime_error("packed row: labels and mask positions disagree");
    }
};

struct PackedBatch {
    uint32_t seq_len = 0;
    uint32_t vocab_size = 0;
    std::vector<PackedRow> rows;
};

// Greedy first-fit packing in arrival order.  Every document segment is laid
// out as BOS tokens EOS; documents longer than L-2 are chunked.  Rows are
// padded to L with PAD, which belongs to no segment.
inline std::vector<PackedRow> pack_documents(
    const std::vector<std::vector<uint32_t>>& token_streams, uint32_t L,
    const Vocab& vocab) {
    if (L < 8) throw std::invalid_argument("pack_documents: L must be >= 8");
    const uint32_t bos = vocab.special_id(Special::Bos);
    const uint32_t eos = vocab.special_id(Special::Eos);
    const uint32_t pad = vocab.special_id(Special::Pad);

    std::vector<PackedRow> rows;
    std::vector<uint32_t> used;  // parallel to rows

    auto place = [&](std::span<const uint32_t> chunk) {
        const uint32_t need = uint32_t(chunk.size()) + 2;
        size_t r = 0;
        for (; r < rows.size(); ++r)
            if (L - used[r] >= need) break;
        if (r == rows.size()) {
            rows.emplace_back();
            rows.back().ids.assign(L, pad);
            used.push_back(0);
        }
        uint32_t& u = used[r];
        auto& ids = rows[r].ids;
        ids[u] = bos;
        std::copy(chunk.begin(), chunk.end(), ids.begin() + u + 1);
        ids[u + 1 + chunk.size()] = eos;
        u += need;
        rows[r].boundaries.push_back(u);
    };

    for (const auto& stream : token_streams) {
        if (stream.empty())
            throw std::invalid_argument("pack_documents: empty token stream");
        const uint32_t chunk_len = L - 2;
        for (size_t off = 0; off < stream.size(); off += chunk_len) {
            size_t n = std::min<size_t>(chunk_len, stream.size() - off);
            place(std::span<const uint32_t>(stream.data() + off, n));
        }
    }
    for (auto& r : rows) r.labels.assign(L, -1);
    return rows;
}

// Reconstructs the pre-masking ids of a row (labels hold the originals).
inline std::vector<uint32_t> restore_ids(const PackedRow& row) {
    std::vector<uint32_t> ids = row.ids;
    for (uint32_t p : row.mask_positions) ids[p] = uint32_t(row.labels[p]);
    return ids;
}

// Independent Bernoulli(p) selection over non-special positions; of the
// selected, 80% become MASK, 10% a random non-special token, 10% unchanged.
inline PackedRow apply_mlm(const PackedRow& row, double p, const Vocab& vocab,
                           uint64_t seed) {
    if (!(p > 0.0 && p < 1.0))
        throw std::invalid_argument("apply_mlm: p must be in (0,1)");
    PackedRow out = row;
    out.mask_positions.clear();
    out.labels.assign(row.ids.size(), -1);

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<uint32_t> tok(0, vocab.size() - 1);

    const uint32_t mask_id = vocab.special_id(Special::Mask);
    for (uint32_t i = 0; i < row.ids.size(); ++i) {
        if (vocab.is_special(row.ids[i])) continue;
        if (unif(rng) >= p) continue;
        out.mask_positions.push_back(i);
        out.labels[i] = int32_t(row.ids[i]);
        double r = unif(rng);
        if (r < 0.8) {
            out.ids[i] = mask_id;
        } else if (r < 0.9) {
            uint32_t t;
            do {
                t = tok(rng);
            } while (vocab.is_special(t));
            out.ids[i] = t;
        }  // else keep the original id
    }
    return out;
}

// Block-diagonal attention predicate: positions may attend to each other only
// inside the same document segment; PAD belongs to no segment.
struct BoundaryMask {
    std::vector<int32_t> segment;  // -1 for PAD

    bool allowed(uint32_t i, uint32_t j) const {
        return segment[i] >= 0 && segment[i] == segment[j];
    }
    int32_t segment_of(uint32_t i) const { return segment[i]; }
};

inline BoundaryMask boundary_mask(const std::vector<uint32_t>& boundaries,
                                  uint32_t L) {
    uint32_t prev = 0;
    for (uint32_t b : boundaries) {
        if (b <= prev || b > L)
            throw std::invalid_argument("boundary_mask: invalid boundaries");
        prev = b;
    }
    BoundaryMask m;
    m.segment.assign(L, -1);
    uint32_t start = 0;
    for (size_t s = 0; s < boundaries.size(); ++s) {
        for (uint32_t i = start; i < boundaries[s]; ++i) m.segment[i] = int32_t(s);
        start = boundaries[s];
    }
    return m;
}

inline BoundaryMask boundary_mask(const PackedRow& row) {
    return boundary_mask(row.boundaries, row.seq_len());
}

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("unexpected end of file");
}

template <typename T>
void write_vec(std::ostream& os, const std::vector<T>& v) {
    os.write(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
}

template <typename T>
void read_vec(std::istream& is, std::vector<T>& v, size_t n) {
    v.resize(n);
    is.read(reinterpret_cast<char*>(v.data()), n * sizeof(T));
    if (!is) throw std::runtime_error("unexpected end of file");
}

}  // namespace detail

inline void write_pack(const std::string& path, const PackedBatch& batch) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write("PACK", 4);
    detail::write_pod(f, uint32_t(1));  // version
    detail::write_pod(f, batch.seq_len);
    detail::write_pod(f, batch.vocab_size);
    detail::write_pod(f, uint64_t(batch.rows.size()));
    for (const auto& row : batch.rows) {
        detail::write_vec(f, row.ids);
        detail::write_pod(f, uint32_t(row.boundaries.size()));
        detail::write_vec(f, row.boundaries);
        detail::write_pod(f, uint32_t(row.mask_positions.size()));
        detail::write_vec(f, row.mask_positions);
        std::vector<int32_t> sparse_labels;
        sparse_labels.reserve(row.mask_positions.size());
        for (uint32_t p : row.mask_positions) sparse_labels.push_back(row.labels[p]);
        detail::write_vec(f, sparse_labels);
    }
    if (!f) throw std::runtime_error("short write to " + path);
}

inline PackedBatch read_pack(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "PACK", 4) != 0)
        throw std::runtime_error(path + ": not a PACK file");
    uint32_t version;
    detail::read_pod(f, version);
    if (version != 1) throw std::runtime_error(path + ": unsupported PACK version");
    PackedBatch batch;
    detail::read_pod(f, batch.seq_len);
    detail::read_pod(f, batch.vocab_size);
    uint64_t n_rows;
    detail::read_pod(f, n_rows);
    batch.rows.resize(n_rows);
    for (auto& row : batch.rows) {
        detail::read_vec(f, row.ids, batch.seq_len);
        uint32_t n_bounds, n_masks;
        detail::read_pod(f, n_bounds);
        detail::read_vec(f, row.boundaries, n_bounds);
        detail::read_pod(f, n_masks);
        detail::read_vec(f, row.mask_positions, n_masks);
        std::vector<int32_t> sparse_labels;
        detail::read_vec(f, sparse_labels, n_masks);
        row.labels.assign(batch.seq_len, -1);
        for (size_t i = 0; i < n_masks; ++i) {
            if (row.mask_positions[i] >= batch.seq_len)
                throw std::runtime_error(path + ": corrupt mask position");
            row.labels[row.mask_positions[i]] = sparse_labels[i];
        }
        row.validate();
    }
    return batch;
}

}  // namespace elen
