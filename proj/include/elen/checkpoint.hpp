#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "elen/encoder.hpp"
#include "elen/packing.hpp"  // write_pod/read_pod

namespace elen {

inline constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
const char* dtype_of();
template <>
inline const char* dtype_of<float>() {
    return "f32";
}
template <>
inline const char* dtype_of<double>() {
    return "f64";
}

namespace detail {

struct RawTensor {
    std::string name;
    std::string dtype;
    std::vector<uint64_t> shape;
    const void* data;
    uint64_t nbytes;
};

struct TensorMeta {
    std::string name;
    std::string dtype;
    std::vector<uint64_t> shape;
    uint64_t offset;
    uint64_t nbytes;
};

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod(os, uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

inline std::string read_string(std::istream& is) {
    uint32_t n;
    read_pod(is, n);
    if (n > (1u << 20)) throw std::runtime_error("corrupt checkpoint: oversized string");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("unexpected end of file");
    return s;
}

}  // namespace detail

// Container layout: "ELEN" magic, version, JSON metadata blob, tensor index
// (name, dtype, shape, offset into the data section), raw little-endian data.
inline void write_elen_container(const std::string& path,
                                 const nlohmann::json& meta,
                                 const std::vector<detail::RawTensor>& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write("ELEN", 4);
    detail::write_pod(f, kCheckpointVersion);
    const std::string mj = meta.dump();
    detail::write_pod(f, uint64_t(mj.size()));
    f.write(mj.data(), std::streamsize(mj.size()));
    detail::write_pod(f, uint64_t(tensors.size()));
    uint64_t offset = 0;
    for (const auto& t : tensors) {
        detail::write_string(f, t.name);
        detail::write_string(f, t.dtype);
        detail::write_pod(f, uint32_t(t.shape.size()));
        for (uint64_t s : t.shape) detail::write_pod(f, s);
        detail::write_pod(f, offset);
        detail::write_pod(f, t.nbytes);
        offset += t.nbytes;
    }
    for (const auto& t : tensors)
        f.write(reinterpret_cast<const char*>(t.data), std::streamsize(t.nbytes));
    if (!f) throw std::runtime_error("short write to " + path);
}

class ElenReader {
  public:
    explicit ElenReader(const std::string& path) : f_(path, std::ios::binary), path_(path) {
        if (!f_) throw std::runtime_error("cannot read " + path);
        char magic[4];
        f_.read(magic, 4);
        if (!f_ || std::memcmp(magic, "ELEN", 4) != 0)
            throw std::runtime_error(path + ": not a checkpoint file");
        uint32_t version;
        detail::read_pod(f_, version);
        if (version != kCheckpointVersion)
            throw std::runtime_error(path + ": unsupported checkpoint version");
        uint64_t mlen;
        detail::read_pod(f_, mlen);
        if (mlen > (1ull << 30)) throw std::runtime_error(path + ": corrupt metadata length");
        std::string mj(mlen, '\0');
        f_.read(mj.data(), std::streamsize(mlen));
        if (!f_) throw std::runtime_error("unexpected end of file");
        meta_ = nlohmann::json::parse(mj);
        uint64_t n;
        detail::read_pod(f_, n);
        tensors_.resize(n);
        for (auto& t : tensors_) {
            t.name = detail::read_string(f_);
            t.dtype = detail::read_string(f_);
            uint32_t ndim;
            detail::read_pod(f_, ndim);
            if (ndim > 8) throw std::runtime_error(path + ": corrupt tensor rank");
            t.shape.resize(ndim);
            for (auto& s : t.shape) detail::read_pod(f_, s);
            detail::read_pod(f_, t.offset);
            detail::read_pod(f_, t.nbytes);
        }
        data_start_ = f_.tellg();
    }

    const nlohmann::json& meta() const { return meta_; }
    const std::vector<detail::TensorMeta>& tensors() const { return tensors_; }

    void read_into(const detail::TensorMeta& tm, void* dst) {
        f_.seekg(std::streamoff(data_start_ + tm.offset));
        f_.read(reinterpret_cast<char*>(dst), std::streamsize(tm.nbytes));
        if (!f_) throw std::runtime_error(path_ + ": unexpected end of file");
    }

  private:
    std::ifstream f_;
    std::string path_;
    nlohmann::json meta_;
    std::vector<detail::TensorMeta> tensors_;
    uint64_t data_start_ = 0;
};

namespace detail {

template <typename T>
std::vector<RawTensor> collect_tensors(const ParamSet<T>& ps,
                                       const std::string& prefix = "") {
    std::vector<RawTensor> ts;
    for_each_tensor(ps, [&](const auto& t) {
        ts.push_back({prefix + t.name, dtype_of<T>(), t.shape, t.data,
                      uint64_t(t.size) * sizeof(T)});
    });
    return ts;
}

// Fills every tensor of ps from entries named prefix+<tensor>; throws if one
// is missing or mis-shaped.
template <typename T>
void fill_tensors(ElenReader& r, ParamSet<T>& ps, const std::string& prefix = "") {
    std::map<std::string, TensorView<T>> want;
    for_each_tensor(ps, [&](const TensorView<T>& t) { want.emplace(prefix + t.name, t); });
    size_t found = 0;
    for (const auto& tm : r.tensors()) {
        auto it = want.find(tm.name);
        if (it == want.end()) continue;
        const auto& view = it->second;
        if (tm.dtype != dtype_of<T>())
            throw std::runtime_error("checkpoint tensor " + tm.name + ": dtype mismatch");
        if (tm.shape != view.shape || tm.nbytes != uint64_t(view.size) * sizeof(T))
            throw std::runtime_error("checkpoint tensor " + tm.name + ": shape mismatch");
        r.read_into(tm, view.data);
        ++found;
    }
    if (found != want.size())
        throw std::runtime_error("checkpoint is missing model tensors");
}

}  // namespace detail

template <typename T>
void save_model(const std::string& path, const EncoderConfig& cfg,
                const ParamSet<T>& ps) {
    nlohmann::json meta = {{"format", "model"}, {"model", cfg.to_json()}};
    write_elen_container(path, meta, detail::collect_tensors(ps));
}

template <typename T>
std::pair<EncoderConfig, ParamSet<T>> load_model(const std::string& path) {
    ElenReader r(path);
    EncoderConfig cfg = EncoderConfig::from_json(r.meta().at("model"));
    ParamSet<T> ps = alloc_params<T>(cfg);
    detail::fill_tensors(r, ps);
    for_each_tensor(ps, [&](const TensorView<T>& t) {
        if (!all_finite(std::span<const T>(t.data, t.size)))
            throw std::runtime_error(path + ": non-finite values in " + t.name);
    });
    return {cfg, std::move(ps)};
}

}  // namespace elen
