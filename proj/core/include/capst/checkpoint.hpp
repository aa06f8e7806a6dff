#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "capst/errors.hpp"
#include "capst/nn.hpp"
#include "capst/rng.hpp"
#include "capst/tensor.hpp"

namespace capst {

// Checkpoint stream: magic "CAPST001", version, config text, named tensor
// table, optimizer momentum buffers, epoch counter, RNG state. All
// integers little-endian fixed width; tensor payloads are raw 32- or
// 64-bit reals.
inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'P', 'S', 'T', '0', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw data_error("checkpoint: truncated stream");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw data_error("checkpoint: truncated stream");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n)) throw data_error("checkpoint: truncated stream");
    return s;
}

template <class T>
void write_tensor(std::ostream& os, const std::string& name, const Tensor<T>& t) {
    write_string(os, name);
    os.put(static_cast<char>(sizeof(T)));
    write_u32(os, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

}  // namespace ckpt_detail

template <class T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

// Reads one table entry, widening/narrowing the stored dtype to T
// (round-to-nearest-even via the usual float<->double conversion).
template <class T>
NamedTensor<T> read_tensor(std::istream& is) {
    using namespace ckpt_detail;
    NamedTensor<T> out;
    out.name = read_string(is);
    const int dtype = is.get();
    if (dtype != 4 && dtype != 8) throw data_error("checkpoint: bad dtype for " + out.name);
    const std::uint32_t ndim = read_u32(is);
    if (ndim > 8) throw data_error("checkpoint: implausible rank for " + out.name);
    Shape shape(ndim);
    for (auto& d : shape) d = read_u32(is);
    const std::size_t n = shape_numel(shape);
    std::vector<T> values(n);
    if (dtype == 4) {
        std::vector<float> raw(n);
        if (n && !is.read(reinterpret_cast<char*>(raw.data()),
                          static_cast<std::streamsize>(n * 4)))
            throw data_error("checkpoint: truncated tensor " + out.name);
        for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<T>(raw[i]);
    } else {
        std::vector<double> raw(n);
        if (n && !is.read(reinterpret_cast<char*>(raw.data()),
                          static_cast<std::streamsize>(n * 8)))
            throw data_error("checkpoint: truncated tensor " + out.name);
        for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<T>(raw[i]);
    }
    out.tensor = Tensor<T>(std::move(shape), std::move(values));
    return out;
}

template <class T>
struct Checkpoint {
    std::string config_text;
    std::vector<NamedTensor<T>> tensors;
    std::vector<NamedTensor<T>> momentum;
    std::uint32_t epoch = 0;
    std::uint64_t rng_state[3] = {0, 0, 0};
};

template <class T>
void save_checkpoint(std::ostream& os, const std::string& config_text,
                     const ParamStore<T>& params,
                     const std::vector<NamedTensor<T>>& momentum, std::uint32_t epoch,
                     const Rng& rng) {
    using namespace ckpt_detail;
    os.write(kCheckpointMagic, 8);
    write_u32(os, kCheckpointVersion);
    write_string(os, config_text);
    write_u32(os, static_cast<std::uint32_t>(params.entries().size()));
    for (const auto& e : params.entries()) write_tensor(os, e.name, e.tensor);
    write_u32(os, static_cast<std::uint32_t>(momentum.size()));
    for (const auto& m : momentum) write_tensor(os, m.name, m.tensor);
    write_u32(os, epoch);
    write_u64(os, rng.seed());
    write_u64(os, rng.stream());
    write_u64(os, rng.counter());
    if (!os) throw data_error("checkpoint: write failure");
}

template <class T>
Checkpoint<T> load_checkpoint(std::istream& is) {
    using namespace ckpt_detail;
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw data_error("checkpoint: bad magic (not a CAPST001 stream)");
    }
    const std::uint32_t version = read_u32(is);
    if (version != kCheckpointVersion) {
        throw data_error("checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint<T> ck;
    ck.config_text = read_string(is);
    const std::uint32_t nt = read_u32(is);
    for (std::uint32_t i = 0; i < nt; ++i) ck.tensors.push_back(read_tensor<T>(is));
    const std::uint32_t nm = read_u32(is);
    for (std::uint32_t i = 0; i < nm; ++i) ck.momentum.push_back(read_tensor<T>(is));
    ck.epoch = read_u32(is);
    ck.rng_state[0] = read_u64(is);
    ck.rng_state[1] = read_u64(is);
    ck.rng_state[2] = read_u64(is);
    return ck;
}

// Loads parameters into a store by name; shapes validated before any
// mutation. Unmatched checkpoint names are returned; missing store names
// raise. `name_map` rewrites source names (source -> store), empty = identity.
template <class T>
std::vector<std::string> apply_tensors(ParamStore<T>& store,
                                       const std::vector<NamedTensor<T>>& tensors,
                                       const std::map<std::string, std::string>& name_map = {}) {
    std::vector<std::string> unmatched;
    std::vector<std::pair<Tensor<T>*, const NamedTensor<T>*>> plan;
    std::vector<bool> seen(store.entries().size(), false);
    for (const auto& nt : tensors) {
        std::string name = nt.name;
        if (auto it = name_map.find(name); it != name_map.end()) name = it->second;
        if (!store.contains(name)) {
            unmatched.push_back(nt.name);
            continue;
        }
        Tensor<T>& dst = store.at(name);
        if (dst.shape() != nt.tensor.shape()) {
            throw data_error("checkpoint: shape conflict for " + name + ": " +
                             shape_str(nt.tensor.shape()) + " vs " + shape_str(dst.shape()));
        }
        for (std::size_t i = 0; i < store.entries().size(); ++i)
            if (store.entries()[i].name == name) seen[i] = true;
        plan.emplace_back(&dst, &nt);
    }
    for (std::size_t i = 0; i < seen.size(); ++i) {
        if (!seen[i]) {
            throw data_error("checkpoint: missing tensor for parameter " +
                             store.entries()[i].name);
        }
    }
    for (auto& [dst, src] : plan)
        std::copy(src->tensor.data(), src->tensor.data() + src->tensor.numel(), dst->data());
    return unmatched;
}

template <class T>
void save_checkpoint_file(const std::string& path, const std::string& config_text,
                          const ParamStore<T>& params,
                          const std::vector<NamedTensor<T>>& momentum, std::uint32_t epoch,
                          const Rng& rng) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw data_error("checkpoint: cannot open " + path + " for writing");
    save_checkpoint(os, config_text, params, momentum, epoch, rng);
}

template <class T>
Checkpoint<T> load_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("checkpoint: cannot open " + path);
    return load_checkpoint<T>(is);
}

}  // namespace capst
