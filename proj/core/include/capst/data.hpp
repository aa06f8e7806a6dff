#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "capst/errors.hpp"
#include "capst/rng.hpp"
#include "capst/tensor.hpp"

namespace capst {

struct ManifestEntry {
    std::string video_id;
    int label = 0;
    std::vector<std::string> frame_paths;  // temporal order
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::vector<std::string> class_names;

    int num_classes() const {
        int n = 0;
        for (const auto& e : entries) n = std::max(n, e.label + 1);
        return std::max<int>(n, static_cast<int>(class_names.size()));
    }
};

// Manifest file: one `video_id,label,frame_path` line per frame, frames
// grouped per video in temporal order. Lines starting with # are comments;
// `#class <i> <name>` lines carry class names.
inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw data_error("manifest: cannot open " + path);
    DatasetManifest m;
    std::map<int, std::string> names;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ls(line);
            std::string tag;
            int idx;
            std::string name;
            ls >> tag;
            if (tag == "#class" && (ls >> idx >> name)) names[idx] = name;
            continue;
        }
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) {
            throw data_error("manifest: malformed line " + std::to_string(lineno) + " in " +
                             path);
        }
        const std::string id = line.substr(0, c1);
        int label = 0;
        try {
            label = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
        } catch (const std::exception&) {
            throw data_error("manifest: bad label on line " + std::to_string(lineno));
        }
        if (label < 0) throw data_error("manifest: negative label on line " + std::to_string(lineno));
        const std::string frame = line.substr(c2 + 1);
        if (m.entries.empty() || m.entries.back().video_id != id) {
            m.entries.push_back({id, label, {}});
        } else if (m.entries.back().label != label) {
            throw data_error("manifest: video " + id + " has conflicting labels");
        }
        m.entries.back().frame_paths.push_back(frame);
    }
    if (!names.empty()) {
        const int top = names.rbegin()->first;
        m.class_names.assign(static_cast<std::size_t>(top) + 1, "");
        for (auto& [i, n] : names) m.class_names[static_cast<std::size_t>(i)] = n;
    }
    for (const auto& e : m.entries)
        if (e.frame_paths.empty()) throw data_error("manifest: video " + e.video_id + " has no frames");
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw data_error("manifest: cannot write " + path);
    for (std::size_t i = 0; i < m.class_names.size(); ++i)
        os << "#class " << i << ' ' << m.class_names[i] << '\n';
    for (const auto& e : m.entries)
        for (const auto& f : e.frame_paths) os << e.video_id << ',' << e.label << ',' << f << '\n';
}

// Periodic sampling: floor(k*T/N) for k in [0,N); cyclic repetition when
// the clip is shorter than N.
inline std::vector<std::size_t> periodic_sample(std::size_t total_frames, std::size_t n) {
    if (total_frames == 0 || n == 0) throw data_error("periodic_sample: empty input");
    std::vector<std::size_t> idx(n);
    if (total_frames < n) {
        for (std::size_t k = 0; k < n; ++k) idx[k] = k % total_frames;
    } else {
        for (std::size_t k = 0; k < n; ++k) idx[k] = k * total_frames / n;
    }
    return idx;
}

// Stratified video-level split, deterministic under seed.
inline std::pair<DatasetManifest, DatasetManifest> split(const DatasetManifest& m,
                                                         double train_fraction,
                                                         std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw data_error("split: train fraction must lie in (0,1)");
    }
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < m.entries.size(); ++i)
        by_class[m.entries[i].label].push_back(i);
    DatasetManifest train, test;
    train.class_names = test.class_names = m.class_names;
    for (auto& [label, idx] : by_class) {
        if (idx.size() < 2) {
            throw data_error("split: class " + std::to_string(label) + " has fewer than 2 videos");
        }
        Rng rng = Rng(seed, 0).split("split").split(static_cast<std::uint64_t>(label));
        for (std::size_t i = idx.size(); i > 1; --i)
            std::swap(idx[i - 1], idx[rng.next_below(i)]);
        const auto n_train = static_cast<std::size_t>(
            std::floor(static_cast<double>(idx.size()) * train_fraction + 1e-9));
        for (std::size_t i = 0; i < idx.size(); ++i)
            (i < n_train ? train : test).entries.push_back(m.entries[idx[i]]);
    }
    return {train, test};
}

// ---- frame codecs ---------------------------------------------------------

inline constexpr char kRawf32Magic[8] = {'R', 'A', 'W', 'F', '3', '2', '\0', '\0'};

template <class T>
void encode_rawf32(const Tensor<T>& t, std::ostream& os) {
    if (t.shape().size() != 3) throw data_error("rawf32: tensor must be [C,H,W]");
    os.write(kRawf32Magic, 8);
    for (std::size_t d : t.shape()) {
        const auto v = static_cast<std::uint32_t>(d);
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        os.write(reinterpret_cast<const char*>(b), 4);
    }
    for (std::size_t i = 0; i < t.numel(); ++i) {
        const float f = static_cast<float>(t[i]);
        os.write(reinterpret_cast<const char*>(&f), 4);
    }
}

// Binary PPM, maxval 255, from [0,1] pixel values.
template <class T>
void encode_p6(const Tensor<T>& t, std::ostream& os) {
    if (t.shape().size() != 3 || t.dim(0) != 3) throw data_error("p6: tensor must be [3,H,W]");
    const std::size_t h = t.dim(1), w = t.dim(2);
    os << "P6\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> row(w * 3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                double v = static_cast<double>(t[(c * h + y) * w + x]);
                v = std::clamp(v, 0.0, 1.0);
                row[x * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size()));
    }
}

template <class T>
void encode_p5(const Tensor<T>& t, std::ostream& os) {
    if (t.shape().size() != 2) throw data_error("p5: tensor must be [H,W]");
    const std::size_t h = t.dim(0), w = t.dim(1);
    os << "P5\n" << w << ' ' << h << "\n255\n";
    for (std::size_t i = 0; i < h * w; ++i) {
        double v = std::clamp(static_cast<double>(t[i]), 0.0, 1.0);
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
}

namespace pnm_detail {

inline int next_token(std::istream& is) {
    // Skips whitespace and # comments, returns a non-negative integer.
    while (true) {
        const int c = is.peek();
        if (c == '#') {
            std::string dummy;
            std::getline(is, dummy);
        } else if (std::isspace(c)) {
            is.get();
        } else {
            break;
        }
    }
    int v;
    if (!(is >> v) || v < 0) throw data_error("pnm: malformed header");
    return v;
}

}  // namespace pnm_detail

// Decodes P6 / P5 (maxval 255; P5 replicated to 3 channels) or RAWF32 to a
// [3 x H x W] tensor in [0,1].
template <class T>
Tensor<T> decode_frame_stream(std::istream& is, const std::string& what) {
    char magic[2];
    if (!is.read(magic, 2)) throw data_error("frame " + what + ": empty or unreadable");
    if (magic[0] == 'R') {
        char rest[6];
        if (!is.read(rest, 6) || std::memcmp(rest, kRawf32Magic + 2, 6) != 0) {
            throw data_error("frame " + what + ": unsupported magic");
        }
        std::uint32_t dims[3];
        for (auto& d : dims) {
            unsigned char b[4];
            if (!is.read(reinterpret_cast<char*>(b), 4))
                throw data_error("frame " + what + ": truncated rawf32 header");
            d = 0;
            for (int i = 0; i < 4; ++i) d |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        }
        Tensor<T> t({dims[0], dims[1], dims[2]});
        for (std::size_t i = 0; i < t.numel(); ++i) {
            float f;
            if (!is.read(reinterpret_cast<char*>(&f), 4))
                throw data_error("frame " + what + ": truncated rawf32 payload");
            t[i] = static_cast<T>(f);
        }
        return t;
    }
    if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
        throw data_error("frame " + what + ": unsupported magic");
    }
    const bool color = magic[1] == '6';
    const std::size_t w = static_cast<std::size_t>(pnm_detail::next_token(is));
    const std::size_t h = static_cast<std::size_t>(pnm_detail::next_token(is));
    const int maxval = pnm_detail::next_token(is);
    if (maxval != 255) throw data_error("frame " + what + ": only maxval 255 is supported");
    is.get();  // single whitespace after header
    const std::size_t nch = color ? 3 : 1;
    std::vector<unsigned char> raw(w * h * nch);
    if (!is.read(reinterpret_cast<char*>(raw.data()),
                 static_cast<std::streamsize>(raw.size()))) {
        throw data_error("frame " + what + ": truncated pixel data");
    }
    Tensor<T> t({3, h, w});
    const T inv = T(1) / T(255);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const unsigned char px = color ? raw[(y * w + x) * 3 + c] : raw[y * w + x];
                t[(c * h + y) * w + x] = static_cast<T>(px) * inv;
            }
    return t;
}

template <class T>
Tensor<T> decode_frame(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("frame: cannot open " + path);
    return decode_frame_stream<T>(is, path);
}

template <class T>
struct VideoSample {
    std::vector<Tensor<T>> frames;  // N tensors [3 x H x W], values in [0,1]
    int label = 0;
    std::string video_id;
};

// Loads a video with periodic sampling down/up to n frames.
template <class T>
VideoSample<T> load_video(const ManifestEntry& e, std::size_t n) {
    VideoSample<T> v;
    v.label = e.label;
    v.video_id = e.video_id;
    for (std::size_t i : periodic_sample(e.frame_paths.size(), n))
        v.frames.push_back(decode_frame<T>(e.frame_paths[i]));
    for (const auto& f : v.frames)
        if (f.shape() != v.frames.front().shape())
            throw data_error("video " + e.video_id + ": inconsistent frame dimensions");
    return v;
}

// ---- synthetic generator --------------------------------------------------

// Class signatures for the synthetic artifact videos: each class injects a
// zero-mean sinusoidal texture in a distinct spatial-frequency band with a
// distinct temporal flicker period, confined to the top-left quadrant.
// Classes are indistinguishable by raw pixel mean but separable by
// spatial-frequency statistics.
struct SynthSignature {
    double wavelength;  // pixels
    double angle;       // radians
    std::size_t flicker_period;
};

inline SynthSignature synth_signature(std::size_t cls) {
    static const double wl[] = {4.0, 6.0, 9.0, 14.0, 22.0, 32.0, 44.0, 60.0};
    static const double ang[] = {0.0, 0.6, 1.2, 1.8, 2.4, 3.0, 0.3, 0.9};
    static const std::size_t fp[] = {2, 3, 4, 5, 7, 6, 8, 9};
    const std::size_t i = cls % 8;
    return {wl[i], ang[i], fp[i]};
}

// The quadrant carrying the artifact (for localization checks):
// rows [0, S/2), cols [0, S/2).
inline constexpr int kSynthArtifactQuadrant = 0;

template <class T>
Tensor<T> synth_frame(std::size_t cls, std::uint64_t seed, std::uint64_t video,
                      std::size_t frame, std::size_t size) {
    Rng base = Rng(seed, 0).split("synth").split(video);
    const std::size_t s = size;
    Tensor<T> t({3, s, s});

    // Shared face-like base: elliptical brightening plus a smooth random
    // field, drifting slowly across frames.
    const double cx = 0.5 * s + base.uniform(-0.05, 0.05) * s;
    const double cy = 0.52 * s + base.uniform(-0.05, 0.05) * s;
    const double rx = 0.33 * s, ry = 0.42 * s;
    struct Wave {
        double fx, fy, phase, amp;
    };
    Wave waves[6];
    for (auto& wv : waves) {
        wv.fx = base.uniform(-2.0, 2.0) * 2.0 * 3.14159265358979323846 / s;
        wv.fy = base.uniform(-2.0, 2.0) * 2.0 * 3.14159265358979323846 / s;
        wv.phase = base.uniform(0.0, 2.0 * 3.14159265358979323846);
        wv.amp = base.uniform(0.02, 0.05);
    }
    const double drift = base.uniform(0.0, 0.3);
    double tint[3];
    for (auto& c : tint) c = base.uniform(-0.04, 0.04);

    const SynthSignature sig = synth_signature(cls);
    Rng vr = Rng(seed, 0).split("synthsig").split(video);
    const double sig_phase = vr.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double flicker =
        0.7 + 0.3 * std::cos(2.0 * 3.14159265358979323846 *
                             static_cast<double>(frame % sig.flicker_period) /
                             static_cast<double>(sig.flicker_period));
    const double kx = std::cos(sig.angle) * 2.0 * 3.14159265358979323846 / sig.wavelength;
    const double ky = std::sin(sig.angle) * 2.0 * 3.14159265358979323846 / sig.wavelength;
    const std::size_t half = s / 2;

    // Zero-mean the signature over its quadrant so class means match.
    double sig_sum = 0.0;
    for (std::size_t y = 0; y < half; ++y)
        for (std::size_t x = 0; x < half; ++x)
            sig_sum += std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) +
                                sig_phase);
    const double sig_mean = sig_sum / static_cast<double>(half * half);

    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
            const double dx = (static_cast<double>(x) - cx) / rx;
            const double dy = (static_cast<double>(y) - cy) / ry;
            const double face = dx * dx + dy * dy < 1.0 ? 0.16 : 0.0;
            double v = 0.42 + face;
            for (const auto& wv : waves)
                v += wv.amp * std::cos(wv.fx * x + wv.fy * y + wv.phase +
                                       drift * static_cast<double>(frame));
            double a = 0.0;
            if (x < half && y < half) {
                a = 0.13 * flicker *
                    (std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) +
                              sig_phase) -
                     sig_mean);
            }
            for (std::size_t c = 0; c < 3; ++c) {
                t[(c * s + y) * s + x] =
                    static_cast<T>(std::clamp(v + tint[c] + a, 0.02, 0.98));
            }
        }
    return t;
}

// Emits manifest + P6 frame files under out_dir; bitwise deterministic
// under seed.
inline DatasetManifest synth_generate(std::size_t num_classes, std::size_t videos_per_class,
                                      std::size_t frames, std::size_t size, std::uint64_t seed,
                                      const std::string& out_dir) {
    if (size % 8 != 0) throw data_error("synth: size must be divisible by 8");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    DatasetManifest m;
    for (std::size_t c = 0; c < num_classes; ++c)
        m.class_names.push_back("synth" + std::to_string(c));
    std::uint64_t video_counter = 0;
    for (std::size_t c = 0; c < num_classes; ++c)
        for (std::size_t v = 0; v < videos_per_class; ++v, ++video_counter) {
            ManifestEntry e;
            e.video_id = "c" + std::to_string(c) + "v" + std::to_string(v);
            e.label = static_cast<int>(c);
            const fs::path dir = fs::path(out_dir) / e.video_id;
            fs::create_directories(dir);
            for (std::size_t f = 0; f < frames; ++f) {
                Tensor<double> frame = synth_frame<double>(c, seed, video_counter, f, size);
                const fs::path p = dir / ("f" + std::to_string(f) + ".ppm");
                std::ofstream os(p, std::ios::binary);
                if (!os) throw data_error("synth: cannot write " + p.string());
                encode_p6(frame, os);
                e.frame_paths.push_back(p.string());
            }
            m.entries.push_back(std::move(e));
        }
    save_manifest(m, (fs::path(out_dir) / "manifest.csv").string());
    return m;
}

}  // namespace capst
