#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "capst/data.hpp"
#include "capst/model.hpp"
#include "capst/tensor.hpp"
#include "capst/util.hpp"

namespace capst {

// Unweighted (macro) mean of per-class accuracies.
inline double average_accuracy(const std::vector<double>& per_class) {
    if (per_class.empty()) throw error("average_accuracy: empty input");
    double s = 0;
    for (double v : per_class) s += v;
    return s / static_cast<double>(per_class.size());
}

struct EvalReport {
    std::vector<std::vector<std::uint64_t>> confusion;  // rows = true, cols = predicted
    std::vector<double> per_class_accuracy;             // percent
    double avg_accuracy = 0.0;                          // percent, macro
    std::uint64_t param_count = 0;
    std::uint64_t mac_count = 0;  // per video
    double runtime_seconds = 0.0;

    void finalize() {
        per_class_accuracy.clear();
        for (const auto& row : confusion) {
            std::uint64_t total = 0;
            for (auto v : row) total += v;
            const std::size_t i = per_class_accuracy.size();
            per_class_accuracy.push_back(
                total == 0 ? 0.0
                           : 100.0 * static_cast<double>(row[i]) / static_cast<double>(total));
        }
        avg_accuracy = average_accuracy(per_class_accuracy);
    }

    std::string to_text(const std::vector<std::string>& class_names = {}) const {
        std::ostringstream os;
        os << "confusion matrix (rows = true, cols = predicted):\n";
        for (std::size_t i = 0; i < confusion.size(); ++i) {
            os << "  ";
            if (i < class_names.size()) os << std::setw(12) << class_names[i] << " ";
            for (auto v : confusion[i]) os << std::setw(6) << v;
            os << "  " << std::fixed << std::setprecision(2) << per_class_accuracy[i] << "%\n";
        }
        os << std::fixed << std::setprecision(2);
        os << "average accuracy: " << avg_accuracy << "%\n";
        os << "parameters: " << param_count << "\n";
        os << "macs per video: " << mac_count << "\n";
        return os.str();
    }

    // Machine-readable key=value lines.
    std::string to_kv() const {
        std::ostringstream os;
        os << "num_classes=" << confusion.size() << '\n';
        for (std::size_t i = 0; i < confusion.size(); ++i)
            for (std::size_t j = 0; j < confusion[i].size(); ++j)
                os << "confusion." << i << "." << j << "=" << confusion[i][j] << '\n';
        os << std::setprecision(17);
        for (std::size_t i = 0; i < per_class_accuracy.size(); ++i)
            os << "accuracy." << i << "=" << per_class_accuracy[i] << '\n';
        os << "accuracy.average=" << avg_accuracy << '\n';
        os << "params.total=" << param_count << '\n';
        os << "macs.video=" << mac_count << '\n';
        os << "runtime.seconds=" << runtime_seconds << '\n';
        return os.str();
    }
};

// ---- profiling ------------------------------------------------------------

struct LedgerRow {
    std::string name;
    std::uint64_t params = 0;
    std::uint64_t macs_per_video = 0;
};

struct ProfileLedger {
    std::vector<LedgerRow> rows;
    std::uint64_t total_params = 0;
    std::uint64_t total_macs = 0;  // per video
    std::uint64_t macs_per_frame_stages = 0;
    std::size_t num_frames = 0;

    std::string to_text() const {
        std::ostringstream os;
        os << std::left << std::setw(18) << "module" << std::right << std::setw(14) << "params"
           << std::setw(18) << "MACs/video" << '\n';
        for (const auto& r : rows)
            os << std::left << std::setw(18) << r.name << std::right << std::setw(14) << r.params
               << std::setw(18) << r.macs_per_video << '\n';
        os << std::left << std::setw(18) << "total" << std::right << std::setw(14) << total_params
           << std::setw(18) << total_macs << '\n';
        os << "note: MAC = one multiply-accumulate; a \"FLOPs\" figure counting "
              "multiply and add separately would be 2x these numbers\n";
        return os.str();
    }

    std::string to_kv() const {
        std::ostringstream os;
        for (const auto& r : rows) {
            os << "params." << r.name << "=" << r.params << '\n';
            os << "macs." << r.name << "=" << r.macs_per_video << '\n';
        }
        os << "params.total=" << total_params << '\n';
        os << "macs.total=" << total_macs << '\n';
        os << "frames=" << num_frames << '\n';
        return os.str();
    }
};

// Parameter and MAC ledger from the model configuration and the live
// parameter store (so the params column is an exact element count).
template <class T>
ProfileLedger profile(const CapstModel<T>& model) {
    const ModelConfig& cfg = model.config();
    const std::size_t n = cfg.fusion.num_frames;
    const std::size_t fm = cfg.feature_map_size();
    const std::size_t fm2 = fm * fm;
    ProfileLedger ledger;
    ledger.num_frames = n;

    const std::uint64_t backbone_macs =
        static_cast<std::uint64_t>(cfg.backbone.count_macs(cfg.input_size));
    ledger.rows.push_back({"backbone", model.params().count_params("backbone."),
                           backbone_macs * n});

    // Primary capsules: conv2d + SA conv + conv1d per capsule per frame.
    const std::size_t cc = cfg.capsule.conv_channels;
    const std::size_t cin = cfg.backbone.out_channels();
    const std::size_t sak = cfg.capsule.sa_kernel;
    const std::size_t kmfm = cfg.capsule.mfm_channels();
    const std::size_t c1k = cfg.capsule.conv1d_kernel;
    const std::size_t c1c = cfg.capsule.conv1d_channels;
    std::uint64_t per_capsule_macs = 0;
    per_capsule_macs += static_cast<std::uint64_t>(fm2) * cc * cin * 9;         // conv2d 3x3
    per_capsule_macs += static_cast<std::uint64_t>(fm2) * 1 * 2 * sak * sak;    // SA conv
    per_capsule_macs += static_cast<std::uint64_t>(c1c) * 2 * c1k * (kmfm - c1k + 1);
    std::uint64_t caps_params = 0;
    for (std::size_t i = 0; i < cfg.capsule.num_primary; ++i)
        caps_params += model.params().count_params("capsule.cap" + std::to_string(i) + ".");
    ledger.rows.push_back({"primary_capsules", caps_params,
                           per_capsule_macs * cfg.capsule.num_primary * n});

    // Routing: the W matvec per frame (iteration updates are dot products
    // over the same u_hat and are counted once per routing iteration).
    const std::uint64_t p = cfg.capsule.num_primary, o = cfg.capsule.num_output,
                        od = cfg.capsule.output_dim, pd = cfg.capsule.primary_dim();
    std::uint64_t routing_macs = p * o * od * pd;  // u_hat
    routing_macs += cfg.capsule.routing_iters * (2 * p * o * od);  // s_j + agreement
    ledger.rows.push_back({"routing", model.params().count_params("capsule.routing."),
                           routing_macs * n});

    const std::uint64_t ta_macs =
        static_cast<std::uint64_t>(cfg.fusion.ta_hidden) * n * cfg.fusion.feature_dim +
        static_cast<std::uint64_t>(n) * cfg.fusion.ta_hidden;
    ledger.rows.push_back({"temporal_attention", model.params().count_params("fusion.ta."),
                           ta_macs});
    ledger.rows.push_back({"classifier", model.params().count_params("fusion.cls."),
                           static_cast<std::uint64_t>(cfg.fusion.num_classes) *
                               cfg.fusion.feature_dim});

    for (const auto& r : ledger.rows) {
        ledger.total_params += r.params;
        ledger.total_macs += r.macs_per_video;
    }
    ledger.macs_per_frame_stages =
        backbone_macs + per_capsule_macs * cfg.capsule.num_primary + routing_macs;
    return ledger;
}

// ---- evaluation -----------------------------------------------------------

// Argmax with ties toward the lower class index.
template <class T>
std::size_t argmax_class(const Tensor<T>& probs) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < probs.numel(); ++c)
        if (probs[c] > probs[arg]) arg = c;
    return arg;
}

template <class T>
EvalReport evaluate(CapstModel<T>& model, const std::vector<VideoSample<T>>& samples) {
    const std::size_t nc = model.config().fusion.num_classes;
    for (const auto& s : samples) {
        if (s.label < 0 || static_cast<std::size_t>(s.label) >= nc) {
            throw data_error("evaluate: label " + std::to_string(s.label) +
                             " out of range for model with " + std::to_string(nc) + " classes");
        }
    }
    const auto t0 = std::chrono::steady_clock::now();
    model.set_training(false);
    std::vector<std::size_t> predicted(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        typename Tape<T>::NoGrad off;
        predicted[i] = argmax_class(model.forward(samples[i].frames).probs);
    });
    EvalReport report;
    report.confusion.assign(nc, std::vector<std::uint64_t>(nc, 0));
    for (std::size_t i = 0; i < samples.size(); ++i)
        ++report.confusion[static_cast<std::size_t>(samples[i].label)][predicted[i]];
    report.finalize();
    const ProfileLedger ledger = profile(model);
    report.param_count = ledger.total_params;
    report.mac_count = ledger.total_macs;
    report.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// ---- Grad-CAM -------------------------------------------------------------

// Gradient of the target-class score w.r.t. a named convolutional
// activation, channel-wise GAP into weights, weighted sum, relu,
// normalized to [0,1], nearest-upsampled to the input size. Per-frame maps
// are averaged over the video before normalization.
template <class T>
Tensor<T> gradcam(CapstModel<T>& model, const VideoSample<T>& sample, std::size_t target_class,
                  const std::string& layer) {
    model.set_training(false);
    Tape<T> tape;
    typename Tape<T>::Scope scope(tape);
    ForwardResult<T> fwd = model.forward(sample.frames, /*capture=*/true);
    if (fwd.frame_activations.empty() || !fwd.frame_activations.front().count(layer)) {
        std::string known;
        for (const auto& [k, v] : fwd.frame_activations.front()) known += " " + k;
        throw error("gradcam: unknown layer '" + layer + "'; available:" + known);
    }
    if (target_class >= model.config().fusion.num_classes) {
        throw error("gradcam: target class out of range");
    }
    Tensor<T> score = pick(fwd.logits, target_class);
    tape.backward(score);

    const Tensor<T>& first = fwd.frame_activations.front().at(layer);
    const std::size_t c = first.dim(0), h = first.dim(1), w = first.dim(2);
    std::vector<double> heat(h * w, 0.0);
    for (auto& acts : fwd.frame_activations) {
        Tensor<T>& act = acts.at(layer);
        if (!act.grad()) continue;  // layer disconnected from the score
        for (std::size_t ch = 0; ch < c; ++ch) {
            double wgt = 0.0;
            for (std::size_t p2 = 0; p2 < h * w; ++p2)
                wgt += static_cast<double>(act.grad()[ch * h * w + p2]);
            wgt /= static_cast<double>(h * w);
            for (std::size_t p2 = 0; p2 < h * w; ++p2)
                heat[p2] += wgt * static_cast<double>(act[ch * h * w + p2]);
        }
    }
    double mx = 0.0;
    for (auto& v : heat) {
        v = std::max(v, 0.0);
        mx = std::max(mx, v);
    }
    if (mx > 0.0)
        for (auto& v : heat) v /= mx;

    // Nearest upsample to the input resolution.
    const std::size_t hs = sample.frames.front().dim(1), ws = sample.frames.front().dim(2);
    Tensor<T> out({hs, ws});
    for (std::size_t y = 0; y < hs; ++y)
        for (std::size_t x = 0; x < ws; ++x)
            out[y * ws + x] = static_cast<T>(heat[(y * h / hs) * w + (x * w / ws)]);
    return out;
}

}  // namespace capst
