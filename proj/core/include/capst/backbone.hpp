#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "capst/nn.hpp"
#include "capst/rng.hpp"
#include "capst/tensor.hpp"

namespace capst {

// Truncated VGG-style extractor: stages of 3x3 same-padding convs with
// relu, each stage followed by a 2x2 max pool. The default reproduces the
// prefix of VGG19 through the third pool (256 x H/8 x W/8 output).
struct BackboneConfig {
    std::vector<std::vector<std::size_t>> stage_channels = {
        {64, 64}, {128, 128}, {256, 256, 256, 256}};
    std::size_t input_channels = 3;
    std::size_t kernel = 3;

    std::size_t num_pools() const { return stage_channels.size(); }
    std::size_t out_channels() const { return stage_channels.back().back(); }

    // Exact trainable-parameter count (weights + biases).
    std::size_t count_params() const {
        std::size_t total = 0, cin = input_channels;
        for (const auto& stage : stage_channels)
            for (std::size_t cout : stage) {
                total += cout * cin * kernel * kernel + cout;
                cin = cout;
            }
        return total;
    }

    // Multiply-accumulate count for one frame of size x size input.
    std::size_t count_macs(std::size_t size) const {
        std::size_t total = 0, cin = input_channels, hw = size * size;
        for (const auto& stage : stage_channels) {
            for (std::size_t cout : stage) {
                total += hw * cout * cin * kernel * kernel;
                cin = cout;
            }
            hw /= 4;
        }
        return total;
    }
};

// Optional per-layer activation capture for Grad-CAM.
template <class T>
using ActivationMap = std::map<std::string, Tensor<T>>;

namespace detail {

template <class T>
void maybe_capture(ActivationMap<T>* acts, const std::string& name, const Tensor<T>& t) {
    if (acts) (*acts)[name] = t;
}

}  // namespace detail

template <class T>
void backbone_init(ParamStore<T>& store, const BackboneConfig& cfg, Rng rng,
                   bool trainable = true) {
    std::size_t cin = cfg.input_channels;
    const std::size_t k = cfg.kernel;
    for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
        for (std::size_t c = 0; c < cfg.stage_channels[s].size(); ++c) {
            const std::size_t cout = cfg.stage_channels[s][c];
            const std::string base = "backbone.stage" + std::to_string(s + 1) + ".conv" +
                                     std::to_string(c + 1) + ".";
            Rng wr = rng.split(base + "weight");
            Tensor<T> w({cout, cin, k, k});
            // Kaiming-style fan-in uniform for relu stacks.
            const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
            for (std::size_t i = 0; i < w.numel(); ++i)
                w[i] = static_cast<T>(wr.uniform(-bound, bound));
            store.add(base + "weight", std::move(w), trainable);
            store.add(base + "bias", Tensor<T>({cout}), trainable);
            cin = cout;
        }
    }
}

// [3 x H x W] -> [C_last x H/2^pools x W/2^pools]; H, W divisible by 2^pools.
template <class T>
Tensor<T> backbone_extract(const Tensor<T>& frame, const ParamStore<T>& store,
                           const BackboneConfig& cfg, ActivationMap<T>* acts = nullptr) {
    if (frame.shape().size() != 3 || frame.dim(0) != cfg.input_channels) {
        throw shape_error("backbone: expected [" + std::to_string(cfg.input_channels) +
                          ",H,W] frame, got " + shape_str(frame.shape()));
    }
    const std::size_t div = std::size_t(1) << cfg.num_pools();
    if (frame.dim(1) % div != 0 || frame.dim(2) % div != 0) {
        throw shape_error("backbone: spatial dims of " + shape_str(frame.shape()) +
                          " not divisible by " + std::to_string(div));
    }
    Tensor<T> x = frame;
    const std::size_t pad = (cfg.kernel - 1) / 2;
    for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
        for (std::size_t c = 0; c < cfg.stage_channels[s].size(); ++c) {
            const std::string base = "backbone.stage" + std::to_string(s + 1) + ".conv" +
                                     std::to_string(c + 1);
            x = relu(conv2d(x, store.at(base + ".weight"), store.at(base + ".bias"), 1, pad));
            detail::maybe_capture(acts, base, x);
        }
        x = maxpool2(x);
    }
    return x;
}

}  // namespace capst
