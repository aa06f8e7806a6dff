#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "capst/nn.hpp"
#include "capst/tensor.hpp"

namespace capst {

enum class TaGate { relu, sigmoid };

struct FusionConfig {
    std::size_t num_frames = 10;
    std::size_t feature_dim = 256;  // = capsule output_dim
    std::size_t ta_hidden = 64;
    std::size_t num_classes = 5;
    double alpha_epsilon = 1e-8;
    TaGate ta_gate = TaGate::relu;
};

// f_final = sum_t alpha_t F_t / (sum_t alpha_t + eps). Non-negative alpha
// keeps the result in the convex hull of the frame features.
template <class T>
Tensor<T> weighted_frame_mean(const Tensor<T>& frames, const Tensor<T>& alpha, T eps) {
    if (frames.shape().size() != 2 || alpha.numel() != frames.dim(0)) {
        throw shape_error("weighted_frame_mean: frames " + shape_str(frames.shape()) +
                          " vs alpha " + shape_str(alpha.shape()));
    }
    const std::size_t n = frames.dim(0), d = frames.dim(1);
    T asum = eps;
    for (std::size_t t = 0; t < n; ++t) asum += alpha[t];
    Tensor<T> out({d});
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t e = 0; e < d; ++e) out[e] += alpha[t] * frames[t * d + e];
    for (std::size_t e = 0; e < d; ++e) out[e] /= asum;

    auto* tape = Tape<T>::current();
    if (tape && (frames.requires_grad() || alpha.requires_grad())) {
        tape->register_output(out);
        tape->record([gf = frames.grad_buffer(), ga = alpha.grad_buffer(),
                      go = out.grad_buffer(), df = frames.data_buffer(),
                      da = alpha.data_buffer(), dy = out.data_buffer(), n, d, asum] {
            for (std::size_t t = 0; t < n; ++t) {
                const T at = (*da)[t];
                T acc = 0;
                for (std::size_t e = 0; e < d; ++e) {
                    const T g = (*go)[e];
                    if (gf) (*gf)[t * d + e] += g * at / asum;
                    acc += g * ((*df)[t * d + e] - (*dy)[e]);
                }
                if (ga) (*ga)[t] += acc / asum;
            }
        });
    }
    return out;
}

// TA over the flattened frame stack: FC -> relu -> FC -> gate.
template <class T>
std::pair<Tensor<T>, Tensor<T>> temporal_attention(const Tensor<T>& frames,
                                                   const ParamStore<T>& store,
                                                   const FusionConfig& cfg) {
    if (frames.shape().size() != 2 || frames.dim(0) != cfg.num_frames ||
        frames.dim(1) != cfg.feature_dim) {
        throw shape_error("temporal_attention: expected [" + std::to_string(cfg.num_frames) +
                          "," + std::to_string(cfg.feature_dim) + "], got " +
                          shape_str(frames.shape()));
    }
    Tensor<T> flat = frames.reshape({cfg.num_frames * cfg.feature_dim});
    Tensor<T> h =
        relu(linear(flat, store.at("fusion.ta.fc0.weight"), store.at("fusion.ta.fc0.bias")));
    Tensor<T> pre =
        linear(h, store.at("fusion.ta.fc1.weight"), store.at("fusion.ta.fc1.bias"));
    Tensor<T> alpha = cfg.ta_gate == TaGate::relu ? relu(pre) : sigmoid(pre);
    Tensor<T> fused = weighted_frame_mean(frames, alpha, static_cast<T>(cfg.alpha_epsilon));
    return {alpha, fused};
}

// Class probabilities from the fused feature.
template <class T>
Tensor<T> classify(const Tensor<T>& f_final, const ParamStore<T>& store) {
    return softmax(
        linear(f_final, store.at("fusion.cls.weight"), store.at("fusion.cls.bias")), 0);
}

// -log(y_hat[target]), clamped at 1e-12 against exact zeros.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& y_hat, std::size_t target) {
    if (target >= y_hat.numel()) {
        throw shape_error("cross_entropy: target " + std::to_string(target) +
                          " out of range for " + std::to_string(y_hat.numel()) + " classes");
    }
    const T clamp = T(1e-12);
    const T y = y_hat[target];
    const T p = y > clamp ? y : clamp;
    // The clamp is for exact zeros only; a non-finite probability must
    // surface as a non-finite loss, not get silently clamped.
    Tensor<T> out =
        Tensor<T>::scalar(std::isfinite(y) ? -std::log(p) : std::numeric_limits<T>::quiet_NaN());
    if (detail::tracing(y_hat)) {
        auto* tape = Tape<T>::current();
        tape->register_output(out);
        tape->record([gy = y_hat.grad_buffer(), go = out.grad_buffer(), p, target] {
            (*gy)[target] += -(*go)[0] / p;
        });
    }
    return out;
}

// One-hot front end: validates the label vector and the probability simplex.
template <class T>
Tensor<T> cross_entropy(const std::vector<T>& onehot, const Tensor<T>& y_hat) {
    if (onehot.size() != y_hat.numel()) {
        throw shape_error("cross_entropy: label length " + std::to_string(onehot.size()) +
                          " vs " + std::to_string(y_hat.numel()) + " probabilities");
    }
    std::size_t target = onehot.size();
    T ysum = 0;
    for (std::size_t i = 0; i < onehot.size(); ++i) {
        ysum += y_hat[i];
        if (onehot[i] == T(1) && target == onehot.size())
            target = i;
        else if (onehot[i] != T(0))
            throw error("cross_entropy: label vector is not one-hot");
    }
    if (target == onehot.size()) throw error("cross_entropy: label vector is not one-hot");
    if (std::abs(ysum - T(1)) > T(1e-3)) {
        throw error("cross_entropy: probabilities sum to " + std::to_string(ysum));
    }
    return cross_entropy(y_hat, target);
}

}  // namespace capst
