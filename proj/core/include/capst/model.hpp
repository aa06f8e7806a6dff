#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "capst/backbone.hpp"
#include "capst/capsule.hpp"
#include "capst/fusion.hpp"
#include "capst/nn.hpp"
#include "capst/rng.hpp"
#include "capst/tensor.hpp"

namespace capst {

struct ModelConfig {
    BackboneConfig backbone;
    CapsuleConfig capsule;
    FusionConfig fusion;
    std::size_t input_size = 112;
    bool freeze_backbone = false;

    void validate() const {
        if (capsule.output_dim != fusion.feature_dim) {
            throw config_error("capsule.output_dim != fusion.feature_dim");
        }
        if (capsule.num_output != fusion.num_classes) {
            throw config_error("capsule.num_output != fusion.num_classes");
        }
        if (capsule.conv_channels % 2 != 0) {
            throw config_error("capsule.conv_channels must be even (MFM halves it)");
        }
        const std::size_t div = std::size_t(1) << backbone.num_pools();
        if (input_size % div == 0) {
            // ok
        } else {
            throw config_error("input_size must be divisible by " + std::to_string(div));
        }
        if (capsule.mfm_channels() < capsule.conv1d_kernel) {
            throw config_error("capsule.conv1d_kernel larger than the statistics length");
        }
    }

    std::size_t feature_map_size() const {
        return input_size >> backbone.num_pools();
    }
};

template <class T>
struct ForwardResult {
    Tensor<T> probs;           // [num_classes]
    Tensor<T> logits;          // pre-softmax scores, on the tape
    Tensor<T> alpha;           // temporal attention weights [N]
    Tensor<T> frame_features;  // [N x feature_dim]
    std::vector<CapsuleState<T>> capsule_states;        // one per frame
    std::vector<ActivationMap<T>> frame_activations;    // filled when requested
};

template <class T>
class CapstModel {
public:
    CapstModel() = default;

    void init(const ModelConfig& cfg, Rng rng) {
        cfg.validate();
        cfg_ = cfg;
        params_ = ParamStore<T>();
        bn_states_.clear();

        backbone_init(params_, cfg.backbone, rng.split("backbone"), !cfg.freeze_backbone);

        const std::size_t cin = cfg.backbone.out_channels();
        const std::size_t cc = cfg.capsule.conv_channels;
        const std::size_t kmfm = cfg.capsule.mfm_channels();
        for (std::size_t i = 0; i < cfg.capsule.num_primary; ++i) {
            const std::string base = "capsule.cap" + std::to_string(i) + ".";
            add_conv(base + "conv", cc, cin, 3, rng);
            params_.add(base + "bn.gamma", Tensor<T>::full({cc}, T(1)));
            params_.add(base + "bn.beta", Tensor<T>({cc}));
            params_.add(base + "bn.running_mean", Tensor<T>({cc}), false);
            params_.add(base + "bn.running_var", Tensor<T>::full({cc}, T(1)), false);
            add_conv(base + "sa", 1, 2, cfg.capsule.sa_kernel, rng);
            add_conv1d(base + "c1d", cfg.capsule.conv1d_channels, 2, cfg.capsule.conv1d_kernel,
                       rng);
            BatchNormState<T> st;
            st.running_mean = params_.at(base + "bn.running_mean");
            st.running_var = params_.at(base + "bn.running_var");
            st.frame_stats_at_inference = cfg.capsule.bn_frame_stats;
            bn_states_.push_back(st);
        }

        const std::size_t p = cfg.capsule.num_primary;
        const std::size_t o = cfg.capsule.num_output;
        const std::size_t od = cfg.capsule.output_dim;
        const std::size_t pd = cfg.capsule.primary_dim();
        {
            Tensor<T> w({p, o, od, pd});
            Rng wr = rng.split("capsule.routing.weight");
            const double bound = 1.0 / std::sqrt(static_cast<double>(pd));
            for (std::size_t j = 0; j < w.numel(); ++j)
                w[j] = static_cast<T>(wr.uniform(-bound, bound));
            params_.add("capsule.routing.weight", std::move(w));
            params_.add("capsule.routing.bias", Tensor<T>({p, o, od}));
        }

        add_fc("fusion.ta.fc0", cfg.fusion.ta_hidden,
               cfg.fusion.num_frames * cfg.fusion.feature_dim, rng);
        add_fc("fusion.ta.fc1", cfg.fusion.num_frames, cfg.fusion.ta_hidden, rng);
        add_fc("fusion.cls", cfg.fusion.num_classes, cfg.fusion.feature_dim, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    void set_training(bool training) {
        for (auto& st : bn_states_) st.training = training;
    }
    bool training() const { return !bn_states_.empty() && bn_states_.front().training; }

    // Per-frame capsule feature: backbone features through one full
    // capsule module execution.
    Tensor<T> frame_forward(const Tensor<T>& frame, CapsuleState<T>* state_out = nullptr,
                            ActivationMap<T>* acts = nullptr) {
        Tensor<T> feat = backbone_extract(frame, params_, cfg_.backbone, acts);
        std::vector<Tensor<T>> primaries;
        primaries.reserve(cfg_.capsule.num_primary);
        for (std::size_t i = 0; i < cfg_.capsule.num_primary; ++i) {
            primaries.push_back(primary_capsule(feat, i, acts));
        }
        Tensor<T> u = stack_rows(primaries);
        Tensor<T> u_hat = capsule_predictions(u, params_.at("capsule.routing.weight"),
                                              params_.at("capsule.routing.bias"));
        auto [v, state] = dynamic_routing(u_hat, cfg_.capsule);
        if (state_out) *state_out = state;
        return frame_feature(v);
    }

    ForwardResult<T> forward(const std::vector<Tensor<T>>& frames, bool capture = false) {
        if (frames.size() != cfg_.fusion.num_frames) {
            throw shape_error("forward: got " + std::to_string(frames.size()) +
                              " frames, config expects " +
                              std::to_string(cfg_.fusion.num_frames));
        }
        ForwardResult<T> r;
        std::vector<Tensor<T>> feats;
        feats.reserve(frames.size());
        for (std::size_t t = 0; t < frames.size(); ++t) {
            CapsuleState<T> st;
            ActivationMap<T> acts;
            feats.push_back(frame_forward(frames[t], &st, capture ? &acts : nullptr));
            if (capture) {
                r.capsule_states.push_back(std::move(st));
                r.frame_activations.push_back(std::move(acts));
            }
        }
        r.frame_features = stack_rows(feats);
        auto [alpha, fused] = temporal_attention(r.frame_features, params_, cfg_.fusion);
        r.alpha = alpha;
        r.logits = linear(fused, params_.at("fusion.cls.weight"), params_.at("fusion.cls.bias"));
        r.probs = softmax(r.logits, 0);
        return r;
    }

    // conv -> BN -> MFM -> SA -> statistical pooling -> 1-d conv.
    Tensor<T> primary_capsule(const Tensor<T>& feat, std::size_t index,
                              ActivationMap<T>* acts = nullptr) {
        const std::string base = "capsule.cap" + std::to_string(index) + ".";
        Tensor<T> x = conv2d(feat, params_.at(base + "conv.weight"),
                             params_.at(base + "conv.bias"), 1, 1);
        detail::maybe_capture(acts, base + "conv", x);
        x = batchnorm(x, params_.at(base + "bn.gamma"), params_.at(base + "bn.beta"),
                      bn_states_[index]);
        x = mfm(x);
        x = spatial_attention(x, params_.at(base + "sa.weight"), params_.at(base + "sa.bias"));
        detail::maybe_capture(acts, base + "sa", x);
        Tensor<T> stats = statistical_pooling(x);
        Tensor<T> seq = stats.reshape({2, cfg_.capsule.mfm_channels()});
        Tensor<T> out = conv1d(seq, params_.at(base + "c1d.weight"),
                               params_.at(base + "c1d.bias"));
        return out.reshape({cfg_.capsule.primary_dim()});
    }

    // Convert weights and states across precisions (e.g. 32 -> 64 bit for
    // gradient checking); values are narrowed/widened per IEEE rounding.
    template <class U>
    CapstModel<U> cast() const {
        CapstModel<U> m;
        m.init(cfg_, Rng());
        for (auto& e : m.params().entries()) {
            const Tensor<T>& src = params_.at(e.name);
            for (std::size_t i = 0; i < e.tensor.numel(); ++i)
                e.tensor[i] = static_cast<U>(src[i]);
        }
        return m;
    }

    std::vector<BatchNormState<T>>& bn_states() { return bn_states_; }

private:
    template <class U>
    friend class CapstModel;

    void add_conv(const std::string& base, std::size_t cout, std::size_t cin, std::size_t k,
                  Rng& rng) {
        Tensor<T> w({cout, cin, k, k});
        Rng wr = rng.split(base + ".weight");
        const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
        for (std::size_t i = 0; i < w.numel(); ++i)
            w[i] = static_cast<T>(wr.uniform(-bound, bound));
        params_.add(base + ".weight", std::move(w));
        params_.add(base + ".bias", Tensor<T>({cout}));
    }

    void add_conv1d(const std::string& base, std::size_t cout, std::size_t cin, std::size_t k,
                    Rng& rng) {
        Tensor<T> w({cout, cin, k});
        Rng wr = rng.split(base + ".weight");
        // Extra gain over plain Kaiming: the pooled statistics feeding this
        // conv are small, and without it the capsule pre-squash norms start
        // deep in squash's vanishing region (‖s‖ ≪ 1), stalling training.
        const double bound = 4.0 * std::sqrt(6.0 / static_cast<double>(cin * k));
        for (std::size_t i = 0; i < w.numel(); ++i)
            w[i] = static_cast<T>(wr.uniform(-bound, bound));
        params_.add(base + ".weight", std::move(w));
        params_.add(base + ".bias", Tensor<T>({cout}));
    }

    void add_fc(const std::string& base, std::size_t m, std::size_t n, Rng& rng) {
        Tensor<T> w({m, n});
        Rng wr = rng.split(base + ".weight");
        const double bound = 1.0 / std::sqrt(static_cast<double>(n));
        for (std::size_t i = 0; i < w.numel(); ++i)
            w[i] = static_cast<T>(wr.uniform(-bound, bound));
        params_.add(base + ".weight", std::move(w));
        params_.add(base + ".bias", Tensor<T>({m}));
    }

    ModelConfig cfg_;
    ParamStore<T> params_;
    std::vector<BatchNormState<T>> bn_states_;
};

}  // namespace capst
