#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capst/checkpoint.hpp"
#include "capst/data.hpp"
#include "capst/fusion.hpp"
#include "capst/model.hpp"
#include "capst/rng.hpp"
#include "capst/tensor.hpp"

namespace capst {

struct TrainConfig {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t batch_size = 10;
    std::size_t epochs = 300;
    std::uint64_t seed = 0;
    bool decay_bn = true;  // apply weight decay to BN affine terms too

    void validate() const {
        if (!(lr > 0)) throw config_error("train.lr must be positive");
        if (!(momentum >= 0 && momentum < 1)) throw config_error("train.momentum must be in [0,1)");
        if (batch_size < 1) throw config_error("train.batch_size must be >= 1");
    }
};

struct EpochLog {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double train_accuracy = 0.0;  // percent
    double seconds = 0.0;
};

// SGD with momentum and decoupled-by-name deterministic update order:
// g <- grad + wd*param; buf <- momentum*buf + g; param <- param - lr*buf.
template <class T>
class SgdOptimizer {
public:
    SgdOptimizer() = default;
    explicit SgdOptimizer(TrainConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const TrainConfig& config() const { return cfg_; }

    void step(ParamStore<T>& params) {
        const T lr = static_cast<T>(cfg_.lr);
        const T mom = static_cast<T>(cfg_.momentum);
        for (auto& e : params.entries()) {
            if (!e.trainable) continue;
            const T wd = decay_applies(e.name) ? static_cast<T>(cfg_.weight_decay) : T(0);
            if (!e.tensor.grad()) {
                throw error("sgd: missing gradient for trainable parameter " + e.name);
            }
            auto& buf = buffers_[e.name];
            if (buf.size() != e.tensor.numel()) buf.assign(e.tensor.numel(), T(0));
            T* p = e.tensor.data();
            const T* g = e.tensor.grad();
            for (std::size_t i = 0; i < e.tensor.numel(); ++i) {
                const T gi = g[i] + wd * p[i];
                buf[i] = mom * buf[i] + gi;
                p[i] -= lr * buf[i];
            }
        }
    }

    std::vector<NamedTensor<T>> state() const {
        std::vector<NamedTensor<T>> out;
        for (const auto& [name, buf] : buffers_)
            out.push_back({name, Tensor<T>({buf.size()}, std::vector<T>(buf))});
        return out;
    }

    void restore(const std::vector<NamedTensor<T>>& state) {
        buffers_.clear();
        for (const auto& nt : state)
            buffers_[nt.name].assign(nt.tensor.data(), nt.tensor.data() + nt.tensor.numel());
    }

private:
    bool decay_applies(const std::string& name) const {
        if (cfg_.decay_bn) return true;
        return name.find(".bn.") == std::string::npos;
    }

    TrainConfig cfg_;
    std::map<std::string, std::vector<T>> buffers_;
};

// Epoch-driven training loop with seeded shuffling and NaN abort. The
// shuffle permutation is a pure function of (seed, epoch) so interrupted
// runs resume identically.
template <class T>
class Trainer {
public:
    Trainer(CapstModel<T>& model, TrainConfig cfg)
        : model_(model), cfg_(cfg), opt_(cfg), epoch_(0) {
        cfg_.validate();
    }

    std::size_t epoch() const { return epoch_; }
    SgdOptimizer<T>& optimizer() { return opt_; }
    void set_epoch(std::size_t e) { epoch_ = e; }

    EpochLog train_epoch(const std::vector<VideoSample<T>>& dataset) {
        if (dataset.empty()) throw data_error("train: empty dataset");
        const std::size_t num_classes = model_.config().fusion.num_classes;
        for (const auto& s : dataset) {
            if (s.label < 0 || static_cast<std::size_t>(s.label) >= num_classes) {
                throw data_error("train: label " + std::to_string(s.label) +
                                 " out of range for video " + s.video_id);
            }
        }
        const auto t0 = std::chrono::steady_clock::now();
        model_.set_training(true);

        std::vector<std::size_t> order(dataset.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle = Rng(cfg_.seed, 0).split("shuffle").split(epoch_);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.next_below(i)]);

        double loss_sum = 0.0;
        std::size_t correct = 0, batch_id = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size, ++batch_id) {
            const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
            model_.params().zero_grads();
            for (std::size_t i = start; i < end; ++i) {
                const VideoSample<T>& sample = dataset[order[i]];
                Tape<T> tape;
                typename Tape<T>::Scope scope(tape);
                ForwardResult<T> fwd = model_.forward(sample.frames);
                Tensor<T> loss = cross_entropy(fwd.probs, static_cast<std::size_t>(sample.label));
                const double lv = static_cast<double>(loss[0]);
                if (!std::isfinite(lv)) {
                    throw numeric_error("train: non-finite loss in epoch " +
                                        std::to_string(epoch_) + " batch " +
                                        std::to_string(batch_id) + " (video " +
                                        sample.video_id + ")");
                }
                loss_sum += lv;
                std::size_t arg = 0;
                for (std::size_t c = 1; c < num_classes; ++c)
                    if (fwd.probs[c] > fwd.probs[arg]) arg = c;
                if (arg == static_cast<std::size_t>(sample.label)) ++correct;
                tape.backward(loss);
            }
            // Mean-loss gradient over the batch.
            const T inv = T(1) / static_cast<T>(end - start);
            for (auto& e : model_.params().entries()) {
                if (!e.trainable) continue;
                T* g = e.tensor.grad();
                for (std::size_t j = 0; j < e.tensor.numel(); ++j) g[j] *= inv;
            }
            opt_.step(model_.params());
        }
        ++epoch_;

        EpochLog log;
        log.epoch = epoch_;
        log.mean_loss = loss_sum / static_cast<double>(dataset.size());
        log.train_accuracy = 100.0 * static_cast<double>(correct) /
                             static_cast<double>(dataset.size());
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return log;
    }

    void save(const std::string& path, const std::string& config_text) const {
        Rng rng(cfg_.seed, 0);
        save_checkpoint_file(path, config_text, model_.params(), opt_.state(),
                             static_cast<std::uint32_t>(epoch_), rng);
    }

    void resume(const Checkpoint<T>& ck) {
        apply_tensors(model_.params(), ck.tensors);
        opt_.restore(ck.momentum);
        epoch_ = ck.epoch;
    }

private:
    CapstModel<T>& model_;
    TrainConfig cfg_;
    SgdOptimizer<T> opt_;
    std::size_t epoch_;
};

}  // namespace capst
