#include <cmath>
#include <vector>

#include "capst/fusion.hpp"
#include "capst/gradcheck.hpp"
#include "capst/model.hpp"
#include "capst/rng.hpp"
#include "doctest.h"

using namespace capst;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_SUITE_BEGIN("fusion");

TEST_CASE("weighted frame mean examples") {
    Tensor<double> frames({2, 2}, {1, 0, 0, 1});
    Tensor<double> alpha({2}, {1, 3});
    Tensor<double> f = weighted_frame_mean(frames, alpha, 1e-8);
    CHECK(f[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(f[1] == doctest::Approx(0.75).epsilon(1e-6));

    // All-zero weights: the epsilon denominator yields zeros, not NaN.
    Tensor<double> z({2});
    Tensor<double> fz = weighted_frame_mean(frames, z, 1e-8);
    CHECK(fz[0] == 0.0);
    CHECK(fz[1] == 0.0);

    // One dominant weight selects that frame.
    Tensor<double> dom({2}, {1e9, 1});
    Tensor<double> fd = weighted_frame_mean(frames, dom, 1e-8);
    CHECK(fd[0] == doctest::Approx(1.0).epsilon(1e-6));

    CHECK_THROWS_AS(weighted_frame_mean(frames, Tensor<double>({3}), 1e-8), shape_error);
}

TEST_CASE("identical frames fuse to themselves for any weights") {
    Rng rng(71, 0);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> row = random_tensor({6}, rng);
        Tensor<double> frames({4, 6});
        for (std::size_t t = 0; t < 4; ++t)
            for (std::size_t e = 0; e < 6; ++e) frames[t * 6 + e] = row[e];
        Tensor<double> alpha = random_tensor({4}, rng, 0.1, 2.0);
        Tensor<double> f = weighted_frame_mean(frames, alpha, 1e-8);
        for (std::size_t e = 0; e < 6; ++e)
            CHECK(f[e] == doctest::Approx(row[e]).epsilon(1e-6));
    }
}

TEST_CASE("fused feature stays in the convex hull of the frames") {
    Rng rng(73, 0);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.next_below(6), d = 1 + rng.next_below(8);
        Tensor<double> frames = random_tensor({n, d}, rng, -5, 5);
        Tensor<double> alpha = random_tensor({n}, rng, 0.0, 3.0);
        Tensor<double> f = weighted_frame_mean(frames, alpha, 1e-8);
        for (std::size_t e = 0; e < d; ++e) {
            double lo = frames[e], hi = frames[e];
            for (std::size_t t = 1; t < n; ++t) {
                lo = std::min(lo, frames[t * d + e]);
                hi = std::max(hi, frames[t * d + e]);
            }
            // The epsilon in the denominator can pull values slightly
            // toward zero, so widen the hull by a hair.
            CHECK(f[e] >= std::min(lo, 0.0) - 1e-9);
            CHECK(f[e] <= std::max(hi, 0.0) + 1e-9);
        }
    }
}

TEST_CASE("weighted frame mean gradcheck") {
    Rng rng(79, 0);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> frames = random_tensor({3, 4}, rng);
        Tensor<double> alpha = random_tensor({3}, rng, 0.1, 1.5);
        frames.set_requires_grad(true);
        alpha.set_requires_grad(true);
        Tensor<double> mixer = random_tensor({4}, rng);
        auto loss = [&]() {
            return sum(mul(weighted_frame_mean(frames, alpha, 1e-8), mixer));
        };
        GradCheckReport r = gradcheck<double>(loss, {{"frames", frames}, {"alpha", alpha}});
        INFO("worst ", r.worst, " err ", r.max_rel_error);
        REQUIRE(r.passed);
    }
}

TEST_CASE("cross entropy examples") {
    Tensor<double> uniform({5}, {0.2, 0.2, 0.2, 0.2, 0.2});
    CHECK(cross_entropy(uniform, 3)[0] == doctest::Approx(std::log(5.0)).epsilon(1e-9));

    Tensor<double> half({2}, {0.5, 0.5});
    CHECK(cross_entropy(half, 0)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    Tensor<double> sure({3}, {0, 1, 0});
    CHECK(cross_entropy(sure, 1)[0] == doctest::Approx(0.0));

    // Exact-zero probability is clamped rather than producing inf.
    Tensor<double> zero({3}, {0, 1, 0});
    const double loss = cross_entropy(zero, 0)[0];
    CHECK(std::isfinite(loss));
    CHECK(loss == doctest::Approx(-std::log(1e-12)).epsilon(1e-6));

    // Non-finite probabilities propagate instead of being clamped finite.
    Tensor<double> poisoned({2}, {std::nan(""), 0.5});
    CHECK(std::isnan(cross_entropy(poisoned, 0)[0]));

    CHECK_THROWS_AS(cross_entropy(uniform, 5), shape_error);
}

TEST_CASE("one-hot cross entropy validates its inputs") {
    Tensor<double> y({3}, {0.5, 0.25, 0.25});
    CHECK(cross_entropy(std::vector<double>{0, 1, 0}, y)[0] ==
          doctest::Approx(std::log(4.0)).epsilon(1e-9));
    CHECK_THROWS(cross_entropy(std::vector<double>{0, 0, 0}, y));
    CHECK_THROWS(cross_entropy(std::vector<double>{1, 1, 0}, y));
    CHECK_THROWS(cross_entropy(std::vector<double>{0, 0.5, 0.5}, y));
    CHECK_THROWS_AS(cross_entropy(std::vector<double>{0, 1}, y), shape_error);
    Tensor<double> bad({3}, {0.9, 0.9, 0.9});
    CHECK_THROWS(cross_entropy(std::vector<double>{1, 0, 0}, bad));
}

TEST_CASE("cross entropy gradient is -1/p at the target") {
    Tensor<double> y({4}, {0.1, 0.2, 0.3, 0.4});
    y.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> loss = cross_entropy(y, 2);
    tape.backward(loss);
    CHECK(y.grad()[2] == doctest::Approx(-1.0 / 0.3).epsilon(1e-9));
    CHECK(y.grad()[0] == 0.0);
    CHECK(y.grad()[1] == 0.0);
    CHECK(y.grad()[3] == 0.0);
}

TEST_CASE("temporal attention and classifier head") {
    FusionConfig cfg;
    cfg.num_frames = 3;
    cfg.feature_dim = 4;
    cfg.ta_hidden = 5;
    cfg.num_classes = 3;

    ParamStore<double> store;
    Rng rng(83, 0);
    auto add = [&](const std::string& name, Shape shape) {
        store.add(name, random_tensor(std::move(shape), rng, -0.5, 0.5), true);
    };
    add("fusion.ta.fc0.weight", {cfg.ta_hidden, cfg.num_frames * cfg.feature_dim});
    add("fusion.ta.fc0.bias", {cfg.ta_hidden});
    add("fusion.ta.fc1.weight", {cfg.num_frames, cfg.ta_hidden});
    add("fusion.ta.fc1.bias", {cfg.num_frames});
    add("fusion.cls.weight", {cfg.num_classes, cfg.feature_dim});
    add("fusion.cls.bias", {cfg.num_classes});

    Tape<double> tape;
    Tape<double>::Scope scope(tape);

    Tensor<double> frames = random_tensor({3, 4}, rng);

    SUBCASE("shapes and gate ranges") {
        for (TaGate gate : {TaGate::relu, TaGate::sigmoid}) {
            cfg.ta_gate = gate;
            auto [alpha, fused] = temporal_attention(frames, store, cfg);
            CHECK(alpha.shape() == Shape{3});
            CHECK(fused.shape() == Shape{4});
            for (std::size_t t = 0; t < 3; ++t) {
                CHECK(alpha[t] >= 0.0);
                if (gate == TaGate::sigmoid) CHECK(alpha[t] <= 1.0);
            }
            Tensor<double> probs = classify(fused, store);
            CHECK(probs.shape() == Shape{3});
            double total = 0;
            for (std::size_t i = 0; i < 3; ++i) {
                CHECK(probs[i] > 0.0);
                total += probs[i];
            }
            CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
        }
    }

    SUBCASE("frame shape is validated") {
        CHECK_THROWS_AS(temporal_attention(Tensor<double>({4, 4}), store, cfg),
                        shape_error);
        CHECK_THROWS_AS(temporal_attention(Tensor<double>({3, 5}), store, cfg),
                        shape_error);
    }

    SUBCASE("end-to-end gradcheck through attention, fusion and loss") {
        cfg.ta_gate = TaGate::sigmoid;  // smooth everywhere, safe for FD
        frames.set_requires_grad(true);
        auto loss = [&]() {
            auto [alpha, fused] = temporal_attention(frames, store, cfg);
            return cross_entropy(classify(fused, store), 1);
        };
        std::vector<std::pair<std::string, Tensor<double>>> inputs = {{"frames", frames}};
        for (const auto& e : store.entries()) inputs.emplace_back(e.name, store.at(e.name));
        GradCheckReport r = gradcheck<double>(loss, inputs);
        INFO("worst ", r.worst, " err ", r.max_rel_error);
        CHECK(r.passed);
    }
}

TEST_CASE("tiny full-model forward gradcheck in 64-bit") {
    ModelConfig cfg;
    cfg.input_size = 16;
    cfg.backbone.stage_channels = {{4}, {6}};
    cfg.capsule.num_primary = 2;
    cfg.capsule.num_output = 3;
    // One routing iteration keeps the couplings input-independent (uniform),
    // so finite differences agree with the frozen-coupling backward exactly.
    cfg.capsule.routing_iters = 1;
    cfg.capsule.output_dim = 6;
    cfg.capsule.conv_channels = 4;
    cfg.capsule.conv1d_channels = 2;
    cfg.capsule.conv1d_kernel = 1;
    cfg.capsule.sa_kernel = 3;
    cfg.fusion.num_frames = 2;
    cfg.fusion.feature_dim = 6;
    cfg.fusion.ta_hidden = 5;
    cfg.fusion.num_classes = 3;
    cfg.fusion.ta_gate = TaGate::sigmoid;

    CapstModel<double> model;
    model.init(cfg, Rng(17, 0));
    model.set_training(true);

    Rng rng(89, 0);
    std::vector<Tensor<double>> frames;
    for (int t = 0; t < 2; ++t) frames.push_back(random_tensor({3, 16, 16}, rng, 0, 1));

    auto loss = [&]() {
        ForwardResult<double> r = model.forward(frames);
        return cross_entropy(r.probs, 1);
    };
    // Check a representative subset of parameter tensors from each block;
    // frame pixels are not leaves here, the parameters are.
    std::vector<std::pair<std::string, Tensor<double>>> inputs;
    for (const char* name :
         {"backbone.stage1.conv1.weight", "backbone.stage2.conv1.bias",
          "capsule.cap0.conv.weight", "capsule.cap0.bn.gamma", "capsule.cap0.sa.weight",
          "capsule.cap1.c1d.weight", "capsule.routing.weight", "capsule.routing.bias",
          "fusion.ta.fc0.weight", "fusion.ta.fc1.bias", "fusion.cls.weight",
          "fusion.cls.bias"}) {
        inputs.emplace_back(name, model.params().at(name));
    }
    GradCheckReport r = gradcheck<double>(loss, inputs, 1e-5, 1e-4);
    INFO("worst ", r.worst, " err ", r.max_rel_error);
    CHECK(r.passed);
}

TEST_SUITE_END();
