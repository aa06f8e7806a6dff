#include <cmath>
#include <vector>

#include "capst/capsule.hpp"
#include "capst/gradcheck.hpp"
#include "capst/rng.hpp"
#include "doctest.h"

using namespace capst;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

double row_norm(const Tensor<double>& t, std::size_t row, std::size_t dim) {
    double sq = 0;
    for (std::size_t i = 0; i < dim; ++i) sq += t[row * dim + i] * t[row * dim + i];
    return std::sqrt(sq);
}

// Straight-line reimplementation of routing-by-agreement, sharing no code
// with the library version. u_hat is [P x O x D] raw data.
std::vector<double> routing_oracle(const std::vector<double>& u_hat, std::size_t p,
                                   std::size_t o, std::size_t d, std::size_t iters,
                                   bool squash_inputs, double eps = 1e-8) {
    auto squash_vec = [eps](std::vector<double> v) {
        double sq = 0;
        for (double x : v) sq += x * x;
        const double n = std::sqrt(sq);
        const double f = sq / ((1.0 + sq) * (n + eps));
        for (double& x : v) x *= f;
        return v;
    };
    std::vector<double> uh = u_hat;
    if (squash_inputs) {
        for (std::size_t r = 0; r < p * o; ++r) {
            std::vector<double> row(uh.begin() + r * d, uh.begin() + (r + 1) * d);
            row = squash_vec(row);
            std::copy(row.begin(), row.end(), uh.begin() + r * d);
        }
    }
    std::vector<double> b(p * o, 0.0), c(p * o), v(o * d, 0.0);
    for (std::size_t it = 0; it < iters; ++it) {
        for (std::size_t i = 0; i < p; ++i) {
            double z = 0;
            for (std::size_t j = 0; j < o; ++j) z += std::exp(b[i * o + j]);
            for (std::size_t j = 0; j < o; ++j) c[i * o + j] = std::exp(b[i * o + j]) / z;
        }
        for (std::size_t j = 0; j < o; ++j) {
            std::vector<double> s(d, 0.0);
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t e = 0; e < d; ++e)
                    s[e] += c[i * o + j] * uh[(i * o + j) * d + e];
            s = squash_vec(s);
            for (std::size_t e = 0; e < d; ++e) v[j * d + e] = s[e];
        }
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < o; ++j) {
                double agree = 0;
                for (std::size_t e = 0; e < d; ++e)
                    agree += v[j * d + e] * uh[(i * o + j) * d + e];
                b[i * o + j] += agree;
            }
    }
    return v;
}

}  // namespace

TEST_SUITE_BEGIN("capsule");

TEST_CASE("squash examples") {
    Tensor<double> z({3});
    Tensor<double> sz = squash(z);
    for (std::size_t i = 0; i < 3; ++i) CHECK(sz[i] == 0.0);

    Tensor<double> unit({3}, {1, 0, 0});
    Tensor<double> su = squash(unit);
    CHECK(su[0] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(su[1] == 0.0);

    Tensor<double> v({2}, {3, 4});
    Tensor<double> sv = squash(v);
    CHECK(sv[0] == doctest::Approx(0.576923).epsilon(1e-4));  // 25/26 * 3/5
    CHECK(sv[1] == doctest::Approx(0.769231).epsilon(1e-4));
}

TEST_CASE("squash norm bound and monotonicity over random vectors") {
    Rng rng(41, 0);
    std::vector<std::pair<double, double>> norm_pairs;  // (input norm, output norm)
    for (int trial = 0; trial < 1000; ++trial) {
        // Norms log-uniform in [1e-6, 1e3].
        const double target = std::pow(10.0, rng.uniform(-6.0, 3.0));
        Tensor<double> s = random_tensor({256}, rng);
        const double n0 = row_norm(s, 0, 256);
        for (std::size_t i = 0; i < 256; ++i) s[i] *= target / n0;
        Tensor<double> v = squash(s);
        const double nv = row_norm(v, 0, 256);
        CHECK(nv >= 0.0);
        CHECK(nv < 1.0);
        norm_pairs.emplace_back(target, nv);

        // Direction preservation for non-tiny inputs.
        if (target > 1e-4) {
            double dot = 0;
            for (std::size_t i = 0; i < 256; ++i) dot += s[i] * v[i];
            const double cosine = dot / (target * nv);
            CHECK(cosine > 1.0 - 1e-6);
        }
    }
    std::sort(norm_pairs.begin(), norm_pairs.end());
    for (std::size_t i = 1; i < norm_pairs.size(); ++i)
        CHECK(norm_pairs[i].second >= norm_pairs[i - 1].second);
}

TEST_CASE("squash gradcheck") {
    Rng rng(43, 0);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> s = random_tensor({8}, rng, -2, 2);
        s.set_requires_grad(true);
        Tensor<double> mixer = random_tensor({8}, rng);
        auto loss = [&]() { return sum(mul(squash(s), mixer)); };
        GradCheckReport r = gradcheck<double>(loss, {{"s", s}});
        INFO("worst ", r.worst, " err ", r.max_rel_error);
        REQUIRE(r.passed);
    }
}

TEST_CASE("capsule predictions compute W.u + b") {
    // P=1, O=1, D=2, d=3.
    Tensor<double> u({1, 3}, {1, 2, 3});
    Tensor<double> w({1, 1, 2, 3}, {1, 0, 0, 0, 1, 0});
    Tensor<double> b({1, 1, 2}, {10, 20});
    Tensor<double> uh = capsule_predictions(u, w, b);
    CHECK(uh[0] == doctest::Approx(11));
    CHECK(uh[1] == doctest::Approx(22));
}

TEST_CASE("uniform couplings after one iteration from zero logits") {
    CapsuleConfig cfg;
    cfg.num_primary = 2;
    cfg.num_output = 5;
    cfg.output_dim = 4;
    cfg.routing_iters = 1;
    Rng rng(47, 0);
    Tensor<double> u_hat = random_tensor({2, 5, 4}, rng);
    auto [v, state] = dynamic_routing(u_hat, cfg);
    // b starts at 0, so the couplings used in the single iteration are
    // uniform; the state records the post-update logits but the uniform
    // couplings drove the composition.
    for (std::size_t i = 0; i < 2; ++i) {
        double sum_c = 0;
        for (std::size_t j = 0; j < 5; ++j) sum_c += state.couplings[i * 5 + j];
        CHECK(sum_c == doctest::Approx(1.0).epsilon(1e-6));
        for (std::size_t j = 0; j < 5; ++j)
            CHECK(state.couplings[i * 5 + j] == doctest::Approx(0.2).epsilon(1e-6));
    }
}

TEST_CASE("identical predictions across output capsules keep couplings uniform") {
    CapsuleConfig cfg;
    cfg.num_primary = 2;
    cfg.num_output = 4;
    cfg.output_dim = 3;
    cfg.routing_iters = 3;
    Rng rng(49, 0);
    Tensor<double> u_hat({2, 4, 3});
    for (std::size_t i = 0; i < 2; ++i) {
        double row[3] = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        for (std::size_t j = 0; j < 4; ++j)
            for (std::size_t e = 0; e < 3; ++e) u_hat[(i * 4 + j) * 3 + e] = row[e];
    }
    auto [v, state] = dynamic_routing(u_hat, cfg);
    for (std::size_t i = 0; i < 8; ++i)
        CHECK(state.couplings[i] == doctest::Approx(0.25).epsilon(1e-6));
    // All output capsules identical.
    for (std::size_t j = 1; j < 4; ++j)
        for (std::size_t e = 0; e < 3; ++e)
            CHECK(v[j * 3 + e] == doctest::Approx(v[e]).epsilon(1e-9));
}

TEST_CASE("routing state invariants over random executions") {
    Rng rng(53, 0);
    for (int trial = 0; trial < 1000; ++trial) {
        CapsuleConfig cfg;
        cfg.num_primary = 1 + rng.next_below(4);
        cfg.num_output = 2 + rng.next_below(5);
        cfg.output_dim = 2 + rng.next_below(7);
        cfg.routing_iters = 1 + rng.next_below(4);
        cfg.squash_uhat = rng.next_below(2) == 0;
        Tensor<double> u_hat =
            random_tensor({cfg.num_primary, cfg.num_output, cfg.output_dim}, rng, -3, 3);
        auto [v, state] = dynamic_routing(u_hat, cfg);
        for (std::size_t i = 0; i < cfg.num_primary; ++i) {
            double sum_c = 0;
            for (std::size_t j = 0; j < cfg.num_output; ++j)
                sum_c += state.couplings[i * cfg.num_output + j];
            CHECK(sum_c == doctest::Approx(1.0).epsilon(1e-6));
        }
        for (std::size_t j = 0; j < cfg.num_output; ++j)
            CHECK(row_norm(v, j, cfg.output_dim) < 1.0);
    }
}

TEST_CASE("winner reinforcement: the dominant prediction gains logit mass") {
    Rng rng(59, 0);
    for (int trial = 0; trial < 50; ++trial) {
        CapsuleConfig cfg;
        cfg.num_primary = 3;
        cfg.num_output = 5;
        cfg.output_dim = 8;
        cfg.routing_iters = 3;
        cfg.squash_uhat = false;
        Tensor<double> u_hat = random_tensor({3, 5, 8}, rng, -0.05, 0.05);
        const std::size_t jstar = rng.next_below(5);
        // One strong, mutually agreeing prediction column.
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t e = 0; e < 8; ++e) u_hat[(i * 5 + jstar) * 8 + e] = 2.0;
        auto [v, state] = dynamic_routing(u_hat, cfg);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 5; ++j) {
                if (j == jstar) continue;
                CHECK(state.logits[i * 5 + jstar] > state.logits[i * 5 + j]);
                CHECK(state.couplings[i * 5 + jstar] > state.couplings[i * 5 + j]);
            }
        }
    }
}

TEST_CASE("routing matches the independent brute-force oracle") {
    Rng rng(61, 0);
    for (int trial = 0; trial < 100; ++trial) {
        CapsuleConfig cfg;
        cfg.num_primary = 3;
        cfg.num_output = 5;
        cfg.output_dim = trial % 2 == 0 ? 4 : 8;
        cfg.routing_iters = 1 + rng.next_below(3);
        cfg.squash_uhat = trial % 3 != 0;
        Tensor<double> u_hat =
            random_tensor({cfg.num_primary, cfg.num_output, cfg.output_dim}, rng, -2, 2);
        auto [v, state] = dynamic_routing(u_hat, cfg);
        std::vector<double> raw(u_hat.data(), u_hat.data() + u_hat.numel());
        std::vector<double> expect =
            routing_oracle(raw, cfg.num_primary, cfg.num_output, cfg.output_dim,
                           cfg.routing_iters, cfg.squash_uhat);
        REQUIRE(v.numel() == expect.size());
        for (std::size_t i = 0; i < expect.size(); ++i)
            CHECK(std::abs(v[i] - expect[i]) < 1e-6);
    }
}

TEST_CASE("routing backward differentiates the frozen-coupling composition") {
    // Routing iterations run off-tape; the differentiated graph is
    // (optional squash of u_hat) -> coupled sum with the final couplings as
    // constants -> squash. Verify both halves: (a) the library backward of
    // dynamic_routing equals the backward of that explicit composition, and
    // (b) the composition itself passes finite-difference checks.
    for (bool squash_inputs : {false, true}) {
        CAPTURE(squash_inputs);
        CapsuleConfig cfg;
        cfg.num_primary = 2;
        cfg.num_output = 3;
        cfg.output_dim = 4;
        cfg.routing_iters = 2;
        cfg.squash_uhat = squash_inputs;
        Rng rng(67, squash_inputs ? 1 : 0);
        Tensor<double> u_hat = random_tensor({2, 3, 4}, rng);
        u_hat.set_requires_grad(true);
        Tensor<double> mixer = random_tensor({3, 4}, rng);

        std::vector<double> c_final;
        Tensor<double> grad_routing({2, 3, 4});
        {
            Tape<double> tape;
            Tape<double>::Scope scope(tape);
            auto [v, st] = dynamic_routing(u_hat, cfg);
            Tensor<double> loss = sum(mul(v, mixer));
            tape.backward(loss);
            c_final.assign(st.couplings.data(), st.couplings.data() + 6);
            std::copy(u_hat.grad(), u_hat.grad() + 24, grad_routing.data());
        }
        std::fill(u_hat.grad(), u_hat.grad() + 24, 0.0);

        auto composed = [&]() {
            Tensor<double> uh =
                squash_inputs ? squash_rows(u_hat, 6, std::size_t{4}, 1e-8) : u_hat;
            Tensor<double> s = coupled_sum(uh, c_final);
            return sum(mul(squash_rows(s, 3, std::size_t{4}, 1e-8), mixer));
        };
        {
            Tape<double> tape;
            Tape<double>::Scope scope(tape);
            Tensor<double> loss = composed();
            tape.backward(loss);
            for (std::size_t i = 0; i < 24; ++i)
                CHECK(grad_routing[i] == doctest::Approx(u_hat.grad()[i]).epsilon(1e-9));
        }
        std::fill(u_hat.grad(), u_hat.grad() + 24, 0.0);

        GradCheckReport r = gradcheck<double>(composed, {{"u_hat", u_hat}});
        INFO("worst ", r.worst, " err ", r.max_rel_error);
        CHECK(r.passed);
    }
}

TEST_CASE("frame feature is the capsule mean") {
    Tensor<double> v({2, 2}, {1, 0, 0, 1});
    Tensor<double> f = frame_feature(v);
    CHECK(f[0] == doctest::Approx(0.5));
    CHECK(f[1] == doctest::Approx(0.5));

    Tensor<double> same({3, 2}, {0.4, -0.2, 0.4, -0.2, 0.4, -0.2});
    Tensor<double> fs = frame_feature(same);
    CHECK(fs[0] == doctest::Approx(0.4));
    CHECK(fs[1] == doctest::Approx(-0.2));

    Tensor<double> z({4, 3});
    Tensor<double> fz = frame_feature(z);
    for (std::size_t i = 0; i < 3; ++i) CHECK(fz[i] == 0.0);
}

TEST_CASE("dynamic routing validates shapes") {
    CapsuleConfig cfg;
    cfg.num_primary = 3;
    cfg.num_output = 5;
    cfg.output_dim = 8;
    CHECK_THROWS_AS(dynamic_routing(Tensor<double>({2, 5, 8}), cfg), shape_error);
}

TEST_SUITE_END();
