#include <cmath>
#include <vector>

#include "capst/gradcheck.hpp"
#include "capst/nn.hpp"
#include "capst/rng.hpp"
#include "capst/tensor.hpp"
#include "doctest.h"

using namespace capst;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul hand examples and shape errors") {
    Tensor<double> id({2, 2}, {1, 0, 0, 1});
    Tensor<double> v({2, 1}, {3, 4});
    Tensor<double> r = matmul(id, v);
    CHECK(r[0] == 3);
    CHECK(r[1] == 4);

    Tensor<double> a({1, 2}, {1, 2});
    CHECK(matmul(a, v)[0] == doctest::Approx(11));

    Tensor<double> bad({4, 5});
    CHECK_THROWS_AS(matmul(Tensor<double>({2, 3}), bad), shape_error);
}

TEST_CASE("elementwise examples") {
    Tensor<double> x({3}, {-1, 0, 2});
    Tensor<double> r = relu(x);
    CHECK(r[0] == 0);
    CHECK(r[1] == 0);
    CHECK(r[2] == 2);

    CHECK(sigmoid(Tensor<double>({1}, {0}))[0] == doctest::Approx(0.5));

    Tensor<double> m = maximum(Tensor<double>({2}, {1, 5}), Tensor<double>({2}, {3, 2}));
    CHECK(m[0] == 3);
    CHECK(m[1] == 5);

    CHECK_THROWS_AS(add(Tensor<double>({2}), Tensor<double>({3})), shape_error);
}

TEST_CASE("softmax examples and properties") {
    Tensor<double> z({5});
    Tensor<double> u = softmax(z);
    for (std::size_t i = 0; i < 5; ++i) CHECK(u[i] == doctest::Approx(0.2));

    Tensor<double> l({3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
    Tensor<double> s = softmax(l);
    CHECK(s[0] == doctest::Approx(1.0 / 6));
    CHECK(s[1] == doctest::Approx(2.0 / 6));
    CHECK(s[2] == doctest::Approx(3.0 / 6));

    Tensor<double> dom({2}, {100, 0});
    Tensor<double> d = softmax(dom);
    CHECK(d[1] < 1e-40);
    CHECK(d[0] == doctest::Approx(1.0));

    // Sum-to-one and shift invariance on random logits.
    Rng rng(11, 0);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> a = random_tensor({7}, rng, -5, 5);
        Tensor<double> b = a.clone();
        for (std::size_t i = 0; i < b.numel(); ++i) b[i] += 3.25;
        Tensor<double> sa = softmax(a), sb = softmax(b);
        double total = 0;
        for (std::size_t i = 0; i < sa.numel(); ++i) {
            total += sa[i];
            CHECK(sa[i] == doctest::Approx(sb[i]).epsilon(1e-6));
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("backward populates leaf gradients") {
    // loss = sum(w * x), x constant  =>  grad(w) = x
    Tensor<double> w({3}, {1, 2, 3});
    w.set_requires_grad(true);
    Tensor<double> x({3}, {4, 5, 6});
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> loss = sum(mul(w, x));
    tape.backward(loss);
    CHECK(w.grad()[0] == 4);
    CHECK(w.grad()[1] == 5);
    CHECK(w.grad()[2] == 6);
}

TEST_CASE("backward of sum of squares") {
    Tensor<double> w({2}, {1, 2});
    w.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> loss = sum(mul(w, w));
    tape.backward(loss);
    CHECK(w.grad()[0] == doctest::Approx(2));
    CHECK(w.grad()[1] == doctest::Approx(4));
}

TEST_CASE("repeated backward accumulates into leaves") {
    Tensor<double> w({2}, {1, 2});
    w.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> loss = sum(mul(w, w));
    tape.backward(loss);
    tape.backward(loss);
    CHECK(w.grad()[0] == doctest::Approx(4));
    CHECK(w.grad()[1] == doctest::Approx(8));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor<double> w({2}, {1, 2});
    w.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> y = mul(w, w);
    CHECK_THROWS_AS(tape.backward(y), shape_error);
}

TEST_CASE("reshape and transpose round-trip bit-exactly") {
    Rng rng(3, 0);
    Tensor<double> a = random_tensor({4, 6}, rng);
    Tensor<double> flat = a.reshape({24});
    Tensor<double> back = flat.reshape({4, 6});
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(back[i] == a[i]);

    Tensor<double> tt = transpose(transpose(a));
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(tt[i] == a[i]);

    CHECK_THROWS_AS(a.reshape({5, 5}), shape_error);
}

TEST_CASE("reshape views share gradient storage") {
    Tensor<double> w({4}, {1, 2, 3, 4});
    w.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> m = w.reshape({2, 2});
    Tensor<double> loss = sum(mul(m, m));
    tape.backward(loss);
    CHECK(w.grad()[3] == doctest::Approx(8));
}

TEST_CASE("conv2d examples") {
    // Zero input -> bias everywhere.
    Tensor<double> zin({1, 3, 3});
    Tensor<double> wt = Tensor<double>::full({2, 1, 3, 3}, 0.3);
    Tensor<double> b({2}, {1.5, -2.0});
    Tensor<double> out = conv2d(zin, wt, b, 1, 1);
    CHECK(out.shape() == Shape{2, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) CHECK(out[i] == doctest::Approx(1.5));
    for (std::size_t i = 9; i < 18; ++i) CHECK(out[i] == doctest::Approx(-2.0));

    // 1..9 against an all-ones kernel, valid padding: single output 45.
    Tensor<double> seq({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor<double> ones = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    Tensor<double> zb({1});
    Tensor<double> s = conv2d(seq, ones, zb, 1, 0);
    CHECK(s.shape() == Shape{1, 1, 1});
    CHECK(s[0] == doctest::Approx(45));

    CHECK_THROWS_AS(conv2d(Tensor<double>({2, 4, 4}), Tensor<double>({1, 3, 3, 3}),
                           Tensor<double>({1}), 1, 1),
                    shape_error);
}

TEST_CASE("conv2d matches a brute-force oracle on random inputs") {
    Rng rng(17, 0);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t ci = 2, h = 5, w = 5, co = 3, k = 3, pad = trial % 2;
        Tensor<double> in = random_tensor({ci, h, w}, rng);
        Tensor<double> wt = random_tensor({co, ci, k, k}, rng);
        Tensor<double> b = random_tensor({co}, rng);
        Tensor<double> out = conv2d(in, wt, b, 1, pad);

        const std::size_t ho = h + 2 * pad - k + 1, wo = ho;
        REQUIRE(out.shape() == Shape{co, ho, wo});
        for (std::size_t oc = 0; oc < co; ++oc)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double acc = b[oc];
                    for (std::size_t ic = 0; ic < ci; ++ic)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) ||
                                    ix >= static_cast<long>(w))
                                    continue;
                                acc += in[(ic * h + iy) * w + ix] *
                                       wt[((oc * ci + ic) * k + ky) * k + kx];
                            }
                    CHECK(out[(oc * ho + oy) * wo + ox] == doctest::Approx(acc).epsilon(1e-5));
                }
    }
}

TEST_CASE("maxpool2 examples") {
    Tensor<double> a({1, 2, 2}, {1, 2, 3, 4});
    CHECK(maxpool2(a)[0] == 4);

    Tensor<double> c = Tensor<double>::full({3, 4, 4}, 2.5);
    Tensor<double> p = maxpool2(c);
    CHECK(p.shape() == Shape{3, 2, 2});
    for (std::size_t i = 0; i < p.numel(); ++i) CHECK(p[i] == 2.5);

    CHECK_THROWS_AS(maxpool2(Tensor<double>({1, 3, 4})), shape_error);
}

TEST_CASE("maxpool2 tie-break routes gradient to the first maximum") {
    Tensor<double> a({1, 2, 2}, {7, 7, 7, 7});
    a.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> loss = sum(maxpool2(a));
    tape.backward(loss);
    CHECK(a.grad()[0] == 1);
    CHECK(a.grad()[1] == 0);
    CHECK(a.grad()[2] == 0);
    CHECK(a.grad()[3] == 0);
}

TEST_CASE("gradcheck detects a wrong gradient (negative control)") {
    // "loss" whose recorded backward is deliberately off by 2x.
    Tensor<double> w({2}, {0.4, -0.7});
    w.set_requires_grad(true);
    auto loss = [&]() {
        Tensor<double> out = Tensor<double>::scalar(w[0] * w[0] + w[1] * w[1]);
        if (auto* tape = Tape<double>::current()) {
            tape->register_output(out);
            tape->record([gw = w.grad_buffer(), go = out.grad_buffer(), dw = w.data_buffer()] {
                for (std::size_t i = 0; i < 2; ++i)
                    (*gw)[i] += (*go)[0] * 4.0 * (*dw)[i];  // should be 2*w
            });
        }
        return out;
    };
    GradCheckReport r = gradcheck<double>(loss, {{"w", w}});
    CHECK_FALSE(r.passed);
}

TEST_CASE("gradcheck on analytic cases") {
    Tensor<double> w({4}, {0.3, -1.2, 0.8, 2.0});
    w.set_requires_grad(true);
    auto loss = [&]() { return sum(mul(w, w)); };
    GradCheckReport r = gradcheck<double>(loss, {{"w", w}});
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-8);
}

TEST_CASE("per-op gradcheck at random points") {
    Rng rng(29, 0);
    auto check = [&](const char* what, auto make_loss, Shape shape, double lo, double hi) {
        for (int trial = 0; trial < 100; ++trial) {
            Tensor<double> x = random_tensor(shape, rng, lo, hi);
            x.set_requires_grad(true);
            auto loss = [&]() { return make_loss(x); };
            GradCheckReport r = gradcheck<double>(loss, {{what, x}}, 1e-5, 1e-5);
            INFO(what, " trial ", trial, " worst ", r.worst, " err ", r.max_rel_error);
            REQUIRE(r.passed);
        }
    };
    // A fixed mixing vector so reductions are not symmetric in their inputs.
    Tensor<double> mixer({6}, {0.9, -1.4, 0.2, 2.0, -0.6, 1.1});

    // relu gets its own loop: the evaluation point must be nudged away from
    // the kink *before* gradcheck, or the finite differences straddle it.
    for (int trial = 0; trial < 100; ++trial) {
        Tensor<double> x = random_tensor({6}, rng, -1, 1);
        for (std::size_t i = 0; i < x.numel(); ++i)
            if (std::abs(x[i]) < 1e-3) x[i] = std::copysign(1e-3, x[i] == 0 ? 1.0 : x[i]);
        x.set_requires_grad(true);
        auto loss = [&]() { return sum(mul(relu(x), mixer)); };
        GradCheckReport r = gradcheck<double>(loss, {{"relu_in", x}}, 1e-5, 1e-5);
        INFO("relu_in trial ", trial, " worst ", r.worst, " err ", r.max_rel_error);
        REQUIRE(r.passed);
    }
    check("sigmoid_in",
          [&](Tensor<double>& x) { return sum(mul(sigmoid(x), mixer)); }, {6}, -3, 3);
    check("softmax_in",
          [&](Tensor<double>& x) { return sum(mul(softmax(x), mixer)); }, {6}, -2, 2);
    check("matmul_in", [&](Tensor<double>& x) {
        Tensor<double> m({3, 2}, {1.0, -0.5, 0.25, 2.0, -1.5, 0.75});
        return sum(matmul(m, x.reshape({2, 3})));
    }, {6}, -1, 1);
    check("mul_in",
          [&](Tensor<double>& x) { return sum(mul(mul(x, x), mixer)); }, {6}, -1, 1);
    check("transpose_in", [&](Tensor<double>& x) {
        return sum(mul(transpose(x.reshape({2, 3})).reshape({6}), mixer));
    }, {6}, -1, 1);
    check("mean_rows_in", [&](Tensor<double>& x) {
        Tensor<double> half({3}, {0.9, -1.4, 0.2});
        return sum(mul(mean_rows(x.reshape({2, 3})), half));
    }, {6}, -1, 1);
}

TEST_CASE("pick selects a scalar with unit gradient") {
    Tensor<double> x({4}, {5, 6, 7, 8});
    x.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> p = pick(x, 2);
    CHECK(p[0] == 7);
    tape.backward(p);
    CHECK(x.grad()[2] == 1);
    CHECK(x.grad()[0] == 0);
    CHECK_THROWS_AS(pick(x, 9), shape_error);
}

TEST_SUITE_END();
