#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "latentforge/tensor.hpp"

using lf::Tensor;
using lf::Tape;
using lf::Rng;
using lf::testing::grad_check;

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor eye = Tensor::from({1, 0, 0, 1}, {2, 2});
    Tensor b = Tensor::from({2, 3, 4, 5}, {2, 2});
    Tensor c = lf::matmul(eye, b);
    CHECK(c.value() == b.value());

    Tensor row = Tensor::from({1, 2}, {1, 2});
    Tensor col = Tensor::from({3, 4}, {2, 1});
    CHECK(lf::matmul(row, col).item() == doctest::Approx(11.0).epsilon(1e-12));
}

TEST_CASE("matmul gradient matches finite differences on random 3x3") {
    Rng rng(7);
    Tensor a = Tensor::randn({3, 3}, rng, 1.0);
    Tensor b = Tensor::randn({3, 3}, rng, 1.0);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    auto res = grad_check({a, b}, [&] { return lf::sum(lf::matmul(a, b)); });
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("add with zero is identity, tanh at zero") {
    Tensor x = Tensor::from({0.5, -1.25, 3.0}, {3});
    Tensor y = lf::add(x, Tensor::zeros({3}));
    CHECK(y.value() == x.value());

    Tensor z = Tensor::scalar(0.0);
    z.set_requires_grad(true);
    {
        Tape tape;
        Tensor t = lf::tanh(z);
        CHECK(t.item() == 0.0);
        tape.backward(t);
    }
    CHECK(z.grad()[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("exp/log round-trip on random positive tensor") {
    Rng rng(11);
    std::vector<double> vals(24);
    for (double& v : vals) {
        v = std::exp(rng.normal());
    }
    Tensor x = Tensor::from(vals, {4, 6});
    Tensor back = lf::exp(lf::log(x));
    double max_err = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        max_err = std::max(max_err, std::fabs(back.at(i) - x.at(i)));
    }
    CHECK(max_err < 1e-12);
}

TEST_CASE("log rejects non-positive input") {
    Tensor x = Tensor::from({1.0, 0.0}, {2});
    CHECK_THROWS_AS(lf::log(x), std::domain_error);
    Tensor y = Tensor::from({-2.0}, {1});
    CHECK_THROWS_AS(lf::log(y), std::domain_error);
}

TEST_CASE("row and scalar broadcast in add/mul, others rejected") {
    Tensor m = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
    Tensor row = Tensor::from({10, 20, 30}, {1, 3});
    Tensor s = Tensor::scalar(2.0);

    Tensor mr = lf::add(m, row);
    CHECK(mr.at(1, 2) == doctest::Approx(36.0));
    Tensor ms = lf::mul(m, s);
    CHECK(ms.at(0, 1) == doctest::Approx(4.0));

    Tensor bad = Tensor::from({1, 2}, {2, 1});
    CHECK_THROWS_AS(lf::add(m, bad), lf::ConfigError);
}

TEST_CASE("broadcast backward reduces over the broadcast axis") {
    Tensor m = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
    Tensor row = Tensor::from({1, 1, 1}, {1, 3});
    m.set_requires_grad(true);
    row.set_requires_grad(true);
    auto res = grad_check({m, row}, [&] { return lf::sum(lf::mul(m, row)); });
    CHECK(res.max_rel_err < 1e-6);
    // d(sum(m*row))/d(row_j) = sum_i m[i,j]
    CHECK(row.grad()[0] == doctest::Approx(5.0));
    CHECK(row.grad()[2] == doctest::Approx(9.0));
}

TEST_CASE("softmax symmetry and stabilization") {
    Tensor flat = lf::softmax_rows(Tensor::from({0, 0}, {1, 2}));
    CHECK(flat.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(flat.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));

    Tensor hot = lf::softmax_rows(Tensor::from({1000, 0}, {1, 2}));
    CHECK(hot.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(hot.at(0, 1) < 1e-300);
}

TEST_CASE("softmax Jacobian-vector product matches finite differences") {
    Rng rng(3);
    Tensor x = Tensor::randn({2, 5}, rng, 1.0);
    Tensor w = Tensor::randn({2, 5}, rng, 1.0);  // frozen direction
    x.set_requires_grad(true);
    auto res = grad_check({x}, [&] { return lf::sum(lf::mul(lf::softmax_rows(x), w)); });
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("layernorm normalizes pre-affine") {
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor bias = Tensor::zeros({4});

    Tensor constant = Tensor::full({1, 4}, 3.7);
    Tensor out = lf::layernorm(constant, gain, bias);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(out.at(0, j) == doctest::Approx(0.0).epsilon(1e-12));
    }

    Rng rng(5);
    Tensor x = Tensor::randn({1, 64}, rng, 2.0);
    Tensor y = lf::layernorm(x, Tensor::full({64}, 1.0), Tensor::zeros({64}));
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 64; ++j) {
        mean += y.at(0, j);
    }
    mean /= 64.0;
    for (std::size_t j = 0; j < 64; ++j) {
        var += (y.at(0, j) - mean) * (y.at(0, j) - mean);
    }
    var /= 64.0;
    CHECK(std::fabs(mean) < 1e-10);
    // ε=1e-5 in the denominator keeps pre-affine variance just under 1.
    CHECK(std::fabs(var - 1.0) < 1e-4);
}

TEST_CASE("layernorm gradient matches finite differences") {
    Rng rng(9);
    Tensor x = Tensor::randn({3, 6}, rng, 1.0);
    Tensor gain = Tensor::randn({6}, rng, 0.5);
    Tensor bias = Tensor::randn({6}, rng, 0.5);
    for (Tensor* p : {&x, &gain, &bias}) {
        p->set_requires_grad(true);
    }
    Tensor dir = Tensor::randn({3, 6}, rng, 1.0);
    auto res = grad_check({x, gain, bias},
                          [&] { return lf::sum(lf::mul(lf::layernorm(x, gain, bias), dir)); });
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("cross_entropy analytic cases") {
    // Huge-margin correct logits.
    Tensor confident = Tensor::from({100, 0, 0, 0, 100, 0}, {2, 3});
    Tensor loss = lf::cross_entropy(confident, {0, 1}, {1, 1});
    CHECK(loss.item() < 1e-12);

    // Uniform logits over V=3.
    Tensor uniform = Tensor::zeros({2, 3});
    CHECK(lf::cross_entropy(uniform, {0, 2}, {1, 1}).item() ==
          doctest::Approx(1.0986122886681098).epsilon(1e-12));

    // Hand-computed two-token case, frozen from log-sum-exp arithmetic.
    Tensor logits = Tensor::from({1.0, 2.0, 3.0, 0.5, -0.5, 0.0}, {2, 3});
    CHECK(lf::cross_entropy(logits, {2, 0}, {1, 1}).item() ==
          doctest::Approx(0.5439378175430574).epsilon(1e-12));
    // Mask drops the second row.
    CHECK(lf::cross_entropy(logits, {2, 0}, {1, 0}).item() ==
          doctest::Approx(0.40760596444438013).epsilon(1e-12));
}

TEST_CASE("cross_entropy rejects empty mask and bad targets") {
    Tensor logits = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(lf::cross_entropy(logits, {0, 1}, {0, 0}), lf::ConfigError);
    CHECK_THROWS_AS(lf::cross_entropy(logits, {0, 3}, {1, 1}), lf::ConfigError);
}

TEST_CASE("cross_entropy gradient matches finite differences") {
    Rng rng(13);
    Tensor logits = Tensor::randn({4, 5}, rng, 1.0);
    logits.set_requires_grad(true);
    auto res = grad_check({logits}, [&] { return lf::cross_entropy(logits, {1, 4, 0, 2}, {1, 1, 0, 1}); });
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("d(x*x)/dx at 3 is 6, repeated backward accumulates") {
    Tensor x = Tensor::scalar(3.0);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = lf::mul(x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("intermediate grads reset per pass while leaves accumulate") {
    Tensor x = Tensor::scalar(2.0);
    x.set_requires_grad(true);
    Tape tape;
    Tensor mid = lf::mul(x, x);       // 4, d(loss)/d(mid) = 3
    Tensor loss = lf::scale(mid, 3.0);
    tape.backward(loss);
    tape.backward(loss);
    CHECK(mid.grad()[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(x.grad()[0] == doctest::Approx(24.0).epsilon(1e-12));
}

TEST_CASE("frozen tensors never receive gradient buffers") {
    Tensor w = Tensor::from({1, 2, 3, 4}, {2, 2});
    Tensor frozen = Tensor::from({5, 6, 7, 8}, {2, 2});
    w.set_requires_grad(true);
    Tape tape;
    Tensor loss = lf::sum(lf::matmul(w, frozen));
    tape.backward(loss);
    CHECK(w.has_grad());
    CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("backward requires a scalar root") {
    Tensor x = Tensor::from({1, 2}, {2});
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = lf::scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), lf::ConfigError);
}

TEST_CASE("non-finite op results surface as errors") {
    Tensor huge = Tensor::from({1e308, 1e308}, {2});
    CHECK_THROWS_AS(lf::add(huge, huge), std::runtime_error);
    Tensor big = Tensor::from({1000.0}, {1});
    CHECK_THROWS_AS(lf::exp(big), std::runtime_error);
}

TEST_CASE("every differentiable op passes finite differences across 10 seeds") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor a = Tensor::randn({3, 4}, rng, 1.0);
        Tensor b = Tensor::randn({3, 4}, rng, 1.0);
        Tensor w = Tensor::randn({4, 3}, rng, 1.0);
        Tensor gain = Tensor::randn({4}, rng, 0.3);
        Tensor bias = Tensor::randn({4}, rng, 0.3);
        for (Tensor* p : {&a, &b, &w, &gain, &bias}) {
            p->set_requires_grad(true);
        }
        Tensor dir = Tensor::randn({3, 4}, rng, 1.0);

        auto check = [&](const char* name, const std::function<lf::Tensor()>& fn,
                         std::vector<Tensor> params) {
            auto res = grad_check(params, fn);
            INFO(name << " seed " << seed << " worst " << res.worst);
            CHECK(res.max_rel_err < 1e-4);
        };

        check("matmul", [&] { return lf::sum(lf::matmul(a, w)); }, {a, w});
        check("transpose", [&] { return lf::sum(lf::mul(lf::transpose(a), Tensor::full({4, 3}, 0.5))); }, {a});
        check("add", [&] { return lf::sum(lf::add(a, b)); }, {a, b});
        check("sub", [&] { return lf::sum(lf::mul(lf::sub(a, b), dir)); }, {a, b});
        check("mul", [&] { return lf::sum(lf::mul(a, b)); }, {a, b});
        check("neg", [&] { return lf::sum(lf::mul(lf::neg(a), dir)); }, {a});
        check("tanh", [&] { return lf::sum(lf::mul(lf::tanh(a), dir)); }, {a});
        check("exp", [&] { return lf::sum(lf::mul(lf::exp(a), dir)); }, {a});
        check("log", [&] { return lf::sum(lf::log(lf::add_scalar(lf::exp(a), 1.0))); }, {a});
        check("scale", [&] { return lf::sum(lf::scale(a, -2.5)); }, {a});
        check("softmax", [&] { return lf::sum(lf::mul(lf::softmax_rows(a), dir)); }, {a});
        check("layernorm", [&] { return lf::sum(lf::mul(lf::layernorm(a, gain, bias), dir)); },
              {a, gain, bias});
        check("mean", [&] { return lf::mean(lf::mul(a, a)); }, {a});
        check("gather", [&] { return lf::sum(lf::gather_rows(a, {2, 0, 2})); }, {a});
        check("slice_rows", [&] { return lf::sum(lf::slice_rows(a, 1, 3)); }, {a});
        check("slice_cols", [&] { return lf::sum(lf::mul(lf::slice_cols(a, 1, 3), Tensor::full({3, 2}, 2.0))); }, {a});
        check("concat_rows", [&] { return lf::sum(lf::mul(lf::concat_rows(a, b), Tensor::full({6, 4}, 0.5))); }, {a, b});
        check("concat_cols", [&] { return lf::sum(lf::mul(lf::concat_cols(a, b), Tensor::full({3, 8}, 0.5))); }, {a, b});
        check("reshape", [&] { return lf::sum(lf::mul(lf::reshape(a, {4, 3}), Tensor::full({4, 3}, 1.5))); }, {a});
        // Kinked ops checked away from their kinks.
        check("max_floor", [&] { return lf::sum(lf::max_floor(lf::scale(a, 10.0), 0.5)); }, {a});
        check("clamp", [&] { return lf::sum(lf::clamp(lf::scale(a, 10.0), -5.0, 5.0)); }, {a});
    }
}

TEST_CASE("gather, slice and concat forward values") {
    Tensor t = Tensor::from({1, 2, 3, 4, 5, 6}, {3, 2});
    Tensor g = lf::gather_rows(t, {2, 0});
    CHECK(g.at(0, 0) == 5.0);
    CHECK(g.at(1, 1) == 2.0);
    CHECK_THROWS_AS(lf::gather_rows(t, {3}), lf::ConfigError);

    Tensor sr = lf::slice_rows(t, 1, 2);
    CHECK(sr.rows() == 1);
    CHECK(sr.at(0, 0) == 3.0);
    Tensor sc = lf::slice_cols(t, 1, 2);
    CHECK(sc.cols() == 1);
    CHECK(sc.at(2, 0) == 6.0);

    Tensor cr = lf::concat_rows(sr, sr);
    CHECK(cr.rows() == 2);
    Tensor cc = lf::concat_cols(t, t);
    CHECK(cc.cols() == 4);
    CHECK(cc.at(1, 3) == 4.0);
}

TEST_CASE("tape replay is deterministic for identical seeds") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor a = Tensor::randn({4, 4}, rng, 1.0);
        Tensor b = Tensor::randn({4, 4}, rng, 1.0);
        a.set_requires_grad(true);
        Tape tape;
        Tensor loss = lf::mean(lf::tanh(lf::matmul(a, b)));
        tape.backward(loss);
        return std::make_pair(loss.item(), a.grad());
    };
    auto [l1, g1] = run(42);
    auto [l2, g2] = run(42);
    CHECK(l1 == l2);
    CHECK(g1 == g2);
}

TEST_CASE("rng state round-trips through text serialization") {
    Rng rng(123);
    // Odd draw count leaves a cached Box-Muller spare in the state.
    for (int i = 0; i < 7; ++i) {
        (void)rng.normal();
    }
    std::string state = rng.serialize();
    Rng restored = Rng::deserialize(state);
    for (int i = 0; i < 100; ++i) {
        CHECK(rng.normal() == restored.normal());
        CHECK(rng.uniform() == restored.uniform());
        CHECK(rng.below(97) == restored.below(97));
    }
}
