#include <doctest.h>

#include <cmath>
#include <vector>

#include "stats/autodiff.hpp"
#include "stats/errors.hpp"
#include "stats/rng.hpp"

using namespace stats;
using stats::ad::Value;

namespace {

Value rand_param(std::vector<std::size_t> shape, RngStream& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    rng.fill_uniform(t, -scale, scale);
    return Value::param(std::move(t));
}

}  // namespace

TEST_CASE("analytic fixtures: tanh, softplus, matmul") {
    Value z = Value::param(Tensor::scalar(0.0));
    Value y = ad::tanh(z);
    CHECK(y.item() == doctest::Approx(0.0));
    ad::backward(y);
    CHECK(z.grad()[0] == doctest::Approx(1.0));

    Value s = ad::softplus(Value::constant(Tensor::scalar(0.0)));
    CHECK(s.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Value a = Value::constant(Tensor({2, 2}, {1, 2, 3, 4}));
    Value b = Value::constant(Tensor({2, 1}, {1, 1}));
    Value c = ad::matmul(a, b);
    CHECK(c.val().at(0, 0) == 3.0);
    CHECK(c.val().at(1, 0) == 7.0);
}

TEST_CASE("matvec against hand arithmetic") {
    Value a = Value::constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    Value x = Value::constant(Tensor({3}, {1, 0, -1}));
    Value y = ad::matmul(a, x);
    CHECK(y.val()[0] == -2.0);
    CHECK(y.val()[1] == -2.0);
}

TEST_CASE("shape mismatches name both shapes") {
    Value a = Value::constant(Tensor({2, 3}));
    Value b = Value::constant(Tensor({4}));
    CHECK_THROWS_WITH_AS(ad::add(a, b), doctest::Contains("[2,3]"), ShapeError);
    CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
    CHECK_THROWS_AS(ad::dot(a, b), ShapeError);
}

TEST_CASE("non-finite input raises a numeric error") {
    Tensor bad({2});
    bad[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(Value::constant(bad), NumericError);

    Value ok = Value::constant(Tensor({2}));
    ok.val_mut()[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(ad::add(ok, ok), NumericError);
}

TEST_CASE("softmax fixtures") {
    Value z = Value::constant(Tensor({3}, {1, 1, 1}));
    Value y = ad::softmax(z, 0, 1.0);
    for (int i = 0; i < 3; ++i) CHECK(y.val()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Value z2 = Value::constant(Tensor({2}, {0.0, std::log(3.0)}));
    Value y2 = ad::softmax(z2, 0, 1.0);
    CHECK(y2.val()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(y2.val()[1] == doctest::Approx(0.75).epsilon(1e-12));

    Value z3 = Value::constant(Tensor({3}, {1, 3, 2}));
    Value y3 = ad::softmax(z3, 0, 0.01);
    CHECK(y3.val()[1] >= 1.0 - 1e-12);

    CHECK_THROWS_AS(ad::softmax(z3, 0, 0.0), ParamError);
    CHECK_THROWS_AS(ad::softmax(z3, 0, -1.0), ParamError);
    CHECK_THROWS_AS(ad::softmax(z3, 2, 1.0), ShapeError);
}

TEST_CASE("softmax simplex fuzz with temperatures and lengths") {
    RngStream rng(42);
    for (int iter = 0; iter < 10000; ++iter) {
        std::size_t len = 1 + rng.index(64);
        Tensor t({len});
        rng.fill_uniform(t, -50.0, 50.0);
        double temps[3] = {1.0, 0.1, 0.01};
        double tau = temps[iter % 3];
        Value y = ad::softmax(Value::constant(t), 0, tau);
        double sum = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            REQUIRE(y.val()[i] >= 0.0);
            sum += y.val()[i];
        }
        REQUIRE(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("softmax shift invariance") {
    RngStream rng(7);
    for (int iter = 0; iter < 100; ++iter) {
        std::size_t len = 2 + rng.index(16);
        Tensor t({len});
        rng.fill_uniform(t, -5.0, 5.0);
        double c = rng.uniform(-100.0, 100.0);
        Tensor shifted = t;
        for (std::size_t i = 0; i < len; ++i) shifted[i] += c;
        Value y1 = ad::softmax(Value::constant(t), 0, 1.0);
        Value y2 = ad::softmax(Value::constant(shifted), 0, 1.0);
        for (std::size_t i = 0; i < len; ++i) {
            REQUIRE(std::abs(y1.val()[i] - y2.val()[i]) < 1e-12);
        }
    }
}

TEST_CASE("softplus bounds and overflow safety") {
    RngStream rng(3);
    for (int iter = 0; iter < 1000; ++iter) {
        double z = rng.uniform(-700.0, 700.0);
        Value y = ad::softplus(Value::constant(Tensor::scalar(z)));
        double v = y.item();
        REQUIRE(v > 0.0);
        REQUIRE(v >= z);
        if (z > 40.0) REQUIRE(v - z < 1e-12);
        REQUIRE(std::isfinite(v));
    }
}

TEST_CASE("backward on sum of squares") {
    Value w = Value::param(Tensor({3}, {1, 2, 3}));
    Value loss = ad::sum(ad::mul(w, w));
    ad::backward(loss);
    CHECK(w.grad()[0] == doctest::Approx(2.0));
    CHECK(w.grad()[1] == doctest::Approx(4.0));
    CHECK(w.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward of softplus at zero is one half") {
    Value w = Value::param(Tensor::scalar(0.0));
    Value y = ad::softplus(w);
    ad::backward(y);
    CHECK(w.grad()[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar root and accumulates across calls") {
    Value w = Value::param(Tensor({2}, {1, 1}));
    CHECK_THROWS_AS(ad::backward(ad::mul(w, w)), ContractError);

    Value y = ad::sum(ad::mul(w, w));
    ad::backward(y);
    ad::backward(y);
    CHECK(w.grad()[0] == doctest::Approx(4.0));  // two accumulated sweeps
    w.zero_grad();
    CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("random small graph matches finite differences") {
    RngStream rng(11);
    for (int iter = 0; iter < 20; ++iter) {
        Value a = rand_param({3}, rng);
        Value m = rand_param({3, 3}, rng);
        Value c = rand_param({3}, rng);
        std::vector<Value> params{a, m, c};
        auto f = [&] {
            Value h = ad::tanh(ad::matmul(m, a));
            Value s = ad::softplus(ad::dot(h, c));
            return ad::add(s, ad::sum(ad::mul(a, a)));
        };
        auto report = ad::grad_check(f, params, 1e-5, 1e-6);
        REQUIRE(report.pass);
    }
}

TEST_CASE("grad_check fixtures") {
    RngStream rng(19);
    Value w = rand_param({4}, rng);
    Value m = rand_param({4, 4}, rng);
    std::vector<Value> params{w, m};
    auto f = [&] { return ad::sum(ad::tanh(ad::matmul(m, w))); };
    auto report = ad::grad_check(f, params, 1e-5, 1e-4);
    CHECK(report.pass);

    // Constant function: zero gradient everywhere, max_rel_err 0.
    auto g = [&] { return Value::scalar_constant(2.5); };
    auto creport = ad::grad_check(g, params, 1e-5, 1e-4);
    CHECK(creport.pass);
    CHECK(creport.max_rel_err == 0.0);
}

TEST_CASE("grad_check detects a deliberately wrong backward rule") {
    Value w = Value::param(Tensor({2}, {0.3, -0.4}));
    std::vector<Value> params{w};
    auto f = [&]() -> Value {
        // Forward computes tanh; backward pretends the derivative is 1.
        auto n = std::make_shared<ad::Node>();
        n->value = Tensor({2});
        n->grad = Tensor({2});
        for (int i = 0; i < 2; ++i) n->value[i] = std::tanh(w.val()[i]);
        n->requires_grad = true;
        n->parents = {w.node()};
        ad::Node* wn = w.node().get();
        n->backward_fn = [wn](ad::Node& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) wn->grad[i] += self.grad[i];
        };
        return ad::sum(Value::from_node(n));
    };
    auto report = ad::grad_check(f, params, 1e-5, 1e-4);
    CHECK(!report.pass);
}

TEST_CASE("grad_check rejects a non-deterministic function") {
    RngStream rng(4);
    Value w = Value::param(Tensor::scalar(1.0));
    std::vector<Value> params{w};
    auto f = [&] { return ad::scale(w, rng.uniform()); };
    CHECK_THROWS_AS(ad::grad_check(f, params, 1e-5, 1e-4), ContractError);
}

TEST_CASE("broadcast add and mul: scalar and trailing vector") {
    Value m = Value::param(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    Value v = Value::param(Tensor({3}, {10, 20, 30}));
    Value s = Value::param(Tensor::scalar(2.0));

    Value mv = ad::add(m, v);
    CHECK(mv.val().at(1, 2) == 36.0);
    Value ms = ad::mul(m, s);
    CHECK(ms.val().at(0, 1) == 4.0);

    std::vector<Value> params{m, v, s};
    auto f = [&] { return ad::sum(ad::mul(ad::add(m, v), s)); };
    auto report = ad::grad_check(f, params, 1e-5, 1e-6);
    CHECK(report.pass);
}

TEST_CASE("concat, pick, pick_row, weighted_sum, vmax gradients") {
    RngStream rng(23);
    Value a = rand_param({3}, rng);
    Value b = rand_param({2}, rng);
    Value mat = rand_param({4, 3}, rng);
    Value wts = rand_param({2}, rng, 0.5);
    std::vector<Value> params{a, b, mat, wts};
    auto f = [&] {
        std::vector<Value> parts{a, b};
        Value cat = ad::concat(parts);
        Value picked = ad::pick(cat, 3);
        Value row = ad::pick_row(mat, 2);
        std::vector<Value> items{row, a};
        Value wsum = ad::weighted_sum(wts, items);
        std::vector<Value> mx{wsum, a};
        return ad::add(ad::sum(ad::vmax(mx)), picked);
    };
    auto report = ad::grad_check(f, params, 1e-5, 1e-4);
    CHECK(report.pass);
}

TEST_CASE("log_clamped blocks gradient below the floor") {
    Value p = Value::param(Tensor({2}, {0.5, 1e-15}));
    Value y = ad::sum(ad::log_clamped(p, 1e-12));
    ad::backward(y);
    CHECK(p.grad()[0] == doctest::Approx(2.0));
    CHECK(p.grad()[1] == 0.0);
    CHECK(y.val().item() == doctest::Approx(std::log(0.5) + std::log(1e-12)));
}

TEST_CASE("deep chains neither overflow the stack in backward nor teardown") {
    Value w = Value::param(Tensor::scalar(0.5));
    Value v = w;
    for (int i = 0; i < 60000; ++i) v = ad::scale(v, 1.0);
    ad::backward(v);
    CHECK(w.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("rank-2 softmax along both axes") {
    Value z = Value::param(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    Value rows = ad::softmax(z, 1, 1.0);
    for (int r = 0; r < 2; ++r) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) s += rows.val().at(r, c);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    Value cols = ad::softmax(z, 0, 1.0);
    for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int r = 0; r < 2; ++r) s += cols.val().at(r, c);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    std::vector<Value> params{z};
    auto f = [&] { return ad::sum(ad::mul(ad::softmax(z, 0, 0.7), z)); };
    CHECK(ad::grad_check(f, params, 1e-5, 1e-4).pass);
}
