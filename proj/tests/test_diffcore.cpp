#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "cfseq/diffcore/nn.hpp"
#include "cfseq/diffcore/optim.hpp"
#include "cfseq/diffcore/value.hpp"

using namespace cfseq;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data) v = d(rng);
    return t;
}

// Reduces any value to a scalar with fixed random weights, so the check
// exercises every output coordinate with a distinct upstream gradient.
Value weighted_sum(const Value& v, std::mt19937_64& rng) {
    return sum(v * constant(random_tensor(v.shape(), rng)));
}

}  // namespace

TEST_CASE("selu and log_sum_exp reference values") {
    CHECK(selu(constant(0.0)).item() == 0.0);
    CHECK(selu(constant(1.0)).item() == doctest::Approx(1.05070098).epsilon(1e-12));
    CHECK(log_sum_exp(constant(Tensor::vector({0, 0, 0, 0}))).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
    CHECK(std::abs(log_sum_exp(constant(Tensor::vector({0, 0, 0, 0}))).item() - 1.3862944) < 1e-7);
}

TEST_CASE("shape and domain errors are rejected") {
    Value a = constant(Tensor(Shape{2, 3}, 1.0));
    Value b = constant(Tensor(Shape{4, 2}, 1.0));
    try {
        (void)add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
    CHECK_THROWS_AS((void)matmul(a, b), ShapeError);
    CHECK_THROWS_AS((void)log(constant(Tensor::vector({1.0, 0.0}))), DomainError);
    CHECK_THROWS_AS((void)log(constant(-2.0)), DomainError);
    CHECK_THROWS_AS((void)exp(constant(800.0)), DomainError);
    CHECK_THROWS_AS((void)slice(a, 1, 2, 5), ShapeError);
    CHECK_THROWS_AS((void)one_hot_gather(a, {0, 3}), ShapeError);
}

TEST_CASE("backward: quadratic and stop-gradient contracts") {
    Value x = parameter(Tensor::vector({1.0, 2.0}));
    Gradients g1 = backward(dot(x, x));
    CHECK(g1.of(x).data == std::vector<double>{2.0, 4.0});

    Value y = parameter(Tensor::vector({3.0, -1.0}));
    Gradients g2 = backward(mean(stop_gradient(x) * y));
    CHECK_FALSE(g2.reached(x));
    for (double g : g2.of(x).data) CHECK(g == 0.0);
    CHECK(g2.of(y)[0] == doctest::Approx(0.5));
    CHECK(g2.of(y)[1] == doctest::Approx(1.0));

    CHECK_THROWS_AS(backward(x * 2.0), ShapeError);
}

TEST_CASE("backward accumulates once per path through shared nodes") {
    Value x = parameter(Tensor::scalar(3.0));
    Value y = x * x;
    Gradients g = backward(y + y * x);  // d/dx (x^2 + x^3) = 2x + 3x^2
    CHECK(g.of(x).item() == doctest::Approx(6.0 + 27.0));
}

TEST_CASE("grad_check on x^2 and on one GRU step") {
    Value x = parameter(Tensor::scalar(3.0));
    std::vector<Value> p{x};
    CHECK(grad_check([&] { return x * x; }, p, 1e-5) < 1e-9);

    std::mt19937_64 rng(0);
    ParamStore store;
    GruCell cell = make_gru(store, "gru", "g", 5, 4, rng);
    Value in = parameter(random_tensor({3, 5}, rng));
    Value h0 = parameter(random_tensor({3, 4}, rng));
    Tensor w = random_tensor({3, 4}, rng);
    auto params = store.all();
    params.push_back(in);
    params.push_back(h0);
    double err = grad_check([&] { return sum(cell.step(in, h0) * constant(w)); }, params, 1e-5);
    CHECK(err < 1e-5);
}

TEST_CASE("GRU conventions with zero parameters") {
    std::mt19937_64 rng(1);
    ParamStore store;
    GruCell cell = make_gru(store, "gru", "g", 3, 2, rng);
    for (auto& v : store.all())
        for (double& d : v.mutable_data().data) d = 0.0;
    Value x = constant(Tensor::matrix({{1, 2, 3}}));
    Value h = constant(Tensor::matrix({{0.4, -0.8}}));
    Value out = cell.step(x, h);
    CHECK(out.data()[0] == doctest::Approx(0.2));
    CHECK(out.data()[1] == doctest::Approx(-0.4));
    Value zero = cell.step(x, constant(Tensor(Shape{1, 2}, 0.0)));
    CHECK(zero.data()[0] == 0.0);
    CHECK(zero.data()[1] == 0.0);
}

TEST_CASE("property: every primitive matches central finite differences (100 trials)") {
    std::mt19937_64 rng(42);
    std::uniform_int_distribution<int> dim(1, 4);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = dim(rng), k = dim(rng), m = dim(rng);
        Value a = parameter(random_tensor({n, k}, rng));
        Value b = parameter(random_tensor({n, k}, rng, 0.5, 2.0));
        Value row = parameter(random_tensor({1, k}, rng));
        Value c = parameter(random_tensor({k, m}, rng));
        Value vec = parameter(random_tensor({k}, rng));
        Value vec2 = parameter(random_tensor({k}, rng));
        Value pos = parameter(random_tensor({n, k}, rng, 0.2, 3.0));
        std::vector<std::size_t> picks(n), rows(m);
        for (auto& p : picks) p = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
        for (auto& r : rows) r = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        std::vector<Value> params{a, b, row, c, vec, vec2, pos};
        std::mt19937_64 wrng(trial);
        std::vector<Tensor> weights;
        auto w = [&](const Value& v) {
            // fixed weights per trial: regenerate identically on each call
            return weighted_sum(v, wrng);
        };
        auto f = [&]() {
            wrng.seed(trial);
            Value total = w(a + b) + w(a - row) + w(a * b) + w(a / b) + w(matmul(a, c)) +
                          w(matmul(a, transpose(c), true)) + w(transpose(a)) + w(concat({a, b}, 0)) +
                          w(concat({a, b}, 1)) + w(slice(a, 1, 0, k)) + w(broadcast_to(row, {n, k})) +
                          w(sum(a, 0)) + w(sum(a, 1)) + sum(a) * 0.3 + mean(b) * 0.7 + w(mean(a, 1)) +
                          w(exp(a)) + w(log(pos)) + w(sigmoid(a)) + w(tanh(a)) + w(selu(a)) + w(softplus(a)) +
                          w(log_sum_exp(a, 1)) + log_sum_exp(a) + dot(vec, vec2) +
                          w(one_hot_gather(a, picks)) + w(gather_rows(a, rows)) + w(clamp_min(a, 0.05)) +
                          w(log_softmax(a));
            return total;
        };
        worst = std::max(worst, grad_check(f, params, 1e-5));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("property: backward is linear") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Value x = parameter(random_tensor({3, 4}, rng));
        Value w = constant(random_tensor({4, 2}, rng));
        auto f = [&] { return sum(tanh(matmul(x, w))); };
        auto g = [&] { return sum(exp(x) * x); };
        const double a = 0.7, b = -1.3;
        Tensor gf = backward(f()).of(x);
        Tensor gg = backward(g()).of(x);
        Tensor gc = backward(f() * a + g() * b).of(x);
        for (std::size_t i = 0; i < gf.size(); ++i) CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
    }
}

TEST_CASE("stop_gradient blocks all upstream flow in composite losses") {
    std::mt19937_64 rng(3);
    Value x = parameter(random_tensor({2, 3}, rng));
    Value y = parameter(random_tensor({2, 3}, rng));
    Value blocked = stop_gradient(exp(x) * 2.0);
    Gradients grads = backward(sum(log_sum_exp(blocked * y, 1)) + mean(blocked));
    for (double g : grads.of(x).data) CHECK(g == 0.0);
    bool any = false;
    for (double g : grads.of(y).data) any = any || g != 0.0;
    CHECK(any);
}

TEST_CASE("NoGradGuard builds no graph") {
    Value x = parameter(Tensor::scalar(2.0));
    NoGradGuard g;
    Value y = x * x;
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
}

TEST_CASE("adamw_step closed forms") {
    SUBCASE("first step moves by lr") {
        std::vector<Value> p{parameter(Tensor::scalar(0.5))};
        OptimizerState st;
        AdamWConfig cfg;
        cfg.lr = 0.1;
        REQUIRE(adamw_step(p, {Tensor::scalar(1.0)}, st, cfg));
        CHECK(std::abs((p[0].item() - 0.5) + 0.1) < 1e-6);
        CHECK(st.step == 1);
    }
    SUBCASE("zero gradient leaves params unchanged") {
        std::vector<Value> p{parameter(Tensor::vector({1.0, -2.0}))};
        OptimizerState st;
        REQUIRE(adamw_step(p, {Tensor::vector({0.0, 0.0})}, st, AdamWConfig{}));
        CHECK(p[0].data().data == std::vector<double>{1.0, -2.0});
    }
    SUBCASE("decoupled weight decay") {
        std::vector<Value> p{parameter(Tensor::scalar(1.0))};
        OptimizerState st;
        AdamWConfig cfg;
        cfg.lr = 0.1;
        cfg.weight_decay = 0.1;
        REQUIRE(adamw_step(p, {Tensor::scalar(0.0)}, st, cfg));
        CHECK(p[0].item() == doctest::Approx(0.99).epsilon(1e-15));
    }
    SUBCASE("non-finite gradient is rejected") {
        std::vector<Value> p{parameter(Tensor::scalar(1.0))};
        OptimizerState st;
        CHECK_FALSE(adamw_step(p, {Tensor::scalar(NAN)}, st, AdamWConfig{}));
        CHECK(p[0].item() == 1.0);
        CHECK(st.step == 0);
    }
    SUBCASE("misaligned gradients are rejected") {
        std::vector<Value> p{parameter(Tensor::scalar(1.0))};
        OptimizerState st;
        CHECK_THROWS_AS((void)adamw_step(p, {Tensor::vector({1.0, 2.0})}, st, AdamWConfig{}), ShapeError);
    }
}

TEST_CASE("sgd_momentum_step recursions") {
    SUBCASE("momentum 0 is plain gradient descent") {
        std::vector<Value> p{parameter(Tensor::scalar(1.0))};
        OptimizerState st;
        REQUIRE(sgd_momentum_step(p, {Tensor::scalar(2.0)}, st, MomentumConfig{0.1, 0.0}));
        CHECK(p[0].item() == doctest::Approx(0.8));
    }
    SUBCASE("two steps with constant gradient") {
        std::vector<Value> p{parameter(Tensor::scalar(0.0))};
        OptimizerState st;
        MomentumConfig cfg{0.1, 0.9};
        REQUIRE(sgd_momentum_step(p, {Tensor::scalar(1.0)}, st, cfg));
        REQUIRE(sgd_momentum_step(p, {Tensor::scalar(1.0)}, st, cfg));
        CHECK(p[0].item() == doctest::Approx(-0.29).epsilon(1e-14));
    }
    SUBCASE("velocity persists with zero gradient") {
        std::vector<Value> p{parameter(Tensor::scalar(0.0))};
        OptimizerState st;
        MomentumConfig cfg{0.1, 0.9};
        REQUIRE(sgd_momentum_step(p, {Tensor::scalar(1.0)}, st, cfg));
        double before = p[0].item();
        REQUIRE(sgd_momentum_step(p, {Tensor::scalar(0.0)}, st, cfg));
        CHECK(p[0].item() - before == doctest::Approx(-0.1 * 0.9 * 1.0));
    }
}

TEST_CASE("optimizer steps are deterministic") {
    auto run = [] {
        std::mt19937_64 rng(11);
        std::vector<Value> p{parameter(random_tensor({3, 3}, rng))};
        OptimizerState st;
        for (int i = 0; i < 5; ++i) {
            Gradients g = backward(sum(exp(p[0]) * p[0]));
            REQUIRE(adamw_step(p, collect_grads(g, p), st, AdamWConfig{}));
        }
        return p[0].data().data;
    };
    CHECK(run() == run());
}

TEST_CASE("weight_norm_apply") {
    Value v = parameter(Tensor::matrix({{3, 4}}));
    Value g = parameter(Tensor::matrix({{1}}));
    Value w = weight_norm_apply(v, g);
    CHECK(w.data()[0] == doctest::Approx(0.6));
    CHECK(w.data()[1] == doctest::Approx(0.8));

    Value zero_scale = weight_norm_apply(v, constant(Tensor::matrix({{0}})));
    CHECK(zero_scale.data()[0] == 0.0);
    CHECK(zero_scale.data()[1] == 0.0);

    CHECK_THROWS_AS((void)weight_norm_apply(constant(Tensor::matrix({{1, 1}, {0, 0}})), constant(Tensor(Shape{2, 1}, 1.0))),
                    DomainError);

    std::mt19937_64 rng(5);
    for (int t = 0; t < 20; ++t) {
        Tensor dir = random_tensor({4, 6}, rng);
        Tensor sc = random_tensor({4, 1}, rng, -3.0, 3.0);
        Value out = weight_norm_apply(constant(dir), constant(sc));
        for (std::size_t r = 0; r < 4; ++r) {
            double sq = 0.0;
            for (std::size_t c = 0; c < 6; ++c) sq += out.data().at(r, c) * out.data().at(r, c);
            CHECK(std::sqrt(sq) == doctest::Approx(std::abs(sc[r])).epsilon(1e-12));
        }
    }
    std::vector<Value> params{v, g};
    CHECK(grad_check([&] { return sum(weight_norm_apply(v, g) * constant(Tensor::matrix({{0.3, -1.2}}))); }, params) < 1e-5);
}

TEST_CASE("spectral_norm_apply") {
    std::mt19937_64 rng(9);
    SUBCASE("identity is already normalized") {
        Value w = constant(Tensor::matrix({{1, 0}, {0, 1}}));
        auto res = spectral_norm_apply(w, Tensor::vector({0.6, 0.8}), 1);
        CHECK(res.sigma == doctest::Approx(1.0));
        CHECK(res.weight.data().at(0, 0) == doctest::Approx(1.0));
        CHECK(res.weight.data().at(1, 1) == doctest::Approx(1.0));
        CHECK(res.weight.data().at(0, 1) == doctest::Approx(0.0));
    }
    SUBCASE("diag(2, 1) after 20 iterations") {
        Value w = constant(Tensor::matrix({{2, 0}, {0, 1}}));
        auto res = spectral_norm_apply(w, Tensor::vector({0.6, 0.8}), 20);
        CHECK(res.sigma >= 1.999);
        CHECK(res.sigma <= 2.001);
    }
    SUBCASE("random 8x8: largest singular value of the output is at most 1") {
        for (int t = 0; t < 10; ++t) {
            Tensor wt = random_tensor({8, 8}, rng);
            Tensor u = random_tensor({8}, rng);
            auto res = spectral_norm_apply(constant(wt), u, 50);
            Eigen::Map<const Eigen::Matrix<double, 8, 8, Eigen::RowMajor>> m(res.weight.data().data.data());
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
            CHECK(svd.singularValues()(0) <= 1.0 + 1e-3);
        }
    }
    SUBCASE("zero matrix is floored and flagged") {
        auto res = spectral_norm_apply(constant(Tensor(Shape{2, 2}, 0.0)), Tensor::vector({1.0, 0.0}), 1);
        CHECK(res.floored);
        CHECK(res.weight.data().all_finite());
    }
    SUBCASE("gradient through the normalized weight") {
        Value w = parameter(random_tensor({3, 4}, rng));
        Tensor u = random_tensor({3}, rng);
        Value x = constant(random_tensor({2, 4}, rng));
        std::vector<Value> params{w};
        CHECK(grad_check([&] { return sum(tanh(matmul(x, spectral_norm_apply(w, u, 0).weight, true))); }, params) <
              1e-5);
    }
}
