#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ca3net/batchnorm.hpp"
#include "ca3net/ops.hpp"
#include "ca3net/optim.hpp"
#include "ca3net/params.hpp"
#include "ca3net/rng.hpp"
#include "ca3net/tape.hpp"
#include "oracles.hpp"

using namespace ca3net;

namespace {
TensorPtr random_param(Rng& rng, Shape shape, double scale = 0.5) {
    auto t = make_tensor(std::move(shape));
    for (auto& v : t->data) v = rng.normal(0.0, scale);
    t->requires_grad = true;
    return t;
}
} // namespace

TEST_CASE("backward: loss = sum(x) gives all-ones gradient") {
    Rng rng(1);
    auto x = random_param(rng, {3, 4});
    GradTape tape;
    auto loss = sum(&tape, x);
    tape.backward(loss);
    REQUIRE(x->has_grad());
    for (double g : x->grad) REQUIRE(g == 1.0);
}

TEST_CASE("backward: loss = sum(x*x)/2 gives gradient x") {
    Rng rng(2);
    auto x = random_param(rng, {5});
    GradTape tape;
    auto loss = scale(&tape, sum(&tape, mul(&tape, x, x)), 0.5);
    tape.backward(loss);
    for (std::size_t i = 0; i < x->size(); ++i)
        REQUIRE(x->grad[i] == Catch::Approx(x->data[i]).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar loss") {
    auto x = make_tensor({2, 2}, 1.0);
    x->requires_grad = true;
    GradTape tape;
    auto y = scale(&tape, x, 2.0);
    REQUIRE_THROWS_AS(tape.backward(y), UsageError);
}

TEST_CASE("backward accumulates and is idempotent after grad reset") {
    auto x = make_tensor({3}, std::vector<double>{1.0, 2.0, 3.0});
    x->requires_grad = true;
    GradTape tape;
    auto loss = sum(&tape, mul(&tape, x, x));
    tape.backward(loss);
    auto first = x->grad;
    x->zero_grad();
    tape.zero_grads();
    tape.backward(loss);
    REQUIRE(x->grad == first);
}

TEST_CASE("finite differences: individual operations") {
    Rng rng(33);
    GradTape tape;

    SECTION("conv2d") {
        auto x = random_param(rng, {2, 5, 4});
        auto w = random_param(rng, {3, 2, 3, 3});
        auto run = [&](GradTape* t) { return sum(t, tanh_op(t, conv2d(t, x, w, 1, 1))); };
        tape.backward(run(&tape));
        REQUIRE(oracle::max_grad_rel_err({x, w}, [&] { return run(nullptr)->item(); }) < 1e-4);
    }
    SECTION("matmul and linear") {
        auto a = random_param(rng, {3, 4});
        auto b = random_param(rng, {4, 2});
        auto w = random_param(rng, {5, 3});
        auto bias = random_param(rng, {5});
        auto run = [&](GradTape* t) {
            auto mm = matmul(t, a, b);                        // [3,2]
            auto v = linear(t, select(t, mm, 1, 0), w, bias); // [5]
            return sum(t, sigmoid(t, v));
        };
        tape.backward(run(&tape));
        REQUIRE(oracle::max_grad_rel_err({a, b, w, bias}, [&] { return run(nullptr)->item(); }) < 1e-4);
    }
    SECTION("softmax and attention-style composition") {
        auto u = random_param(rng, {12});
        auto xs = random_param(rng, {6, 12});
        auto run = [&](GradTape* t) {
            auto z = softmax_vec(t, u);
            auto attended = matmul(t, xs, z); // [6]
            return sum(t, mul(t, attended, attended));
        };
        tape.backward(run(&tape));
        REQUIRE(oracle::max_grad_rel_err({u, xs}, [&] { return run(nullptr)->item(); }) < 1e-4);
    }
    SECTION("pool, slice, concat, bias") {
        auto x = random_param(rng, {2, 3, 6, 4});
        auto b = random_param(rng, {3});
        auto run = [&](GradTape* t) {
            auto xb = add_channel_bias(t, x, b);
            auto s = pool_stripes(t, xb, 3, true);       // [2,3,3]
            auto g = avg_pool_region(t, xb, 0, 6, 0, 4); // [2,3]
            auto cat = concat(t, {flatten(t, s), flatten(t, g)}, 0);
            return sum(t, tanh_op(t, cat));
        };
        tape.backward(run(&tape));
        REQUIRE(oracle::max_grad_rel_err({x, b}, [&] { return run(nullptr)->item(); }) < 1e-4);
    }
    SECTION("cross-entropy batch") {
        auto logits = random_param(rng, {4, 5});
        std::vector<int> labels{0, 3, 2, 4};
        auto run = [&](GradTape* t) { return softmax_cross_entropy_batch(t, logits, labels); };
        tape.backward(run(&tape));
        REQUIRE(oracle::max_grad_rel_err({logits}, [&] { return run(nullptr)->item(); }) < 1e-4);
    }
    SECTION("elementwise_mul map broadcast") {
        auto x = random_param(rng, {3, 4, 5});
        auto z = random_param(rng, {4, 5});
        auto run = [&](GradTape* t) { return sum(t, elementwise_mul(t, x, z)); };
        tape.backward(run(&tape));
        REQUIRE(oracle::max_grad_rel_err({x, z}, [&] { return run(nullptr)->item(); }) < 1e-4);
    }
}

TEST_CASE("batch norm forward statistics and gradients") {
    Rng rng(44);
    ModelParams store;
    BatchNorm bn(store, "bn", 3);

    SECTION("train mode normalizes per channel") {
        auto x = random_param(rng, {8, 3, 4, 2}, 2.5);
        x->requires_grad = false;
        auto y = bn.forward(nullptr, x, true);
        for (int c = 0; c < 3; ++c) {
            double s = 0.0, s2 = 0.0;
            int count = 0;
            for (int n = 0; n < 8; ++n)
                for (int i = 0; i < 4; ++i)
                    for (int j = 0; j < 2; ++j) {
                        double v = y->at4(n, c, i, j);
                        s += v;
                        s2 += v * v;
                        ++count;
                    }
            double meanv = s / count;
            double varv = s2 / count - meanv * meanv;
            REQUIRE(std::fabs(meanv) < 1e-6);
            REQUIRE(std::fabs(varv - 1.0) < 1e-3); // epsilon shifts variance slightly
        }
    }
    SECTION("eval mode with unit running stats is near identity") {
        auto x = random_param(rng, {4, 3}, 1.0);
        x->requires_grad = false;
        auto y = bn.forward(nullptr, x, false);
        for (std::size_t i = 0; i < x->size(); ++i)
            REQUIRE(y->data[i] == Catch::Approx(x->data[i]).epsilon(1e-4));
    }
    SECTION("train-mode batch of one is rejected") {
        auto x = make_tensor({1, 3, 2, 2}, 1.0);
        REQUIRE_THROWS_AS(bn.forward(nullptr, x, true), ConfigError);
    }
    SECTION("gradient through train-mode BN matches finite differences") {
        auto x = random_param(rng, {5, 3, 2, 2});
        auto run = [&](GradTape* t) {
            return sum(t, tanh_op(t, bn.forward(t, x, true)));
        };
        GradTape tape;
        tape.backward(run(&tape));
        REQUIRE(oracle::max_grad_rel_err({x, bn.gamma(), bn.beta()},
                                         [&] { return run(nullptr)->item(); }) < 1e-4);
    }
}

TEST_CASE("composed conv-BN-relu-pool-FC-CE graph matches finite differences") {
    Rng rng(55);
    ModelParams store;
    auto w1 = store.add("conv.w", random_param(rng, {4, 2, 3, 3}, 0.4));
    BatchNorm bn(store, "bn", 4);
    auto wf = store.add("fc.w", random_param(rng, {3, 4}, 0.5));
    auto bf = store.add("fc.b", random_param(rng, {3}, 0.1));
    auto x = random_param(rng, {3, 2, 6, 4}, 0.8); // batch of 3 images
    std::vector<int> labels{0, 2, 1};

    auto run = [&](GradTape* t) {
        auto c = conv2d(t, x, w1, 1, 1);
        auto n = bn.forward(t, c, true);
        auto r = relu(t, n);
        auto pooled = avg_pool_region(t, r, 0, 6, 0, 4); // [3,4]
        auto logits = linear(t, pooled, wf, bf);         // [3,3]
        return softmax_cross_entropy_batch(t, logits, labels);
    };
    GradTape tape;
    tape.backward(run(&tape));
    std::vector<TensorPtr> params{x, w1, bn.gamma(), bn.beta(), wf, bf};
    REQUIRE(oracle::max_grad_rel_err(params, [&] { return run(nullptr)->item(); }) < 1e-4);
}

TEST_CASE("sgd_step") {
    SECTION("vanilla step") {
        ModelParams store;
        auto p = store.add("p", make_tensor({1}, std::vector<double>{1.0}));
        p->ensure_grad();
        p->grad[0] = 1.0;
        SgdState opt(0.1, 0.0, 0.0, false);
        opt.step(store);
        REQUIRE(p->data[0] == Catch::Approx(0.9).epsilon(1e-15));
    }
    SECTION("zero gradients leave parameters unchanged") {
        ModelParams store;
        auto p = store.add("p", make_tensor({4}, std::vector<double>{1, -2, 3, -4}));
        p->ensure_grad();
        auto before = p->data;
        SgdState opt(0.1, 0.9, 0.0, true);
        opt.step(store);
        opt.step(store);
        REQUIRE(p->data == before);
    }
    SECTION("two Nesterov steps match the hand-unrolled recurrence") {
        ModelParams store;
        auto p = store.add("p", make_tensor({1}, std::vector<double>{2.0}));
        p->ensure_grad();
        const double lr = 0.05, mu = 0.9, g = 0.7;
        SgdState opt(lr, mu, 0.0, true);
        // Hand unroll: v1 = g; x1 = x0 - lr*(g + mu*v1)
        //              v2 = mu*v1 + g; x2 = x1 - lr*(g + mu*v2)
        double v = 0.0, xref = 2.0;
        for (int i = 0; i < 2; ++i) {
            v = mu * v + g;
            xref -= lr * (g + mu * v);
        }
        p->grad[0] = g;
        opt.step(store);
        p->grad[0] = g;
        opt.step(store);
        REQUIRE(p->data[0] == Catch::Approx(xref).margin(1e-12));
    }
    SECTION("weight decay folds into the gradient") {
        ModelParams store;
        auto p = store.add("p", make_tensor({1}, std::vector<double>{2.0}));
        p->ensure_grad();
        SgdState opt(0.1, 0.0, 0.5, false);
        opt.step(store); // g = 0 + 0.5*2 = 1 -> p = 2 - 0.1 = 1.9
        REQUIRE(p->data[0] == Catch::Approx(1.9).epsilon(1e-15));
    }
    SECTION("missing gradient raises") {
        ModelParams store;
        store.add("p", make_tensor({2}, 1.0));
        SgdState opt;
        REQUIRE_THROWS_AS(opt.step(store), OptimError);
    }
}
