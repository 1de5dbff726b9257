#include "doctest.h"

#include "testkit.hpp"

#include "sfl/ops.hpp"
#include "sfl/tensor.hpp"

#include <cmath>
#include <numbers>

using namespace sfl;
using namespace sfl::testkit;

TEST_CASE("tensor shape and indexing") {
    Tensor t({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
    CHECK(t.size() == 6);
    CHECK(t(1, 2) == 5.0);
    CHECK(t.reshaped({3, 2})(2, 0) == 4.0);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
    CHECK_THROWS(t.reshaped({4, 2}));
    CHECK(shape_str({1, 2, 3}) == "[1,2,3]");
}

TEST_CASE("conv2d identity kernel and zero kernel") {
    Rng rng(11);
    const Tensor x = random_tensor({1, 1, 3, 3}, rng);
    CHECK(bitwise_equal(conv2d(x, Tensor({1, 1, 1, 1}, 1.0), Tensor({1}), 1, 0), x));

    const Tensor y = conv2d(random_tensor({2, 2, 5, 5}, rng), Tensor({3, 2, 3, 3}), Tensor({3}, 0.75), 1, 1);
    for (double v : y.data()) CHECK(v == 0.75);
}

TEST_CASE("conv2d equals the loop reference bitwise") {
    Rng rng(12);
    const Tensor x = random_tensor({1, 2, 4, 4}, rng);
    const Tensor k = random_tensor({3, 2, 3, 3}, rng);
    const Tensor b = random_tensor({3}, rng);
    CHECK(bitwise_equal(conv2d(x, k, b, 1, 1), naive_conv2d(x, k, b, 1, 1)));

    for (int s = 0; s < 40; ++s) {
        const std::size_t c = 1 + uniform_index(rng, 5), kk = 1 + uniform_index(rng, 9);
        const std::size_t h = 3 + uniform_index(rng, 20), w = 3 + uniform_index(rng, 20);
        const Tensor xi = random_tensor({1 + uniform_index(rng, 3), c, h, w}, rng);
        const Tensor ki = random_tensor({kk, c, 3, 3}, rng);
        const Tensor bi = random_tensor({kk}, rng);
        CHECK(bitwise_equal(conv2d(xi, ki, bi, 1, 1), naive_conv2d(xi, ki, bi, 1, 1)));
        CHECK(bitwise_equal(conv2d(xi, ki, bi, 1, 0), naive_conv2d(xi, ki, bi, 1, 0)));
    }
    const Tensor x2 = random_tensor({1, 2, 5, 5}, rng);
    CHECK(bitwise_equal(conv2d(x2, k, b, 2, 1), naive_conv2d(x2, k, b, 2, 1)));
}

TEST_CASE("conv2d rejects bad shapes") {
    CHECK_THROWS_AS(conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3}), Tensor({1})), std::invalid_argument);
    CHECK_THROWS_AS(conv2d(Tensor({1, 1, 4, 4}), Tensor({1, 1, 3, 3}), Tensor({1}), 2, 0), std::invalid_argument);
    CHECK_THROWS_AS(conv2d(Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 3}), Tensor({1})), std::invalid_argument);
    CHECK_THROWS_AS(conv2d(Tensor({1, 1, 4, 4}), Tensor({1, 1, 3, 3}), Tensor({2})), std::invalid_argument);
    CHECK_THROWS_AS(conv2d_backward(Tensor({1, 1, 4, 4}), Tensor({1, 1, 3, 3}), Tensor({1, 1, 4, 4})),
                    std::invalid_argument);
}

TEST_CASE("conv2d_backward trivial cases") {
    Rng rng(13);
    const Tensor x = random_tensor({2, 2, 4, 4}, rng);
    const Tensor k = random_tensor({3, 2, 3, 3}, rng);
    const ConvGrads z = conv2d_backward(x, k, Tensor({2, 3, 4, 4}), 1, 1);
    for (const Tensor* t : {&z.kernel, &z.bias, &z.input})
        for (double v : t->data()) CHECK(v == 0.0);

    const Tensor up = random_tensor({1, 1, 3, 3}, rng);
    const ConvGrads id = conv2d_backward(random_tensor({1, 1, 3, 3}, rng), Tensor({1, 1, 1, 1}, 1.0), up);
    CHECK(bitwise_equal(id.input, up));
}

TEST_CASE("relu forward and backward") {
    const Tensor neg({4}, std::vector<double>{-1, -2, -0.5, -3});
    const Tensor r = relu(neg);
    for (double v : r.data()) CHECK(v == 0.0);
    const Tensor pos({3}, std::vector<double>{1, 2, 0.5});
    CHECK(bitwise_equal(relu(pos), pos));
    const Tensor g = relu_backward(Tensor({3}, std::vector<double>{-1, 0, 2}), Tensor({3}, 5.0));
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
    CHECK(g[2] == 5.0);
}

TEST_CASE("global average pool") {
    CHECK(global_avg_pool(Tensor({1, 1, 3, 2}, 1.25))[0] == 1.25);
    CHECK(global_avg_pool(Tensor({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}))[0] == 2.5);
    Rng rng(14);
    const Tensor x = random_tensor({2, 3, 5, 4}, rng);
    CHECK(bitwise_equal(global_avg_pool(x), naive_global_avg_pool(x)));
    const Tensor p = random_tensor({2, 3, 4, 6}, rng);
    CHECK(bitwise_equal(avg_pool2(p), naive_avg_pool2(p)));
}

TEST_CASE("linear") {
    Rng rng(15);
    const Tensor x = random_tensor({3, 4}, rng);
    Tensor eye({4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0;
    CHECK(bitwise_equal(linear(x, eye, Tensor({4})), x));

    const Tensor b({2}, std::vector<double>{0.5, -1.5});
    const Tensor y = linear(x, Tensor({2, 4}), b);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(y(i, 0) == 0.5);
        CHECK(y(i, 1) == -1.5);
    }
    const Tensor w = random_tensor({5, 4}, rng);
    const Tensor bb = random_tensor({5}, rng);
    CHECK(bitwise_equal(linear(x, w, bb), naive_linear(x, w, bb)));
    CHECK_THROWS_AS(linear(x, Tensor({2, 3}), Tensor({2})), std::invalid_argument);
}

TEST_CASE("multilabel soft margin loss") {
    const Tensor zeros({3, 2});
    Rng rng(16);
    const LossResult l = multilabel_soft_margin_loss(zeros, random_tensor({3, 2}, rng, 0.0, 1.0));
    CHECK(l.loss == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
    CHECK(std::abs(l.loss - 0.693147) < 1e-6);

    const Tensor logits = random_tensor({4, 3}, rng, -4.0, 4.0);
    Tensor targets(logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i) targets[i] = sigmoid(logits[i]);
    const auto stationary = multilabel_soft_margin_loss(logits, targets);
    for (double g : stationary.grad.data()) CHECK(g == 0.0);

    const Tensor t = random_tensor(logits.shape(), rng, 0.0, 1.0);
    CHECK(std::abs(multilabel_soft_margin_loss(logits, t).loss - naive_soft_margin(logits, t)) < 1e-12);
    CHECK_THROWS_AS(multilabel_soft_margin_loss(logits, Tensor(logits.shape(), 1.5)), std::invalid_argument);
    CHECK_THROWS_AS(multilabel_soft_margin_loss(logits, Tensor(logits.shape(), -0.1)), std::invalid_argument);
}

TEST_CASE("multilabel soft margin loss stays finite for large logits") {
    const Tensor logits({1, 2}, std::vector<double>{800.0, -800.0});
    const LossResult l = multilabel_soft_margin_loss(logits, Tensor({1, 2}, std::vector<double>{0.0, 1.0}));
    CHECK(std::isfinite(l.loss));
    CHECK(l.grad.all_finite());
}

TEST_CASE("adam: zero gradient leaves params unchanged") {
    Tensor p({3}, std::vector<double>{1, -2, 3});
    const Tensor keep = p;
    std::vector<Tensor*> ps{&p};
    AdamState st = AdamState::for_params(std::vector<const Tensor*>{&p});
    adam_step(ps, std::vector<Tensor>{Tensor({3})}, st, AdamConfig{});
    CHECK(bitwise_equal(p, keep));
    CHECK(st.step == 1);
}

TEST_CASE("adam: first step moves by about lr") {
    Tensor p({1}, 0.0);
    std::vector<Tensor*> ps{&p};
    AdamState st = AdamState::for_params(std::vector<const Tensor*>{&p});
    AdamConfig cfg;
    cfg.lr = 0.1;
    adam_step(ps, std::vector<Tensor>{Tensor({1}, 1.0)}, st, cfg);
    CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("adam: three steps on x^2 follow the reference") {
    // x0 = 1, gradient 2x, lr 0.1, default betas and eps.
    const double expected[] = {0.9000000005, 0.8004122286917928, 0.7015862729460303};
    Tensor p({1}, 1.0);
    std::vector<Tensor*> ps{&p};
    AdamState st = AdamState::for_params(std::vector<const Tensor*>{&p});
    AdamConfig cfg;
    cfg.lr = 0.1;
    for (double e : expected) {
        adam_step(ps, std::vector<Tensor>{Tensor({1}, 2.0 * p[0])}, st, cfg);
        CHECK(std::abs(p[0] - e) < 1e-12);
    }
    CHECK(st.step == 3);
    CHECK_THROWS_AS(adam_step(ps, std::vector<Tensor>{Tensor({2})}, st, cfg), std::invalid_argument);
}

TEST_CASE("gradient suite on a few seeds") {
    const SuiteResult r = gradient_suite(4);
    INFO(r.detail);
    CHECK(r.pass);
    CHECK(r.checks > 0);
}

TEST_CASE("no public op emits non-finite values for finite input") {
    Rng rng(17);
    const Tensor x = random_tensor({2, 3, 8, 8}, rng, -1e3, 1e3);
    const Tensor k = random_tensor({4, 3, 3, 3}, rng);
    const Tensor y = conv2d(x, k, Tensor({4}), 1, 1);
    CHECK(y.all_finite());
    CHECK(conv2d_backward(x, k, y, 1, 1).input.all_finite());
    CHECK(avg_pool2(relu(y)).all_finite());
    CHECK(global_avg_pool(y).all_finite());
    CHECK(multilabel_soft_margin_loss(global_avg_pool(y), Tensor({2, 4}, 1.0)).grad.all_finite());
}
