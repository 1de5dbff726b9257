#include "doctest.h"

#include "testkit.hpp"

#include "sfl/model.hpp"
#include "sfl/shuffle.hpp"

#include <utility>
#include <cmath>
#include <filesystem>

using namespace sfl;
using namespace sfl::testkit;

namespace {

BackboneParams small_model(std::uint64_t seed, std::array<std::size_t, 3> widths = {4, 6, 8}) {
    ModelConfig mc;
    mc.widths = widths;
    mc.theta_dim = 5;
    Rng rng(seed);
    return BackboneParams::init(mc, rng);
}

Batch toy_batch(std::uint64_t seed) {
    Rng rng(seed);
    Batch b;
    b.images = random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
    b.labels = Tensor({2, 2}, std::vector<double>{1, 0, 0, 1});
    b.ids = {0, 1};
    return b;
}

}  // namespace

TEST_CASE("forward: centered-zero input with zero biases gives zero logits") {
    const BackboneParams p = small_model(1);
    const ForwardResult f = forward_classify(p, Tensor({3, 1, 16, 16}, kInputShift));
    for (double v : f.logits.data()) CHECK(v == 0.0);
    CHECK(f.class_features.shape() == Shape{3, 2, 2, 2});
    CHECK(f.hidden.shape() == Shape{3, 14, 2, 2});
}

TEST_CASE("forward: duplicated rows give identical logits") {
    const BackboneParams p = small_model(2);
    Rng rng(3);
    const Tensor one = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
    Tensor two({2, 1, 16, 16});
    std::copy(one.data().begin(), one.data().end(), two.raw());
    std::copy(one.data().begin(), one.data().end(), two.raw() + 256);
    const ForwardResult f = forward_classify(p, two);
    CHECK(f.logits(0, 0) == f.logits(1, 0));
    CHECK(f.logits(0, 1) == f.logits(1, 1));
}

TEST_CASE("forward: equals the loop-oracle composition exactly") {
    Rng init(4);
    const BackboneParams p = BackboneParams::init(ModelConfig{}, init);
    Rng rng(5);
    const Tensor x = random_tensor({2, 1, 32, 32}, rng, 0.0, 1.0);
    const ForwardResult f = forward_classify(p, x);
    const OracleForward o = oracle_forward(p, x);
    CHECK(bitwise_equal(f.logits, o.logits));
    CHECK(bitwise_equal(f.class_features, o.class_features));
}

TEST_CASE("forward: permutation equivariance") {
    const BackboneParams p = small_model(6);
    Rng rng(7);
    const Tensor x = random_tensor({3, 1, 16, 16}, rng, 0.0, 1.0);
    Tensor y(x.shape());
    const std::size_t order[] = {2, 0, 1};
    for (std::size_t i = 0; i < 3; ++i) std::copy_n(x.raw() + order[i] * 256, 256, y.raw() + i * 256);
    const ForwardResult fx = forward_classify(p, x), fy = forward_classify(p, y);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 2; ++k) CHECK(fy.logits(i, k) == fx.logits(order[i], k));
}

TEST_CASE("forward: rejects sizes not divisible by 8") {
    const BackboneParams p = small_model(8);
    CHECK_THROWS_AS(forward_classify(p, Tensor({1, 1, 12, 16})), std::invalid_argument);
    CHECK_THROWS_AS(forward_classify(p, Tensor({1, 3, 16, 16})), std::invalid_argument);
}

TEST_CASE("train_step: identical mixed batch gives equal twin losses") {
    BackboneParams p = small_model(9);
    const Batch b = toy_batch(10);
    Rng rng(11);
    const MixedBatch m = shuffle_batch(b, 4, 0.0, rng, ShuffleVariant::independent);
    AdamState st = AdamState::for_params(std::as_const(p).trainable());
    const StepLosses l = train_step(p, b, m, st, AdamConfig{});
    CHECK(std::abs(l.mixed - l.orig) <= 1e-12);
    CHECK(l.total == l.orig + l.mixed);
}

TEST_CASE("train_step: zero learning rate leaves params unchanged") {
    BackboneParams p = small_model(12);
    const BackboneParams keep = p;
    const Batch b = toy_batch(13);
    Rng rng(14);
    const MixedBatch m = shuffle_batch(b, 4, 0.5, rng, ShuffleVariant::independent);
    AdamState st = AdamState::for_params(std::as_const(p).trainable());
    AdamConfig cfg;
    cfg.lr = 0.0;
    train_step(p, b, m, st, cfg);
    const auto a = p.trainable();
    const auto k = keep.trainable();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(*a[i], *k[i]));
}

TEST_CASE("train_step: overfits a two-sample batch") {
    BackboneParams p = small_model(15);
    const Batch b = toy_batch(16);
    Rng rng(17);
    const MixedBatch m = shuffle_batch(b, 4, 0.5, rng, ShuffleVariant::independent);
    AdamState st = AdamState::for_params(std::as_const(p).trainable());
    AdamConfig cfg;
    cfg.lr = 1e-2;
    std::vector<double> losses;
    for (int i = 0; i < 50; ++i) losses.push_back(train_step(p, b, m, st, cfg).total);
    int rises = 0;
    for (std::size_t i = 1; i < losses.size(); ++i) rises += losses[i] > losses[i - 1];
    CHECK(rises <= 5);
    CHECK(losses.back() < 0.5 * losses.front());
}

TEST_CASE("train_step: non-finite loss aborts with the sample ids") {
    BackboneParams p = small_model(18);
    p.cls_b[0] = NAN;
    const BackboneParams keep = p;
    Batch b = toy_batch(19);
    b.ids = {41, 42};
    Rng rng(20);
    const MixedBatch m = shuffle_batch(b, 4, 0.5, rng, ShuffleVariant::independent);
    AdamState st = AdamState::for_params(std::as_const(p).trainable());
    try {
        train_step(p, b, m, st, AdamConfig{});
        FAIL("expected NonFiniteLoss");
    } catch (const NonFiniteLoss& e) {
        CHECK(e.sample_ids() == std::vector<std::size_t>{41, 42});
        CHECK(std::string(e.what()).find("41") != std::string::npos);
    }
    CHECK(bitwise_equal(p.conv1_w, keep.conv1_w));
    CHECK(st.step == 0);
}

TEST_CASE("cam_extract") {
    Tensor f({3, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) f[4 + i] = double(i + 1);
    const Tensor c1 = cam_extract(f, 1);
    CHECK(c1.shape() == Shape{2, 2});
    CHECK(c1(1, 1) == 4.0);
    CHECK(cam_extract(f, 0)(0, 0) == 0.0);

    const Tensor same({2, 2, 2}, 0.5);
    CHECK(bitwise_equal(cam_extract(same, 0), cam_extract(same, 1)));
    CHECK_THROWS_AS(cam_extract(f, 3), std::out_of_range);

    // Channel c of the head equals a plain 1x1 convolution loop.
    Rng init(21);
    const BackboneParams p = BackboneParams::init(ModelConfig{}, init);
    Rng rng(22);
    const Tensor x = random_tensor({1, 1, 32, 32}, rng, 0.0, 1.0);
    const ForwardResult fr = forward_classify(p, x);
    const OracleForward o = oracle_forward(p, x);
    const Tensor stack = fr.class_features.reshaped({2, 4, 4});
    for (std::size_t c = 0; c < 2; ++c) {
        const Tensor cam = cam_extract(stack, c);
        for (std::size_t i = 0; i < 16; ++i) CHECK(cam[i] == o.class_features[c * 16 + i]);
    }
}

TEST_CASE("pcm_affinity examples") {
    // All pixels identical, theta = identity.
    Tensor x({3, 2, 2});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 4; ++i) x[c * 4 + i] = double(c) - 0.7;
    Tensor eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0;
    const Tensor same = pcm_affinity(x, eye);
    for (double v : same.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-7));

    // Two pixels with orthogonal features.
    const Tensor orth({2, 1, 2}, std::vector<double>{1, 0, 0, 1});
    Tensor eye2({2, 2});
    eye2(0, 0) = eye2(1, 1) = 1.0;
    const Tensor a = pcm_affinity(orth, eye2);
    CHECK(a(0, 1) == 0.0);
    CHECK(a(1, 0) == 0.0);
    CHECK(a(0, 0) == doctest::Approx(1.0).epsilon(1e-7));

    // Random 2x2 map against the per-pair scalar cosine.
    Rng rng(23);
    const Tensor xr = random_tensor({4, 2, 2}, rng), th = random_tensor({3, 4}, rng);
    const Tensor ar = pcm_affinity(xr, th);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(std::abs(ar(i, j) - scalar_cosine_affinity(xr, th, i, j)) <= 1e-12);
            CHECK(std::abs(ar(i, j) - ar(j, i)) <= 1e-12);
            CHECK(ar(i, j) >= 0.0);
        }
    for (std::size_t i = 0; i < 4; ++i) CHECK(ar(i, i) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("pcm_refine examples") {
    Rng rng(24);
    const Tensor y = random_tensor({2, 2, 2}, rng);
    Tensor eye({4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0;
    CHECK(bitwise_equal(pcm_refine(y, eye), relu(y)));

    const Tensor a = random_tensor({4, 4}, rng, 0.0, 1.0);
    Tensor c({2, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) {
        c[i] = 0.3;
        c[4 + i] = 2.0;
    }
    CHECK(bitwise_equal(pcm_refine(c, a), c));

    const Tensor yp = pcm_refine(y, a), oracle = loop_pcm_refine(y, a);
    const Tensor ry = relu(y);
    for (std::size_t k = 0; k < 2; ++k) {
        const double lo = *std::min_element(ry.data().begin() + 4 * k, ry.data().begin() + 4 * k + 4);
        const double hi = *std::max_element(ry.data().begin() + 4 * k, ry.data().begin() + 4 * k + 4);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(std::abs(yp[4 * k + i] - oracle[4 * k + i]) <= 1e-12);
            CHECK(yp[4 * k + i] >= lo);
            CHECK(yp[4 * k + i] <= hi);
        }
    }
    // An all-zero affinity row acts as an identity row.
    Tensor z({4, 4});
    CHECK(bitwise_equal(pcm_refine(y, z), relu(y)));
    CHECK_THROWS_AS(pcm_refine(y, Tensor({4, 4}, -1.0)), std::invalid_argument);
    CHECK_THROWS_AS(pcm_refine(y, Tensor({3, 3})), std::invalid_argument);
}

TEST_CASE("pcm suite on a few hundred cases") {
    const SuiteResult r = pcm_suite(300);
    INFO(r.detail);
    CHECK(r.pass);
}

TEST_CASE("standardize_features") {
    Rng rng(25);
    Tensor h = random_tensor({3, 4, 4}, rng);
    for (std::size_t i = 0; i < 16; ++i) h[32 + i] = 0.25;
    const Tensor s = standardize_features(h);
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < 16; ++i) mean += s[c * 16 + i];
        mean /= 16.0;
        for (std::size_t i = 0; i < 16; ++i) var += (s[c * 16 + i] - mean) * (s[c * 16 + i] - mean);
        CHECK(std::abs(mean) < 1e-12);
        CHECK(std::abs(var / 16.0 - 1.0) < 1e-12);
    }
    for (std::size_t i = 0; i < 16; ++i) CHECK(s[32 + i] == 0.0);
}

TEST_CASE("infer_cams: zero head gives zero CAMs") {
    BackboneParams p = small_model(26);
    p.cls_w.fill(0.0);
    Rng rng(27);
    const CamStack st = infer_cams(p, random_tensor({1, 16, 16}, rng, 0.0, 1.0));
    for (double v : st.raw_cam.data()) CHECK(v == 0.0);
    for (double v : st.refined_cam.data()) CHECK(v == 0.0);
    CHECK(st.raw_cam.shape() == st.refined_cam.shape());
}

TEST_CASE("infer_cams: duplicated image gives identical stacks") {
    const BackboneParams p = small_model(28);
    Rng rng(29);
    const Tensor img = random_tensor({1, 16, 16}, rng, 0.0, 1.0);
    const CamStack a = infer_cams(p, img), b = infer_cams(p, Tensor(img));
    CHECK(bitwise_equal(a.raw_cam, b.raw_cam));
    CHECK(bitwise_equal(a.refined_cam, b.refined_cam));
    CHECK(bitwise_equal(a.features, b.features));
    CHECK(bitwise_equal(a.logits, b.logits));
}

TEST_CASE("checkpoint round trip and hash check") {
    const BackboneParams p = small_model(30);
    const auto path = std::filesystem::temp_directory_path() / "sfl_unit_ckpt.bin";
    save_checkpoint(path, p, 0xabcdefULL);
    const BackboneParams q = load_checkpoint(path, 0xabcdefULL);
    CHECK(q.config == p.config);
    const auto a = p.named();
    const auto b = q.named();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(*a[i].second, *b[i].second));
    CHECK_THROWS(load_checkpoint(path, 0xabcdeeULL));
}
