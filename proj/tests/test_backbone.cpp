#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rfga/backbone.hpp"

using namespace rfga;

namespace {

const double kGate = 1.0 + 1.0 / (1.0 + std::exp(-1.5));

Tensor random_images(int64_t n, int64_t size, Prng& rng) {
    return oracle::random_tensor({n, 3, size, size}, rng, 0.0, 1.0);
}

std::vector<TrainExample> wrap(const std::vector<Tensor>& images, const std::vector<int32_t>& labels) {
    std::vector<TrainExample> out(images.size());
    for (size_t i = 0; i < images.size(); ++i) out[i] = {&images[i], labels[i]};
    return out;
}

}  // namespace

TEST_CASE("init validates its configuration") {
    Prng rng(0);
    CHECK_THROWS_AS(BackboneParams::init(1, 64, std::nullopt, rng), ConfigError);
    CHECK_THROWS_AS(BackboneParams::init(4, 60, std::nullopt, rng), ConfigError);
}

TEST_CASE("logits equal the spatial mean of score maps, and the head commutes with GAP") {
    Prng rng(1);
    BackboneParams params = BackboneParams::init(5, 16, std::nullopt, rng);
    const Tensor images = random_images(3, 16, rng);
    Tape tape;
    ForwardResult fwd = forward_classify(tape, tape.leaf(images), params, Mode::eval, false);
    const Tensor& logits = tape.value(fwd.logits);
    const Tensor& maps = tape.value(fwd.score_maps);
    const Tensor& feats = tape.value(fwd.calibrated);
    const int64_t s = params.map_size(), hw = s * s;

    for (int64_t n = 0; n < 3; ++n) {
        for (int64_t k = 0; k < 5; ++k) {
            double mean = 0;
            for (int64_t i = 0; i < hw; ++i) mean += maps[(n * 5 + k) * hw + i];
            mean /= static_cast<double>(hw);
            CHECK(std::abs(logits[n * 5 + k] - mean) < 1e-12);

            // head applied to pooled features gives the same logit (CAM identity)
            double pooled_logit = 0;
            for (int64_t c = 0; c < 64; ++c) {
                double f = 0;
                for (int64_t i = 0; i < hw; ++i) f += feats[(n * 64 + c) * hw + i];
                pooled_logit += params.head_w[k * 64 + c] * (f / static_cast<double>(hw));
            }
            CHECK(std::abs(logits[n * 5 + k] - pooled_logit) < 1e-12);
        }
    }
}

TEST_CASE("zero head gives zero logits and a uniform softmax") {
    Prng rng(2);
    BackboneParams params = BackboneParams::init(8, 16, std::nullopt, rng);
    params.head_w.fill(0.0);
    const Tensor images = random_images(2, 16, rng);
    Tape tape;
    ForwardResult fwd = forward_classify(tape, tape.leaf(images), params, Mode::eval, false);
    const Tensor& logits = tape.value(fwd.logits);
    for (int64_t i = 0; i < logits.size(); ++i) CHECK(logits[i] == 0.0);
    const Var loss = tape.softmax_cross_entropy(fwd.logits, {0, 7});
    CHECK(tape.value(loss)[0] == doctest::Approx(std::log(8.0)));
}

TEST_CASE("a fresh zero-kernel attention module scales score maps by a constant gate") {
    Prng rng(3);
    BackboneParams plain = BackboneParams::init(4, 16, std::nullopt, rng);

    RfgaConfig cfg;  // residual, triple view
    Prng rng2(99);
    BackboneParams with = BackboneParams::init(4, 16, cfg, rng2);
    with.block1 = plain.block1;
    with.block2 = plain.block2;
    with.block3 = plain.block3;
    with.head_w = plain.head_w;
    with.rfga->kernel_h.fill(0.0);
    with.rfga->kernel_w.fill(0.0);
    with.rfga->kernel_c.fill(0.0);

    Prng rng3(4);
    const Tensor images = random_images(2, 16, rng3);
    Tape t1, t2;
    const Tensor& maps_plain =
        t1.value(forward_classify(t1, t1.leaf(images), plain, Mode::eval, false).score_maps);
    const Tensor& maps_gated =
        t2.value(forward_classify(t2, t2.leaf(images), with, Mode::eval, false).score_maps);
    for (int64_t i = 0; i < maps_plain.size(); ++i) {
        CHECK(maps_gated[i] == doctest::Approx(kGate * maps_plain[i]).epsilon(1e-9));
    }
}

TEST_CASE("cam: selector head, linearity, bounds, and the dot-product oracle") {
    Prng rng(5);
    BackboneParams params = BackboneParams::init(4, 16, std::nullopt, rng);
    const Tensor images = random_images(2, 16, rng);

    // selector head: class 2 reads feature channel 7 verbatim
    params.head_w.fill(0.0);
    params.head_w[2 * 64 + 7] = 1.0;
    Tape tape;
    ForwardResult fwd = forward_classify(tape, tape.leaf(images), params, Mode::eval, false);
    const Tensor& feats = tape.value(fwd.calibrated);
    const Tensor& maps = tape.value(fwd.score_maps);
    const int64_t s = params.map_size(), hw = s * s;
    const ActivationMap am = cam(maps, 1, 2);
    CHECK(am.class_idx == 2);
    CHECK(am.image_id == 1);
    for (int64_t i = 0; i < hw; ++i) {
        CHECK(am.map[i] == doctest::Approx(feats[(1 * 64 + 7) * hw + i]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(cam(maps, 0, 4), std::out_of_range);
    CHECK_THROWS_AS(cam(maps, 2, 0), std::out_of_range);

    // random head: cam equals the per-pixel dot product with the head row;
    // and the head is linear, so cam(A+B) = cam(A) + cam(B)
    Prng rng2(6);
    const Tensor head_a = oracle::random_tensor({4, 64, 1, 1}, rng2);
    const Tensor head_b = oracle::random_tensor({4, 64, 1, 1}, rng2);
    auto maps_for = [&](const Tensor& head) {
        BackboneParams p2 = params;
        p2.head_w = head;
        Tape t;
        return t.value(forward_classify(t, t.leaf(images), p2, Mode::eval, false).score_maps);
    };
    const Tensor ma = maps_for(head_a), mb = maps_for(head_b);
    Tensor head_sum = head_a;
    for (int64_t i = 0; i < head_sum.size(); ++i) head_sum[i] += head_b[i];
    const Tensor msum = maps_for(head_sum);
    for (int64_t i = 0; i < msum.size(); ++i) {
        CHECK(msum[i] == doctest::Approx(ma[i] + mb[i]).epsilon(1e-9));
    }
    const ActivationMap oracle_cam = cam(ma, 0, 3);
    for (int64_t y = 0; y < s; ++y) {
        for (int64_t x = 0; x < s; ++x) {
            double dot = 0;
            for (int64_t c = 0; c < 64; ++c) dot += head_a[3 * 64 + c] * feats[(0 * 64 + c) * hw + y * s + x];
            CHECK(std::abs(oracle_cam.map(y, x) - dot) < 1e-12);
        }
    }
}

TEST_CASE("train_epoch: frozen optimizer, loss decrease, determinism, aborts") {
    Prng rng(7);
    std::vector<Tensor> images;
    std::vector<int32_t> labels;
    for (int i = 0; i < 8; ++i) {
        images.push_back(oracle::random_tensor({3, 16, 16}, rng, 0.0, 1.0));
        labels.push_back(i % 4);
    }
    const auto data = wrap(images, labels);

    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 5;
    cfg.seed = 1;

    SUBCASE("lr = 0 leaves parameters untouched") {
        cfg.lr = 0.0;
        Prng init(11);
        BackboneParams params = BackboneParams::init(4, 16, std::nullopt, init);
        const BackboneParams before = params;
        SgdMomentum opt;
        const EpochStats st = train_epoch(data, params, cfg, 0, opt);
        CHECK(std::isfinite(st.mean_loss));
        BackboneParams snapshot = before;
        auto now = params.trainable();
        auto then = snapshot.trainable();
        for (size_t i = 0; i < now.size(); ++i) {
            CHECK(max_abs_diff(*now[i].second, *then[i].second) == 0.0);
        }
    }

    SUBCASE("loss decreases over five epochs on a learnable toy set") {
        cfg.lr = 0.01;
        Prng init(12);
        BackboneParams params = BackboneParams::init(4, 16, std::nullopt, init);
        SgdMomentum opt;
        std::vector<double> losses;
        for (int e = 0; e < 5; ++e) losses.push_back(train_epoch(data, params, cfg, e, opt).mean_loss);
        for (size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 1]);
    }

    SUBCASE("same seed twice gives bitwise-identical loss trajectories") {
        cfg.lr = 0.01;
        auto run = [&]() {
            Prng init(13);
            BackboneParams params = BackboneParams::init(4, 16, std::nullopt, init);
            SgdMomentum opt;
            std::vector<double> losses;
            for (int e = 0; e < 3; ++e) {
                losses.push_back(train_epoch(data, params, cfg, e, opt).mean_loss);
            }
            return losses;
        };
        const auto a = run(), b = run();
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }

    SUBCASE("non-finite loss aborts with diagnostics") {
        cfg.lr = 0.01;
        Prng init(14);
        BackboneParams params = BackboneParams::init(4, 16, std::nullopt, init);
        params.head_w[0] = std::nan("");  // poisons the logits past the relu clamp
        SgdMomentum opt;
        CHECK_THROWS_AS(train_epoch(data, params, cfg, 0, opt), ContractError);
    }

    SUBCASE("configuration errors") {
        cfg.batch_size = 1;
        Prng init(15);
        BackboneParams params = BackboneParams::init(4, 16, std::nullopt, init);
        SgdMomentum opt;
        CHECK_THROWS_AS(train_epoch(data, params, cfg, 0, opt), ConfigError);
        cfg.batch_size = 8;
        cfg.lr = -1.0;
        CHECK_THROWS_AS(train_epoch(data, params, cfg, 0, opt), ConfigError);
    }
}

TEST_CASE("lr schedule decays by the configured factor every period") {
    TrainConfig cfg;
    cfg.lr = 0.01;
    cfg.lr_decay = 0.1;
    cfg.lr_decay_period = 15;
    CHECK(cfg.lr_at(0) == doctest::Approx(0.01));
    CHECK(cfg.lr_at(14) == doctest::Approx(0.01));
    CHECK(cfg.lr_at(15) == doctest::Approx(0.001));
    CHECK(cfg.lr_at(44) == doctest::Approx(0.0001));
}

TEST_CASE("top1_accuracy: constructions and chance level") {
    Prng rng(16);
    std::vector<Tensor> images;
    std::vector<int32_t> labels;
    for (int i = 0; i < 40; ++i) {
        images.push_back(oracle::random_tensor({3, 16, 16}, rng, 0.0, 1.0));
        labels.push_back(i % 10);
    }

    // chance level: untrained nets over several seeds stay near 1/10
    double acc_sum = 0;
    for (uint64_t seed = 0; seed < 8; ++seed) {
        Prng init(seed);
        BackboneParams params = BackboneParams::init(10, 16, std::nullopt, init);
        acc_sum += top1_accuracy(wrap(images, labels), params);
    }
    const double mean_acc = acc_sum / 8.0;
    CHECK(mean_acc > 0.02);
    CHECK(mean_acc < 0.25);

    // label constructions: predictions themselves -> 1.0, anything else -> 0.0
    Prng init(3);
    BackboneParams params = BackboneParams::init(10, 16, std::nullopt, init);
    const auto data = wrap(images, labels);
    const auto [logits, maps] = eval_forward(data, params);
    std::vector<int32_t> matched(labels.size()), complent(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        const int32_t pred = static_cast<int32_t>(argmax_lowest(logits, static_cast<int64_t>(i)));
        matched[i] = pred;
        complent[i] = (pred + 1) % 10;
    }
    CHECK(top1_accuracy(wrap(images, matched), params) == doctest::Approx(1.0));
    CHECK(top1_accuracy(wrap(images, complent), params) == doctest::Approx(0.0));

    CHECK_THROWS_AS(top1_accuracy({}, params), ContractError);
}

TEST_CASE("shifting the input by 8 pixels shifts the CAM by one interior cell") {
    Prng rng(17);
    BackboneParams params = BackboneParams::init(4, 64, std::nullopt, rng);
    Tensor img = oracle::random_tensor({3, 64, 64}, rng, 0.0, 1.0);
    Tensor shifted = Tensor::full({3, 64, 64}, 0.5);
    for (int64_t c = 0; c < 3; ++c) {
        for (int64_t y = 0; y < 64; ++y) {
            for (int64_t x = 8; x < 64; ++x) shifted(c, y, x) = img(c, y, x - 8);
        }
    }
    auto cam_for = [&](const Tensor& im) {
        Tape t;
        Shape b = im.shape();
        b.insert(b.begin(), 1);
        ForwardResult fwd =
            forward_classify(t, t.leaf(im.reshaped(b)), params, Mode::eval, false);
        return cam(t.value(fwd.score_maps), 0, 0).map;
    };
    const Tensor base = cam_for(img);
    const Tensor moved = cam_for(shifted);
    for (int64_t r = 3; r <= 4; ++r) {
        for (int64_t c = 3; c <= 3; ++c) {
            CHECK(std::abs(moved(r, c + 1) - base(r, c)) < 1e-12);
        }
    }
}
