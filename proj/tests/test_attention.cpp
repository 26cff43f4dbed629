#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "rfga/attention.hpp"
#include "rfga/grad_check.hpp"

using namespace rfga;

namespace {

const double kSig15 = 1.0 / (1.0 + std::exp(-1.5));  // gate value of a fresh module
const double kSig3 = 1.0 / (1.0 + std::exp(-3.0));

RfgaParams zero_kernel_params(const RfgaConfig& cfg, const Shape& fshape) {
    Prng rng(0);
    RfgaParams p = RfgaParams::init(cfg, fshape, rng);
    p.kernel_h.fill(0.0);
    p.kernel_w.fill(0.0);
    p.kernel_c.fill(0.0);
    return p;
}

struct Forwarded {
    Tensor x_hat;
    AttentionBundle att;
};

Forwarded run_forward(const Tensor& x, RfgaParams& params, const RfgaConfig& cfg, Mode mode) {
    Tape tape;
    const Var xv = tape.leaf(x);
    const RfgaVars rv = lift_rfga(tape, params, false);
    RfgaForward out = rfga_forward(tape, xv, rv, params, cfg, mode);
    return {tape.value(out.calibrated), snapshot_attention(tape, out.attention)};
}

Tensor permute_channels(const Tensor& t, const std::vector<int64_t>& perm, int64_t channel_dim) {
    Tensor out(t.shape());
    const auto strides = row_major_strides(t.shape());
    const int64_t c_stride = strides[static_cast<size_t>(channel_dim)];
    const int64_t c_count = t.dim(channel_dim);
    for (int64_t i = 0; i < t.size(); ++i) {
        const int64_t c = (i / c_stride) % c_count;
        const int64_t base = i - c * c_stride;
        out[base + perm[static_cast<size_t>(c)] * c_stride] = t[i];
    }
    return out;
}

}  // namespace

TEST_CASE("config validation") {
    RfgaConfig cfg;
    cfg.kernel_size = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.kernel_size = 3;
    cfg.views = {false, false, false};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("fresh module with zero kernels gates at sigmoid(0) everywhere") {
    RfgaConfig cfg;
    RfgaParams params = zero_kernel_params(cfg, {3, 4, 5});
    Prng rng(2);
    const Tensor x = oracle::random_tensor({4, 3, 4, 5}, rng);

    for (Mode mode : {Mode::eval, Mode::train}) {
        RfgaParams local = params;
        const Forwarded f = run_forward(x, local, cfg, mode);
        for (const Tensor* z : {&f.att.z_h, &f.att.z_w, &f.att.z_c}) {
            for (int64_t i = 0; i < z->size(); ++i) {
                CHECK((*z)[i] == doctest::Approx(0.5).epsilon(1e-12));
            }
        }
        // m = sigmoid(0.5 + 0.5 + 0.5), residual output = (1 + sigmoid(1.5)) * x
        for (int64_t i = 0; i < f.att.m.size(); ++i) {
            CHECK(std::abs(f.att.m[i] - kSig15) < 1e-9);
        }
        for (int64_t i = 0; i < x.size(); ++i) {
            CHECK(std::abs(f.x_hat[i] - (1.0 + kSig15) * x[i]) < 1e-9);
        }
    }
}

TEST_CASE("constant input gives channel-symmetric gates in eval mode") {
    RfgaConfig cfg;
    Prng rng(3);
    RfgaParams params = RfgaParams::init(cfg, {5, 3, 3}, rng);
    const Tensor x = Tensor::full({2, 5, 3, 3}, 0.7);
    const Forwarded f = run_forward(x, params, cfg, Mode::eval);
    // interior channels see identical conv neighborhoods; borders see the
    // zero padding, so compare the interior band only
    for (int64_t c = 2; c < 4; ++c) {
        CHECK(f.att.z_c[c] == doctest::Approx(f.att.z_c[1]).epsilon(1e-12));
    }
}

TEST_CASE("identity kernel with pass-through normalization composes pooling and sigmoid") {
    RfgaConfig cfg;
    RfgaParams params = zero_kernel_params(cfg, {3, 4, 5});
    params.kernel_h = Tensor({3}, {0, 1, 0});
    Prng rng(4);
    const Tensor x = oracle::random_tensor({2, 3, 4, 5}, rng);
    const Forwarded f = run_forward(x, params, cfg, Mode::eval);

    const double eps_scale = 1.0 / std::sqrt(1.0 + 1e-5);  // fresh eval stats are (0,1)
    for (int64_t n = 0; n < 2; ++n) {
        Tensor per({3, 4, 5});
        std::copy(x.data() + n * 60, x.data() + (n + 1) * 60, per.data());
        const Tensor pooled = oracle::avg_pool(per, View::height);  // [3,4,1]
        for (int64_t i = 0; i < pooled.size(); ++i) {
            const double plain = 1.0 / (1.0 + std::exp(-pooled[i]));
            const double exact = 1.0 / (1.0 + std::exp(-pooled[i] * eps_scale));
            CHECK(std::abs(f.att.z_h[n * 12 + i] - plain) < 1e-5);
            CHECK(std::abs(f.att.z_h[n * 12 + i] - exact) < 1e-12);
        }
    }
}

TEST_CASE("expand_outer_sum: constant gates and the triple-loop oracle") {
    Tape tape;
    const Var zh = tape.leaf(Tensor::full({3, 4, 1}, 0.5));
    const Var zw = tape.leaf(Tensor::full({3, 1, 5}, 0.5));
    const Var zc = tape.leaf(Tensor::full({3, 1, 1}, 0.5));
    const Tensor& m = tape.value(expand_outer_sum(tape, zh, zw, zc));
    CHECK(same_shape(m.shape(), {3, 4, 5}));
    for (int64_t i = 0; i < m.size(); ++i) CHECK(m[i] == doctest::Approx(0.817574).epsilon(1e-6));

    Prng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const Tensor th = oracle::random_tensor({3, 4, 1}, rng, 0.01, 0.99);
        const Tensor tw = oracle::random_tensor({3, 1, 5}, rng, 0.01, 0.99);
        const Tensor tc = oracle::random_tensor({3, 1, 1}, rng, 0.01, 0.99);
        Tape t2;
        const Tensor& got = t2.value(expand_outer_sum(t2, t2.leaf(th), t2.leaf(tw), t2.leaf(tc)));
        CHECK(max_abs_diff(got, oracle::expand_outer_sum(th, tw, tc)) < 1e-12);

        std::set<double> distinct(got.values().begin(), got.values().end());
        CHECK(static_cast<int64_t>(distinct.size()) * 2 >= got.size());
    }

    Tape t3;
    CHECK_THROWS_AS(expand_outer_sum(t3, t3.leaf(Tensor({2, 4, 1})), t3.leaf(Tensor({3, 1, 5})),
                                     std::nullopt),
                    ShapeError);
}

TEST_CASE("expand_outer_sum: single channel view collapses to per-channel constants") {
    Tape tape;
    const Tensor zc({3, 1, 1}, {0.2, 0.5, 0.9});
    const Tensor& m = tape.value(expand_outer_sum(tape, std::nullopt, std::nullopt, tape.leaf(zc)));
    for (int64_t c = 0; c < 3; ++c) {
        CHECK(m[c] == doctest::Approx(1.0 / (1.0 + std::exp(-zc[c]))).epsilon(1e-12));
    }
}

TEST_CASE("calibrate: saturation, annihilation, and the residual envelope") {
    Prng rng(6);
    const Tensor x = oracle::random_tensor({2, 3, 4}, rng, 0.0, 2.0);
    Tape tape;
    const Var xv = tape.leaf(x);
    const Tensor& doubled =
        tape.value(calibrate(tape, xv, tape.leaf(Tensor::ones({2, 3, 4})), true));
    for (int64_t i = 0; i < x.size(); ++i) CHECK(doubled[i] == doctest::Approx(2.0 * x[i]));

    const Var zero = tape.leaf(Tensor({2, 3, 4}));
    const Tensor m = oracle::random_tensor({2, 3, 4}, rng, 0.01, 0.99);
    for (bool residual : {false, true}) {
        const Tensor& out = tape.value(calibrate(tape, zero, tape.leaf(m), residual));
        for (int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
    }

    const Tensor& resid = tape.value(calibrate(tape, xv, tape.leaf(m), true));
    for (int64_t i = 0; i < x.size(); ++i) {
        CHECK(resid[i] >= x[i]);
        CHECK(resid[i] <= 2.0 * x[i]);
    }
}

TEST_CASE("attention bundle stays inside its open bounds") {
    RfgaConfig cfg;
    Prng rng(7);
    RfgaParams params = RfgaParams::init(cfg, {4, 5, 6}, rng);
    const Tensor x = oracle::random_tensor({3, 4, 5, 6}, rng, -2.0, 2.0);
    const Forwarded f = run_forward(x, params, cfg, Mode::train);
    for (const Tensor* z : {&f.att.z_h, &f.att.z_w, &f.att.z_c}) {
        for (int64_t i = 0; i < z->size(); ++i) {
            CHECK((*z)[i] > 0.0);
            CHECK((*z)[i] < 1.0);
        }
    }
    for (int64_t i = 0; i < f.att.m.size(); ++i) {
        CHECK(f.att.m[i] > 0.5);
        CHECK(f.att.m[i] < kSig3);
    }
}

TEST_CASE("fine-grained map is not constant along any axis; channel-only is coarse") {
    Prng rng(8);
    RfgaConfig cfg;
    RfgaParams params = RfgaParams::init(cfg, {4, 5, 6}, rng);
    const Tensor x = oracle::random_tensor({2, 4, 5, 6}, rng);
    const Forwarded f = run_forward(x, params, cfg, Mode::train);
    const Tensor& m = f.att.m;
    const auto strides = row_major_strides(m.shape());
    auto differs_along = [&](int64_t dim) {
        const int64_t stride = strides[static_cast<size_t>(dim)];
        for (int64_t i = 0; i < m.size(); ++i) {
            const int64_t c = (i / stride) % m.dim(dim);
            if (c + 1 < m.dim(dim) && m[i] != m[i + stride]) return true;
        }
        return false;
    };
    CHECK(differs_along(1));
    CHECK(differs_along(2));
    CHECK(differs_along(3));

    RfgaConfig coarse;
    coarse.views = ViewSet::only(View::channel);
    Prng rng2(9);
    RfgaParams cp = RfgaParams::init(coarse, {4, 5, 6}, rng2);
    Tape tape;
    const Var xv = tape.leaf(x);
    const RfgaVars rv = lift_rfga(tape, cp, false);
    RfgaForward out = rfga_forward(tape, xv, rv, cp, coarse, Mode::train);
    const Tensor& mc = tape.value(out.attention.m);  // constant over (h,w) per channel
    CHECK(same_shape(mc.shape(), {2, 4, 1, 1}));
    const Tensor& xh = tape.value(out.calibrated);
    for (int64_t n = 0; n < 2; ++n) {
        for (int64_t c = 0; c < 4; ++c) {
            const double gate = 1.0 + mc[n * 4 + c];
            for (int64_t i = 0; i < 30; ++i) {
                const int64_t off = (n * 4 + c) * 30 + i;
                CHECK(xh[off] == doctest::Approx(gate * x[off]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("residual dominance and non-residual contraction") {
    Prng rng(10);
    RfgaConfig cfg;
    RfgaParams params = RfgaParams::init(cfg, {3, 4, 4}, rng);
    const Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0);

    RfgaParams p1 = params;
    const Forwarded fr = run_forward(x, p1, cfg, Mode::train);
    for (int64_t i = 0; i < x.size(); ++i) {
        const double dx = fr.x_hat[i] - x[i];
        if (x[i] > 0) CHECK(dx > 0);
        if (x[i] < 0) CHECK(dx < 0);
        CHECK(std::abs(dx) <= std::abs(x[i]));
    }

    RfgaConfig nr = cfg;
    nr.residual = false;
    RfgaParams p2 = params;
    const Forwarded fn = run_forward(x, p2, nr, Mode::train);
    for (int64_t i = 0; i < x.size(); ++i) {
        if (x[i] != 0.0) CHECK(std::abs(fn.x_hat[i]) < std::abs(x[i]));
    }
}

TEST_CASE("channel permutation equivariance where the conv structure allows it") {
    Prng rng(11);
    const int64_t C = 6, H = 4, W = 5;
    const Tensor x = oracle::random_tensor({2, C, H, W}, rng);

    // lane-parallel views: any permutation is exact
    RfgaConfig hw;
    hw.views = {false, true, true};
    RfgaParams params = RfgaParams::init(hw, {C, H, W}, rng);
    // nontrivial running stats so the state permutation is actually exercised
    for (BatchNorm* bn : {&params.bn_h, &params.bn_w}) {
        bn->running_mean = oracle::random_tensor(bn->running_mean.shape(), rng, -0.5, 0.5);
        bn->running_var = oracle::random_tensor(bn->running_var.shape(), rng, 0.5, 1.5);
        bn->updates = 1;
    }
    const std::vector<int64_t> perm = {3, 0, 5, 1, 4, 2};

    RfgaParams pp = params;
    pp.bn_h.running_mean = permute_channels(params.bn_h.running_mean, perm, 0);
    pp.bn_h.running_var = permute_channels(params.bn_h.running_var, perm, 0);
    pp.bn_w.running_mean = permute_channels(params.bn_w.running_mean, perm, 0);
    pp.bn_w.running_var = permute_channels(params.bn_w.running_var, perm, 0);

    RfgaParams base = params;
    const Forwarded f = run_forward(x, base, hw, Mode::eval);
    const Forwarded g = run_forward(permute_channels(x, perm, 1), pp, hw, Mode::eval);
    CHECK(max_abs_diff(g.att.z_h, permute_channels(f.att.z_h, perm, 1)) < 1e-12);
    CHECK(max_abs_diff(g.att.z_w, permute_channels(f.att.z_w, perm, 1)) < 1e-12);
    CHECK(max_abs_diff(g.att.m, permute_channels(f.att.m, perm, 1)) < 1e-12);
    CHECK(max_abs_diff(g.x_hat, permute_channels(f.x_hat, perm, 1)) < 1e-12);

    // the channel view mixes adjacent channels, so only neighborhood-preserving
    // permutations are exact there: reversal with a symmetric kernel
    RfgaConfig full;
    RfgaParams fp = RfgaParams::init(full, {C, H, W}, rng);
    fp.kernel_c = Tensor({3}, {0.4, -0.3, 0.4});
    const std::vector<int64_t> rev = {5, 4, 3, 2, 1, 0};
    RfgaParams fpr = fp;
    auto reverse_state = [&](const BatchNorm& src, BatchNorm& dst) {
        dst.running_mean = permute_channels(src.running_mean, rev, 0);
        dst.running_var = permute_channels(src.running_var, rev, 0);
    };
    reverse_state(fp.bn_h, fpr.bn_h);
    reverse_state(fp.bn_w, fpr.bn_w);
    reverse_state(fp.bn_c, fpr.bn_c);

    RfgaParams fp_base = fp;
    const Forwarded a = run_forward(x, fp_base, full, Mode::eval);
    const Forwarded b = run_forward(permute_channels(x, rev, 1), fpr, full, Mode::eval);
    CHECK(max_abs_diff(b.att.z_c, permute_channels(a.att.z_c, rev, 1)) < 1e-12);
    CHECK(max_abs_diff(b.att.m, permute_channels(a.att.m, rev, 1)) < 1e-12);
    CHECK(max_abs_diff(b.x_hat, permute_channels(a.x_hat, rev, 1)) < 1e-12);
}

TEST_CASE("attention_summary fixtures") {
    CHECK_THROWS_AS(attention_summary(Tensor{}), ShapeError);

    const Tensor constant = Tensor::full({3, 2, 2}, 0.4);
    const Tensor s = attention_summary(constant);
    for (int64_t i = 0; i < s.size(); ++i) CHECK(s[i] == doctest::Approx(0.5));

    Prng rng(12);
    const Tensor single = oracle::random_tensor({1, 3, 4}, rng);
    const Tensor n = attention_summary(single);
    CHECK(n.min() == doctest::Approx(0.0));
    CHECK(n.max() == doctest::Approx(1.0));

    const Tensor t = oracle::random_tensor({3, 2, 2}, rng);
    const Tensor got = attention_summary(t);
    Tensor mean({2, 2});
    for (int64_t i = 0; i < 4; ++i) mean[i] = (t[i] + t[4 + i] + t[8 + i]) / 3.0;
    const double lo = mean.min(), hi = mean.max();
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(std::abs(got[i] - (mean[i] - lo) / (hi - lo)) < 1e-12);
    }
}

TEST_CASE("full attention forward passes grad check wrt the input") {
    // the multi-seed parameter sweep lives in the gradients suite
    Prng rng(13);
    RfgaConfig cfg;
    RfgaParams proto = RfgaParams::init(cfg, {3, 4, 4}, rng);
    const Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
    const double err = grad_check(
        [&proto, &cfg](Tape& t, Var v) {
            RfgaParams state = proto;
            const RfgaVars rv = lift_rfga(t, state, false);
            return t.mean_all(rfga_forward(t, v, rv, state, cfg, Mode::train).calibrated);
        },
        x);
    CHECK(err < 1e-4);
}
