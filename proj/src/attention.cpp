#include "rfga/attention.hpp"

#include <cmath>

namespace rfga {

void RfgaConfig::validate() const {
    if (kernel_size < 1 || kernel_size % 2 == 0) {
        throw ConfigError("attention kernel size must be odd and positive, got " +
                          std::to_string(kernel_size));
    }
    if (views.count() == 0) throw ConfigError("at least one attention view must be enabled");
}

RfgaParams RfgaParams::init(const RfgaConfig& cfg, const Shape& feature_shape, Prng& rng) {
    cfg.validate();
    if (feature_shape.size() != 3) {
        throw ShapeError("attention feature shape must be [C,H,W], got " + shape_str(feature_shape));
    }
    const int64_t c = feature_shape[0], h = feature_shape[1], w = feature_shape[2];
    const int64_t k = cfg.kernel_size;
    const double bound = 1.0 / std::sqrt(static_cast<double>(k));

    auto draw_kernel = [&]() {
        Tensor t({k});
        for (int64_t i = 0; i < k; ++i) t[i] = rng.uniform(-bound, bound);
        return t;
    };

    RfgaParams p;
    p.kernel_h = draw_kernel();
    p.kernel_w = draw_kernel();
    p.kernel_c = draw_kernel();
    p.bn_h = BatchNorm::make({c, h, 1});
    p.bn_w = BatchNorm::make({c, 1, w});
    p.bn_c = BatchNorm::make({c, 1, 1});
    return p;
}

RfgaVars lift_rfga(Tape& tape, RfgaParams& params, bool requires_grad) {
    RfgaVars v;
    v.kernel_h = tape.leaf(params.kernel_h, requires_grad);
    v.kernel_w = tape.leaf(params.kernel_w, requires_grad);
    v.kernel_c = tape.leaf(params.kernel_c, requires_grad);
    v.gamma_h = tape.leaf(params.bn_h.gamma, requires_grad);
    v.beta_h = tape.leaf(params.bn_h.beta, requires_grad);
    v.gamma_w = tape.leaf(params.bn_w.gamma, requires_grad);
    v.beta_w = tape.leaf(params.bn_w.beta, requires_grad);
    v.gamma_c = tape.leaf(params.bn_c.gamma, requires_grad);
    v.beta_c = tape.leaf(params.bn_c.beta, requires_grad);
    return v;
}

AttentionVars triple_view_attend(Tape& tape, Var x, const RfgaVars& vars, RfgaParams& state,
                                 const RfgaConfig& cfg, Mode mode) {
    cfg.validate();
    const Tensor& vx = tape.value(x);
    if (vx.rank() != 4) {
        throw ShapeError("triple_view_attend expects [N,C,H,W], got " + shape_str(vx.shape()));
    }

    auto gate = [&](View view, Var kernel, Var gamma, Var beta, BatchNorm& bn,
                    int64_t conv_axis) {
        Var pooled = tape.avg_pool_batched(x, view);
        Var mixed = tape.conv1d_shared(pooled, kernel, conv_axis);
        Var normed = tape.batch_norm(mixed, gamma, beta, bn, mode, BnLanes::per_lane);
        return tape.sigmoid(normed);
    };

    AttentionVars att;
    if (cfg.views.height) {
        att.z_h = gate(View::height, vars.kernel_h, vars.gamma_h, vars.beta_h, state.bn_h, 2);
    }
    if (cfg.views.width) {
        att.z_w = gate(View::width, vars.kernel_w, vars.gamma_w, vars.beta_w, state.bn_w, 3);
    }
    if (cfg.views.channel) {
        att.z_c = gate(View::channel, vars.kernel_c, vars.gamma_c, vars.beta_c, state.bn_c, 1);
    }
    return att;
}

Var expand_outer_sum(Tape& tape, std::optional<Var> z_h, std::optional<Var> z_w,
                     std::optional<Var> z_c) {
    std::optional<Var> acc;
    for (const auto& z : {z_h, z_w, z_c}) {
        if (!z.has_value()) continue;
        acc = acc.has_value() ? tape.add(*acc, *z) : *z;
    }
    if (!acc.has_value()) throw ContractError("expand_outer_sum needs at least one view");
    return tape.sigmoid(*acc);
}

Var calibrate(Tape& tape, Var x, Var m, bool residual) {
    const Var gated = tape.mul(x, m);
    return residual ? tape.add(x, gated) : gated;
}

RfgaForward rfga_forward(Tape& tape, Var x, const RfgaVars& vars, RfgaParams& state,
                         const RfgaConfig& cfg, Mode mode) {
    AttentionVars att = triple_view_attend(tape, x, vars, state, cfg, mode);
    att.m = expand_outer_sum(tape, att.z_h.valid() ? std::optional<Var>(att.z_h) : std::nullopt,
                             att.z_w.valid() ? std::optional<Var>(att.z_w) : std::nullopt,
                             att.z_c.valid() ? std::optional<Var>(att.z_c) : std::nullopt);
    return RfgaForward{calibrate(tape, x, att.m, cfg.residual), att};
}

AttentionBundle snapshot_attention(const Tape& tape, const AttentionVars& att) {
    AttentionBundle b;
    if (att.z_h.valid()) b.z_h = tape.value(att.z_h);
    if (att.z_w.valid()) b.z_w = tape.value(att.z_w);
    if (att.z_c.valid()) b.z_c = tape.value(att.z_c);
    if (att.m.valid()) b.m = tape.value(att.m);
    return b;
}

Tensor attention_summary(const Tensor& t) {
    if (t.empty()) throw ShapeError("attention_summary on empty tensor");
    if (t.rank() != 3) throw ShapeError("attention_summary expects [C,H,W]-like input, got " + shape_str(t.shape()));
    const int64_t c = t.dim(0), h = t.dim(1), w = t.dim(2);

    Tensor out({h, w});
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int64_t ch = 0; ch < c; ++ch) acc += t(ch, y, x);
            out(y, x) = acc / static_cast<double>(c);
        }
    }
    const double lo = out.min(), hi = out.max();
    if (hi == lo) {
        out.fill(0.5);  // degenerate range: midpoint, not a divide-by-zero
        return out;
    }
    for (int64_t i = 0; i < out.size(); ++i) out[i] = (out[i] - lo) / (hi - lo);
    return out;
}

}  // namespace rfga
