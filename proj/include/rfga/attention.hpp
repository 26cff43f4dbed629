#pragma once

#include <optional>

#include "rfga/prng.hpp"
#include "rfga/tape.hpp"

namespace rfga {

// Which of the three pooled views feed the expanded attention map. Dropping
// views reproduces the single-view ablations.
struct ViewSet {
    bool channel = true;
    bool height = true;
    bool width = true;

    int count() const { return (channel ? 1 : 0) + (height ? 1 : 0) + (width ? 1 : 0); }
    static ViewSet all() { return {}; }
    static ViewSet only(View v) {
        ViewSet s{false, false, false};
        if (v == View::channel) s.channel = true;
        if (v == View::height) s.height = true;
        if (v == View::width) s.width = true;
        return s;
    }
};

struct RfgaConfig {
    int64_t kernel_size = 3;  // shared 1-D kernel length, odd
    bool residual = true;     // x + x*m when true, x*m when false
    ViewSet views;

    void validate() const;
};

// Learnable state: one shared k-tap kernel per view plus an independent
// batch-norm bundle per view. Kernels start uniform in [-1/sqrt(k), 1/sqrt(k)]
// so fresh modules gate near sigmoid(0) everywhere.
struct RfgaParams {
    Tensor kernel_h, kernel_w, kernel_c;
    BatchNorm bn_h, bn_w, bn_c;

    // feature_shape is the per-sample [C,H,W] the module will sit on; the
    // per-lane BN state shapes derive from it
    static RfgaParams init(const RfgaConfig& cfg, const Shape& feature_shape, Prng& rng);
};

// Tape handles for the lifted learnable tensors.
struct RfgaVars {
    Var kernel_h, kernel_w, kernel_c;
    Var gamma_h, beta_h, gamma_w, beta_w, gamma_c, beta_c;
};

RfgaVars lift_rfga(Tape& tape, RfgaParams& params, bool requires_grad);

// Per-view gating tensors and the expanded map, all on the tape. Disabled
// views hold invalid Vars.
struct AttentionVars {
    Var z_h, z_w, z_c;
    Var m;
};

// Values snapshot for visualization and reports. Disabled views are empty.
struct AttentionBundle {
    Tensor z_h;  // [N,C,H,1]
    Tensor z_w;  // [N,C,1,W]
    Tensor z_c;  // [N,C,1,1]
    Tensor m;    // [N,C,H,W]
};

// z_v = sigmoid(BN_v(conv1d_shared(avg_pool(x, v)))) for each enabled view.
// x is [N,C,H,W]; the conv axis is the surviving pooled axis.
AttentionVars triple_view_attend(Tape& tape, Var x, const RfgaVars& vars, RfgaParams& state,
                                 const RfgaConfig& cfg, Mode mode);

// m[c,h,w] = sigmoid(sum of the enabled views broadcast to [C,H,W]). Accepts
// rank-3 per-sample tensors or rank-4 batches.
Var expand_outer_sum(Tape& tape, std::optional<Var> z_h, std::optional<Var> z_w,
                     std::optional<Var> z_c);

// Eq-8 style combination: x*m, or x + x*m with the residual connection.
Var calibrate(Tape& tape, Var x, Var m, bool residual);

struct RfgaForward {
    Var calibrated;
    AttentionVars attention;
};

RfgaForward rfga_forward(Tape& tape, Var x, const RfgaVars& vars, RfgaParams& state,
                         const RfgaConfig& cfg, Mode mode);

AttentionBundle snapshot_attention(const Tape& tape, const AttentionVars& att);

// Channel-mean summary map for heatmaps: views are first broadcast to
// [C,H,W], then averaged over channels and min-max normalized to [0,1].
// Constant maps normalize to all 0.5.
Tensor attention_summary(const Tensor& t);

}  // namespace rfga
