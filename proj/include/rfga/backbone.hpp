#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfga/attention.hpp"
#include "rfga/prng.hpp"
#include "rfga/tape.hpp"
#include "rfga/wsol.hpp"

namespace rfga {

// One conv block: 3x3 conv (no bias) -> BN -> relu -> 2x2 average downsample.
struct ConvBlock {
    Tensor w;  // [Co,Ci,3,3]
    BatchNorm bn;
};

// Small trainable CNN: three blocks (widths 16/32/64), optional attention on
// the final features, then a bias-free 1x1 head whose maps double as CAMs.
struct BackboneParams {
    int64_t n_classes = 8;
    int64_t image_size = 64;  // divisible by 8; CAMs are image_size/8 square
    ConvBlock block1, block2, block3;
    Tensor head_w;  // [n_classes, 64, 1, 1]
    std::optional<RfgaConfig> rfga_cfg;
    std::optional<RfgaParams> rfga;

    static BackboneParams init(int64_t n_classes, int64_t image_size,
                               std::optional<RfgaConfig> rfga_cfg, Prng& rng);

    int64_t map_size() const { return image_size / 8; }

    // canonical parameter walks; order is stable and shared by the optimizer
    // and the checkpoint format
    std::vector<std::pair<std::string, Tensor*>> trainable();
    std::vector<std::pair<std::string, Tensor*>> state_tensors();  // + running stats
    std::vector<std::pair<std::string, int64_t*>> state_counters();  // BN update counts
};

struct BackboneVars {
    Var w1, g1, b1, w2, g2, b2, w3, g3, b3, head;
    std::optional<RfgaVars> rfga;
};

// Lifts every trainable tensor onto the tape; `ordered` matches trainable().
struct LiftedBackbone {
    BackboneVars vars;
    std::vector<Var> ordered;
};
LiftedBackbone lift_backbone(Tape& tape, BackboneParams& params, bool requires_grad);

struct ForwardResult {
    Var logits;      // [N,K], exactly the spatial mean of score_maps
    Var score_maps;  // [N,K,s,s]
    Var features;    // [N,64,s,s], pre-attention
    Var calibrated;  // post-attention features feeding the head
    std::optional<AttentionVars> attention;
    LiftedBackbone lifted;
};

ForwardResult forward_classify(Tape& tape, Var images, BackboneParams& params, Mode mode,
                               bool requires_grad);

// Forward over an already-lifted parameter set; lets callers wire arbitrary
// leaves (finite-difference probes) in as parameters.
ForwardResult forward_with_vars(Tape& tape, Var images, BackboneParams& state,
                                const LiftedBackbone& lifted, Mode mode);

// Rebuilds the named-vars view from a vector in trainable() order.
LiftedBackbone lifted_from_ordered(const std::vector<Var>& ordered, bool has_rfga);

// Slices one class map out of a score_maps value tensor.
ActivationMap cam(const Tensor& score_maps, int64_t sample_idx, int64_t class_idx);

struct TrainConfig {
    double lr = 0.01;
    double momentum = 0.9;
    int64_t epochs = 45;
    int64_t batch_size = 20;
    double lr_decay = 0.1;
    int64_t lr_decay_period = 15;  // epochs between decays
    uint64_t seed = 0;

    double lr_at(int64_t epoch) const;
    void validate() const;
};

// Plain SGD with momentum: v <- momentum*v + g; p <- p - lr*v.
struct SgdMomentum {
    double momentum = 0.9;
    std::vector<Tensor> velocity;  // lazily sized on first step

    void step(const std::vector<std::pair<std::string, Tensor*>>& params,
              const std::vector<const Tensor*>& grads, double lr);
};

struct TrainExample {
    const Tensor* image = nullptr;  // [3,S,S]
    int32_t label = 0;
};

struct EpochStats {
    double mean_loss = 0.0;
    double train_top1 = 0.0;
};

// One pass over the data in seeded shuffle order. Aborts on non-finite loss.
EpochStats train_epoch(std::span<const TrainExample> data, BackboneParams& params,
                       const TrainConfig& cfg, int64_t epoch, SgdMomentum& opt);

// Batched eval-mode forward; returns (logits, score_maps) value tensors.
std::pair<Tensor, Tensor> eval_forward(std::span<const TrainExample> data,
                                       BackboneParams& params, int64_t chunk = 50);

// argmax(logits) == label rate; ties break to the lowest class index.
double top1_accuracy(std::span<const TrainExample> data, BackboneParams& params);

int64_t argmax_lowest(const Tensor& logits, int64_t row);

}  // namespace rfga
