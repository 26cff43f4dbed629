#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rfga/backbone.hpp"
#include "rfga/checkpoint.hpp"
#include "rfga/kvconfig.hpp"
#include "rfga/synth.hpp"
#include "rfga/wsol.hpp"

namespace rfga {

// Model variants: the plain CAM baseline plus the attention configurations
// used in the residual and single-view comparisons.
struct VariantSpec {
    std::string name;
    std::optional<RfgaConfig> rfga;
};

VariantSpec parse_variant(const std::string& name);
const std::vector<std::string>& known_variants();

struct ExperimentConfig {
    SynthSpec dataset;
    std::string dataset_dir = "data/default";
    std::string variant = "rfga_residual";
    TrainConfig train;
    std::string out_dir = "runs";
    int64_t eval_subset = 200;  // per-epoch diagnostics subset; <= 0 means full test set
    bool bilinear = false;      // box-extraction upsampling toggle
    bool self_check = true;     // quick gradient spot check before training

    static ExperimentConfig from_kv(const KvConfig& kv);
    Upsample upsample() const { return bilinear ? Upsample::bilinear : Upsample::nearest; }
};

// ---- checkpoint <-> model ----
Checkpoint model_to_checkpoint(BackboneParams& params);
BackboneParams model_from_checkpoint(const Checkpoint& ckpt);
// shape-checks the checkpoint against a config-derived model
void check_model_matches(const Checkpoint& ckpt, const ExperimentConfig& cfg);

// ---- training ----
struct EpochRow {
    int64_t epoch = 0;  // 1-based in logs
    double lr = 0.0;
    double train_loss = 0.0;
    double train_top1 = 0.0;
    double test_top1 = 0.0;
    double maxboxacc_avg = 0.0;
    double maxboxacc_d50 = 0.0;
    double optimal_tau = 0.0;
    int is_final = 0;
};

std::string train_log_to_csv(const std::vector<EpochRow>& rows);
std::vector<EpochRow> train_log_from_csv(const std::string& text);

struct TrainResult {
    std::vector<EpochRow> log;
    std::string final_checkpoint;  // path
};

// Trains one variant on the dataset, writing per-epoch checkpoints and the
// training log under run_dir. Wall-clock notes go to run.log only.
TrainResult run_train(const SynthDataset& ds, const ExperimentConfig& cfg,
                      const std::string& run_dir);

// ---- evaluation ----
std::vector<EvalSample> to_eval_samples(std::span<const GtSample> data, const Tensor& score_maps);
std::vector<TrainExample> to_examples(std::span<const GtSample> data);

struct EvalResult {
    WsolReport report;
    double top1 = 0.0;
};

EvalResult run_eval(std::span<const GtSample> test, BackboneParams& params, Upsample upsample);
// oracle stub: the activation map is the ground-truth mask itself
EvalResult run_eval_mask_oracle(std::span<const GtSample> test);

std::string summary_table(const std::string& variant, const WsolReport& rep, double top1);

// Quick finite-difference spot check of the full composite on a frozen
// minibatch; returns the max relative error over the probed coordinates.
double composite_grad_spot_check(const SynthDataset& ds, const ExperimentConfig& cfg,
                                 int64_t coords_per_param);

}  // namespace rfga
