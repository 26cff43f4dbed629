#pragma once

#include <map>
#include <string>
#include <vector>

#include "rfga/prng.hpp"
#include "rfga/tensor.hpp"
#include "rfga/wsol.hpp"

namespace rfga {

// Two-part synthetic objects: a large class-ambiguous body (texture drawn
// from a shared pool) plus a small class-specific patch attached to it. The
// ground-truth box is the tight box around the union, so a detector that only
// finds the patch under-localizes by construction.
struct SynthSpec {
    int64_t n_classes = 8;
    int64_t train_per_class = 250;
    int64_t test_per_class = 100;
    int64_t image_size = 64;
    int64_t part_min = 12, part_max = 16;  // discriminative patch side, px
    int64_t body_min = 24, body_max = 40;  // body extent range, px
    double noise = 0.05;                   // background noise amplitude
    uint64_t seed = 0;

    void validate() const;
};

struct GtSample {
    Tensor image;  // [3,S,S] in [0,1]
    int32_t label = 0;
    Box gt_box;
    std::vector<uint8_t> mask;  // S*S, 1 = object; diagnostics only, never trained on
    Box patch_box;              // diagnostics only
};

// Ablation renders for the separability diagnostics; training always uses full.
enum class PartMode { full, patch_only, body_only };

GtSample generate_sample(const SynthSpec& spec, int64_t class_idx, Prng rng,
                         PartMode mode = PartMode::full);

struct DatasetManifest {
    std::map<std::string, std::string> entries;  // key=value, sorted emission

    std::string to_text() const;
    static DatasetManifest from_text(const std::string& text);
    double get_double(const std::string& key) const;
    int64_t get_int(const std::string& key) const;
};

struct SynthDataset {
    std::vector<GtSample> train;
    std::vector<GtSample> test;
    DatasetManifest manifest;
};

// Class-balanced generation with disjoint per-split, per-index rng
// substreams. Asserts the geometry contract (box/patch area ratio in [3,8],
// mean patch-vs-gt IoU < 0.35) for full renders.
SynthDataset generate_dataset(const SynthSpec& spec, PartMode mode = PartMode::full);

// On-disk layout: manifest.txt, {split}_images.f64 (raw little-endian
// doubles), {split}_meta.txt (label + box per line), {split}_masks.u8.
void save_dataset(const std::string& dir, const SynthDataset& ds);
SynthDataset load_dataset(const std::string& dir);

}  // namespace rfga
