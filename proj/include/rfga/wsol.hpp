#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rfga/tensor.hpp"

namespace rfga {

// Axis-aligned box in integer pixel coordinates, inclusive on both ends.
struct Box {
    int32_t x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    int64_t area() const {
        return static_cast<int64_t>(x_max - x_min + 1) * static_cast<int64_t>(y_max - y_min + 1);
    }
    bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

// One 2-D class-evidence map with provenance.
struct ActivationMap {
    Tensor map;  // [h,w], raw scores
    int32_t class_idx = -1;
    int32_t image_id = -1;
};

struct EvalSample {
    ActivationMap activation;
    Box gt_box;          // image coordinates
    int32_t width = 0;   // image size the box lives in
    int32_t height = 0;
};

enum class Upsample { nearest, bilinear };

// The 101-point threshold grid {0.00, 0.01, ..., 1.00}.
const std::vector<double>& tau_grid();

// Per-image min-max normalization to [0,1]; constant maps become all zeros so
// no pixel survives any tau > 0.
Tensor normalize_map(const Tensor& activation);

// Upsamples to (tw, th), binarizes at value > tau, and returns the tight box
// around the largest 4-connected component. Ties go to the component whose
// topmost-leftmost pixel is smallest in (row, col) order.
std::optional<Box> extract_box(const Tensor& norm_map, double tau, int64_t tw, int64_t th,
                               Upsample upsample = Upsample::nearest);

// Fraction of samples with iou >= delta at each tau in the grid; a missing
// box counts as IoU 0.
std::vector<double> box_acc_curve(std::span<const EvalSample> samples, double delta,
                                  Upsample upsample = Upsample::nearest);

struct WsolReport {
    std::vector<double> deltas;
    std::vector<double> taus;               // the 101-point grid
    std::vector<std::vector<double>> acc;   // [delta][tau]
    std::vector<double> max_box_acc;        // per delta
    std::vector<double> optimal_tau;        // per delta, smallest tau on ties
    double overall_optimal_tau = 0.0;       // maximizes mean over deltas
    double miou_at_optimal_tau = 0.0;       // mean IoU at the overall optimal tau

    double mean_max_box_acc() const;        // the Avg. column
};

std::vector<double> default_deltas();  // {0.5, 0.6, 0.7, 0.8, 0.9}

WsolReport max_box_acc(std::span<const EvalSample> samples,
                       std::span<const double> deltas = {},
                       Upsample upsample = Upsample::nearest);

// Mean IoU over samples at a grid tau; missing boxes contribute 0.
double miou_at(std::span<const EvalSample> samples, double tau,
               Upsample upsample = Upsample::nearest);

// Report round-trips through CSV exactly (17 significant digits).
std::string report_to_csv(const WsolReport& report);
WsolReport report_from_csv(const std::string& text);

}  // namespace rfga
