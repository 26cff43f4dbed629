#pragma once

#include <functional>
#include <vector>

#include "rfga/tape.hpp"

namespace rfga {

// Scalar-valued map of one tensor input, rebuilt on a fresh tape per call.
// The function must be pure: same x, same value.
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckOptions {
    double eps = 1e-5;         // central-difference step
    int64_t max_coords = -1;   // probe all coordinates when < 0
    uint64_t coord_seed = 0;   // subsample seed when max_coords > 0
};

// Compares reverse-mode gradients of f at x against central finite
// differences. Returns max over probed coordinates of
// |analytic - numeric| / max(1, |analytic|, |numeric|).
double grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& opts = {});

// Multi-input variant: perturbs inputs[check_idx], holds the others fixed.
using MultiScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;
double grad_check_multi(const MultiScalarFn& f, const std::vector<Tensor>& inputs,
                        size_t check_idx, const GradCheckOptions& opts = {});

}  // namespace rfga
