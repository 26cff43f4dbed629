#include "rfga/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "rfga/prng.hpp"

namespace rfga {

namespace {

double rel_err(double analytic, double numeric) {
    const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
    return std::abs(analytic - numeric) / scale;
}

std::vector<int64_t> probe_coords(int64_t n, const GradCheckOptions& opts) {
    std::vector<int64_t> coords;
    if (opts.max_coords < 0 || opts.max_coords >= n) {
        coords.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        return coords;
    }
    Prng rng(opts.coord_seed, 0x6772616463686bull);  // distinct stream per checker
    std::vector<int64_t> all(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < opts.max_coords; ++i) {
        const int64_t j = i + rng.uniform_int(n - i);
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
    }
    coords.assign(all.begin(), all.begin() + opts.max_coords);
    return coords;
}

}  // namespace

double grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& opts) {
    MultiScalarFn mf = [&f](Tape& t, const std::vector<Var>& vars) { return f(t, vars[0]); };
    return grad_check_multi(mf, {x}, 0, opts);
}

double grad_check_multi(const MultiScalarFn& f, const std::vector<Tensor>& inputs,
                        size_t check_idx, const GradCheckOptions& opts) {
    if (opts.eps <= 0.0) throw ContractError("grad_check eps must be positive");

    auto eval = [&](const std::vector<Tensor>& ins, Tensor* grad_out) -> double {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(ins.size());
        for (size_t i = 0; i < ins.size(); ++i) {
            vars.push_back(tape.leaf(ins[i], grad_out != nullptr && i == check_idx));
        }
        const Var y = f(tape, vars);
        if (tape.value(y).size() != 1) {
            throw ContractError("grad_check requires a scalar-valued function");
        }
        if (grad_out) {
            tape.backward(y);
            *grad_out = tape.grad(vars[check_idx]);
        }
        return tape.value(y)[0];
    };

    Tensor analytic;
    eval(inputs, &analytic);

    std::vector<Tensor> probe = inputs;
    Tensor& px = probe[check_idx];
    double worst = 0.0;
    for (int64_t i : probe_coords(px.size(), opts)) {
        const double saved = px[i];
        px[i] = saved + opts.eps;
        const double up = eval(probe, nullptr);
        px[i] = saved - opts.eps;
        const double down = eval(probe, nullptr);
        px[i] = saved;
        const double numeric = (up - down) / (2.0 * opts.eps);
        worst = std::max(worst, rel_err(analytic[i], numeric));
    }
    return worst;
}

}  // namespace rfga
