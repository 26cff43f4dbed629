#include "rfga/wsol.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

namespace rfga {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double(const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str()) throw ParseError("expected a number, got '" + s + "'");
    return v;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

// inclusive pixel range covered by map cell c when stretched to `target`
int64_t block_start(int64_t c, int64_t cells, int64_t target) {
    return (c * target + cells - 1) / cells;  // ceil(c*target/cells)
}

struct Component {
    int64_t pixel_area = 0;
    int64_t rmin = 0, rmax = 0, cmin = 0, cmax = 0;
};

// flood fill over foreground cells, 4-connectivity, row-major discovery order
std::vector<Component> components(const std::vector<char>& fg, int64_t rows, int64_t cols,
                                  const std::vector<int64_t>& cell_area_r,
                                  const std::vector<int64_t>& cell_area_c) {
    std::vector<Component> comps;
    std::vector<char> seen(fg.size(), 0);
    std::vector<int64_t> stack;
    for (int64_t start = 0; start < rows * cols; ++start) {
        if (!fg[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) continue;
        Component comp;
        comp.rmin = comp.rmax = start / cols;
        comp.cmin = comp.cmax = start % cols;
        stack.assign(1, start);
        seen[static_cast<size_t>(start)] = 1;
        while (!stack.empty()) {
            const int64_t cell = stack.back();
            stack.pop_back();
            const int64_t r = cell / cols, c = cell % cols;
            comp.pixel_area += cell_area_r[static_cast<size_t>(r)] * cell_area_c[static_cast<size_t>(c)];
            comp.rmin = std::min(comp.rmin, r);
            comp.rmax = std::max(comp.rmax, r);
            comp.cmin = std::min(comp.cmin, c);
            comp.cmax = std::max(comp.cmax, c);
            const int64_t nb[4] = {r > 0 ? cell - cols : -1, r + 1 < rows ? cell + cols : -1,
                                   c > 0 ? cell - 1 : -1, c + 1 < cols ? cell + 1 : -1};
            for (int64_t n : nb) {
                if (n < 0 || seen[static_cast<size_t>(n)] || !fg[static_cast<size_t>(n)]) continue;
                seen[static_cast<size_t>(n)] = 1;
                stack.push_back(n);
            }
        }
        comps.push_back(comp);
    }
    return comps;
}

std::optional<Box> box_from_components(const std::vector<Component>& comps,
                                       const std::vector<int64_t>& row_starts,
                                       const std::vector<int64_t>& col_starts) {
    if (comps.empty()) return std::nullopt;
    // discovery order is row-major, so the first of equal areas already wins
    // the topmost-leftmost tie rule
    size_t best = 0;
    for (size_t i = 1; i < comps.size(); ++i) {
        if (comps[i].pixel_area > comps[best].pixel_area) best = i;
    }
    const Component& c = comps[best];
    Box b;
    b.y_min = static_cast<int32_t>(row_starts[static_cast<size_t>(c.rmin)]);
    b.y_max = static_cast<int32_t>(row_starts[static_cast<size_t>(c.rmax + 1)] - 1);
    b.x_min = static_cast<int32_t>(col_starts[static_cast<size_t>(c.cmin)]);
    b.x_max = static_cast<int32_t>(col_starts[static_cast<size_t>(c.cmax + 1)] - 1);
    return b;
}

Tensor bilinear_upsample(const Tensor& m, int64_t tw, int64_t th) {
    const int64_t mh = m.dim(0), mw = m.dim(1);
    Tensor out({th, tw});
    for (int64_t y = 0; y < th; ++y) {
        double sy = (static_cast<double>(y) + 0.5) * static_cast<double>(mh) / static_cast<double>(th) - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(mh - 1));
        const int64_t y0 = static_cast<int64_t>(std::floor(sy));
        const int64_t y1 = std::min(y0 + 1, mh - 1);
        const double fy = sy - static_cast<double>(y0);
        for (int64_t x = 0; x < tw; ++x) {
            double sx = (static_cast<double>(x) + 0.5) * static_cast<double>(mw) / static_cast<double>(tw) - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(mw - 1));
            const int64_t x0 = static_cast<int64_t>(std::floor(sx));
            const int64_t x1 = std::min(x0 + 1, mw - 1);
            const double fx = sx - static_cast<double>(x0);
            const double top = m(y0, x0) * (1.0 - fx) + m(y0, x1) * fx;
            const double bot = m(y1, x0) * (1.0 - fx) + m(y1, x1) * fx;
            out(y, x) = top * (1.0 - fy) + bot * fy;
        }
    }
    return out;
}

std::vector<std::vector<double>> iou_table(std::span<const EvalSample> samples, Upsample upsample) {
    const auto& taus = tau_grid();
    std::vector<std::vector<double>> table(samples.size(), std::vector<double>(taus.size(), 0.0));
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < static_cast<int64_t>(samples.size()); ++i) {
        const EvalSample& s = samples[static_cast<size_t>(i)];
        const Tensor norm = normalize_map(s.activation.map);
        for (size_t t = 0; t < taus.size(); ++t) {
            const auto box = extract_box(norm, taus[t], s.width, s.height, upsample);
            table[static_cast<size_t>(i)][t] = box ? iou(*box, s.gt_box) : 0.0;
        }
    }
    return table;
}

int64_t grid_index(double tau) {
    const int64_t idx = std::llround(tau * 100.0);
    if (idx < 0 || idx > 100 || std::abs(tau - static_cast<double>(idx) / 100.0) > 1e-9) {
        throw ContractError("tau " + std::to_string(tau) + " is not on the 0.01 grid");
    }
    return idx;
}

}  // namespace

double iou(const Box& a, const Box& b) {
    const int64_t ix0 = std::max(a.x_min, b.x_min);
    const int64_t iy0 = std::max(a.y_min, b.y_min);
    const int64_t ix1 = std::min(a.x_max, b.x_max);
    const int64_t iy1 = std::min(a.y_max, b.y_max);
    const int64_t iw = ix1 - ix0 + 1;
    const int64_t ih = iy1 - iy0 + 1;
    if (iw <= 0 || ih <= 0) return 0.0;
    const int64_t inter = iw * ih;
    const int64_t uni = a.area() + b.area() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

const std::vector<double>& tau_grid() {
    static const std::vector<double> grid = [] {
        std::vector<double> g(101);
        for (int i = 0; i <= 100; ++i) g[static_cast<size_t>(i)] = static_cast<double>(i) / 100.0;
        return g;
    }();
    return grid;
}

Tensor normalize_map(const Tensor& activation) {
    if (activation.empty()) throw ShapeError("normalize_map on empty map");
    const double lo = activation.min(), hi = activation.max();
    Tensor out(activation.shape());
    if (hi == lo) return out;  // constant map: all zeros, no foreground at tau > 0
    for (int64_t i = 0; i < out.size(); ++i) out[i] = (activation[i] - lo) / (hi - lo);
    return out;
}

std::optional<Box> extract_box(const Tensor& norm_map, double tau, int64_t tw, int64_t th,
                               Upsample upsample) {
    if (norm_map.rank() != 2) {
        throw ShapeError("extract_box expects a 2-D map, got " + shape_str(norm_map.shape()));
    }
    const int64_t mh = norm_map.dim(0), mw = norm_map.dim(1);
    if (tw < mw || th < mh) {
        throw ShapeError("target size must not be smaller than the map");
    }

    if (upsample == Upsample::bilinear) {
        const Tensor up = bilinear_upsample(norm_map, tw, th);
        std::vector<char> fg(static_cast<size_t>(th * tw), 0);
        for (int64_t i = 0; i < up.size(); ++i) fg[static_cast<size_t>(i)] = up[i] > tau ? 1 : 0;
        std::vector<int64_t> unit_r(static_cast<size_t>(th), 1), unit_c(static_cast<size_t>(tw), 1);
        std::vector<int64_t> starts_r(static_cast<size_t>(th + 1)), starts_c(static_cast<size_t>(tw + 1));
        for (int64_t i = 0; i <= th; ++i) starts_r[static_cast<size_t>(i)] = i;
        for (int64_t i = 0; i <= tw; ++i) starts_c[static_cast<size_t>(i)] = i;
        return box_from_components(components(fg, th, tw, unit_r, unit_c), starts_r, starts_c);
    }

    // nearest-neighbor: each map cell stretches to a contiguous pixel block,
    // so components on the cell grid match components on the upsampled grid
    std::vector<char> fg(static_cast<size_t>(mh * mw), 0);
    for (int64_t i = 0; i < norm_map.size(); ++i) fg[static_cast<size_t>(i)] = norm_map[i] > tau ? 1 : 0;
    std::vector<int64_t> starts_r(static_cast<size_t>(mh + 1)), starts_c(static_cast<size_t>(mw + 1));
    for (int64_t r = 0; r <= mh; ++r) starts_r[static_cast<size_t>(r)] = block_start(r, mh, th);
    for (int64_t c = 0; c <= mw; ++c) starts_c[static_cast<size_t>(c)] = block_start(c, mw, tw);
    std::vector<int64_t> area_r(static_cast<size_t>(mh)), area_c(static_cast<size_t>(mw));
    for (int64_t r = 0; r < mh; ++r) {
        area_r[static_cast<size_t>(r)] = starts_r[static_cast<size_t>(r + 1)] - starts_r[static_cast<size_t>(r)];
    }
    for (int64_t c = 0; c < mw; ++c) {
        area_c[static_cast<size_t>(c)] = starts_c[static_cast<size_t>(c + 1)] - starts_c[static_cast<size_t>(c)];
    }
    return box_from_components(components(fg, mh, mw, area_r, area_c), starts_r, starts_c);
}

std::vector<double> box_acc_curve(std::span<const EvalSample> samples, double delta,
                                  Upsample upsample) {
    if (samples.empty()) throw ContractError("box_acc_curve on empty sample set");
    const auto table = iou_table(samples, upsample);
    const auto& taus = tau_grid();
    std::vector<double> acc(taus.size(), 0.0);
    for (size_t t = 0; t < taus.size(); ++t) {
        int64_t hits = 0;
        for (const auto& row : table) {
            if (row[t] >= delta) ++hits;
        }
        acc[t] = static_cast<double>(hits) / static_cast<double>(samples.size());
    }
    return acc;
}

std::vector<double> default_deltas() { return {0.5, 0.6, 0.7, 0.8, 0.9}; }

double WsolReport::mean_max_box_acc() const {
    double acc = 0.0;
    for (double v : max_box_acc) acc += v;
    return acc / static_cast<double>(max_box_acc.size());
}

WsolReport max_box_acc(std::span<const EvalSample> samples, std::span<const double> deltas,
                       Upsample upsample) {
    if (samples.empty()) throw ContractError("max_box_acc on empty sample set");
    WsolReport rep;
    rep.deltas = deltas.empty() ? default_deltas() : std::vector<double>(deltas.begin(), deltas.end());
    rep.taus = tau_grid();

    const auto table = iou_table(samples, upsample);
    const size_t nt = rep.taus.size();
    rep.acc.assign(rep.deltas.size(), std::vector<double>(nt, 0.0));
    for (size_t d = 0; d < rep.deltas.size(); ++d) {
        for (size_t t = 0; t < nt; ++t) {
            int64_t hits = 0;
            for (const auto& row : table) {
                if (row[t] >= rep.deltas[d]) ++hits;
            }
            rep.acc[d][t] = static_cast<double>(hits) / static_cast<double>(samples.size());
        }
    }

    rep.max_box_acc.assign(rep.deltas.size(), 0.0);
    rep.optimal_tau.assign(rep.deltas.size(), 0.0);
    for (size_t d = 0; d < rep.deltas.size(); ++d) {
        size_t best = 0;
        for (size_t t = 1; t < nt; ++t) {
            if (rep.acc[d][t] > rep.acc[d][best]) best = t;  // strict: smallest tau wins ties
        }
        rep.max_box_acc[d] = rep.acc[d][best];
        rep.optimal_tau[d] = rep.taus[best];
    }

    size_t best_overall = 0;
    double best_mean = -1.0;
    for (size_t t = 0; t < nt; ++t) {
        double mean = 0.0;
        for (size_t d = 0; d < rep.deltas.size(); ++d) mean += rep.acc[d][t];
        mean /= static_cast<double>(rep.deltas.size());
        if (mean > best_mean) {
            best_mean = mean;
            best_overall = t;
        }
    }
    rep.overall_optimal_tau = rep.taus[best_overall];

    double miou = 0.0;
    for (const auto& row : table) miou += row[best_overall];
    rep.miou_at_optimal_tau = miou / static_cast<double>(samples.size());
    return rep;
}

double miou_at(std::span<const EvalSample> samples, double tau, Upsample upsample) {
    if (samples.empty()) throw ContractError("miou_at on empty sample set");
    const int64_t idx = grid_index(tau);
    const auto table = iou_table(samples, upsample);
    double acc = 0.0;
    for (const auto& row : table) acc += row[static_cast<size_t>(idx)];
    return acc / static_cast<double>(samples.size());
}

std::string report_to_csv(const WsolReport& rep) {
    std::ostringstream os;
    os << "delta,tau,acc\n";
    for (size_t d = 0; d < rep.deltas.size(); ++d) {
        for (size_t t = 0; t < rep.taus.size(); ++t) {
            os << fmt(rep.deltas[d]) << ',' << fmt(rep.taus[t]) << ',' << fmt(rep.acc[d][t]) << '\n';
        }
    }
    os << "delta,max_box_acc,optimal_tau\n";
    for (size_t d = 0; d < rep.deltas.size(); ++d) {
        os << fmt(rep.deltas[d]) << ',' << fmt(rep.max_box_acc[d]) << ',' << fmt(rep.optimal_tau[d])
           << '\n';
    }
    os << "overall_optimal_tau," << fmt(rep.overall_optimal_tau) << '\n';
    os << "miou_at_optimal_tau," << fmt(rep.miou_at_optimal_tau) << '\n';
    return os.str();
}

WsolReport report_from_csv(const std::string& text) {
    WsolReport rep;
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "delta,tau,acc") {
        throw ParseError("report csv: missing curve header");
    }
    bool in_curve = true;
    std::vector<double> cur_taus;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line == "delta,max_box_acc,optimal_tau") {
            in_curve = false;
            continue;
        }
        const auto fields = split_csv(line);
        if (fields[0] == "overall_optimal_tau") {
            rep.overall_optimal_tau = parse_double(fields.at(1));
            continue;
        }
        if (fields[0] == "miou_at_optimal_tau") {
            rep.miou_at_optimal_tau = parse_double(fields.at(1));
            continue;
        }
        if (in_curve) {
            if (fields.size() != 3) throw ParseError("report csv: bad curve row '" + line + "'");
            const double delta = parse_double(fields[0]);
            const double tau = parse_double(fields[1]);
            const double acc = parse_double(fields[2]);
            if (rep.deltas.empty() || rep.deltas.back() != delta) {
                rep.deltas.push_back(delta);
                rep.acc.emplace_back();
                if (rep.acc.size() == 2) rep.taus = cur_taus;
            }
            if (rep.acc.size() == 1) cur_taus.push_back(tau);
            rep.acc.back().push_back(acc);
        } else {
            if (fields.size() != 3) throw ParseError("report csv: bad summary row '" + line + "'");
            rep.max_box_acc.push_back(parse_double(fields[1]));
            rep.optimal_tau.push_back(parse_double(fields[2]));
        }
    }
    if (rep.taus.empty()) rep.taus = cur_taus;
    return rep;
}

}  // namespace rfga
