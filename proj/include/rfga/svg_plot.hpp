#pragma once

#include <string>
#include <vector>

namespace rfga {

struct SvgSeries {
    std::string label;
    std::vector<double> x, y;
};

// Minimal hand-rolled line plot; axes fixed to [0,1] x [0,1], which fits the
// tau/accuracy curves this project emits.
std::string line_plot_svg(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<SvgSeries>& series);

}  // namespace rfga
