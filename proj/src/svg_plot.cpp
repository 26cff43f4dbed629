#include "rfga/svg_plot.hpp"

#include <cstdio>
#include <sstream>

namespace rfga {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#17becf", "#7f7f7f"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

}  // namespace

std::string line_plot_svg(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<SvgSeries>& series) {
    const double w = 800, h = 520;
    const double ml = 70, mr = 180, mt = 50, mb = 60;
    const double pw = w - ml - mr, ph = h - mt - mb;
    auto sx = [&](double x) { return ml + x * pw; };
    auto sy = [&](double y) { return mt + (1.0 - y) * ph; };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
       << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << w / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"18\" "
          "font-family=\"sans-serif\">" << title << "</text>\n";

    for (int i = 0; i <= 10; ++i) {
        const double t = i / 10.0;
        os << "<line x1=\"" << sx(t) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(t) << "\" y2=\""
           << sy(1) << "\" stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n";
        os << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(t) << "\" x2=\"" << sx(1) << "\" y2=\""
           << sy(t) << "\" stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n";
        os << "<text x=\"" << sx(t) << "\" y=\"" << sy(0) + 18
           << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" << num(t)
           << "</text>\n";
        os << "<text x=\"" << sx(0) - 8 << "\" y=\"" << sy(t) + 4
           << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << num(t)
           << "</text>\n";
    }
    os << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(1) << "\" y2=\""
       << sy(0) << "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
    os << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(0) << "\" y2=\""
       << sy(1) << "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
    os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << h - 14
       << "\" text-anchor=\"middle\" font-size=\"14\" font-family=\"sans-serif\">" << x_label
       << "</text>\n";
    os << "<text x=\"18\" y=\"" << mt + ph / 2
       << "\" text-anchor=\"middle\" font-size=\"14\" font-family=\"sans-serif\" "
          "transform=\"rotate(-90 18 " << mt + ph / 2 << ")\">" << y_label << "</text>\n";

    for (size_t s = 0; s < series.size(); ++s) {
        const char* color = kPalette[s % (sizeof(kPalette) / sizeof(kPalette[0]))];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (size_t i = 0; i < series[s].x.size(); ++i) {
            if (i) os << ' ';
            os << num(sx(series[s].x[i])) << ',' << num(sy(series[s].y[i]));
        }
        os << "\"/>\n";
        const double ly = mt + 16 + 20 * static_cast<double>(s);
        os << "<line x1=\"" << w - mr + 12 << "\" y1=\"" << ly << "\" x2=\"" << w - mr + 40
           << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << w - mr + 46 << "\" y=\"" << ly + 4
           << "\" font-size=\"12\" font-family=\"sans-serif\">" << series[s].label << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace rfga
