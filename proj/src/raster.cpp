#include "rfga/raster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace rfga {

namespace {

constexpr uint8_t kViridis[9][3] = {
    {68, 1, 84},   {71, 44, 122},  {59, 81, 139},  {44, 113, 142}, {33, 144, 141},
    {39, 173, 129}, {92, 200, 99}, {170, 220, 50}, {253, 231, 37},
};

// 5x7 glyphs, one byte per row, low 5 bits used
struct Glyph {
    char ch;
    uint8_t rows[7];
};

constexpr Glyph kFont[] = {
    {'A', {0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001}},
    {'B', {0b11110, 0b10001, 0b11110, 0b10001, 0b10001, 0b10001, 0b11110}},
    {'C', {0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110}},
    {'D', {0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110}},
    {'E', {0b11111, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000, 0b11111}},
    {'F', {0b11111, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000, 0b10000}},
    {'G', {0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111}},
    {'H', {0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001, 0b10001}},
    {'I', {0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110}},
    {'J', {0b00111, 0b00010, 0b00010, 0b00010, 0b10010, 0b10010, 0b01100}},
    {'K', {0b10001, 0b10010, 0b11100, 0b10010, 0b10001, 0b10001, 0b10001}},
    {'L', {0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111}},
    {'M', {0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001}},
    {'N', {0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001}},
    {'O', {0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110}},
    {'P', {0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000}},
    {'Q', {0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101}},
    {'R', {0b11110, 0b10001, 0b10001, 0b11110, 0b10010, 0b10001, 0b10001}},
    {'S', {0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110}},
    {'T', {0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100}},
    {'U', {0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110}},
    {'V', {0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100}},
    {'W', {0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b11011, 0b10001}},
    {'X', {0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001}},
    {'Y', {0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100}},
    {'Z', {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111}},
    {'0', {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110}},
    {'1', {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110}},
    {'2', {0b01110, 0b10001, 0b00001, 0b00110, 0b01000, 0b10000, 0b11111}},
    {'3', {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110}},
    {'4', {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010}},
    {'5', {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110}},
    {'6', {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110}},
    {'7', {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000}},
    {'8', {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110}},
    {'9', {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100}},
    {' ', {0, 0, 0, 0, 0, 0, 0}},
    {'-', {0, 0, 0, 0b01110, 0, 0, 0}},
    {'.', {0, 0, 0, 0, 0, 0b00100, 0b00100}},
    {'/', {0b00001, 0b00010, 0b00100, 0b00100, 0b01000, 0b10000, 0}},
    {'=', {0, 0b11111, 0, 0b11111, 0, 0, 0}},
    {'(', {0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010}},
    {')', {0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000}},
    {':', {0, 0b00100, 0b00100, 0, 0b00100, 0b00100, 0}},
};

const uint8_t* glyph_rows(char ch) {
    const char up = (ch >= 'a' && ch <= 'z') ? static_cast<char>(ch - 'a' + 'A') : ch;
    for (const Glyph& g : kFont) {
        if (g.ch == up) return g.rows;
    }
    return nullptr;
}

}  // namespace

RasterImage::RasterImage(int64_t w, int64_t h, uint8_t fill) : width(w), height(h) {
    rgb.assign(static_cast<size_t>(w * h * 3), fill);
}

void RasterImage::set(int64_t x, int64_t y, uint8_t r, uint8_t g, uint8_t b) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const size_t i = static_cast<size_t>((y * width + x) * 3);
    rgb[i] = r;
    rgb[i + 1] = g;
    rgb[i + 2] = b;
}

void RasterImage::write_ppm(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write image " + path);
    os << "P6\n" << width << ' ' << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!os) throw IoError("short write on image " + path);
}

void viridis(double v, uint8_t out[3]) {
    v = std::clamp(v, 0.0, 1.0);
    const double pos = v * 8.0;
    const int lo = std::min(7, static_cast<int>(pos));
    const double f = pos - lo;
    for (int c = 0; c < 3; ++c) {
        const double a = kViridis[lo][c], b = kViridis[lo + 1][c];
        out[c] = static_cast<uint8_t>(std::lround(a + (b - a) * f));
    }
}

RasterImage heatmap(const Tensor& map, int64_t scale) {
    if (map.rank() != 2) throw ShapeError("heatmap expects a 2-D map");
    const int64_t h = map.dim(0), w = map.dim(1);
    RasterImage img(w * scale, h * scale);
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            uint8_t c[3];
            viridis(map(y, x), c);
            for (int64_t dy = 0; dy < scale; ++dy) {
                for (int64_t dx = 0; dx < scale; ++dx) {
                    img.set(x * scale + dx, y * scale + dy, c[0], c[1], c[2]);
                }
            }
        }
    }
    return img;
}

RasterImage rgb_image(const Tensor& img) {
    if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("rgb_image expects [3,S,S]");
    const int64_t h = img.dim(1), w = img.dim(2);
    RasterImage out(w, h);
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            auto q = [&](int64_t ch) {
                return static_cast<uint8_t>(std::lround(std::clamp(img(ch, y, x), 0.0, 1.0) * 255.0));
            };
            out.set(x, y, q(0), q(1), q(2));
        }
    }
    return out;
}

Tensor stretch_map(const Tensor& map, int64_t h, int64_t w) {
    if (map.rank() != 2) throw ShapeError("stretch_map expects a 2-D map");
    const int64_t mh = map.dim(0), mw = map.dim(1);
    Tensor out({h, w});
    for (int64_t y = 0; y < h; ++y) {
        const int64_t sy = mh == 1 ? 0 : y * mh / h;
        for (int64_t x = 0; x < w; ++x) {
            const int64_t sx = mw == 1 ? 0 : x * mw / w;
            out(y, x) = map(sy, sx);
        }
    }
    return out;
}

void draw_box_outline(RasterImage& img, const Box& box, uint8_t r, uint8_t g, uint8_t b) {
    for (int64_t x = box.x_min; x <= box.x_max; ++x) {
        img.set(x, box.y_min, r, g, b);
        img.set(x, box.y_max, r, g, b);
    }
    for (int64_t y = box.y_min; y <= box.y_max; ++y) {
        img.set(box.x_min, y, r, g, b);
        img.set(box.x_max, y, r, g, b);
    }
}

void draw_text(RasterImage& img, int64_t x, int64_t y, const std::string& text, uint8_t r,
               uint8_t g, uint8_t b) {
    int64_t cx = x;
    for (char ch : text) {
        const uint8_t* rows = glyph_rows(ch);
        if (rows) {
            for (int ry = 0; ry < 7; ++ry) {
                for (int rx = 0; rx < 5; ++rx) {
                    if (rows[ry] & (1 << (4 - rx))) img.set(cx + rx, y + ry, r, g, b);
                }
            }
        }
        cx += 6;
    }
}

RasterImage panel_grid(const std::vector<std::pair<std::string, RasterImage>>& panels,
                       int64_t columns) {
    if (panels.empty()) throw ContractError("panel_grid with no panels");
    int64_t pw = 0, ph = 0;
    for (const auto& [label, p] : panels) {
        pw = std::max(pw, p.width);
        ph = std::max(ph, p.height);
    }
    const int64_t caption = 10, gap = 2;
    const int64_t rows = (static_cast<int64_t>(panels.size()) + columns - 1) / columns;
    const int64_t cell_w = pw + gap, cell_h = ph + caption + gap;
    RasterImage grid(columns * cell_w + gap, rows * cell_h + gap, 24);

    for (size_t i = 0; i < panels.size(); ++i) {
        const int64_t row = static_cast<int64_t>(i) / columns;
        const int64_t col = static_cast<int64_t>(i) % columns;
        const int64_t ox = gap + col * cell_w;
        const int64_t oy = gap + row * cell_h;
        draw_text(grid, ox + 1, oy + 1, panels[i].first, 230, 230, 230);
        const RasterImage& p = panels[i].second;
        for (int64_t y = 0; y < p.height; ++y) {
            for (int64_t x = 0; x < p.width; ++x) {
                const size_t s = static_cast<size_t>((y * p.width + x) * 3);
                grid.set(ox + x, oy + caption + y, p.rgb[s], p.rgb[s + 1], p.rgb[s + 2]);
            }
        }
    }
    return grid;
}

}  // namespace rfga
