#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rfga/tensor.hpp"
#include "rfga/wsol.hpp"

namespace rfga {

// Plain 8-bit RGB raster written as binary PPM (P6).
struct RasterImage {
    int64_t width = 0, height = 0;
    std::vector<uint8_t> rgb;  // 3 bytes per pixel, row-major

    RasterImage() = default;
    RasterImage(int64_t w, int64_t h, uint8_t fill = 0);

    void set(int64_t x, int64_t y, uint8_t r, uint8_t g, uint8_t b);
    void write_ppm(const std::string& path) const;
};

// Fixed viridis-like ramp over [0,1].
void viridis(double v, uint8_t out[3]);

// [h,w] map with values in [0,1], nearest-upscaled by an integer factor.
RasterImage heatmap(const Tensor& map, int64_t scale);

// [3,S,S] image in [0,1].
RasterImage rgb_image(const Tensor& img);

// Stretches a degenerate summary map ([H,1], [1,W], [1,1]) to [h,w].
Tensor stretch_map(const Tensor& map, int64_t h, int64_t w);

void draw_box_outline(RasterImage& img, const Box& box, uint8_t r, uint8_t g, uint8_t b);

// 5x7 bitmap font, uppercase letters / digits / basic punctuation.
void draw_text(RasterImage& img, int64_t x, int64_t y, const std::string& text, uint8_t r,
               uint8_t g, uint8_t b);

// Lays out equally sized panels in a grid with caption strips.
RasterImage panel_grid(const std::vector<std::pair<std::string, RasterImage>>& panels,
                       int64_t columns);

}  // namespace rfga
