#pragma once

#include <string>
#include <vector>

#include "cfx/util.hpp"

namespace cfx::plot {

struct Series {
  std::vector<double> x, y;
  float gray = 0.0f;  // 0 black .. 1 white
  std::string label;
};

// Line plot with axes, numeric ticks and optional y=x reference, rendered to
// a grayscale raster.
ImageF line_plot(const std::vector<Series>& series, int width = 480, int height = 360,
                 bool identity_reference = false);

// One box per group: median, quartile box, whiskers at min/max.
ImageF box_plot(const std::vector<std::vector<double>>& groups,
                const std::vector<std::string>& labels, int width = 480, int height = 360);

ImageF montage(const std::vector<const ImageF*>& tiles, int cols, int pad = 2);

void draw_text(ImageF& img, int x, int y, const std::string& text, float gray = 0.0f);

}  // namespace cfx::plot
