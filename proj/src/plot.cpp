#include "cfx/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace cfx::plot {

namespace {

// 3x5 glyphs for digits and a few symbols, row-major bit masks
const char* glyph(char c) {
  switch (c) {
    case '0': return "111101101101111";
    case '1': return "010110010010111";
    case '2': return "111001111100111";
    case '3': return "111001111001111";
    case '4': return "101101111001001";
    case '5': return "111100111001111";
    case '6': return "111100111101111";
    case '7': return "111001010010010";
    case '8': return "111101111101111";
    case '9': return "111101111001111";
    case '.': return "000000000000010";
    case '-': return "000000111000000";
    case '+': return "000010111010000";
    case '=': return "000111000111000";
    case ' ': return "000000000000000";
    case 'a': return "010101111101101";
    case 'b': return "110101110101110";
    case 'c': return "011100100100011";
    case 'd': return "110101101101110";
    case 'e': return "111100110100111";
    case 'f': return "111100110100100";
    case 'g': return "011100101101011";
    case 'h': return "101101111101101";
    case 'i': return "111010010010111";
    case 'k': return "101110100110101";
    case 'l': return "100100100100111";
    case 'm': return "101111111101101";
    case 'n': return "101111111111101";
    case 'o': return "010101101101010";
    case 'p': return "110101110100100";
    case 'q': return "010101101011001";
    case 'r': return "110101110110101";
    case 's': return "011100010001110";
    case 't': return "111010010010010";
    case 'u': return "101101101101111";
    case 'v': return "101101101101010";
    case 'w': return "101101111111101";
    case 'x': return "101101010101101";
    case 'y': return "101101010010010";
    case 'z': return "111001010100111";
    case '/': return "001001010100100";
    default: return "111111111111111";
  }
}

void put_pixel(ImageF& img, int x, int y, float gray) {
  if (x >= 0 && x < img.cols() && y >= 0 && y < img.rows()) img(y, x) = gray;
}

void draw_line_px(ImageF& img, int x0, int y0, int x1, int y1, float gray) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    put_pixel(img, x0, y0, gray);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2g", v);
  return buf;
}

struct Frame {
  int x0, y0, x1, y1;  // plot area in pixels, y grows downward
  double xmin, xmax, ymin, ymax;
  int px(double x) const { return x0 + int(std::lround((x - xmin) / (xmax - xmin) * (x1 - x0))); }
  int py(double y) const { return y1 - int(std::lround((y - ymin) / (ymax - ymin) * (y1 - y0))); }
};

Frame setup_axes(ImageF& img, double xmin, double xmax, double ymin, double ymax) {
  img.setConstant(1.0f);
  Frame f{40, 10, int(img.cols()) - 10, int(img.rows()) - 24, xmin, xmax, ymin, ymax};
  draw_line_px(img, f.x0, f.y0, f.x0, f.y1, 0.0f);
  draw_line_px(img, f.x0, f.y1, f.x1, f.y1, 0.0f);
  for (int t = 0; t <= 4; ++t) {
    const double xv = xmin + (xmax - xmin) * t / 4.0;
    const double yv = ymin + (ymax - ymin) * t / 4.0;
    const int xp = f.px(xv), yp = f.py(yv);
    draw_line_px(img, xp, f.y1, xp, f.y1 + 3, 0.0f);
    draw_line_px(img, f.x0 - 3, yp, f.x0, yp, 0.0f);
    draw_text(img, xp - 6, f.y1 + 6, fmt_tick(xv));
    draw_text(img, 2, yp - 2, fmt_tick(yv));
  }
  return f;
}

}  // namespace

void draw_text(ImageF& img, int x, int y, const std::string& text, float gray) {
  int cx = x;
  for (char c : text) {
    const char* g = glyph(std::tolower(c));
    for (int r = 0; r < 5; ++r)
      for (int cc = 0; cc < 3; ++cc)
        if (g[r * 3 + cc] == '1') put_pixel(img, cx + cc, y + r, gray);
    cx += 4;
  }
}

ImageF line_plot(const std::vector<Series>& series, int width, int height,
                 bool identity_reference) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (!(xmax > xmin)) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  if (!(ymax > ymin)) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  ImageF img(height, width);
  const Frame f = setup_axes(img, xmin, xmax, ymin, ymax);
  if (identity_reference) {
    const double lo = std::max(xmin, ymin), hi = std::min(xmax, ymax);
    if (hi > lo)
      for (double v = lo; v <= hi; v += (hi - lo) / 200.0) {
        const int step = int((v - lo) / (hi - lo) * 200.0);
        if (step % 8 < 4) put_pixel(img, f.px(v), f.py(v), 0.55f);
      }
  }
  int legend_y = 12;
  for (const auto& s : series) {
    for (std::size_t i = 1; i < s.x.size(); ++i)
      draw_line_px(img, f.px(s.x[i - 1]), f.py(s.y[i - 1]), f.px(s.x[i]), f.py(s.y[i]), s.gray);
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      put_pixel(img, f.px(s.x[i]), f.py(s.y[i]) - 1, s.gray);
      put_pixel(img, f.px(s.x[i]) + 1, f.py(s.y[i]), s.gray);
      put_pixel(img, f.px(s.x[i]) - 1, f.py(s.y[i]), s.gray);
      put_pixel(img, f.px(s.x[i]), f.py(s.y[i]) + 1, s.gray);
    }
    if (!s.label.empty()) {
      draw_line_px(img, f.x0 + 6, legend_y + 2, f.x0 + 18, legend_y + 2, s.gray);
      draw_text(img, f.x0 + 22, legend_y, s.label);
      legend_y += 8;
    }
  }
  return img;
}

ImageF box_plot(const std::vector<std::vector<double>>& groups,
                const std::vector<std::string>& labels, int width, int height) {
  double ymin = 1e300, ymax = -1e300;
  for (const auto& g : groups)
    for (double v : g) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  if (!(ymax > ymin)) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  const double pad = 0.05 * (ymax - ymin);
  ImageF img(height, width);
  const Frame f = setup_axes(img, 0.0, double(groups.size()), ymin - pad, ymax + pad);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    std::vector<double> v = groups[gi];
    if (v.empty()) continue;
    std::sort(v.begin(), v.end());
    auto q = [&](double p) {
      const double idx = p * double(v.size() - 1);
      const std::size_t lo = std::size_t(idx);
      const double w = idx - double(lo);
      return lo + 1 < v.size() ? v[lo] * (1.0 - w) + v[lo + 1] * w : v[lo];
    };
    const double cx = double(gi) + 0.5;
    const int xl = f.px(cx - 0.18), xr = f.px(cx + 0.18), xc = f.px(cx);
    const int yq1 = f.py(q(0.25)), yq3 = f.py(q(0.75)), ymed = f.py(q(0.5));
    const int ylo = f.py(v.front()), yhi = f.py(v.back());
    draw_line_px(img, xl, yq1, xr, yq1, 0.0f);
    draw_line_px(img, xl, yq3, xr, yq3, 0.0f);
    draw_line_px(img, xl, yq1, xl, yq3, 0.0f);
    draw_line_px(img, xr, yq1, xr, yq3, 0.0f);
    draw_line_px(img, xl, ymed, xr, ymed, 0.3f);
    draw_line_px(img, xc, yq3, xc, yhi, 0.0f);
    draw_line_px(img, xc, yq1, xc, ylo, 0.0f);
    if (gi < labels.size()) draw_text(img, xc - int(labels[gi].size()) * 2, f.y1 + 14, labels[gi]);
  }
  return img;
}

ImageF montage(const std::vector<const ImageF*>& tiles, int cols, int pad) {
  if (tiles.empty()) return ImageF::Zero(1, 1);
  const int th = int(tiles[0]->rows()), tw = int(tiles[0]->cols());
  const int rows = (int(tiles.size()) + cols - 1) / cols;
  ImageF img = ImageF::Constant(rows * (th + pad) - pad, cols * (tw + pad) - pad, 1.0f);
  for (int i = 0; i < int(tiles.size()); ++i) {
    const int r = i / cols, c = i % cols;
    img.block(r * (th + pad), c * (tw + pad), th, tw) = *tiles[std::size_t(i)];
  }
  return img;
}

}  // namespace cfx::plot
