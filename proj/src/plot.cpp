#include "restoredet/plot.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>

#include "restoredet/evaluation.hpp"

namespace restoredet {

namespace {

using Glyph = std::array<unsigned char, 7>;

const Glyph* glyph(char ch) {
  static const Glyph letters[26] = {
      {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}, {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E},
      {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}, {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E},
      {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}, {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10},
      {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}, {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},
      {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}, {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C},
      {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}, {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F},
      {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}, {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11},
      {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10},
      {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}, {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11},
      {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}, {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04},
      {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04},
      {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}, {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11},
      {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}};
  static const Glyph digits[10] = {
      {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
      {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},
      {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
      {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
      {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}};
  static const Glyph dot{0, 0, 0, 0, 0, 0x0C, 0x0C};
  static const Glyph dash{0, 0, 0, 0x1F, 0, 0, 0};
  static const Glyph slash{0, 0x01, 0x02, 0x04, 0x08, 0x10, 0};
  static const Glyph plus{0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0};
  static const Glyph colon{0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0};
  static const Glyph equals{0, 0, 0x1F, 0, 0x1F, 0, 0};
  static const Glyph underscore{0, 0, 0, 0, 0, 0, 0x1F};
  static const Glyph lparen{0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02};
  static const Glyph rparen{0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08};

  const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  if (up >= 'A' && up <= 'Z') return &letters[up - 'A'];
  if (ch >= '0' && ch <= '9') return &digits[ch - '0'];
  switch (ch) {
    case '.': return &dot;
    case '-': return &dash;
    case '/': return &slash;
    case '+': return &plus;
    case ':': return &colon;
    case '=': return &equals;
    case '_': return &underscore;
    case '(': return &lparen;
    case ')': return &rparen;
    default: return nullptr;
  }
}

ImageTensor to_rgb(const ImageTensor& image) {
  if (image.channels() == 3) return image;
  ImageTensor out(image.height(), image.width(), 3);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y, x, 0);
    }
  }
  return out;
}

}  // namespace

Canvas::Canvas(int height, int width, Rgb background) : image_(height, width, 3) {
  fill(0, 0, width - 1, height - 1, background);
}

Canvas::Canvas(ImageTensor image) : image_(to_rgb(image)) {}

void Canvas::set(int x, int y, Rgb color) {
  if (x < 0 || y < 0 || x >= width() || y >= height()) return;
  image_.at(y, x, 0) = color.r;
  image_.at(y, x, 1) = color.g;
  image_.at(y, x, 2) = color.b;
}

void Canvas::line(double x0, double y0, double x1, double y1, Rgb color, int thickness) {
  const double len = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  const int steps = std::max(1, static_cast<int>(std::ceil(len)));
  const int lo = -(thickness - 1) / 2;
  const int hi = thickness / 2;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    for (int dy = lo; dy <= hi; ++dy) {
      for (int dx = lo; dx <= hi; ++dx) set(x + dx, y + dy, color);
    }
  }
}

void Canvas::rect(double x1, double y1, double x2, double y2, Rgb color, int thickness) {
  line(x1, y1, x2, y1, color, thickness);
  line(x2, y1, x2, y2, color, thickness);
  line(x2, y2, x1, y2, color, thickness);
  line(x1, y2, x1, y1, color, thickness);
}

void Canvas::fill(int x1, int y1, int x2, int y2, Rgb color) {
  for (int y = std::max(0, y1); y <= std::min(height() - 1, y2); ++y) {
    for (int x = std::max(0, x1); x <= std::min(width() - 1, x2); ++x) set(x, y, color);
  }
}

void Canvas::text(int x, int y, const std::string& s, Rgb color, int scale) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Glyph* g = glyph(s[i]);
    if (g == nullptr) continue;
    const int ox = x + static_cast<int>(i) * 6 * scale;
    for (int row = 0; row < 7; ++row) {
      for (int col = 0; col < 5; ++col) {
        if (((*g)[row] >> (4 - col)) & 1) fill(ox + col * scale, y + row * scale, ox + col * scale + scale - 1,
                                               y + row * scale + scale - 1, color);
      }
    }
  }
}

Rgb palette(int index) {
  static const Rgb colors[] = {{0.89f, 0.10f, 0.11f}, {0.22f, 0.49f, 0.72f}, {1.00f, 0.50f, 0.00f},
                               {0.60f, 0.31f, 0.64f}, {0.65f, 0.34f, 0.16f}, {0.97f, 0.51f, 0.75f},
                               {0.40f, 0.40f, 0.40f}, {0.10f, 0.70f, 0.70f}};
  return colors[static_cast<std::size_t>(index) % std::size(colors)];
}

ImageTensor annotate_detections(const ImageTensor& image, const std::vector<Detection>& detections,
                                const Annotation& ground_truth, int upscale, double min_score) {
  upscale = std::max(1, upscale);
  ImageTensor big(image.height() * upscale, image.width() * upscale, image.channels());
  for (int y = 0; y < big.height(); ++y) {
    for (int x = 0; x < big.width(); ++x) {
      for (int c = 0; c < image.channels(); ++c) big.at(y, x, c) = image.at(y / upscale, x / upscale, c);
    }
  }
  Canvas canvas(big);
  const Rgb green{0.0f, 0.85f, 0.0f};
  for (const auto& b : ground_truth.boxes) {
    canvas.rect(b.x1 * upscale, b.y1 * upscale, b.x2 * upscale - 1, b.y2 * upscale - 1, green);
  }
  for (const auto& d : detections) {
    if (d.score < min_score) continue;
    const Rgb color = palette(d.class_id);
    const auto& b = d.box;
    canvas.rect(b.x1 * upscale, b.y1 * upscale, b.x2 * upscale - 1, b.y2 * upscale - 1, color, 2);
    char label[32];
    std::snprintf(label, sizeof label, "%s %.2f", class_name(d.class_id), d.score);
    const int tx = static_cast<int>(b.x1 * upscale);
    const int ty = std::max(0, static_cast<int>(b.y1 * upscale) - 9);
    canvas.fill(tx, ty, tx + Canvas::text_width(label), ty + 8, {1.0f, 1.0f, 1.0f});
    canvas.text(tx + 1, ty + 1, label, color);
  }
  return canvas.image();
}

ImageTensor plot_pr_curves(const std::vector<PrSeries>& series, int num_classes, const std::string& title) {
  constexpr int kPanel = 220;
  constexpr int kMargin = 30;
  constexpr int kTop = 28;
  const int legend_h = 12 * static_cast<int>(series.size()) + 10;
  const int width = std::max(1, num_classes) * (kPanel + kMargin) + kMargin;
  const int height = kTop + kPanel + 2 * kMargin + legend_h;
  Canvas canvas(height, width);
  const Rgb black{0.0f, 0.0f, 0.0f};
  const Rgb grid{0.85f, 0.85f, 0.85f};
  canvas.text(kMargin, 8, title, black);

  for (int c = 0; c < num_classes; ++c) {
    const int x0 = kMargin + c * (kPanel + kMargin);
    const int y0 = kTop + 12;
    const auto px = [&](double r) { return x0 + r * kPanel; };
    const auto py = [&](double p) { return y0 + (1.0 - p) * kPanel; };
    for (int k = 1; k < 4; ++k) {
      canvas.line(px(k / 4.0), py(0), px(k / 4.0), py(1), grid);
      canvas.line(px(0), py(k / 4.0), px(1), py(k / 4.0), grid);
    }
    canvas.rect(px(0), py(0), px(1), py(1), black);
    canvas.text(x0, y0 - 11, std::string(class_name(c)), black);
    canvas.text(x0 + kPanel - Canvas::text_width("RECALL"), y0 + kPanel + 4, "RECALL", black);
    canvas.text(x0 - 6, y0 + kPanel + 4, "0", black);
    canvas.text(x0 - 8, y0 - 3, "1", black);

    for (std::size_t s = 0; s < series.size(); ++s) {
      if (c >= static_cast<int>(series[s].per_class.size())) continue;
      const auto& curve = series[s].per_class[c];
      // Step plot of the precision envelope, starting at recall 0.
      std::vector<double> env = curve.precision;
      for (int i = static_cast<int>(env.size()) - 2; i >= 0; --i) env[i] = std::max(env[i], env[i + 1]);
      double prev_r = 0.0;
      double prev_p = env.empty() ? 0.0 : env.front();
      for (std::size_t i = 0; i < env.size(); ++i) {
        canvas.line(px(prev_r), py(prev_p), px(curve.recall[i]), py(prev_p), palette(static_cast<int>(s)), 2);
        canvas.line(px(curve.recall[i]), py(prev_p), px(curve.recall[i]), py(env[i]), palette(static_cast<int>(s)), 2);
        prev_r = curve.recall[i];
        prev_p = env[i];
      }
    }
  }
  const int ly = kTop + kPanel + kMargin + 16;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const int y = ly + 12 * static_cast<int>(s);
    canvas.fill(kMargin, y, kMargin + 14, y + 6, palette(static_cast<int>(s)));
    canvas.text(kMargin + 20, y, series[s].label, black);
  }
  return canvas.image();
}

}  // namespace restoredet
