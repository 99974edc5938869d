#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "dpsplit/common.hpp"
#include "dpsplit/io/png.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit::io {

namespace font {

// 5x7 bitmap glyphs, one byte per row, low 5 bits used. Covers what the grid
// labels need (digits, decimal point, signs, and the letters of "orig",
// "inf", "eps"); anything else renders blank.
inline const std::uint8_t* glyph(char ch) {
  static const std::uint8_t kDigits[10][7] = {
      {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
      {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, {0x1E, 0x01, 0x01, 0x0E, 0x01, 0x01, 0x1E},
      {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
      {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
      {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}};
  static const std::uint8_t kDot[7] = {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C};
  static const std::uint8_t kMinus[7] = {0x00, 0x00, 0x00, 0x0E, 0x00, 0x00, 0x00};
  static const std::uint8_t kPlus[7] = {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00};
  static const std::uint8_t kE[7] = {0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E};
  static const std::uint8_t kI[7] = {0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E};
  static const std::uint8_t kN[7] = {0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11};
  static const std::uint8_t kF[7] = {0x06, 0x08, 0x08, 0x1C, 0x08, 0x08, 0x08};
  static const std::uint8_t kO[7] = {0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E};
  static const std::uint8_t kR[7] = {0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10};
  static const std::uint8_t kG[7] = {0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E};
  static const std::uint8_t kS[7] = {0x00, 0x00, 0x0F, 0x10, 0x0E, 0x01, 0x1E};
  static const std::uint8_t kP[7] = {0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10};
  static const std::uint8_t kBlank[7] = {0, 0, 0, 0, 0, 0, 0};
  if (ch >= '0' && ch <= '9') return kDigits[ch - '0'];
  switch (ch) {
    case '.': return kDot;
    case '-': return kMinus;
    case '+': return kPlus;
    case 'e': return kE;
    case 'i': return kI;
    case 'n': return kN;
    case 'f': return kF;
    case 'o': return kO;
    case 'r': return kR;
    case 'g': return kG;
    case 's': return kS;
    case 'p': return kP;
    default: return kBlank;
  }
}

inline void draw_text(std::vector<std::uint8_t>& canvas, int canvas_w, int x, int y,
                      const std::string& text) {
  for (std::size_t k = 0; k < text.size(); ++k) {
    const std::uint8_t* g = glyph(text[k]);
    const int gx = x + static_cast<int>(k) * 6;
    for (int row = 0; row < 7; ++row)
      for (int col = 0; col < 5; ++col)
        if (g[row] & (1 << (4 - col))) {
          const int px = gx + col, py = y + row;
          const std::size_t at = (static_cast<std::size_t>(py) * canvas_w + px) * 3;
          if (px >= 0 && px < canvas_w && at + 2 < canvas.size())
            canvas[at] = canvas[at + 1] = canvas[at + 2] = 255;
        }
  }
}

}  // namespace font

// Writes a lossless tile grid: one row per sample, the original image in
// column 0 and one column per label in `column_labels` (the per-epsilon
// reconstructions). reconstructions[i][j] is sample i under label j.
inline void export_grid(const std::vector<Tensor<float>>& originals,
                        const std::vector<std::vector<Tensor<float>>>& reconstructions,
                        const std::vector<std::string>& column_labels, const std::string& path) {
  if (originals.empty()) throw ConfigError("grid export needs at least one sample");
  check(reconstructions.size() == originals.size(),
        "grid export needs one reconstruction row per original");
  for (const auto& row : reconstructions)
    check(row.size() == column_labels.size(), "grid row width must match the label count");

  const int th = originals[0].dim(1), tw = originals[0].dim(2);
  const int pad = 2;
  const int label_h = 11;
  const int cols = 1 + static_cast<int>(column_labels.size());
  const int rows = static_cast<int>(originals.size());
  const int width = pad + cols * (tw + pad);
  const int height = label_h + pad + rows * (th + pad);

  std::vector<std::uint8_t> canvas(static_cast<std::size_t>(width) * height * 3, 24);

  const auto blit = [&](const Tensor<float>& img, int r, int c) {
    require_shape(img, {3, th, tw}, "grid tile");
    const int ox = pad + c * (tw + pad);
    const int oy = label_h + pad + r * (th + pad);
    for (int y = 0; y < th; ++y)
      for (int x = 0; x < tw; ++x) {
        const std::size_t at = ((static_cast<std::size_t>(oy + y) * width) + (ox + x)) * 3;
        for (int ch = 0; ch < 3; ++ch) {
          const float v = img.at3(ch, y, x);
          canvas[at + static_cast<std::size_t>(ch)] =
              static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
        }
      }
  };

  const auto label_at = [&](const std::string& text, int c) {
    const int cell_x = pad + c * (tw + pad);
    const int text_w = static_cast<int>(text.size()) * 6 - 1;
    const int x = cell_x + std::max(0, (tw - text_w) / 2);
    font::draw_text(canvas, width, x, 2, text);
  };

  label_at("orig", 0);
  for (std::size_t j = 0; j < column_labels.size(); ++j)
    label_at(column_labels[j], static_cast<int>(j) + 1);

  for (int i = 0; i < rows; ++i) {
    blit(originals[static_cast<std::size_t>(i)], i, 0);
    for (std::size_t j = 0; j < column_labels.size(); ++j)
      blit(reconstructions[static_cast<std::size_t>(i)][j], i, static_cast<int>(j) + 1);
  }

  write_png(path, canvas.data(), width, height);
}

}  // namespace dpsplit::io
