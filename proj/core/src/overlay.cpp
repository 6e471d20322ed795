#include "capdet/overlay.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace capdet {

namespace {

using Glyph = std::array<std::uint8_t, 7>;

Glyph glyph(char ch) {
  switch (std::toupper(static_cast<unsigned char>(ch))) {
    case 'A': return {0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001};
    case 'B': return {0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110};
    case 'C': return {0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110};
    case 'D': return {0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110};
    case 'E': return {0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111};
    case 'F': return {0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000};
    case 'G': return {0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111};
    case 'H': return {0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001};
    case 'I': return {0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110};
    case 'J': return {0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100};
    case 'K': return {0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001};
    case 'L': return {0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111};
    case 'M': return {0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001};
    case 'N': return {0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001};
    case 'O': return {0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110};
    case 'P': return {0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000};
    case 'Q': return {0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101};
    case 'R': return {0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001};
    case 'S': return {0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110};
    case 'T': return {0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100};
    case 'U': return {0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110};
    case 'V': return {0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100};
    case 'W': return {0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010};
    case 'X': return {0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001};
    case 'Y': return {0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100};
    case 'Z': return {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111};
    case '0': return {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110};
    case '1': return {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110};
    case '2': return {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111};
    case '3': return {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110};
    case '4': return {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010};
    case '5': return {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110};
    case '6': return {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110};
    case '7': return {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000};
    case '8': return {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110};
    case '9': return {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100};
    case '.': return {0, 0, 0, 0, 0, 0b01100, 0b01100};
    case ':': return {0, 0b01100, 0b01100, 0, 0b01100, 0b01100, 0};
    case '-': return {0, 0, 0, 0b11111, 0, 0, 0};
    case '_': return {0, 0, 0, 0, 0, 0, 0b11111};
    case ' ': return {0, 0, 0, 0, 0, 0, 0};
    default: return {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0, 0b00100};
  }
}

void put(Image& image, int x, int y, const Rgb& color) {
  if (x < 0 || y < 0 || x >= image.width || y >= image.height) return;
  for (int c = 0; c < 3; ++c) image.at(y, x, c) = color[static_cast<std::size_t>(c)];
}

const Rgb kPalette[] = {{1.0f, 0.2f, 0.2f}, {0.2f, 1.0f, 0.2f}, {0.3f, 0.5f, 1.0f},
                        {1.0f, 1.0f, 0.2f}, {1.0f, 0.3f, 1.0f}, {0.2f, 1.0f, 1.0f}};

std::vector<std::string> wrap(const std::string& text, std::size_t columns) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string word, line;
  while (in >> word) {
    if (!line.empty() && line.size() + 1 + word.size() > columns) {
      lines.push_back(line);
      line.clear();
    }
    line += (line.empty() ? "" : " ") + word;
  }
  if (!line.empty()) lines.push_back(line);
  return lines;
}

}  // namespace

void draw_box(Image& image, const Box& box, const Rgb& color) {
  const int x0 = static_cast<int>(std::floor(box.x_min));
  const int y0 = static_cast<int>(std::floor(box.y_min));
  const int x1 = static_cast<int>(std::ceil(box.x_max)) - 1;
  const int y1 = static_cast<int>(std::ceil(box.y_max)) - 1;
  for (int x = x0; x <= x1; ++x) {
    put(image, x, y0, color);
    put(image, x, y1, color);
  }
  for (int y = y0; y <= y1; ++y) {
    put(image, x0, y, color);
    put(image, x1, y, color);
  }
}

void draw_text(Image& image, int x, int y, const std::string& text, const Rgb& color) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto g = glyph(text[i]);
    const int ox = x + static_cast<int>(i) * kGlyphAdvance;
    for (int row = 0; row < 7; ++row) {
      for (int col = 0; col < 5; ++col) {
        if (g[static_cast<std::size_t>(row)] & (1u << (4 - col))) put(image, ox + col, y + row, color);
      }
    }
  }
}

Image render_overlay(const Image& image, const std::vector<Detection>& detections,
                     const std::vector<std::string>& class_names, const std::string& caption) {
  const auto columns = static_cast<std::size_t>(std::max(1, (image.width - 2) / kGlyphAdvance));
  const auto lines = wrap(caption, columns);
  const int band = static_cast<int>(std::max<std::size_t>(lines.size(), 1)) * kLineHeight + 2;

  Image out(image.height + band, image.width, 0.0f);
  std::copy(image.pixels.begin(), image.pixels.end(), out.pixels.begin());

  for (const auto& d : detections) {
    const auto& color = kPalette[static_cast<std::size_t>(d.class_id) % std::size(kPalette)];
    draw_box(out, d.box, color);
    const std::string name = d.class_id >= 0 && static_cast<std::size_t>(d.class_id) < class_names.size()
                                 ? class_names[static_cast<std::size_t>(d.class_id)]
                                 : std::to_string(d.class_id);
    char score[16];
    std::snprintf(score, sizeof(score), "%.2f", d.score);
    const int ty = std::max(0, static_cast<int>(d.box.y_min) - kLineHeight);
    draw_text(out, static_cast<int>(d.box.x_min) + 1, ty, name + " " + score, color);
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    draw_text(out, 1, image.height + 2 + static_cast<int>(i) * kLineHeight, lines[i], {1.0f, 1.0f, 1.0f});
  }
  return out;
}

}  // namespace capdet
