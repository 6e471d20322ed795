#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "capdet/boxes.hpp"
#include "capdet/image.hpp"

namespace capdet {

using Rgb = std::array<float, 3>;

// One-pixel rectangle outline, clipped to the image.
void draw_box(Image& image, const Box& box, const Rgb& color);

// 5x7 bitmap text with its top-left corner at (x, y); letters are drawn
// uppercase, unsupported characters as '?'.
void draw_text(Image& image, int x, int y, const std::string& text, const Rgb& color);

inline constexpr int kGlyphAdvance = 6;
inline constexpr int kLineHeight = 9;

// Boxes labelled "<class> <score>" over the image, with the caption word-wrapped
// in a band below it.
Image render_overlay(const Image& image, const std::vector<Detection>& detections,
                     const std::vector<std::string>& class_names, const std::string& caption);

}  // namespace capdet
