#pragma once

// 8-bit RGB raster with PNG IO and the few drawing primitives the reports use.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "art/tensor.hpp"

namespace art {

using Rgb = std::array<std::uint8_t, 3>;

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  Image() = default;
  Image(int w, int h, Rgb fill = {255, 255, 255});

  Rgb at(int x, int y) const;
  void set(int x, int y, Rgb c);  // silently clips outside the canvas
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c);
  void draw_rect(int x0, int y0, int x1, int y1, Rgb c);
  void draw_line(int x0, int y0, int x1, int y1, Rgb c);
  /// 5x7 bitmap glyphs (digits, upper/lower case mapped to upper, common
  /// punctuation) scaled by `scale`.
  void draw_text(int x, int y, std::string_view text, Rgb c, int scale = 1);
  void blit(const Image& src, int x, int y);
  Image upscaled(int factor) const;
};

int text_width(std::string_view text, int scale = 1);

void write_png(const std::filesystem::path& path, const Image& img);
/// Reads 8/16-bit gray, gray+alpha, RGB or RGBA; alpha is dropped.
Image read_png(const std::filesystem::path& path);

/// Tensor [C,H,W] in [0,1] (C = 1 or 3) to an image.
Image image_from_tensor(const Tensor& t);
/// Image to a [3,H,W] tensor in [0,1].
Tensor tensor_from_image(const Image& img);

/// Values in [0,1] of a [H,W] map to gray or to a perceptual colormap.
Image render_map(const Tensor& map01, bool colormap);
Rgb colormap_value(double v);

}  // namespace art
