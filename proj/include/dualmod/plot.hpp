#pragma once

// Static line plots written as PNG.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace dualmod {

using Rgb = std::array<std::uint8_t, 3>;

struct Series {
  std::vector<double> x;
  std::vector<double> y;
  Rgb color{0, 0, 0};
};

/// 8-bit RGB, rows top to bottom.
void write_png(const std::string& path, int width, int height, const std::vector<std::uint8_t>& rgb);

/// All series share one pair of axes scaled to their joint range; light grid
/// lines mark tenths of each axis.
void write_line_plot(const std::string& path, const std::vector<Series>& series, int width = 640, int height = 360);

}  // namespace dualmod
