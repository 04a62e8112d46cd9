#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "poisonforge/tensor.hpp"

namespace poisonforge {

// Tiles [N,1,H,W] images in [0,1] into one binary PGM (P5), row-major,
// `columns` per row with `padding` pixels of grey between tiles.
void write_pgm_grid(const std::filesystem::path& path, const Tensor& images,
                    std::size_t columns = 10, std::size_t padding = 1);

struct GreyImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<unsigned char> pixels;
};

GreyImage read_pgm(const std::filesystem::path& path);

struct ChartSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

// Minimal SVG line chart with axes, ticks and a legend.
std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<ChartSeries>& series);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace poisonforge
