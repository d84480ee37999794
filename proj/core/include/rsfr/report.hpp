#pragma once

// Static figures summarising a completed run: reconstruction/error panels,
// DT parameter maps, the HA line-profile plot and MAE bar charts.

#include <filesystem>
#include <string>
#include <vector>

#include "rsfr/image.hpp"

namespace rsfr::report {

/// 8-bit binary PGM, values mapped linearly from [lo, hi] and clipped.
void write_pgm(const std::filesystem::path& path, const Image& img, double lo, double hi);
/// 8-bit binary PPM through a perceptually ordered blue-to-yellow colormap; NaN pixels black.
void write_ppm(const std::filesystem::path& path, const Image& img, double lo, double hi);

/// Places equally sized tiles on a grid (row-major), `gap` pixels apart, background NaN.
Image tile(const std::vector<Image>& tiles, int columns, int gap = 2);

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::string color;
  bool line = false;
};

/// Minimal SVG scatter/line plot with axes and free-text annotations.
std::string svg_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                     const std::vector<Series>& series, const std::vector<std::string>& notes);
/// Grouped bar chart: one group per category, one bar per label.
std::string svg_bars(const std::string& title, const std::vector<std::string>& categories,
                     const std::vector<std::string>& labels, const std::vector<std::vector<double>>& values);

/// Reads the reconstruct/postprocess/evaluate stage outputs under `out_dir`
/// and writes the four figures into `out_dir/report`. Returns their paths.
std::vector<std::filesystem::path> make_report(const std::filesystem::path& out_dir);

}  // namespace rsfr::report
