#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rsfr {

/// Base of every error the library throws on contract violations it detects at run time.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input is well-formed but cannot be processed (constant image, empty mask, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

struct Shape2 {
  int rows = 0;
  int cols = 0;

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
  friend bool operator==(const Shape2&, const Shape2&) = default;
};

std::string to_string(Shape2 s);

/// Per-slice intensity range captured by max-min normalisation, needed to undo it.
struct NormalizationRecord {
  double vmin = 0.0;
  double vmax = 1.0;
};

/// Real-valued 2D magnitude image, row-major.
///
/// `source_shape` remembers the shape the pixels had before any zero-padding or
/// centre-cropping so a processing chain can be undone.
class Image {
 public:
  Image() = default;
  Image(int rows, int cols, double fill = 0.0);
  Image(Shape2 shape, std::vector<double> pixels);

  [[nodiscard]] int rows() const { return shape_.rows; }
  [[nodiscard]] int cols() const { return shape_.cols; }
  [[nodiscard]] Shape2 shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return pixels_.size(); }

  double& operator()(int r, int c) { return pixels_[static_cast<std::size_t>(r) * shape_.cols + c]; }
  double operator()(int r, int c) const { return pixels_[static_cast<std::size_t>(r) * shape_.cols + c]; }

  [[nodiscard]] std::span<double> pixels() { return pixels_; }
  [[nodiscard]] std::span<const double> pixels() const { return pixels_; }
  [[nodiscard]] const std::vector<double>& vector() const { return pixels_; }

  [[nodiscard]] double min() const;
  [[nodiscard]] double max() const;
  [[nodiscard]] bool all_finite() const;

  std::optional<NormalizationRecord> norm;
  Shape2 source_shape;

 private:
  Shape2 shape_;
  std::vector<double> pixels_;
};

}  // namespace rsfr
