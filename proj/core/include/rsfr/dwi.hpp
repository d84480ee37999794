#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "rsfr/image.hpp"

namespace rsfr {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pixel-centre coordinates: `x` runs along columns, `y` along rows.
struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Symmetric 3x3 tensor stored as its six unique coefficients
/// (xx, yy, zz, xy, xz, yz), the same order as the log-linear design matrix.
struct SymTensor {
  double xx = 0, yy = 0, zz = 0, xy = 0, xz = 0, yz = 0;

  [[nodiscard]] Mat3 matrix() const {
    Mat3 m;
    m << xx, xy, xz, xy, yy, yz, xz, yz, zz;
    return m;
  }
  static SymTensor from_matrix(const Mat3& m) {
    return {m(0, 0), m(1, 1), m(2, 2), 0.5 * (m(0, 1) + m(1, 0)), 0.5 * (m(0, 2) + m(2, 0)),
            0.5 * (m(1, 2) + m(2, 1))};
  }
  [[nodiscard]] double quadratic(const Vec3& g) const {
    return xx * g.x() * g.x() + yy * g.y() * g.y() + zz * g.z() * g.z() + 2.0 * xy * g.x() * g.y() +
           2.0 * xz * g.x() * g.z() + 2.0 * yz * g.y() * g.z();
  }
  [[nodiscard]] double coeff(int i) const {
    const double c[6] = {xx, yy, zz, xy, xz, yz};
    return c[i];
  }
};

/// Binary per-pixel mask, row-major.
struct Mask {
  Shape2 shape;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  explicit Mask(Shape2 s) : shape(s), bits(s.size(), 0) {}
  [[nodiscard]] bool operator()(int r, int c) const { return bits[static_cast<std::size_t>(r) * shape.cols + c] != 0; }
  [[nodiscard]] std::size_t count() const;
};

/// Per-pixel tensor field in mm^2/s with the myocardium mask it is defined on.
struct TensorField {
  Shape2 shape;
  std::vector<SymTensor> tensors;
  Mask myo_mask;

  [[nodiscard]] const SymTensor& at(int r, int c) const { return tensors[static_cast<std::size_t>(r) * shape.cols + c]; }
};

/// Diffusion-weighted acquisition: one image per (b-value, direction); b0
/// slices carry a zero direction.
struct DWISeries {
  std::vector<Image> slices;
  std::vector<double> b_values;  // s/mm^2
  std::vector<Vec3> directions;

  [[nodiscard]] std::size_t size() const { return slices.size(); }
};

/// Local short-axis wall frame at a pixel: radial points away from the LV
/// centre, circumferential is radial rotated 90 degrees counter-clockwise in
/// the (x, y) plane, longitudinal is the out-of-plane z axis.
struct WallFrame {
  Vec3 radial;
  Vec3 circumferential;
  Vec3 longitudinal;
};

WallFrame wall_frame(int row, int col, Point2 lv_center);

}  // namespace rsfr
