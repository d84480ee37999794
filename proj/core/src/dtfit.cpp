#include "rsfr/dtfit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace rsfr::dtfit {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kB0Tolerance = 1e-6;  // s/mm^2

Eigen::Matrix<double, 1, 6> design_row(double b, const Vec3& g) {
  Eigen::Matrix<double, 1, 6> row;
  row << g.x() * g.x(), g.y() * g.y(), g.z() * g.z(), 2 * g.x() * g.y(), 2 * g.x() * g.z(), 2 * g.y() * g.z();
  return b * row;
}

double degrees(double rad) { return rad * 180.0 / std::numbers::pi; }

}  // namespace

void validate_series(const DWISeries& s) {
  if (s.slices.empty()) throw std::invalid_argument("DWI series is empty");
  if (s.b_values.size() != s.size() || s.directions.size() != s.size()) {
    throw std::invalid_argument("DWI series: b-values and directions must match the slice count");
  }
  const Shape2 shape = s.slices[0].shape();
  bool has_b0 = false;
  std::vector<Eigen::Matrix<double, 1, 6>> rows;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.slices[i].shape() != shape) throw std::invalid_argument("DWI series: slices differ in shape");
    if (s.b_values[i] < 0) throw std::invalid_argument("DWI series: negative b-value");
    if (s.b_values[i] <= kB0Tolerance) {
      has_b0 = true;
    } else {
      const double norm = s.directions[i].norm();
      if (std::abs(norm - 1.0) > 1e-6) throw std::invalid_argument("DWI series: weighted direction is not unit length");
      rows.push_back(design_row(1.0, s.directions[i]));
    }
  }
  if (!has_b0) throw std::invalid_argument("DWI series: no b=0 slice");
  Eigen::MatrixXd a(static_cast<Eigen::Index>(rows.size()), 6);
  for (std::size_t i = 0; i < rows.size(); ++i) a.row(static_cast<Eigen::Index>(i)) = rows[i];
  if (rows.size() < 6 || Eigen::ColPivHouseholderQR<Eigen::MatrixXd>(a).rank() < 6) {
    throw std::invalid_argument("DWI series: directions do not determine all six tensor coefficients (collinear design)");
  }
}

DiffusionTensorMap fit_tensor_lls(const DWISeries& series, const Mask& mask) {
  validate_series(series);
  const Shape2 shape = series.slices[0].shape();
  if (mask.shape != shape) throw std::invalid_argument("fit_tensor_lls: mask shape mismatch");
  std::vector<std::size_t> b0, dw;
  for (std::size_t i = 0; i < series.size(); ++i) (series.b_values[i] <= kB0Tolerance ? b0 : dw).push_back(i);
  Eigen::MatrixXd a(static_cast<Eigen::Index>(dw.size()), 6);
  for (std::size_t k = 0; k < dw.size(); ++k) {
    a.row(static_cast<Eigen::Index>(k)) = design_row(series.b_values[dw[k]], series.directions[dw[k]]);
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> full_qr(a);

  DiffusionTensorMap out;
  out.shape = shape;
  out.tensors.assign(shape.size(), SymTensor{});
  out.residual.assign(shape.size(), kNaN);
  out.myo_mask = mask;
  Eigen::VectorXd y(static_cast<Eigen::Index>(dw.size()));
  for (std::size_t p = 0; p < shape.size(); ++p) {
    if (!mask.bits[p]) continue;
    double s0 = 0.0;
    for (std::size_t i : b0) s0 += series.slices[i].pixels()[p];
    s0 /= static_cast<double>(b0.size());
    if (!(s0 > 0)) continue;
    std::vector<Eigen::Index> valid;
    for (std::size_t k = 0; k < dw.size(); ++k) {
      const double s = series.slices[dw[k]].pixels()[p];
      if (s > 0) {
        y(static_cast<Eigen::Index>(k)) = -std::log(s / s0);
        valid.push_back(static_cast<Eigen::Index>(k));
      }
    }
    Eigen::Matrix<double, 6, 1> coef;
    Eigen::VectorXd misfit;
    if (valid.size() == dw.size()) {
      coef = full_qr.solve(y);
      misfit = a * coef - y;
    } else {
      if (valid.size() < 6) continue;
      Eigen::MatrixXd as(static_cast<Eigen::Index>(valid.size()), 6);
      Eigen::VectorXd ys(static_cast<Eigen::Index>(valid.size()));
      for (std::size_t k = 0; k < valid.size(); ++k) {
        as.row(static_cast<Eigen::Index>(k)) = a.row(valid[k]);
        ys(static_cast<Eigen::Index>(k)) = y(valid[k]);
      }
      const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(as);
      if (qr.rank() < 6) continue;
      coef = qr.solve(ys);
      misfit = as * coef - ys;
    }
    out.tensors[p] = {coef(0), coef(1), coef(2), coef(3), coef(4), coef(5)};
    out.residual[p] = std::sqrt(misfit.squaredNorm() / static_cast<double>(misfit.size()));
  }
  return out;
}

EigenDecomposition eig_sorted(const Mat3& d, const WallFrame* frame) {
  const Mat3 sym = 0.5 * (d + d.transpose());
  Eigen::SelfAdjointEigenSolver<Mat3> es(sym);
  EigenDecomposition out;
  // ascending from Eigen; reverse to descending
  for (int k = 0; k < 3; ++k) {
    out.values[k] = es.eigenvalues()(2 - k);
    out.vectors.col(k) = es.eigenvectors().col(2 - k);
  }
  Vec3 e1 = out.vectors.col(0);
  bool flip = false;
  if (frame) {
    const double c = e1.dot(frame->circumferential);
    const double r = e1.dot(frame->radial);
    flip = c < 0 || (c == 0 && r < 0);
  } else {
    Eigen::Index i = 0;
    e1.cwiseAbs().maxCoeff(&i);
    flip = e1(i) < 0;
  }
  if (flip) out.vectors.col(0) = -e1;
  // keep a right-handed basis
  if (out.vectors.determinant() < 0) out.vectors.col(2) = -out.vectors.col(2);
  return out;
}

Mat3 psd_project(const Mat3& d) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (d + d.transpose()));
  const Vec3 lam = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

double compute_md(const Mat3& d) { return d.trace() / 3.0; }
double compute_md(const std::array<double, 3>& l) { return (l[0] + l[1] + l[2]) / 3.0; }

double compute_fa(const std::array<double, 3>& l) {
  const double norm = std::sqrt(l[0] * l[0] + l[1] * l[1] + l[2] * l[2]);
  if (norm == 0.0) return 0.0;
  const double md = compute_md(l);
  const double dev = std::sqrt((l[0] - md) * (l[0] - md) + (l[1] - md) * (l[1] - md) + (l[2] - md) * (l[2] - md));
  return std::min(1.0, std::sqrt(1.5) * dev / norm);
}

double compute_fa(const Mat3& d) { return compute_fa(eig_sorted(d).values); }

std::optional<double> compute_ha(const Vec3& e1, int row, int col, Point2 lv_center) {
  const WallFrame f = wall_frame(row, col, lv_center);
  double c = e1.dot(f.circumferential);
  double z = e1.dot(f.longitudinal);
  if (std::hypot(c, z) < 1e-8 * std::max(1.0, e1.norm())) return std::nullopt;
  // eigenvectors are axes: pick the representative with c >= 0 (and z >= 0 when c == 0)
  if (c < 0 || (c == 0 && z < 0)) {
    c = -c;
    z = -z;
  }
  return degrees(std::atan2(z, c));
}

std::optional<double> compute_ha(const Mat3& d, int row, int col, Point2 lv_center) {
  const WallFrame f = wall_frame(row, col, lv_center);
  return compute_ha(Vec3(eig_sorted(d, &f).vectors.col(0)), row, col, lv_center);
}

LineProfile fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fit_line: need at least two paired samples");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LineProfile lp;
  lp.depth = x;
  lp.ha = y;
  lp.slope = sxx > 0 ? sxy / sxx : 0.0;
  lp.intercept = my - lp.slope * mx;
  double sse = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (lp.intercept + lp.slope * x[i]);
    sse += e * e;
  }
  lp.rmse = std::sqrt(sse / n);
  // zero-variance response: R^2 reported as 0
  lp.r_squared = syy > 0 ? std::clamp(1.0 - sse / syy, 0.0, 1.0) : 0.0;
  return lp;
}

ProfileSet ha_line_profile(const std::vector<double>& ha_map, const Mask& mask, Point2 c, int n_spokes,
                           int samples_per_spoke) {
  if (ha_map.size() != mask.shape.size()) throw std::invalid_argument("ha_line_profile: map/mask size mismatch");
  if (n_spokes <= 0 || samples_per_spoke < 3) throw std::invalid_argument("ha_line_profile: invalid sampling");
  const Shape2 s = mask.shape;
  auto nearest = [&](double r, double ux, double uy, int& row, int& col) {
    col = static_cast<int>(std::lround(c.x + r * ux));
    row = static_cast<int>(std::lround(c.y + r * uy));
    return row >= 0 && row < s.rows && col >= 0 && col < s.cols;
  };
  // per-pixel polar coordinates of the mask
  struct Polar {
    double rho, theta;
  };
  std::vector<Polar> polar;
  for (int r = 0; r < s.rows; ++r) {
    for (int q = 0; q < s.cols; ++q) {
      if (mask(r, q)) polar.push_back({std::hypot(q - c.x, r - c.y), std::atan2(r - c.y, q - c.x)});
    }
  }
  const double half_wedge = std::min(3.0 * std::numbers::pi / n_spokes, std::numbers::pi / 4);
  ProfileSet out;
  int row = 0, col = 0;
  for (int k = 0; k < n_spokes; ++k) {
    const double th = 2.0 * std::numbers::pi * k / n_spokes;
    const double ux = std::cos(th), uy = std::sin(th);
    // Wall radii from the pixel count and mean radius inside the wedge:
    // count = w (r_out^2 - r_in^2), mean = 2/3 (r_out^3 - r_in^3) / (r_out^2 - r_in^2).
    // Moments average out the pixel quantisation that biases extreme radii.
    double count = 0, sum = 0;
    for (const auto& p : polar) {
      if (std::abs(std::remainder(p.theta - th, 2.0 * std::numbers::pi)) > half_wedge) continue;
      count += 1;
      sum += p.rho;
    }
    double r_in = 0, r_out = -1;
    if (count >= 3) {
      const double area = count / half_wedge, mean = sum / count;
      double lo = 0, hi = mean;
      for (int it = 0; it < 100; ++it) {
        r_in = 0.5 * (lo + hi);
        r_out = std::sqrt(r_in * r_in + area);
        const double m = 2.0 / 3.0 * (r_out * r_out * r_out - r_in * r_in * r_in) / area;
        (m > mean ? hi : lo) = r_in;
      }
    }
    if (r_out < 0 || r_out <= r_in) {
      ++out.skipped;
      continue;
    }
    std::vector<std::pair<double, double>> pts;
    for (int j = 0; j < samples_per_spoke; ++j) {
      const double r = r_in + (r_out - r_in) * j / (samples_per_spoke - 1);
      if (!nearest(r, ux, uy, row, col) || !mask(row, col)) continue;
      const double v = ha_map[static_cast<std::size_t>(row) * s.cols + col];
      if (!std::isfinite(v)) continue;
      // depth of the pixel actually sampled
      const double rho = std::hypot(col - c.x, row - c.y);
      pts.emplace_back(std::clamp((rho - r_in) / (r_out - r_in), 0.0, 1.0), v);
    }
    if (pts.size() < 3) {
      ++out.skipped;
      continue;
    }
    std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<double> x, y;
    for (const auto& [d, v] : pts) {
      x.push_back(d);
      y.push_back(v);
    }
    LineProfile lp = fit_line(x, y);
    lp.spoke = k;
    out.profiles.push_back(std::move(lp));
  }
  return out;
}

double ha_gradient(const ProfileSet& ps) {
  if (ps.profiles.empty()) throw DegenerateInputError("ha_gradient: no valid line profiles");
  std::vector<double> slopes;
  for (const auto& p : ps.profiles) slopes.push_back(p.slope);
  std::sort(slopes.begin(), slopes.end());
  const std::size_t n = slopes.size();
  return n % 2 ? slopes[n / 2] : 0.5 * (slopes[n / 2 - 1] + slopes[n / 2]);
}

DTParams compute_params(const DiffusionTensorMap& map, Point2 lv_center, int n_spokes, int samples_per_spoke) {
  DTParams p;
  p.shape = map.shape;
  p.myo_mask = map.myo_mask;
  p.md.assign(map.shape.size(), kNaN);
  p.fa.assign(map.shape.size(), kNaN);
  p.ha.assign(map.shape.size(), kNaN);
  for (int r = 0; r < map.shape.rows; ++r) {
    for (int c = 0; c < map.shape.cols; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * map.shape.cols + c;
      if (!map.myo_mask.bits[i] || !std::isfinite(map.residual[i])) continue;
      const Mat3 d = psd_project(map.tensors[i].matrix());
      const WallFrame f = wall_frame(r, c, lv_center);
      const EigenDecomposition e = eig_sorted(d, &f);
      p.md[i] = compute_md(e.values);
      p.fa[i] = compute_fa(e.values);
      if (auto ha = compute_ha(Vec3(e.vectors.col(0)), r, c, lv_center)) p.ha[i] = *ha;
    }
  }
  const ProfileSet prof = ha_line_profile(p.ha, p.myo_mask, lv_center, n_spokes, samples_per_spoke);
  p.ha_gradient = prof.profiles.empty() ? kNaN : ha_gradient(prof);
  return p;
}

Mask annulus_from_segmentation(const Mask& seg, Point2* center) {
  double sx = 0, sy = 0;
  std::size_t n = 0;
  for (int r = 0; r < seg.shape.rows; ++r) {
    for (int c = 0; c < seg.shape.cols; ++c) {
      if (!seg(r, c)) continue;
      sx += c;
      sy += r;
      ++n;
    }
  }
  if (n == 0) throw DegenerateInputError("annulus_from_segmentation: empty segmentation");
  const Point2 ctr{sx / n, sy / n};
  std::vector<double> radii;
  for (int r = 0; r < seg.shape.rows; ++r) {
    for (int c = 0; c < seg.shape.cols; ++c) {
      if (seg(r, c)) radii.push_back(std::hypot(c - ctr.x, r - ctr.y));
    }
  }
  std::sort(radii.begin(), radii.end());
  const double r_in = radii[static_cast<std::size_t>(0.05 * (radii.size() - 1))];
  const double r_out = radii[static_cast<std::size_t>(0.95 * (radii.size() - 1))];
  Mask out(seg.shape);
  for (int r = 0; r < seg.shape.rows; ++r) {
    for (int c = 0; c < seg.shape.cols; ++c) {
      const double rho = std::hypot(c - ctr.x, r - ctr.y);
      out.bits[static_cast<std::size_t>(r) * seg.shape.cols + c] = rho >= r_in && rho <= r_out;
    }
  }
  if (center) *center = ctr;
  return out;
}

}  // namespace rsfr::dtfit
