#include "rsfr/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "rsfr/random.hpp"

namespace rsfr {

std::size_t Mask::count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

WallFrame wall_frame(int row, int col, Point2 lv_center) {
  const double dx = col - lv_center.x, dy = row - lv_center.y;
  const double r = std::hypot(dx, dy);
  WallFrame f;
  f.radial = r > 0 ? Vec3(dx / r, dy / r, 0.0) : Vec3(1.0, 0.0, 0.0);
  f.circumferential = Vec3(-f.radial.y(), f.radial.x(), 0.0);
  f.longitudinal = Vec3(0.0, 0.0, 1.0);
  return f;
}

}  // namespace rsfr

namespace rsfr::phantom {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

}  // namespace

std::vector<Vec3> PhantomSpec::default_directions() {
  const double s = 1.0 / std::sqrt(2.0);
  return {Vec3(s, s, 0), Vec3(s, -s, 0), Vec3(s, 0, s), Vec3(s, 0, -s), Vec3(0, s, s), Vec3(0, s, -s)};
}

void PhantomSpec::validate() const {
  if (grid_size <= 0) throw std::invalid_argument("grid_size must be positive");
  if (!(r_endo < r_epi)) throw std::invalid_argument("degenerate annulus: r_endo must be < r_epi");
  if (!(r_endo >= 0.0)) throw std::invalid_argument("r_endo must be non-negative");
  if (!(r_epi < grid_size / 2.0)) throw std::invalid_argument("r_epi must be < grid_size/2");
  if (!(eigenvalues[0] >= eigenvalues[1] && eigenvalues[1] >= eigenvalues[2] && eigenvalues[2] > 0.0)) {
    throw std::invalid_argument("eigenvalues must satisfy l1 >= l2 >= l3 > 0");
  }
  if (directions.size() < 6) throw std::invalid_argument("at least six gradient directions are required");
  for (const auto& g : directions) {
    if (std::abs(g.norm() - 1.0) > 1e-12) throw std::invalid_argument("gradient directions must have unit norm");
  }
  if (b_values.empty()) throw std::invalid_argument("b_values must not be empty");
  for (double b : b_values) {
    if (b < 0.0) throw std::invalid_argument("b-values must be non-negative");
  }
  if (b0_repetitions < 0) throw std::invalid_argument("b0_repetitions must be non-negative");
  if (noise_sigma < 0.0) throw std::invalid_argument("noise_sigma must be non-negative");
  if (!(s0 > 0.0)) throw std::invalid_argument("s0 must be positive");
}

double prescribed_ha(const PhantomSpec& spec, double depth) {
  return spec.ha_endo + depth * (spec.ha_epi - spec.ha_endo);
}

double wall_depth(const PhantomSpec& spec, int row, int col) {
  const double r = std::hypot(col - spec.lv_center.x, row - spec.lv_center.y);
  return (r - spec.r_endo) / (spec.r_epi - spec.r_endo);
}

TensorField generate_tensor_field(const PhantomSpec& spec) {
  spec.validate();
  const int n = spec.grid_size;
  TensorField field;
  field.shape = {n, n};
  field.tensors.assign(field.shape.size(), SymTensor{});
  field.myo_mask = Mask(field.shape);
  const auto [l1, l2, l3] = spec.eigenvalues;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double depth = wall_depth(spec, r, c);
      if (depth < 0.0 || depth > 1.0) continue;
      const auto frame = wall_frame(r, c, spec.lv_center);
      const double ha = prescribed_ha(spec, depth) * kDeg;
      const Vec3 e1 = std::cos(ha) * frame.circumferential + std::sin(ha) * frame.longitudinal;
      const Vec3 e2 = frame.radial;
      const Vec3 e3 = e1.cross(e2).normalized();
      const Mat3 d = l1 * e1 * e1.transpose() + l2 * e2 * e2.transpose() + l3 * e3 * e3.transpose();
      const auto idx = static_cast<std::size_t>(r) * n + c;
      field.tensors[idx] = SymTensor::from_matrix(d);
      field.myo_mask.bits[idx] = 1;
    }
  }
  return field;
}

DWISeries simulate_dwis(const TensorField& field, const PhantomSpec& spec) {
  spec.validate();
  if (field.shape != Shape2{spec.grid_size, spec.grid_size}) {
    throw std::invalid_argument("tensor field and phantom spec disagree on grid size");
  }
  DWISeries series;
  auto emit = [&](double b, const Vec3& g) {
    Image img(field.shape.rows, field.shape.cols, spec.background * spec.s0);
    auto px = img.pixels();
    for (std::size_t i = 0; i < px.size(); ++i) {
      if (field.myo_mask.bits[i]) px[i] = b == 0.0 ? spec.s0 : spec.s0 * std::exp(-b * field.tensors[i].quadratic(g));
    }
    series.slices.push_back(std::move(img));
    series.b_values.push_back(b);
    series.directions.push_back(b == 0.0 ? Vec3::Zero() : g);
  };
  const bool has_b0 = std::any_of(spec.b_values.begin(), spec.b_values.end(), [](double b) { return b == 0.0; });
  if (has_b0) {
    for (int k = 0; k < spec.b0_repetitions; ++k) emit(0.0, Vec3::Zero());
  }
  for (double b : spec.b_values) {
    if (b == 0.0) continue;
    for (const auto& g : spec.directions) emit(b, g);
  }
  return series;
}

Image add_rician_noise(const Image& slice, double sigma, std::uint64_t seed, double s0) {
  if (sigma < 0.0) throw std::invalid_argument("add_rician_noise: sigma must be non-negative");
  if (sigma == 0.0) return slice;
  Image out = slice;
  Rng rng(seed);
  const double sd = sigma * s0;
  for (auto& v : out.pixels()) {
    const double n1 = sd * rng.normal();
    const double n2 = sd * rng.normal();
    v = std::hypot(v + n1, n2);
  }
  return out;
}

DWISeries add_rician_noise(const DWISeries& series, const PhantomSpec& spec) {
  DWISeries out = series;
  for (std::size_t i = 0; i < out.slices.size(); ++i) {
    out.slices[i] = add_rician_noise(series.slices[i], spec.noise_sigma, derive_seed(spec.seed, i), spec.s0);
  }
  return out;
}

}  // namespace rsfr::phantom
