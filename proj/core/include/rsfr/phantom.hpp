#pragma once

// Synthetic short-axis cardiac DWI phantom with analytically known tensors.

#include <array>
#include <cstdint>
#include <vector>

#include "rsfr/dwi.hpp"

namespace rsfr::phantom {

struct PhantomSpec {
  int grid_size = 96;
  Point2 lv_center{47.5, 47.5};
  double r_endo = 18.0;  // pixels
  double r_epi = 30.0;
  double ha_endo = 60.0;  // degrees, wall depth 0
  double ha_epi = -60.0;  // degrees, wall depth 1
  std::array<double, 3> eigenvalues{1.7e-3, 0.8e-3, 0.5e-3};  // mm^2/s, descending
  std::vector<double> b_values{0.0, 150.0, 600.0};             // s/mm^2
  std::vector<Vec3> directions = default_directions();
  int b0_repetitions = 1;
  double s0 = 1.0;
  double background = 0.05;  // fraction of s0 outside the myocardium
  double noise_sigma = 0.0;  // fraction of s0
  std::uint64_t seed = 0;

  static std::vector<Vec3> default_directions();
  /// Throws std::invalid_argument naming the first violated invariant.
  void validate() const;
};

/// Helix angle the phantom prescribes at normalised wall depth `depth`.
double prescribed_ha(const PhantomSpec& spec, double depth);
/// Normalised wall depth (0 endocardium, 1 epicardium) of a pixel centre.
double wall_depth(const PhantomSpec& spec, int row, int col);

TensorField generate_tensor_field(const PhantomSpec& spec);

/// Noiseless forward model S = s0 * exp(-b g^T D g) inside the myocardium,
/// `background * s0` elsewhere. Slice order: b0 repetitions first, then each
/// non-zero b-value over all directions.
DWISeries simulate_dwis(const TensorField& field, const PhantomSpec& spec);

/// sqrt((S + n1)^2 + n2^2) with n1, n2 ~ N(0, (sigma * s0)^2), deterministic in `seed`.
Image add_rician_noise(const Image& slice, double sigma, std::uint64_t seed, double s0 = 1.0);

/// Applies Rician noise with spec.noise_sigma to every slice, one derived seed per slice.
DWISeries add_rician_noise(const DWISeries& series, const PhantomSpec& spec);

}  // namespace rsfr::phantom
