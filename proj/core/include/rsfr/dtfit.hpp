#pragma once

// Diffusion-tensor post-processing: log-linear least-squares tensor fit,
// eigen-decomposition, MD/FA/HA maps and transmural helix-angle profiles.

#include <array>
#include <optional>
#include <vector>

#include "rsfr/dwi.hpp"

namespace rsfr::dtfit {

/// Per-pixel fitted tensors (raw, possibly indefinite) with the RMS log-signal residual.
struct DiffusionTensorMap {
  Shape2 shape;
  std::vector<SymTensor> tensors;
  std::vector<double> residual;
  Mask myo_mask;

  [[nodiscard]] const SymTensor& at(int r, int c) const { return tensors[static_cast<std::size_t>(r) * shape.cols + c]; }
};

/// Checks shapes, presence of a b0 slice and that the weighted directions span the six tensor coefficients.
void validate_series(const DWISeries& series);

/// ln(S/S0) = -b g^T D g solved per in-mask pixel by ordinary least squares;
/// S0 is the mean of the b0 slices and non-positive measurements are dropped.
DiffusionTensorMap fit_tensor_lls(const DWISeries& series, const Mask& mask);

struct EigenDecomposition {
  std::array<double, 3> values;  // descending
  Mat3 vectors;                  // column k pairs with values[k]
};

/// Sorted eigen-decomposition. Without a frame the primary eigenvector is
/// oriented with a non-negative largest-magnitude component; with a frame its
/// circumferential component is made non-negative (ties: radial component).
EigenDecomposition eig_sorted(const Mat3& d, const WallFrame* frame = nullptr);

/// Clamps negative eigenvalues to zero.
Mat3 psd_project(const Mat3& d);

double compute_md(const Mat3& d);
double compute_md(const std::array<double, 3>& eigenvalues);
/// sqrt(3/2) * |lambda - MD| / |lambda|, 0 for the zero tensor.
double compute_fa(const std::array<double, 3>& eigenvalues);
double compute_fa(const Mat3& d);

/// Helix angle in degrees of a primary eigenvector in the wall frame of `pixel`;
/// empty when its projection onto the wall-tangent plane vanishes.
std::optional<double> compute_ha(const Vec3& e1, int row, int col, Point2 lv_center);
std::optional<double> compute_ha(const Mat3& d, int row, int col, Point2 lv_center);

/// Parameter maps; NaN outside the mask and where HA is undefined.
struct DTParams {
  Shape2 shape;
  std::vector<double> md;
  std::vector<double> fa;
  std::vector<double> ha;
  Mask myo_mask;
  double ha_gradient = 0.0;  // degrees per unit normalised wall depth
};

/// MD/FA/HA maps from PSD-projected tensors plus the HA gradient.
DTParams compute_params(const DiffusionTensorMap& map, Point2 lv_center, int n_spokes = 36, int samples_per_spoke = 20);

struct LineProfile {
  int spoke = 0;
  std::vector<double> depth;  // ascending in [0, 1]
  std::vector<double> ha;
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  double rmse = 0.0;
};

struct ProfileSet {
  std::vector<LineProfile> profiles;
  int skipped = 0;  // spokes with fewer than 3 valid samples
};

/// Samples HA along radial spokes between the innermost and outermost mask
/// radius of each spoke, by nearest-pixel lookup, and fits one line per spoke.
/// Wall depth is (r - r_in) / (r_out - r_in), with r_in and r_out solved from the pixel count and mean
/// radius of the mask inside a wedge around the spoke. A zero-variance profile reports R^2 = 0.
ProfileSet ha_line_profile(const std::vector<double>& ha_map, const Mask& myo_mask, Point2 lv_center, int n_spokes = 36,
                           int samples_per_spoke = 20);

/// Median per-spoke slope; throws DegenerateInputError without profiles.
double ha_gradient(const ProfileSet& profiles);

/// Ordinary least-squares line through (x, y) with R^2 and RMSE.
LineProfile fit_line(const std::vector<double>& x, const std::vector<double>& y);

/// Fits an annulus (centre = centroid, radii = 5th/95th radius percentiles) to
/// a segmentation mask and returns the rasterised annulus.
Mask annulus_from_segmentation(const Mask& seg, Point2* center = nullptr);

}  // namespace rsfr::dtfit
