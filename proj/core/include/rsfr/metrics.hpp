#pragma once

// Image-quality and diffusion-tensor accuracy metrics, the Mann-Whitney
// test, and "mean (std)" aggregation.

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "rsfr/dtfit.hpp"
#include "rsfr/image.hpp"
#include "rsfr/losses.hpp"

namespace rsfr::metrics {

inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// 10 log10(1 / MSE) with peak 1; +infinity for identical images.
double psnr(const Image& ref, const Image& test);

/// Mean SSIM over all fully contained 7x7 Gaussian (sigma 1.5) windows,
/// C1 = (0.01)^2, C2 = (0.03)^2 for peak 1.
double ssim(const Image& ref, const Image& test);

/// Sum over extractor stages of the mean squared difference of unit-normalised
/// (per position, across channels) activations.
double perceptual_distance(const Image& ref, const Image& test, const losses::FeatureExtractor& extractor);

struct GlobalMae {
  double md = 0.0;
  double fa = 0.0;
  double ha_gradient = 0.0;
};

/// |mean_in-mask(ref) - mean_in-mask(test)| per parameter, HA gradient as |ref - test|.
GlobalMae mae_global(const dtfit::DTParams& ref, const dtfit::DTParams& test, const Mask& mask);

/// Mean of finite values inside the mask; throws DegenerateInputError if there are none.
double masked_mean(const std::vector<double>& values, const Mask& mask);

struct MannWhitney {
  double u = 0.0;  // U of the first sample: R_a - n_a (n_a + 1) / 2
  double p = 1.0;  // two-sided
  bool exact = false;
};

/// Exact two-sided p (midranks, ties included) when both samples have at most
/// 20 values, otherwise the tie-corrected normal approximation with continuity
/// correction. Two-sided p counts arrangements at least as far from n_a n_b / 2.
MannWhitney mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b);

double mean(const std::vector<double>& v);
/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
double sample_std(const std::vector<double>& v);
/// "m (s)" with `decimals` fixed decimals, as in results tables.
std::string format_mean_std(const std::vector<double>& v, int decimals);

/// Drops +/-infinity and NaN entries, returning how many were removed.
std::vector<double> finite_only(const std::vector<double>& v, std::size_t* removed = nullptr);

}  // namespace rsfr::metrics
