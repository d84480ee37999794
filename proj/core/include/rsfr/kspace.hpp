#pragma once

// Degradation model: centred orthonormal Fourier transform, Cartesian
// phase-encode line masks, the zero-filled adjoint, and the intensity/shape
// pre-processing that surrounds them.
//
// Conventions:
//   * images are row-major; rows run along readout, columns along phase encode;
//   * transforms are unitary (1/sqrt(N) per axis), centred (DC at index N/2);
//   * zero-padding puts floor((T-S)/2) pixels before the content and the rest
//     after, so an odd remainder lands at the trailing edge; centre-cropping
//     uses the same offset so crop(pad(x)) == x.

#include <complex>
#include <cstdint>
#include <vector>

#include "rsfr/image.hpp"

namespace rsfr::kspace {

using Complex = std::complex<double>;

/// Complex image or k-space grid, row-major.
struct ComplexGrid {
  Shape2 shape;
  std::vector<Complex> values;

  ComplexGrid() = default;
  explicit ComplexGrid(Shape2 s) : shape(s), values(s.size()) {}
  Complex& operator()(int r, int c) { return values[static_cast<std::size_t>(r) * shape.cols + c]; }
  Complex operator()(int r, int c) const { return values[static_cast<std::size_t>(r) * shape.cols + c]; }
};

using KSpaceData = ComplexGrid;

inline constexpr int kDefaultPhaseEncodeLines = 48;
inline constexpr Shape2 kPaddedShape{256, 96};
inline constexpr Shape2 kCropShape{96, 96};

struct SamplingMask {
  std::vector<std::uint8_t> lines;  // one entry per acquired phase-encode index
  int af = 1;
  double center_fraction = 0.0;
  Shape2 padded_shape = kPaddedShape;

  [[nodiscard]] int n_pe() const { return static_cast<int>(lines.size()); }
  [[nodiscard]] int sampled() const;
  /// Line pattern centred in a phase-encode axis of length `n_cols`; lines
  /// outside the acquired window are unsampled.
  [[nodiscard]] std::vector<std::uint8_t> padded_lines(int n_cols) const;
};

/// Centre fraction used when none is given: 0.08 for AF 2 and 4, 0.04 for AF 8, 1 for AF 1.
double default_center_fraction(int af);

/// Equispaced Cartesian mask: a fully sampled centre block of
/// round(center_fraction * n_pe) lines plus the remaining round(n_pe / af)
/// budget spread at a uniform stride from a seeded offset.
SamplingMask generate_mask(int n_pe, int af, double center_fraction, std::uint64_t seed);
SamplingMask generate_mask(int n_pe, int af, std::uint64_t seed);

/// One `0`/`1` per line, newline terminated.
std::string mask_to_text(const SamplingMask& mask);
SamplingMask mask_from_text(const std::string& text, int af = 0, double center_fraction = 0.0);

ComplexGrid fft2c(const ComplexGrid& image);
ComplexGrid ifft2c(const ComplexGrid& kspace);
ComplexGrid to_complex(const Image& image);
Image magnitude(const ComplexGrid& grid);

/// A x: masked centred DFT of a complex image.
KSpaceData forward_operator(const ComplexGrid& x, const SamplingMask& mask);
KSpaceData forward_operator(const Image& x, const SamplingMask& mask);
/// A^H y: inverse centred DFT of masked data (complex-valued).
ComplexGrid adjoint_operator(const KSpaceData& y, const SamplingMask& mask);
/// |A^H y|: magnitude zero-filled reconstruction.
Image zero_fill(const KSpaceData& y, const SamplingMask& mask);

/// Sum conj(a) * b.
Complex inner(const ComplexGrid& a, const ComplexGrid& b);

Image normalize_minmax(const Image& x);
Image denormalize(const Image& x, const NormalizationRecord& rec);
/// Uses the record attached to `x`; throws if there is none.
Image denormalize(const Image& x);

Image zero_pad(const Image& x, Shape2 target);
Image center_crop(const Image& x, Shape2 target);

}  // namespace rsfr::kspace
