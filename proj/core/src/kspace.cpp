#include "rsfr/kspace.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <sstream>

#include "rsfr/random.hpp"

namespace rsfr::kspace {
namespace {

using RowMajorC = Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Centred unitary DFT matrix: F[k][n] = exp(-2 pi i (k-h)(n-h)/N) / sqrt(N), h = N/2.
const Eigen::MatrixXcd& dft_matrix(int n, bool inverse) {
  static std::mutex mu;
  static std::map<std::pair<int, bool>, Eigen::MatrixXcd> cache;
  std::lock_guard lock(mu);
  auto it = cache.find({n, inverse});
  if (it != cache.end()) return it->second;
  Eigen::MatrixXcd m(n, n);
  const int h = n / 2;
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  const double sign = inverse ? 1.0 : -1.0;
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j) {
      // reduce the phase index exactly before scaling by 2 pi / N
      long long p = (static_cast<long long>(k - h) * (j - h)) % n;
      if (p < 0) p += n;
      const double angle = sign * 2.0 * std::numbers::pi * static_cast<double>(p) / n;
      m(k, j) = Complex(std::cos(angle), std::sin(angle)) * scale;
    }
  }
  return cache.emplace(std::pair{n, inverse}, std::move(m)).first->second;
}

ComplexGrid transform(const ComplexGrid& in, bool inverse) {
  const int r = in.shape.rows, c = in.shape.cols;
  Eigen::Map<const RowMajorC> x(in.values.data(), r, c);
  const auto& fr = dft_matrix(r, inverse);
  const auto& fc = dft_matrix(c, inverse);
  ComplexGrid out(in.shape);
  Eigen::Map<RowMajorC> y(out.values.data(), r, c);
  // F is symmetric, so right-multiplying by F applies it along columns.
  y.noalias() = fr * x * fc;
  return out;
}

void apply_lines(ComplexGrid& k, const SamplingMask& mask) {
  const auto lines = mask.padded_lines(k.shape.cols);
  for (int r = 0; r < k.shape.rows; ++r) {
    for (int c = 0; c < k.shape.cols; ++c) {
      if (!lines[c]) k(r, c) = Complex(0.0, 0.0);
    }
  }
}

int pad_before(int source, int target) { return (target - source) / 2; }

}  // namespace

int SamplingMask::sampled() const {
  return static_cast<int>(std::count(lines.begin(), lines.end(), std::uint8_t{1}));
}

std::vector<std::uint8_t> SamplingMask::padded_lines(int n_cols) const {
  if (n_cols < n_pe()) {
    throw std::invalid_argument("mask has " + std::to_string(n_pe()) + " lines but the phase-encode axis has " +
                                std::to_string(n_cols));
  }
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n_cols), 0);
  std::copy(lines.begin(), lines.end(), out.begin() + pad_before(n_pe(), n_cols));
  return out;
}

double default_center_fraction(int af) {
  switch (af) {
    case 1: return 1.0;
    case 2:
    case 4: return 0.08;
    case 8: return 0.04;
    default: throw std::invalid_argument("acceleration factor must be one of 1, 2, 4, 8");
  }
}

SamplingMask generate_mask(int n_pe, int af, std::uint64_t seed) {
  return generate_mask(n_pe, af, default_center_fraction(af), seed);
}

SamplingMask generate_mask(int n_pe, int af, double center_fraction, std::uint64_t seed) {
  if (af != 1 && af != 2 && af != 4 && af != 8) {
    throw std::invalid_argument("acceleration factor must be one of 1, 2, 4, 8");
  }
  if (n_pe <= 0) throw std::invalid_argument("n_pe must be positive");
  if (!(center_fraction >= 0.0 && center_fraction <= 1.0)) throw std::invalid_argument("center_fraction outside [0,1]");
  const int budget = static_cast<int>(std::lround(static_cast<double>(n_pe) / af));
  const int n_low = static_cast<int>(std::lround(center_fraction * n_pe));
  if (n_low > budget) {
    throw std::invalid_argument("infeasible mask: " + std::to_string(n_low) + " centre lines exceed the budget of " +
                                std::to_string(budget));
  }

  SamplingMask mask;
  mask.af = af;
  mask.center_fraction = center_fraction;
  mask.lines.assign(static_cast<std::size_t>(n_pe), 0);
  const int start = (n_pe - n_low + 1) / 2;
  for (int i = start; i < start + n_low; ++i) mask.lines[i] = 1;

  std::vector<int> outside;
  for (int i = 0; i < n_pe; ++i) {
    if (!mask.lines[i]) outside.push_back(i);
  }
  const int remaining = budget - n_low;
  if (remaining > 0) {
    const double stride = static_cast<double>(outside.size()) / remaining;
    Rng rng(seed);
    const double offset = rng.uniform() * stride;
    for (int k = 0; k < remaining; ++k) {
      auto idx = static_cast<std::size_t>(std::floor(offset + k * stride));
      mask.lines[outside[std::min(idx, outside.size() - 1)]] = 1;
    }
  }
  return mask;
}

std::string mask_to_text(const SamplingMask& mask) {
  std::string s;
  s.reserve(mask.lines.size() * 2);
  for (auto v : mask.lines) {
    s.push_back(v ? '1' : '0');
    s.push_back('\n');
  }
  return s;
}

SamplingMask mask_from_text(const std::string& text, int af, double center_fraction) {
  SamplingMask mask;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line == "0") {
      mask.lines.push_back(0);
    } else if (line == "1") {
      mask.lines.push_back(1);
    } else {
      throw Error("malformed mask line: '" + line + "'");
    }
  }
  mask.af = af > 0 ? af : (mask.sampled() > 0 ? static_cast<int>(std::lround(double(mask.n_pe()) / mask.sampled())) : 1);
  mask.center_fraction = center_fraction;
  return mask;
}

ComplexGrid fft2c(const ComplexGrid& image) { return transform(image, false); }
ComplexGrid ifft2c(const ComplexGrid& kspace) { return transform(kspace, true); }

ComplexGrid to_complex(const Image& image) {
  ComplexGrid g(image.shape());
  std::copy(image.pixels().begin(), image.pixels().end(), g.values.begin());
  return g;
}

Image magnitude(const ComplexGrid& grid) {
  Image out(grid.shape.rows, grid.shape.cols);
  auto px = out.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::abs(grid.values[i]);
  return out;
}

KSpaceData forward_operator(const ComplexGrid& x, const SamplingMask& mask) {
  auto k = fft2c(x);
  apply_lines(k, mask);
  return k;
}

KSpaceData forward_operator(const Image& x, const SamplingMask& mask) { return forward_operator(to_complex(x), mask); }

ComplexGrid adjoint_operator(const KSpaceData& y, const SamplingMask& mask) {
  KSpaceData masked = y;
  apply_lines(masked, mask);
  return ifft2c(masked);
}

Image zero_fill(const KSpaceData& y, const SamplingMask& mask) { return magnitude(adjoint_operator(y, mask)); }

Complex inner(const ComplexGrid& a, const ComplexGrid& b) {
  if (a.shape != b.shape) throw std::invalid_argument("inner: shape mismatch");
  Complex s(0.0, 0.0);
  for (std::size_t i = 0; i < a.values.size(); ++i) s += std::conj(a.values[i]) * b.values[i];
  return s;
}

Image normalize_minmax(const Image& x) {
  if (!x.all_finite()) throw std::invalid_argument("normalize_minmax: non-finite pixels");
  const double lo = x.min(), hi = x.max();
  if (!(hi > lo)) throw DegenerateInputError("normalize_minmax: constant image (vmax == vmin)");
  Image out = x;
  const double inv = 1.0 / (hi - lo);
  for (auto& v : out.pixels()) v = std::clamp((v - lo) * inv, 0.0, 1.0);
  out.norm = NormalizationRecord{lo, hi};
  return out;
}

Image denormalize(const Image& x, const NormalizationRecord& rec) {
  if (!(rec.vmax > rec.vmin)) throw std::invalid_argument("denormalize: record has vmax <= vmin");
  Image out = x;
  const double span = rec.vmax - rec.vmin;
  for (auto& v : out.pixels()) v = v * span + rec.vmin;
  out.norm.reset();
  return out;
}

Image denormalize(const Image& x) {
  if (!x.norm) throw std::invalid_argument("denormalize: image carries no normalization record");
  return denormalize(x, *x.norm);
}

Image zero_pad(const Image& x, Shape2 target) {
  if (target.rows < x.rows() || target.cols < x.cols()) {
    throw std::invalid_argument("zero_pad: target " + to_string(target) + " smaller than " + to_string(x.shape()));
  }
  Image out(target.rows, target.cols, 0.0);
  const int r0 = pad_before(x.rows(), target.rows), c0 = pad_before(x.cols(), target.cols);
  for (int r = 0; r < x.rows(); ++r) {
    for (int c = 0; c < x.cols(); ++c) out(r + r0, c + c0) = x(r, c);
  }
  out.norm = x.norm;
  out.source_shape = x.source_shape;
  return out;
}

Image center_crop(const Image& x, Shape2 target) {
  if (target.rows > x.rows() || target.cols > x.cols()) {
    throw std::invalid_argument("center_crop: target " + to_string(target) + " larger than " + to_string(x.shape()));
  }
  Image out(target.rows, target.cols);
  const int r0 = pad_before(target.rows, x.rows()), c0 = pad_before(target.cols, x.cols());
  for (int r = 0; r < target.rows; ++r) {
    for (int c = 0; c < target.cols; ++c) out(r, c) = x(r + r0, c + c0);
  }
  out.norm = x.norm;
  out.source_shape = x.source_shape;
  return out;
}

}  // namespace rsfr::kspace
