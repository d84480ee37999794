#include <cmath>
#include <numeric>

#include "doctest.h"
#include "rsfr/dtfit.hpp"
#include "rsfr/kspace.hpp"
#include "rsfr/metrics.hpp"
#include "rsfr/phantom.hpp"
#include "test_util.hpp"

using namespace rsfr;
using namespace rsfr::metrics;

namespace {

// direct windowed SSIM: every 7x7 window, normalised Gaussian weights, sigma 1.5
double ssim_oracle(const Image& a, const Image& b) {
  double w[7][7], ws = 0;
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) ws += w[y][x] = std::exp(-((y - 3) * (y - 3) + (x - 3) * (x - 3)) / 4.5);
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  int count = 0;
  for (int r = 0; r + 7 <= a.rows(); ++r) {
    for (int c = 0; c + 7 <= a.cols(); ++c) {
      double ma = 0, mb = 0;
      for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 7; ++x) {
          ma += w[y][x] / ws * a(r + y, c + x);
          mb += w[y][x] / ws * b(r + y, c + x);
        }
      double va = 0, vb = 0, cov = 0;
      for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 7; ++x) {
          const double da = a(r + y, c + x) - ma, db = b(r + y, c + x) - mb;
          va += w[y][x] / ws * da * da;
          vb += w[y][x] / ws * db * db;
          cov += w[y][x] / ws * da * db;
        }
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / count;
}

Image box_blur(const Image& x, int radius) {
  Image out(x.rows(), x.cols());
  for (int r = 0; r < x.rows(); ++r)
    for (int c = 0; c < x.cols(); ++c) {
      double s = 0;
      int n = 0;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int rr = r + dy, cc = c + dx;
          if (rr < 0 || cc < 0 || rr >= x.rows() || cc >= x.cols()) continue;
          s += x(rr, cc);
          ++n;
        }
      out(r, c) = s / n;
    }
  return out;
}

Image phantom_slice() {
  const phantom::PhantomSpec s;
  return kspace::normalize_minmax(phantom::simulate_dwis(phantom::generate_tensor_field(s), s).slices[0]);
}

// U of the first sample by pairwise counting, ties worth one half
double u_pairs(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0;
  for (double x : a)
    for (double y : b) u += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  return u;
}

// two-sided p by enumerating every split of the pooled values
double p_enumerate(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pool = a;
  pool.insert(pool.end(), b.begin(), b.end());
  const int n = static_cast<int>(pool.size()), na = static_cast<int>(a.size());
  const double centre = 0.5 * a.size() * b.size();
  const double obs = std::abs(u_pairs(a, b) - centre);
  long extreme = 0, total = 0;
  for (unsigned m = 0; m < (1u << n); ++m) {
    if (std::popcount(m) != na) continue;
    std::vector<double> x, y;
    for (int i = 0; i < n; ++i) ((m >> i) & 1u ? x : y).push_back(pool[i]);
    ++total;
    if (std::abs(u_pairs(x, y) - centre) >= obs - 1e-9) ++extreme;
  }
  return static_cast<double>(extreme) / total;
}

}  // namespace

TEST_CASE("psnr") {
  const Image zero(10, 10, 0.0), tenth(10, 10, 0.1);
  CHECK(psnr(zero, tenth) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(psnr(tenth, tenth) == kInfinitePsnr);
  const Image x = phantom_slice();
  Rng rng(1);
  const auto noise = testing::random_values(rng, x.size(), -1, 1);
  double prev = kInfinitePsnr;
  for (double level : {0.01, 0.05, 0.2}) {
    Image y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y.pixels()[i] += level * noise[i];
    const double p = psnr(x, y);
    CHECK(p < prev);
    CHECK(p > 0.0);
    prev = p;
  }
  CHECK_THROWS(psnr(zero, Image(10, 11, 0.0)));
}

TEST_CASE("ssim") {
  const Image x = phantom_slice();
  CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-14));
  Image inv = x;
  for (double& v : inv.pixels()) v = 1.0 - v;
  CHECK(ssim(x, inv) < 1.0);
  Rng rng(2);
  for (int t = 0; t < 3; ++t) {
    const Image a = testing::random_image(rng, 11, 13), b = testing::random_image(rng, 11, 13);
    CHECK(std::abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-12);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-14));
  }
  const Image blurred = box_blur(x, 1);
  CHECK(std::abs(ssim(x, blurred) - ssim_oracle(x, blurred)) < 1e-12);
  CHECK(ssim(x, blurred) == doctest::Approx(0.8953966575757174).epsilon(1e-10));
  CHECK_THROWS(ssim(Image(5, 5, 0.0), Image(5, 5, 0.0)));
}

TEST_CASE("perceptual distance") {
  const losses::FeatureExtractor fe;
  const Image x = phantom_slice();
  CHECK(perceptual_distance(x, x, fe) == 0.0);
  Rng rng(3);
  const Image y = testing::random_image(rng, 96, 96);
  CHECK(std::abs(perceptual_distance(x, y, fe) - perceptual_distance(y, x, fe)) <= 1e-12);
  double prev = 0.0;
  for (int radius : {1, 2, 4}) {
    const double d = perceptual_distance(x, box_blur(x, radius), fe);
    CHECK(d > prev);
    prev = d;
  }
}

TEST_CASE("global MAE of DT parameters") {
  const phantom::PhantomSpec s;
  const auto field = phantom::generate_tensor_field(s);
  const auto clean = phantom::simulate_dwis(field, s);
  const auto ref = dtfit::compute_params(dtfit::fit_tensor_lls(clean, field.myo_mask), s.lv_center);
  const auto zero = mae_global(ref, ref, field.myo_mask);
  CHECK(zero.md == 0.0);
  CHECK(zero.fa == 0.0);
  CHECK(zero.ha_gradient == 0.0);

  auto shifted = ref;
  for (double& v : shifted.md) v += 1e-4;
  CHECK(mae_global(ref, shifted, field.myo_mask).md == doctest::Approx(1e-4).epsilon(1e-9));

  phantom::PhantomSpec noisy_spec = s;
  noisy_spec.noise_sigma = 0.02;
  noisy_spec.seed = 4;
  const auto noisy = phantom::add_rician_noise(clean, noisy_spec);
  const auto test = dtfit::compute_params(dtfit::fit_tensor_lls(noisy, field.myo_mask), s.lv_center);
  // two-pass oracle: sum and count finite in-mask values, then compare the means
  auto mean_of = [&](const std::vector<double>& v) {
    double sum = 0;
    int n = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (field.myo_mask.bits[i] && std::isfinite(v[i])) {
        sum += v[i];
        ++n;
      }
    return sum / n;
  };
  const auto m = mae_global(ref, test, field.myo_mask);
  CHECK(m.md == doctest::Approx(std::abs(mean_of(ref.md) - mean_of(test.md))).epsilon(1e-12));
  CHECK(m.fa == doctest::Approx(std::abs(mean_of(ref.fa) - mean_of(test.fa))).epsilon(1e-12));
  CHECK(m.ha_gradient == std::abs(ref.ha_gradient - test.ha_gradient));
  CHECK(m.fa > 0.0);
  CHECK_THROWS_AS(mae_global(ref, test, Mask(field.myo_mask.shape)), DegenerateInputError);
}

TEST_CASE("Mann-Whitney worked examples") {
  const auto r = mann_whitney_u({1, 2, 3}, {4, 5, 6});
  CHECK(r.u == 0.0);
  CHECK(r.exact);
  CHECK(r.p == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(mann_whitney_u({1, 2, 3}, {1, 2, 3}).p == 1.0);
  CHECK(mann_whitney_u({2, 2, 2}, {2, 2}).p == 1.0);
  // ranks survive a monotone transform
  const std::vector<double> a{0.3, 1.7, 2.2, 0.9}, b{1.1, 3.5, 2.8, 0.1, 4.0};
  std::vector<double> ea, eb;
  for (double v : a) ea.push_back(std::exp(v));
  for (double v : b) eb.push_back(std::exp(v));
  CHECK(mann_whitney_u(a, b).p == mann_whitney_u(ea, eb).p);
  CHECK(mann_whitney_u(a, b).u == mann_whitney_u(ea, eb).u);
  CHECK_THROWS(mann_whitney_u({}, {1.0}));
}

TEST_CASE("Mann-Whitney matches exhaustive enumeration up to 8 per sample") {
  Rng rng(5);
  for (int na = 1; na <= 8; ++na) {
    for (int nb = 1; nb <= 8; ++nb) {
      std::vector<double> a, b;
      // coarse values so ties occur
      for (int i = 0; i < na; ++i) a.push_back(static_cast<double>(rng.below(6)));
      for (int i = 0; i < nb; ++i) b.push_back(static_cast<double>(rng.below(6)) + 0.5 * (i % 2));
      const auto r = mann_whitney_u(a, b);
      CHECK(r.exact);
      CHECK(r.u == doctest::Approx(u_pairs(a, b)).epsilon(1e-12));
      CHECK(r.p == doctest::Approx(p_enumerate(a, b)).epsilon(1e-10));
    }
  }
}

TEST_CASE("Mann-Whitney normal approximation beyond the exact range") {
  std::vector<double> a, b;
  for (int i = 0; i < 25; ++i) {
    a.push_back(i);
    b.push_back(i + 10.5);
  }
  const auto r = mann_whitney_u(a, b);
  CHECK_FALSE(r.exact);
  CHECK(r.u == doctest::Approx(u_pairs(a, b)));
  // hand value: mean 312.5, var 25*25*51/12, continuity 0.5
  const double z = (std::abs(r.u - 312.5) - 0.5) / std::sqrt(25.0 * 25.0 * 51.0 / 12.0);
  CHECK(r.p == doctest::Approx(std::erfc(z / std::sqrt(2.0))).epsilon(1e-12));
}

TEST_CASE("mean (std) aggregation") {
  CHECK(format_mean_std({1, 2, 3}, 2) == "2.00 (1.00)");
  CHECK(format_mean_std({30.125, 31.5}, 3) == "30.812 (0.972)");
  CHECK(sample_std({5.0}) == 0.0);
  CHECK(mean({1, 2, 3, 4}) == 2.5);
  std::size_t removed = 0;
  const auto f = finite_only({1.0, kInfinitePsnr, std::nan(""), 2.0}, &removed);
  CHECK(f == std::vector<double>{1.0, 2.0});
  CHECK(removed == 2);
}
