#include <cmath>
#include <numbers>

#include "doctest.h"
#include "rsfr/dtfit.hpp"
#include "rsfr/phantom.hpp"
#include "test_util.hpp"

using namespace rsfr;
using phantom::PhantomSpec;

TEST_CASE("spec validation rejects degenerate geometry and tensors") {
  PhantomSpec s;
  CHECK_NOTHROW(s.validate());
  s.r_endo = 30.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.r_epi = 48.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.eigenvalues = {1e-3, 2e-3, 0.5e-3};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.eigenvalues = {1e-3, 1e-3, 0.0};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.directions[0] = Vec3(1.0, 1e-5, 0.0);
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.noise_sigma = -0.1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.r_endo = s.r_epi;
  CHECK_THROWS(phantom::generate_tensor_field(s));
}

TEST_CASE("mask is the annulus and tensors are symmetric PSD with the prescribed eigenvalues") {
  const PhantomSpec s;
  const auto f = phantom::generate_tensor_field(s);
  std::size_t n = 0;
  for (int r = 0; r < s.grid_size; ++r) {
    for (int c = 0; c < s.grid_size; ++c) {
      const double rad = std::hypot(c - s.lv_center.x, r - s.lv_center.y);
      const bool inside = rad >= s.r_endo && rad <= s.r_epi;
      REQUIRE(f.myo_mask(r, c) == inside);
      if (!inside) continue;
      ++n;
      const Mat3 d = f.at(r, c).matrix();
      CHECK((d - d.transpose()).cwiseAbs().maxCoeff() <= 1e-15);
      const auto e = dtfit::eig_sorted(d);
      for (int k = 0; k < 3; ++k) CHECK(e.values[k] == doctest::Approx(s.eigenvalues[k]).epsilon(1e-12));
    }
  }
  CHECK(n == f.myo_mask.count());
  CHECK(n > 0);
}

TEST_CASE("helix angle follows the linear transmural law") {
  const PhantomSpec s;
  CHECK(phantom::prescribed_ha(s, 0.5) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(phantom::prescribed_ha(s, 0.0) == 60.0);
  CHECK(phantom::prescribed_ha(s, 1.0) == -60.0);

  const auto f = phantom::generate_tensor_field(s);
  double worst = 0.0;
  std::vector<double> depth, ha;
  for (int r = 0; r < s.grid_size; ++r) {
    for (int c = 0; c < s.grid_size; ++c) {
      if (!f.myo_mask(r, c)) continue;
      const auto e = dtfit::eig_sorted(f.at(r, c).matrix());
      const auto h = dtfit::compute_ha(Vec3(e.vectors.col(0)), r, c, s.lv_center);
      REQUIRE(h.has_value());
      const double t = phantom::wall_depth(s, r, c);
      worst = std::max(worst, std::abs(*h - phantom::prescribed_ha(s, t)));
      depth.push_back(t);
      ha.push_back(*h);
    }
  }
  CHECK(worst < 1e-9);
  const auto line = dtfit::fit_line(depth, ha);
  CHECK(std::abs(line.slope - (s.ha_epi - s.ha_endo)) < 1e-6);
}

TEST_CASE("isotropic tensors give zero FA") {
  PhantomSpec s;
  s.eigenvalues = {1.5e-3, 1.5e-3, 1.5e-3};
  const auto f = phantom::generate_tensor_field(s);
  for (std::size_t i = 0; i < f.tensors.size(); ++i) {
    if (!f.myo_mask.bits[i]) continue;
    CHECK(dtfit::compute_fa(f.tensors[i].matrix()) == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("simulated signals match the scalar forward model") {
  const PhantomSpec s;
  const auto f = phantom::generate_tensor_field(s);
  const auto series = phantom::simulate_dwis(f, s);
  REQUIRE(series.size() == static_cast<std::size_t>(s.b0_repetitions) + 2 * s.directions.size());
  CHECK(series.b_values[0] == 0.0);
  double worst = 0.0;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Image& img = series.slices[k];
    for (int r = 0; r < s.grid_size; ++r) {
      for (int c = 0; c < s.grid_size; ++c) {
        if (!f.myo_mask(r, c)) {
          CHECK(img(r, c) == s.background * s.s0);
          continue;
        }
        const Vec3 g = series.directions[k];
        const Mat3 d = f.at(r, c).matrix();
        const double expected = s.s0 * std::exp(-series.b_values[k] * g.dot(d * g));
        worst = std::max(worst, std::abs(img(r, c) - expected));
        CHECK(img(r, c) > 0.0);
        CHECK(img(r, c) <= s.s0);
        if (series.b_values[k] == 0.0) CHECK(img(r, c) == s.s0);
      }
    }
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("isotropic tensors give direction-independent signal") {
  PhantomSpec s;
  s.eigenvalues = {1e-3, 1e-3, 1e-3};
  const auto series = phantom::simulate_dwis(phantom::generate_tensor_field(s), s);
  const int r = 47, c = 47 + 24;
  for (std::size_t k = 1; k < series.size(); ++k) {
    CHECK(series.slices[k](r, c) == doctest::Approx(std::exp(-series.b_values[k] * 1e-3)).epsilon(1e-13));
  }
}

TEST_CASE("rician noise: identity at zero sigma, deterministic, positive, Rayleigh background mean") {
  Rng rng(3);
  const Image x = testing::random_image(rng, 100, 100);
  const Image same = phantom::add_rician_noise(x, 0.0, 5);
  CHECK(same.vector() == x.vector());
  const Image a = phantom::add_rician_noise(x, 0.1, 42), b = phantom::add_rician_noise(x, 0.1, 42);
  CHECK(a.vector() == b.vector());
  for (double v : a.pixels()) CHECK(v >= 0.0);
  CHECK_THROWS(phantom::add_rician_noise(x, -0.1, 1));

  const double sigma = 0.05;
  const Image bg = phantom::add_rician_noise(Image(100, 100, 0.0), sigma, 9);
  double m = 0.0;
  for (double v : bg.pixels()) m += v;
  m /= static_cast<double>(bg.size());
  const double expected = sigma * std::sqrt(std::numbers::pi / 2.0);
  const double se = sigma * std::sqrt((4.0 - std::numbers::pi) / 2.0) / 100.0;
  CHECK(std::abs(m - expected) < 3.0 * se);
}

TEST_CASE("series noise uses independent per-slice streams") {
  PhantomSpec s;
  s.noise_sigma = 0.02;
  s.seed = 4;
  const auto clean = phantom::simulate_dwis(phantom::generate_tensor_field(s), s);
  const auto noisy = phantom::add_rician_noise(clean, s);
  REQUIRE(noisy.size() == clean.size());
  CHECK(noisy.slices[0].vector() != noisy.slices[1].vector());
  CHECK(phantom::add_rician_noise(clean, s).slices[3].vector() == noisy.slices[3].vector());
}
