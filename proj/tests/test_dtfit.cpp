#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "rsfr/dtfit.hpp"
#include "rsfr/phantom.hpp"
#include "test_util.hpp"

using namespace rsfr;
using namespace rsfr::dtfit;

namespace {

struct PhantomCase {
  phantom::PhantomSpec spec;
  TensorField field;
  DWISeries series;
};

PhantomCase make_case(phantom::PhantomSpec s = {}) {
  auto f = phantom::generate_tensor_field(s);
  auto series = phantom::simulate_dwis(f, s);
  return {s, std::move(f), std::move(series)};
}

Mat3 random_sym(Rng& rng) {
  Mat3 a;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) a(i, j) = rng.uniform(-1, 1);
  return 0.5 * (a + a.transpose());
}

// FA by the textbook scalar expression
double fa_oracle(double l1, double l2, double l3) {
  const double num = (l1 - l2) * (l1 - l2) + (l2 - l3) * (l2 - l3) + (l3 - l1) * (l3 - l1);
  return std::sqrt(0.5 * num / (l1 * l1 + l2 * l2 + l3 * l3));
}

}  // namespace

TEST_CASE("noiseless phantom round trip recovers tensors, MD, FA and HA") {
  const auto pc = make_case();
  const auto map = fit_tensor_lls(pc.series, pc.field.myo_mask);
  const auto params = compute_params(map, pc.spec.lv_center);
  double coef = 0, md = 0, fa = 0, ha = 0;
  for (int r = 0; r < 96; ++r) {
    for (int c = 0; c < 96; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * 96 + c;
      if (!pc.field.myo_mask.bits[i]) {
        CHECK(std::isnan(params.md[i]));
        continue;
      }
      for (int k = 0; k < 6; ++k) coef = std::max(coef, std::abs(map.tensors[i].coeff(k) - pc.field.tensors[i].coeff(k)));
      const Mat3 d = pc.field.tensors[i].matrix();
      md = std::max(md, std::abs(params.md[i] - compute_md(d)));
      fa = std::max(fa, std::abs(params.fa[i] - compute_fa(d)));
      ha = std::max(ha, std::abs(params.ha[i] - phantom::prescribed_ha(pc.spec, phantom::wall_depth(pc.spec, r, c))));
      CHECK(map.residual[i] < 1e-10);
    }
  }
  CHECK(coef < 1e-10);
  CHECK(md < 1e-8);
  CHECK(fa < 1e-8);
  CHECK(ha < 1e-6);
}

TEST_CASE("isotropic fit has negligible off-diagonals") {
  phantom::PhantomSpec s;
  s.eigenvalues = {1.2e-3, 1.2e-3, 1.2e-3};
  const auto pc = make_case(s);
  const auto map = fit_tensor_lls(pc.series, pc.field.myo_mask);
  for (std::size_t i = 0; i < map.tensors.size(); ++i) {
    if (!pc.field.myo_mask.bits[i]) continue;
    CHECK(std::abs(map.tensors[i].xy) < 1e-12);
    CHECK(std::abs(map.tensors[i].xz) < 1e-12);
    CHECK(std::abs(map.tensors[i].yz) < 1e-12);
  }
}

TEST_CASE("fit is invariant to replication and to signal scaling") {
  phantom::PhantomSpec s;
  s.noise_sigma = 0.03;
  s.seed = 2;
  auto pc = make_case(s);
  pc.series = phantom::add_rician_noise(pc.series, s);
  const auto base = fit_tensor_lls(pc.series, pc.field.myo_mask);

  DWISeries twice = pc.series;
  for (std::size_t k = 0; k < pc.series.size(); ++k) {
    twice.slices.push_back(pc.series.slices[k]);
    twice.b_values.push_back(pc.series.b_values[k]);
    twice.directions.push_back(pc.series.directions[k]);
  }
  const auto dup = fit_tensor_lls(twice, pc.field.myo_mask);
  DWISeries scaled = pc.series;
  for (auto& sl : scaled.slices)
    for (double& v : sl.pixels()) v *= 3.7;
  const auto sc = fit_tensor_lls(scaled, pc.field.myo_mask);
  double e_dup = 0, e_sc = 0;
  for (std::size_t i = 0; i < base.tensors.size(); ++i) {
    if (!pc.field.myo_mask.bits[i]) continue;
    for (int k = 0; k < 6; ++k) {
      e_dup = std::max(e_dup, std::abs(dup.tensors[i].coeff(k) - base.tensors[i].coeff(k)));
      e_sc = std::max(e_sc, std::abs(sc.tensors[i].coeff(k) - base.tensors[i].coeff(k)));
    }
  }
  CHECK(e_dup < 1e-12);
  CHECK(e_sc < 1e-12);
}

TEST_CASE("series validation") {
  auto pc = make_case();
  CHECK_NOTHROW(validate_series(pc.series));
  DWISeries collinear = pc.series;
  for (std::size_t k = 1; k < collinear.size(); ++k) collinear.directions[k] = Vec3(1, 0, 0);
  CHECK_THROWS(validate_series(collinear));
  CHECK_THROWS(fit_tensor_lls(collinear, pc.field.myo_mask));
  DWISeries no_b0 = pc.series;
  no_b0.slices.erase(no_b0.slices.begin());
  no_b0.b_values.erase(no_b0.b_values.begin());
  no_b0.directions.erase(no_b0.directions.begin());
  CHECK_THROWS(validate_series(no_b0));
}

TEST_CASE("non-positive measurements are dropped per pixel") {
  auto pc = make_case();
  const int r = 47, c = 47 + 24;
  pc.series.slices[3](r, c) = 0.0;
  const auto map = fit_tensor_lls(pc.series, pc.field.myo_mask);
  const std::size_t i = static_cast<std::size_t>(r) * 96 + c;
  for (int k = 0; k < 6; ++k) CHECK(std::abs(map.tensors[i].coeff(k) - pc.field.tensors[i].coeff(k)) < 1e-10);
}

TEST_CASE("eigen decomposition") {
  Mat3 d = Mat3::Zero();
  d.diagonal() << 3, 1, 2;
  const auto e = eig_sorted(d);
  CHECK(e.values == std::array<double, 3>{3, 2, 1});
  CHECK(std::abs(std::abs(e.vectors(0, 0)) - 1.0) < 1e-15);
  CHECK(std::abs(std::abs(e.vectors(2, 1)) - 1.0) < 1e-15);
  CHECK(compute_fa(Mat3::Identity()) == doctest::Approx(0.0));

  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const Mat3 a = random_sym(rng);
    const auto ed = eig_sorted(a);
    const Mat3 l = Eigen::Vector3d(ed.values[0], ed.values[1], ed.values[2]).asDiagonal();
    CHECK((ed.vectors * l * ed.vectors.transpose() - a).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((ed.vectors.transpose() * ed.vectors - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(ed.values[0] >= ed.values[1]);
    CHECK(ed.values[1] >= ed.values[2]);
    const WallFrame f = wall_frame(10, 70, Point2{47.5, 47.5});
    const auto ef = eig_sorted(a, &f);
    CHECK(Vec3(ef.vectors.col(0)).dot(f.circumferential) >= 0.0);
    const Mat3 p = psd_project(a);
    CHECK(eig_sorted(p).values[2] >= -1e-15);
  }
}

TEST_CASE("MD and FA formulas") {
  CHECK(compute_md(std::array<double, 3>{1e-3, 1e-3, 1e-3}) == doctest::Approx(1e-3));
  CHECK(compute_fa(std::array<double, 3>{1e-3, 1e-3, 1e-3}) == 0.0);
  CHECK(compute_fa(std::array<double, 3>{1, 0, 0}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(compute_fa(std::array<double, 3>{0, 0, 0}) == 0.0);
  CHECK(std::abs(compute_fa(std::array<double, 3>{1.7e-3, 0.3e-3, 0.1e-3}) - fa_oracle(1.7e-3, 0.3e-3, 0.1e-3)) < 1e-12);
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const auto d = psd_project(random_sym(rng));
    const double fa = compute_fa(d);
    CHECK(fa >= 0.0);
    CHECK(fa <= 1.0 + 1e-15);
    CHECK(compute_md(d) == doctest::Approx(d.trace() / 3.0));
  }
}

TEST_CASE("helix angle conventions") {
  const Point2 c{47.5, 47.5};
  const int r = 20, col = 60;
  const WallFrame f = wall_frame(r, col, c);
  CHECK(*compute_ha(f.circumferential, r, col, c) == doctest::Approx(0.0));
  CHECK(*compute_ha(f.longitudinal, r, col, c) == doctest::Approx(90.0));
  CHECK(*compute_ha(Vec3(-f.longitudinal), r, col, c) == doctest::Approx(90.0));
  CHECK_FALSE(compute_ha(f.radial, r, col, c).has_value());
  const Vec3 e = (std::cos(0.4) * f.circumferential + std::sin(0.4) * f.longitudinal + 0.3 * f.radial).normalized();
  const double h = *compute_ha(e, r, col, c);
  CHECK(h == doctest::Approx(0.4 * 180.0 / M_PI));
  CHECK(*compute_ha(Vec3(-e), r, col, c) == doctest::Approx(h));
  // mid-wall pixel of the linear phantom
  const phantom::PhantomSpec s;
  const auto field = phantom::generate_tensor_field(s);
  const int mr = 47, mc = static_cast<int>(std::lround(47.5 + 24.0));
  const double depth = phantom::wall_depth(s, mr, mc);
  const double got = *compute_ha(field.at(mr, mc).matrix(), mr, mc, s.lv_center);
  CHECK(std::abs(got - phantom::prescribed_ha(s, depth)) < 1e-6);
}

TEST_CASE("line profiles on the linear phantom") {
  const auto pc = make_case();
  const auto map = fit_tensor_lls(pc.series, pc.field.myo_mask);
  const auto params = compute_params(map, pc.spec.lv_center);
  const auto prof = ha_line_profile(params.ha, pc.field.myo_mask, pc.spec.lv_center, 36, 20);
  CHECK(prof.profiles.size() == 36);
  CHECK(prof.skipped == 0);
  for (const auto& p : prof.profiles) {
    CHECK(p.r_squared >= 0.99);
    CHECK(std::is_sorted(p.depth.begin(), p.depth.end()));
    CHECK(p.depth.front() >= 0.0);
    CHECK(p.depth.back() <= 1.0);
  }
  CHECK(std::abs(ha_gradient(prof) + 120.0) < 1.0);
  CHECK(std::abs(params.ha_gradient + 120.0) < 1.0);
}

TEST_CASE("constant and shuffled profiles") {
  const phantom::PhantomSpec s;
  const auto field = phantom::generate_tensor_field(s);
  std::vector<double> constant(96 * 96, 25.0);
  const auto prof = ha_line_profile(constant, field.myo_mask, s.lv_center);
  REQUIRE_FALSE(prof.profiles.empty());
  for (const auto& p : prof.profiles) {
    CHECK(p.slope == doctest::Approx(0.0));
    CHECK(p.rmse == doctest::Approx(0.0));
    CHECK(p.r_squared == 0.0);
  }
  CHECK(ha_gradient(prof) == doctest::Approx(0.0));

  std::vector<double> x, y;
  for (int i = 0; i < 20; ++i) {
    x.push_back(i / 19.0);
    y.push_back(60.0 - 120.0 * i / 19.0 + 0.5 * std::sin(i));
  }
  const auto fit = fit_line(x, y);
  std::vector<double> ys = y;
  Rng rng(5);
  for (std::size_t i = ys.size() - 1; i > 0; --i) std::swap(ys[i], ys[rng.below(i + 1)]);
  CHECK(fit_line(x, ys).rmse > fit.rmse);
  CHECK(fit.r_squared >= 0.0);
  CHECK(fit.r_squared <= 1.0);

  Mask empty({96, 96});
  const auto none = ha_line_profile(constant, empty, s.lv_center);
  CHECK(none.profiles.empty());
  CHECK(none.skipped == 36);
  CHECK_THROWS_AS(ha_gradient(none), DegenerateInputError);
}

TEST_CASE("annulus fit from a segmentation") {
  const phantom::PhantomSpec s;
  const auto field = phantom::generate_tensor_field(s);
  Point2 c;
  const Mask fitted = annulus_from_segmentation(field.myo_mask, &c);
  CHECK(std::abs(c.x - s.lv_center.x) < 0.5);
  CHECK(std::abs(c.y - s.lv_center.y) < 0.5);
  std::size_t inter = 0;
  for (std::size_t i = 0; i < fitted.bits.size(); ++i) inter += fitted.bits[i] && field.myo_mask.bits[i];
  CHECK(inter >= 0.85 * fitted.count());
}
