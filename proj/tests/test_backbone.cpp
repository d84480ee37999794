#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "rsfr/backbone.hpp"
#include "test_util.hpp"

using namespace rsfr;
using namespace rsfr::backbone;
using nn::Var;

namespace {

// closed-form count from the layer inventory, independent of the constructors
std::size_t expected_parameters(const BackboneConfig& c) {
  const std::size_t C = c.embed_dim, E = c.inner_dim(), R = c.dt_rank(), N = c.state_dim, P = c.patch_size;
  const std::size_t s6 = E * (R + 2 * N) + (R * E + E) + E * N + E;
  const std::size_t vss = 2 * C + (C * 2 * E + 2 * E) + (9 * E + E) + 4 * s6 + 2 * E + (E * C + C);
  const std::size_t block = 2 * vss;
  std::size_t total = (P * P * C + C) + (C * P * P + P * P) + 2 * C;
  total += 4 * C + (C * 3 * C + 3 * C) + (C * C + C) + (C * 2 * C + 2 * C) + (2 * C * C + C);
  for (int i = 0; i < c.stages(); ++i) {
    const std::size_t f = c.scale_factors[i];
    total += 2 * block + (2 * C * C + C);
    if (f > 1) total += (f * f * C * C + C) + (C * f * f * C + f * f * C);
  }
  return total;
}

BackboneConfig tiny() {
  BackboneConfig c;
  c.input_size = 8;
  c.patch_size = 2;
  c.embed_dim = 4;
  c.state_dim = 2;
  c.expand = 2;
  c.attention_heads = 2;
  c.scale_factors = {1, 2};
  c.seed = 5;
  return c;
}

// shifts every parameter off its structured initial value so gradient checks see generic points
void jitter(nn::ParameterSet& ps, std::uint64_t seed, double amp = 0.1) {
  Rng rng(seed);
  for (const auto& p : ps.entries()) {
    auto v = p.var;
    for (double& x : v.mutable_value()) x += rng.uniform(-amp, amp);
  }
}

}  // namespace

TEST_CASE("scan orders on a 2x2 grid") {
  CHECK(scan_order(2, 2, 0) == std::vector<int>{0, 1, 2, 3});
  CHECK(scan_order(2, 2, 1) == std::vector<int>{0, 2, 1, 3});
  CHECK(scan_order(2, 2, 2) == std::vector<int>{3, 2, 1, 0});
  CHECK(scan_order(2, 2, 3) == std::vector<int>{3, 1, 2, 0});
}

TEST_CASE("scan orders are bijections and merge(expand) is 4x identity") {
  for (int h = 1; h <= 16; ++h) {
    for (int w = 1; w <= 16; ++w) {
      for (int k = 0; k < 4; ++k) {
        const auto p = scan_order(h, w, k);
        REQUIRE(p.size() == static_cast<std::size_t>(h * w));
        std::vector<int> sorted = p;
        std::sort(sorted.begin(), sorted.end());
        std::vector<int> iota(p.size());
        std::iota(iota.begin(), iota.end(), 0);
        REQUIRE(sorted == iota);
        const auto inv = inverse_permutation(p);
        for (std::size_t i = 0; i < p.size(); ++i) REQUIRE(inv[p[i]] == static_cast<int>(i));
      }
    }
  }
  Rng rng(1);
  const FeatureMap f{testing::random_leaf(rng, 5 * 7, 3), 5, 7};
  const FeatureMap m = scan_merge(scan_expand(f));
  for (std::size_t i = 0; i < f.values.size(); ++i) CHECK(m.values.value()[i] == 4.0 * f.values.value()[i]);
}

TEST_CASE("selective scan: unrolled oracle, single step and causality") {
  Rng rng(2);
  const int L = 3, E = 2, N = 2;
  auto u = testing::random_leaf(rng, L, E);
  auto delta = testing::random_leaf(rng, L, E, 0.05, 0.5);
  auto a_log = testing::random_leaf(rng, E, N, -0.5, 0.5);
  auto b = testing::random_leaf(rng, L, N);
  auto c = testing::random_leaf(rng, L, N);
  auto d = testing::random_leaf(rng, 1, E);
  const Var y = selective_scan(u, delta, a_log, b, c, d);
  for (int e = 0; e < E; ++e) {
    double h[N] = {0, 0};
    for (int t = 0; t < L; ++t) {
      double out = d.at(0, e) * u.at(t, e);
      for (int n = 0; n < N; ++n) {
        const double A = -std::exp(a_log.at(e, n));
        h[n] = std::exp(delta.at(t, e) * A) * h[n] + delta.at(t, e) * b.at(t, n) * u.at(t, e);
        out += c.at(t, n) * h[n];
      }
      CHECK(std::abs(y.at(t, e) - out) <= 1e-12);
    }
  }

  // a length-1 sequence is one step from a zero state
  Var u1 = Var::constant(1, E, {u.at(0, 0), u.at(0, 1)});
  Var dl1 = Var::constant(1, E, {delta.at(0, 0), delta.at(0, 1)});
  Var b1 = Var::constant(1, N, {b.at(0, 0), b.at(0, 1)});
  Var c1 = Var::constant(1, N, {c.at(0, 0), c.at(0, 1)});
  const Var one = selective_scan(u1, dl1, a_log, b1, c1, d);
  for (int e = 0; e < E; ++e) {
    double expected = d.at(0, e) * u1.at(0, e);
    for (int n = 0; n < N; ++n) expected += c1.at(0, n) * dl1.at(0, e) * b1.at(0, n) * u1.at(0, e);
    CHECK(std::abs(one.at(0, e) - expected) <= 1e-14);
  }

  const int L2 = 12, E2 = 4, N2 = 3;
  auto U = testing::random_leaf(rng, L2, E2);
  auto D = testing::random_leaf(rng, L2, E2, 0.01, 0.3);
  auto AL = testing::random_leaf(rng, E2, N2);
  auto B = testing::random_leaf(rng, L2, N2);
  auto Cc = testing::random_leaf(rng, L2, N2);
  auto DD = testing::random_leaf(rng, 1, E2);
  const Var y0 = selective_scan(U, D, AL, B, Cc, DD);
  const std::vector<double> before(y0.value().begin(), y0.value().end());
  for (int t : {0, 5, 11}) {
    auto U2 = Var::constant(L2, E2, std::vector<double>(U.value().begin(), U.value().end()));
    U2.mutable_value()[t * E2 + 1] += 0.37;
    const Var after = selective_scan(U2, D, AL, B, Cc, DD);
    for (int s = 0; s < t * E2; ++s) CHECK(after.value()[s] == before[s]);
    bool changed = false;
    for (int s = t * E2; s < L2 * E2; ++s) changed |= after.value()[s] != before[s];
    CHECK(changed);
  }
}

TEST_CASE("selective scan and S6 gradients match finite differences") {
  Rng rng(3);
  const int L = 7, E = 3, N = 2;
  auto u = testing::random_leaf(rng, L, E);
  auto delta = testing::random_leaf(rng, L, E, 0.05, 0.6);
  auto a_log = testing::random_leaf(rng, E, N, -0.5, 0.5);
  auto b = testing::random_leaf(rng, L, N);
  auto c = testing::random_leaf(rng, L, N);
  auto d = testing::random_leaf(rng, 1, E);
  const auto r = testing::check_gradients(
      [&] { return testing::project(selective_scan(u, delta, a_log, b, c, d)); }, {u, delta, a_log, b, c, d});
  CHECK(r.rel_error < 1e-4);

  nn::ParameterSet ps;
  const auto p = S6Params::make(ps, "s6", 4, 1, 3, rng);
  jitter(ps, 4);
  auto seq = testing::random_leaf(rng, 9, 4);
  std::vector<Var> leaves{seq};
  for (const auto& e : ps.entries()) leaves.push_back(e.var);
  const auto r2 = testing::check_gradients([&] { return testing::project(s6_sequence(seq, p, 1, 3)); }, leaves);
  CHECK(r2.rel_error < 1e-4);
}

TEST_CASE("VSS block: shape, gradient on an 8x4x4 input, zero weights give identity") {
  Rng rng(5);
  nn::ParameterSet ps;
  VSSBlock block(ps, "vss", 8, 16, 1, 4, rng);
  jitter(ps, 6, 0.05);
  FeatureMap f{testing::random_leaf(rng, 16, 8), 4, 4};
  const FeatureMap out = block(f);
  CHECK(out.height == 4);
  CHECK(out.width == 4);
  CHECK(out.channels() == 8);
  std::vector<Var> leaves{f.values};
  for (const auto& e : ps.entries()) leaves.push_back(e.var);
  const auto r = testing::check_gradients([&] { return testing::project(block(f).values); }, leaves, 25);
  CHECK(r.rel_error < 1e-4);

  FeatureMap g{testing::random_leaf(rng, 3 * 5, 8), 3, 5};
  CHECK(block(g).values.rows() == 15);
  for (const auto& e : ps.entries()) {
    auto v = e.var;
    std::fill(v.mutable_value().begin(), v.mutable_value().end(), 0.0);
  }
  const FeatureMap id = block(g);
  for (std::size_t i = 0; i < g.values.size(); ++i) CHECK(id.values.value()[i] == g.values.value()[i]);
}

TEST_CASE("patch embedding shapes and gradient") {
  Rng rng(7);
  nn::ParameterSet ps;
  const auto proj = nn::Linear::make(ps, "embed", 4, 32, rng);
  const auto back = nn::Linear::make(ps, "unembed", 32, 4, rng);
  const Var img = testing::random_leaf(rng, 96 * 96, 1, 0.0, 1.0);
  const FeatureMap f = patch_embed(img, 96, 2, proj);
  CHECK(f.height == 48);
  CHECK(f.width == 48);
  CHECK(f.channels() == 32);
  CHECK(patch_unembed(f, 2, back).rows() == 96 * 96);
  CHECK_THROWS(patch_embed(img, 96, 5, proj));

  nn::ParameterSet small;
  const auto p2 = nn::Linear::make(small, "embed", 4, 3, rng);
  const auto u2 = nn::Linear::make(small, "unembed", 3, 4, rng);
  auto x = testing::random_leaf(rng, 36, 1);
  const auto r = testing::check_gradients(
      [&] { return testing::project(patch_unembed(patch_embed(x, 6, 2, p2), 2, u2)); },
      {x, p2.weight, p2.bias, u2.weight, u2.bias});
  CHECK(r.rel_error < 1e-4);
}

TEST_CASE("space/depth rearrangements invert each other") {
  Rng rng(8);
  const FeatureMap f{testing::random_leaf(rng, 6 * 4, 3), 6, 4};
  const FeatureMap s = space_to_depth(f, 2);
  CHECK(s.height == 3);
  CHECK(s.channels() == 12);
  const FeatureMap back = depth_to_space(s, 2);
  for (std::size_t i = 0; i < f.values.size(); ++i) CHECK(back.values.value()[i] == f.values.value()[i]);
}

TEST_CASE("parameter count matches the closed form and is pinned for the toy config") {
  for (BackboneConfig c : {BackboneConfig::toy(), tiny(), BackboneConfig::full()}) {
    nn::ParameterSet ps;
    MambaUNet net(ps, "n", c);
    CHECK(ps.scalar_count() == expected_parameters(c));
    CHECK(parameter_count(c) == expected_parameters(c));
  }
  CHECK(parameter_count(BackboneConfig::toy()) == 148912);
}

TEST_CASE("untrained network is finite and shape-preserving, also with a zeroed bottleneck") {
  ReconstructionModel m(BackboneConfig::toy());
  Rng rng(9);
  const Image zf = testing::random_image(rng, 96, 96);
  const Image out = m.reconstruct_coarse(zf);
  CHECK(out.shape() == zf.shape());
  CHECK(out.all_finite());
  m.network().set_zero_bottleneck(true);
  const Image z = m.reconstruct_coarse(zf);
  CHECK(z.shape() == zf.shape());
  CHECK(z.all_finite());
  CHECK(z.vector() != out.vector());
  Image bad = zf;
  bad(3, 3) = 4.0;
  CHECK_THROWS(m.reconstruct_coarse(bad));
}

TEST_CASE("full-size network instantiates and runs a forward pass") {
  ReconstructionModel m(BackboneConfig::full());
  Rng rng(10);
  const Image out = m.reconstruct_coarse(testing::random_image(rng, 96, 96));
  CHECK(out.all_finite());
  CHECK(out.rows() == 96);
}

TEST_CASE("config validation") {
  BackboneConfig c;
  c.n_res_blocks = 3;
  CHECK_THROWS(c.validate());
  c = {};
  c.input_size = 90;
  CHECK_THROWS(c.validate());
  c = {};
  c.embed_dim = 30;
  CHECK_THROWS(c.validate());
}

TEST_CASE("full network gradient matches finite differences on tiny dims") {
  nn::ParameterSet ps;
  MambaUNet net(ps, "t", tiny());
  jitter(ps, 12, 0.05);
  Rng rng(11);
  auto x = testing::random_leaf(rng, 64, 1, 0.0, 1.0);
  std::vector<Var> leaves{x};
  for (const auto& e : ps.entries()) leaves.push_back(e.var);
  const auto r = testing::check_gradients([&] { return testing::project(net.forward(x)); }, leaves, 6);
  CHECK(r.rel_error < 1e-4);
}
