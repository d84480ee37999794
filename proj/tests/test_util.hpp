#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "rsfr/autograd.hpp"
#include "rsfr/image.hpp"
#include "rsfr/random.hpp"

namespace rsfr::testing {

inline std::vector<double> random_values(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline nn::Var random_leaf(Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
  return nn::Var::parameter(rows, cols, random_values(rng, static_cast<std::size_t>(rows) * cols, lo, hi));
}

inline Image random_image(Rng& rng, int rows, int cols, double lo = 0.0, double hi = 1.0) {
  return Image({rows, cols}, random_values(rng, static_cast<std::size_t>(rows) * cols, lo, hi));
}

struct GradCheck {
  // ||analytic - numeric|| / max(||analytic||, ||numeric||) over every sampled entry of every leaf
  double rel_error = 0.0;
  // the same ratio for the worst single leaf, with an absolute floor so leaves whose exact
  // gradient vanishes (a bias feeding a normalisation) do not compare pure roundoff
  double worst_leaf = 0.0;
  std::size_t checked = 0;
};

/// Central differences on up to `per_leaf` entries of every leaf against reverse-mode gradients.
inline GradCheck check_gradients(const std::function<nn::Var()>& f, std::vector<nn::Var> leaves,
                                 std::size_t per_leaf = 40, double h = 1e-6, std::uint64_t seed = 7,
                                 double floor = 1e-6) {
  for (auto& l : leaves) l.zero_grad();
  nn::backward(f());
  GradCheck out;
  Rng rng(seed);
  double all_d2 = 0.0, all_a2 = 0.0, all_n2 = 0.0;
  for (auto& l : leaves) {
    const std::vector<double> analytic(l.grad().begin(), l.grad().end());
    std::vector<std::size_t> idx(l.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > per_leaf) {
      for (std::size_t i = 0; i < per_leaf; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      idx.resize(per_leaf);
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i : idx) {
      auto& v = l.mutable_value();
      const double x0 = v[i];
      v[i] = x0 + h;
      const double fp = f().item();
      v[i] = x0 - h;
      const double fm = f().item();
      v[i] = x0;
      const double num = (fp - fm) / (2.0 * h);
      const double an = analytic.empty() ? 0.0 : analytic[i];
      diff2 += (an - num) * (an - num);
      a2 += an * an;
      n2 += num * num;
      ++out.checked;
    }
    all_d2 += diff2;
    all_a2 += a2;
    all_n2 += n2;
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), floor});
    out.worst_leaf = std::max(out.worst_leaf, std::sqrt(diff2) / denom);
  }
  out.rel_error = std::sqrt(all_d2) / std::max({std::sqrt(all_a2), std::sqrt(all_n2), 1e-300});
  return out;
}

/// Random projection to a scalar so every output entry contributes to the checked gradient.
inline nn::Var project(const nn::Var& y, std::uint64_t seed = 11) {
  Rng rng(seed);
  const auto w = nn::Var::constant(y.rows(), y.cols(), random_values(rng, y.size()));
  return nn::sum(nn::mul(y, w));
}

}  // namespace rsfr::testing
