#include "rsfr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <stdexcept>

#include "rsfr/backbone.hpp"

namespace rsfr::metrics {

namespace {

void same_shape(const Image& a, const Image& b, const char* what) {
  if (a.shape() != b.shape()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

std::vector<double> gaussian_window() {
  constexpr int k = 7;
  constexpr double sigma = 1.5;
  std::vector<double> w(k * k);
  double total = 0;
  for (int y = 0; y < k; ++y) {
    for (int x = 0; x < k; ++x) {
      const double dy = y - 3, dx = x - 3;
      w[y * k + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      total += w[y * k + x];
    }
  }
  for (double& v : w) v /= total;
  return w;
}

}  // namespace

double psnr(const Image& ref, const Image& test) {
  same_shape(ref, test, "psnr");
  double se = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = ref.pixels()[i] - test.pixels()[i];
    se += d * d;
  }
  if (se == 0) return kInfinitePsnr;
  return 10.0 * std::log10(1.0 / (se / static_cast<double>(ref.size())));
}

double ssim(const Image& ref, const Image& test) {
  same_shape(ref, test, "ssim");
  constexpr int k = 7;
  if (ref.rows() < k || ref.cols() < k) throw std::invalid_argument("ssim: image smaller than the 7x7 window");
  static const std::vector<double> w = gaussian_window();
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  std::size_t count = 0;
  for (int r = 0; r + k <= ref.rows(); ++r) {
    for (int c = 0; c + k <= ref.cols(); ++c) {
      double mx = 0, my = 0;
      for (int y = 0; y < k; ++y) {
        for (int x = 0; x < k; ++x) {
          mx += w[y * k + x] * ref(r + y, c + x);
          my += w[y * k + x] * test(r + y, c + x);
        }
      }
      double vx = 0, vy = 0, cxy = 0;
      for (int y = 0; y < k; ++y) {
        for (int x = 0; x < k; ++x) {
          const double a = ref(r + y, c + x) - mx, b = test(r + y, c + x) - my;
          vx += w[y * k + x] * a * a;
          vy += w[y * k + x] * b * b;
          cxy += w[y * k + x] * a * b;
        }
      }
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double perceptual_distance(const Image& ref, const Image& test, const losses::FeatureExtractor& extractor) {
  same_shape(ref, test, "perceptual_distance");
  if (ref.rows() != ref.cols()) throw std::invalid_argument("perceptual_distance: square images required");
  nn::NoGradGuard guard;
  const auto fa = extractor.features(backbone::image_to_var(ref), ref.rows());
  const auto fb = extractor.features(backbone::image_to_var(test), test.rows());
  double dist = 0;
  for (std::size_t s = 0; s < fa.size(); ++s) {
    const int rows = fa[s].rows(), cols = fa[s].cols();
    double acc = 0;
    for (int i = 0; i < rows; ++i) {
      double na = 0, nb = 0;
      for (int j = 0; j < cols; ++j) {
        na += fa[s].at(i, j) * fa[s].at(i, j);
        nb += fb[s].at(i, j) * fb[s].at(i, j);
      }
      na = std::sqrt(na) + 1e-10;
      nb = std::sqrt(nb) + 1e-10;
      for (int j = 0; j < cols; ++j) {
        const double d = fa[s].at(i, j) / na - fb[s].at(i, j) / nb;
        acc += d * d;
      }
    }
    dist += acc / rows;
  }
  return dist;
}

double masked_mean(const std::vector<double>& values, const Mask& mask) {
  if (values.size() != mask.bits.size()) throw std::invalid_argument("masked_mean: size mismatch");
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (mask.bits[i] && std::isfinite(values[i])) {
      s += values[i];
      ++n;
    }
  }
  if (n == 0) throw DegenerateInputError("masked_mean: empty mask");
  return s / static_cast<double>(n);
}

GlobalMae mae_global(const dtfit::DTParams& ref, const dtfit::DTParams& test, const Mask& mask) {
  if (mask.count() == 0) throw DegenerateInputError("mae_global: empty mask");
  GlobalMae m;
  m.md = std::abs(masked_mean(ref.md, mask) - masked_mean(test.md, mask));
  m.fa = std::abs(masked_mean(ref.fa, mask) - masked_mean(test.fa, mask));
  m.ha_gradient = std::abs(ref.ha_gradient - test.ha_gradient);
  return m;
}

MannWhitney mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("mann_whitney_u: samples must be non-empty");
  const std::size_t na = a.size(), nb = b.size(), n = na + nb;
  std::vector<std::pair<double, int>> all;
  for (double v : a) all.emplace_back(v, 0);
  for (double v : b) all.emplace_back(v, 1);
  std::stable_sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  // doubled midranks stay integral
  std::vector<int> rank2(n);
  std::vector<std::size_t> tie_sizes;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && all[j].first == all[i].first) ++j;
    for (std::size_t k = i; k < j; ++k) rank2[k] = static_cast<int>(i + 1 + j);
    tie_sizes.push_back(j - i);
    i = j;
  }
  long long ra2 = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (all[k].second == 0) ra2 += rank2[k];
  }
  const long long base2 = static_cast<long long>(na * (na + 1));  // 2 * na(na+1)/2
  MannWhitney res;
  res.u = static_cast<double>(ra2 - base2) / 2.0;
  const double mu = static_cast<double>(na * nb) / 2.0;
  if (tie_sizes.size() == 1) {
    res.p = 1.0;
    res.exact = na <= 20 && nb <= 20;
    return res;
  }
  if (na <= 20 && nb <= 20) {
    // count subsets of size na by doubled rank sum
    const int max_sum = std::accumulate(rank2.begin(), rank2.end(), 0);
    std::vector<std::vector<double>> ways(na + 1, std::vector<double>(static_cast<std::size_t>(max_sum) + 1, 0.0));
    ways[0][0] = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t m = std::min(k + 1, na); m >= 1; --m) {
        auto& dst = ways[m];
        const auto& src = ways[m - 1];
        for (int s = max_sum; s >= rank2[k]; --s) dst[s] += src[s - rank2[k]];
      }
    }
    double total = 0, extreme = 0;
    const double obs = std::abs(res.u - mu);
    for (int s = 0; s <= max_sum; ++s) {
      const double w = ways[na][s];
      if (w == 0) continue;
      total += w;
      const double u = static_cast<double>(s - base2) / 2.0;
      if (std::abs(u - mu) >= obs - 1e-9) extreme += w;
    }
    res.p = std::min(1.0, extreme / total);
    res.exact = true;
    return res;
  }
  double tie_term = 0;
  for (std::size_t t : tie_sizes) tie_term += static_cast<double>(t * t * t - t);
  const double nd = static_cast<double>(n);
  const double var = static_cast<double>(na * nb) / 12.0 * ((nd + 1) - tie_term / (nd * (nd - 1)));
  if (var <= 0) {
    res.p = 1.0;
    return res;
  }
  const double z = std::max(0.0, std::abs(res.u - mu) - 0.5) / std::sqrt(var);
  res.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return res;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) throw DegenerateInputError("mean of an empty sample");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string format_mean_std(const std::vector<double>& v, int decimals) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%.*f (%.*f)", decimals, mean(v), decimals, sample_std(v));
  return buf;
}

std::vector<double> finite_only(const std::vector<double>& v, std::size_t* removed) {
  std::vector<double> out;
  for (double x : v) {
    if (std::isfinite(x)) out.push_back(x);
  }
  if (removed) *removed = v.size() - out.size();
  return out;
}

}  // namespace rsfr::metrics
