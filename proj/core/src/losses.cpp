#include "rsfr/losses.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <stdexcept>

#include "rsfr/kspace.hpp"

namespace rsfr::losses {

void LossWeights::validate() const {
  if (!(epsilon > 0.0)) throw std::invalid_argument("loss epsilon must be positive");
  if (alpha < 0 || beta < 0 || gamma < 0) throw std::invalid_argument("loss weights must be non-negative");
  if (alpha + beta + gamma <= 0) throw std::invalid_argument("at least one loss weight must be positive");
}

namespace {

struct DftPair {
  Var re, im;
};

// Centred orthonormal DFT matrix split into real and imaginary parts.
const DftPair& dft_matrix(int n) {
  static std::mutex mu;
  static std::map<int, DftPair> cache;
  std::lock_guard lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<double> re(static_cast<std::size_t>(n) * n), im(re.size());
  const int h = n / 2;
  const double s = 1.0 / std::sqrt(static_cast<double>(n));
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j) {
      const long long p = (static_cast<long long>(k - h) * (j - h)) % n;
      const double a = -2.0 * std::numbers::pi * static_cast<double>(p) / n;
      re[static_cast<std::size_t>(k) * n + j] = s * std::cos(a);
      im[static_cast<std::size_t>(k) * n + j] = s * std::sin(a);
    }
  }
  return cache.emplace(n, DftPair{Var::constant(n, n, std::move(re)), Var::constant(n, n, std::move(im))}).first->second;
}

std::shared_ptr<const std::vector<int>> identity_index(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::shared_ptr<const std::vector<int>>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[n];
  if (!slot) {
    auto v = std::make_shared<std::vector<int>>(n);
    for (std::size_t i = 0; i < n; ++i) (*v)[i] = static_cast<int>(i);
    slot = v;
  }
  return slot;
}

void check_pair(const Var& x, const Var& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw std::invalid_argument("loss: shape mismatch");
}

}  // namespace

Var as_square(const Var& image, int n) {
  if (image.size() != static_cast<std::size_t>(n) * n) throw std::invalid_argument("as_square: size mismatch");
  return nn::gather(image, n, n, identity_index(image.size()));
}

Var charbonnier_image_loss(const Var& x, const Var& y, double eps) {
  check_pair(x, y);
  return nn::charbonnier(nn::sub(x, y), eps);
}

Var charbonnier_kspace_loss(const Var& x, const Var& y, int n, double eps) {
  check_pair(x, y);
  const DftPair& f = dft_matrix(n);
  // F R F^T for real R, split into real and imaginary parts
  const Var r = as_square(nn::sub(x, y), n);
  const Var a = nn::matmul(f.re, r);
  const Var b = nn::matmul(f.im, r);
  const Var k_re = nn::sub(nn::matmul_nt(a, f.re), nn::matmul_nt(b, f.im));
  const Var k_im = nn::add(nn::matmul_nt(a, f.im), nn::matmul_nt(b, f.re));
  return nn::charbonnier(nn::concat_cols({k_re, k_im}), eps);
}

FeatureExtractor::FeatureExtractor(std::uint64_t seed, int channels, int stages)
    : calls_(std::make_shared<std::uint64_t>(0)) {
  if (channels <= 0 || stages <= 0) throw std::invalid_argument("FeatureExtractor: channels and stages must be positive");
  Rng rng(seed);
  int in = 1;
  for (int s = 0; s < stages; ++s) {
    const double bound = std::sqrt(6.0 / (9.0 * in));
    weights_.push_back(Var::constant(9 * in, channels, nn::uniform_values(rng, static_cast<std::size_t>(9) * in * channels, bound)));
    biases_.push_back(Var::constant(1, channels, nn::uniform_values(rng, channels, 0.1)));
    in = channels;
  }
}

std::vector<Var> FeatureExtractor::features(const Var& image, int size) const {
  if (image.rows() != size * size || image.cols() != 1) throw std::invalid_argument("FeatureExtractor: expected size^2 x 1");
  ++*calls_;
  std::vector<Var> out;
  Var h = image;
  int s = size;
  for (std::size_t k = 0; k < weights_.size(); ++k) {
    if (k > 0) {
      if (s % 2) throw std::invalid_argument("FeatureExtractor: image too small for the number of stages");
      h = nn::avg_pool2(h, s, s);
      s /= 2;
    }
    h = nn::tanh(nn::conv3x3(h, s, s, weights_[k], biases_[k]));
    out.push_back(h);
  }
  return out;
}

Var perceptual_loss(const Var& x, const Var& y, int n, const FeatureExtractor& extractor) {
  check_pair(x, y);
  const auto fx = extractor.features(x, n);
  const auto fy = extractor.features(y, n);
  std::vector<Var> terms;
  std::vector<double> w;
  for (std::size_t k = 0; k < fx.size(); ++k) {
    terms.push_back(nn::mean_abs(nn::sub(fx[k], fy[k])));
    w.push_back(1.0 / static_cast<double>(fx.size()));
  }
  return nn::weighted_sum(terms, w);
}

LossTerms hybrid_loss(const Var& x, const Var& y, int n, const LossWeights& w, const FeatureExtractor* extractor) {
  w.validate();
  LossTerms t;
  std::vector<Var> terms;
  std::vector<double> weights;
  const Var li = charbonnier_image_loss(x, y, w.epsilon);
  t.image = li.item();
  if (w.alpha > 0) {
    terms.push_back(li);
    weights.push_back(w.alpha);
  }
  if (w.beta > 0) {
    const Var lk = charbonnier_kspace_loss(x, y, n, w.epsilon);
    t.kspace = lk.item();
    terms.push_back(lk);
    weights.push_back(w.beta);
  }
  if (w.gamma > 0) {
    if (!extractor) throw std::invalid_argument("hybrid_loss: gamma > 0 but no feature extractor configured");
    const Var lp = perceptual_loss(x, y, n, *extractor);
    t.perceptual = lp.item();
    terms.push_back(lp);
    weights.push_back(w.gamma);
  }
  t.total = nn::weighted_sum(terms, weights);
  return t;
}

double charbonnier_image_loss(const Image& x, const Image& y, double eps) {
  if (x.shape() != y.shape()) throw std::invalid_argument("loss: shape mismatch");
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x.pixels()[i] - y.pixels()[i];
    ss += d * d;
  }
  return std::sqrt(ss + eps * eps);
}

double charbonnier_kspace_loss(const Image& x, const Image& y, double eps) {
  if (x.shape() != y.shape()) throw std::invalid_argument("loss: shape mismatch");
  const auto kx = kspace::fft2c(kspace::to_complex(x));
  const auto ky = kspace::fft2c(kspace::to_complex(y));
  double ss = 0.0;
  for (std::size_t i = 0; i < kx.values.size(); ++i) ss += std::norm(kx.values[i] - ky.values[i]);
  return std::sqrt(ss + eps * eps);
}

}  // namespace rsfr::losses
