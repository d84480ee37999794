#pragma once

// Hybrid reconstruction objective: Charbonnier terms in image space and
// k-space plus an L1 feature (perceptual) term from a fixed extractor.

#include <cstdint>
#include <memory>
#include <vector>

#include "rsfr/autograd.hpp"
#include "rsfr/image.hpp"
#include "rsfr/layers.hpp"

namespace rsfr::losses {

using nn::Var;

struct LossWeights {
  double alpha = 1.0;   // image-space Charbonnier
  double beta = 1.0;    // k-space Charbonnier
  double gamma = 0.01;  // perceptual
  double epsilon = 1e-9;

  void validate() const;
};

/// Fixed, seeded random-weight convolutional feature extractor: four stages of
/// 3x3 conv + tanh, with 2x2 average pooling between stages. Its parameters are
/// constants and never receive gradients.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(std::uint64_t seed = 1234, int channels = 8, int stages = 4);

  /// `image` is (size*size) x 1; returns one token-major map per stage.
  [[nodiscard]] std::vector<Var> features(const Var& image, int size) const;
  [[nodiscard]] int stages() const { return static_cast<int>(weights_.size()); }
  /// Number of times features() has run (lazy-evaluation checks).
  [[nodiscard]] std::uint64_t calls() const { return *calls_; }

 private:
  std::vector<Var> weights_;
  std::vector<Var> biases_;
  std::shared_ptr<std::uint64_t> calls_;
};

/// Reshapes an (n*n) x 1 image into an n x n matrix.
Var as_square(const Var& image, int n);

/// sqrt(||x - y||^2 + eps^2) over pixels.
Var charbonnier_image_loss(const Var& x, const Var& y, double eps);
/// Same on the centred orthonormal 2D DFT of both real images (n x n).
Var charbonnier_kspace_loss(const Var& x, const Var& y, int n, double eps);
/// Mean over stages of the mean absolute feature difference.
Var perceptual_loss(const Var& x, const Var& y, int n, const FeatureExtractor& extractor);

struct LossTerms {
  Var total;
  double image = 0.0;
  double kspace = 0.0;
  double perceptual = 0.0;
};

/// alpha*L_i + beta*L_k + gamma*L_p; the extractor is only run when gamma > 0.
LossTerms hybrid_loss(const Var& x, const Var& y, int n, const LossWeights& w, const FeatureExtractor* extractor);

double charbonnier_image_loss(const Image& x, const Image& y, double eps);
double charbonnier_kspace_loss(const Image& x, const Image& y, double eps);

}  // namespace rsfr::losses
