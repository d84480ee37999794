#pragma once

// Parameter storage and the handful of parametrised layers the networks use.

#include <cstdint>
#include <string>
#include <vector>

#include "rsfr/autograd.hpp"
#include "rsfr/random.hpp"

namespace rsfr::nn {

struct NamedParam {
  std::string name;
  Var var;
};

/// Ordered collection of trainable leaves. Names are dotted paths such as
/// `enc0.block.vss1.in_proj.weight`; insertion order is the checkpoint order.
class ParameterSet {
 public:
  Var create(const std::string& name, int rows, int cols, std::vector<double> init);
  [[nodiscard]] const Var& get(const std::string& name) const;
  [[nodiscard]] const std::vector<NamedParam>& entries() const { return params_; }
  [[nodiscard]] std::size_t scalar_count() const;
  void zero_grad();
  /// Hash of names, shapes and values; changes iff any parameter changes.
  [[nodiscard]] std::string digest() const;
  /// Copies values from `other` for every matching name; returns the number copied.
  std::size_t load_values(const ParameterSet& other);

 private:
  std::vector<NamedParam> params_;
};

std::vector<double> uniform_values(Rng& rng, std::size_t n, double bound);
std::vector<double> constant_values(std::size_t n, double v);

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out, may be undefined

  static Linear make(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng, bool with_bias = true,
                     double gain = 1.0);
  [[nodiscard]] Var operator()(const Var& x) const { return linear(x, weight, bias); }
};

struct LayerNorm {
  Var gamma;
  Var beta;

  static LayerNorm make(ParameterSet& ps, const std::string& name, int channels);
  [[nodiscard]] Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
};

struct Conv3x3 {
  Var weight;  // 9*in x out
  Var bias;

  static Conv3x3 make(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng);
  [[nodiscard]] Var operator()(const Var& x, int h, int w) const { return conv3x3(x, h, w, weight, bias); }
};

struct DepthwiseConv3x3 {
  Var weight;  // 9 x channels
  Var bias;

  static DepthwiseConv3x3 make(ParameterSet& ps, const std::string& name, int channels, Rng& rng);
  [[nodiscard]] Var operator()(const Var& x, int h, int w) const { return depthwise_conv3x3(x, h, w, weight, bias); }
};

}  // namespace rsfr::nn
