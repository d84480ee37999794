#pragma once

// Fusion & refinement model: a second U-shaped backbone whose encoder stages
// receive the semantic prior through Semantic Feature Integration (SFI).

#include <optional>
#include <string>
#include <vector>

#include "rsfr/backbone.hpp"
#include "rsfr/semantics.hpp"

namespace rsfr::fusion {

using backbone::FeatureMap;
using nn::Var;

struct SFIConfig {
  int conv_kernel = 3;  // only 3x3 is implemented
  int attention_reduction = 4;
  /// Encoder stages that receive the prior; unset means every stage.
  std::optional<std::vector<int>> injection_points;

  void validate(int channels, int stages) const;
  [[nodiscard]] bool injects(int stage) const;
};

/// concat(f, prior) -> 3x3 conv -> instance norm -> GELU -> channel attention.
class SFIModule {
 public:
  SFIModule(nn::ParameterSet& ps, const std::string& name, int channels, int prior_channels, int reduction, Rng& rng);

  /// `prior` is (H*W) x prior_channels at the resolution of `f`.
  [[nodiscard]] FeatureMap operator()(const FeatureMap& f, const Var& prior) const;
  /// Channel-attention weights (1 x C) the module would apply.
  [[nodiscard]] Var attention_weights(const FeatureMap& f, const Var& prior) const;
  /// Features before the attention multiply (for norm checks).
  [[nodiscard]] Var pre_attention(const FeatureMap& f, const Var& prior) const;

  [[nodiscard]] const nn::Conv3x3& conv() const { return conv_; }

 private:
  [[nodiscard]] Var attention_from(const Var& g) const;

  int channels_;
  int prior_channels_;
  nn::Conv3x3 conv_;
  Var in_gamma_, in_beta_;
  nn::Linear fc1_, fc2_;
};

/// Average-pools a (size*size) x K prior down to (grid*grid) x K; size/grid must be a power of two.
Var pool_prior(const Var& prior, int size, int grid);
Var prior_to_var(const semantics::SemanticPrior& prior);

/// H_FR: refined image from the coarse image and the semantic prior.
class RefinementModel {
 public:
  RefinementModel(const backbone::BackboneConfig& cfg, SFIConfig sfi = {}, const std::string& prefix = "refine");

  /// coarse: (n*n) x 1; prior: (n*n) x 3.
  [[nodiscard]] Var forward(const Var& coarse, const Var& prior) const;
  /// Inference on a normalised coarse image; throws if the input is not normalised.
  [[nodiscard]] Image refine(const Image& coarse, const semantics::SemanticPrior& prior) const;

  [[nodiscard]] nn::ParameterSet& parameters() { return params_; }
  [[nodiscard]] const nn::ParameterSet& parameters() const { return params_; }
  /// Configuration as given; the network itself is seeded from a derived stream.
  [[nodiscard]] const backbone::BackboneConfig& config() const { return cfg_; }
  [[nodiscard]] const SFIConfig& sfi_config() const { return sfi_cfg_; }
  /// Module at `stage`, or nullptr when that stage has no injection.
  [[nodiscard]] const SFIModule* sfi(int stage) const;

 private:
  backbone::BackboneConfig cfg_;
  nn::ParameterSet params_;
  backbone::MambaUNet net_;
  SFIConfig sfi_cfg_;
  std::vector<std::optional<SFIModule>> sfis_;
};

}  // namespace rsfr::fusion
