#pragma once

// Vision-Mamba reconstruction backbone: patch (un)embedding, cross-scan
// expansion/merging, the selective state-space recurrence, VSS blocks and
// the U-shaped encoder/decoder around a self-attention bottleneck.

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rsfr/autograd.hpp"
#include "rsfr/image.hpp"
#include "rsfr/layers.hpp"

namespace rsfr::backbone {

using nn::Var;

struct BackboneConfig {
  int n_res_blocks = 4;  // split evenly between encoder and decoder
  int embed_dim = 32;
  std::vector<int> scale_factors{1, 2, 2, 2};  // spatial downsampling into each encoder stage
  int patch_size = 4;
  int state_dim = 8;
  int expand = 2;  // inner width of the VSS pathways = expand * channels
  int attention_heads = 4;
  int input_size = 96;
  std::uint64_t seed = 1;

  static BackboneConfig toy();
  static BackboneConfig full();

  [[nodiscard]] int stages() const { return n_res_blocks / 2; }
  [[nodiscard]] int inner_dim() const { return expand * embed_dim; }
  [[nodiscard]] int dt_rank() const { return (inner_dim() + 15) / 16; }
  /// Side length of the patch grid at encoder stage `stage`.
  [[nodiscard]] int grid_at(int stage) const;
  void validate() const;
};

/// Token-major feature map: `values` is (height*width) x channels.
struct FeatureMap {
  Var values;
  int height = 0;
  int width = 0;

  [[nodiscard]] int channels() const { return values.cols(); }
};

// ---- cross-scan ----------------------------------------------------------------

/// Visiting order k of an H x W grid (index y*W + x):
///   0 row-major from top-left, 1 column-major from top-left,
///   2 reverse of 0 (from bottom-right), 3 reverse of 1.
std::vector<int> scan_order(int height, int width, int k);
std::vector<int> inverse_permutation(const std::vector<int>& perm);

struct ScanSequences {
  std::array<Var, 4> sequences;  // each (H*W) x C, row t = t-th visited token
  std::array<std::vector<int>, 4> orders;
  int height = 0;
  int width = 0;
};

ScanSequences scan_expand(const FeatureMap& f);
/// Undoes each order and sums the four branches.
FeatureMap scan_merge(const ScanSequences& s);

// ---- selective scan -------------------------------------------------------------

/// Diagonal selective state-space recurrence along the rows of `u`:
///   h_t = exp(delta_t * A) h_{t-1} + delta_t * B_t * u_t,   A = -exp(a_log)
///   y_t = C_t . h_t + D * u_t
/// u, delta: L x E; a_log: E x N; b, c: L x N; d: 1 x E.
Var selective_scan(const Var& u, const Var& delta, const Var& a_log, const Var& b, const Var& c, const Var& d);

/// Per-direction S6 parameters: input-dependent delta, B, C projections.
struct S6Params {
  nn::Linear x_proj;   // E -> dt_rank + 2N, no bias
  nn::Linear dt_proj;  // dt_rank -> E
  Var a_log;           // E x N
  Var d;               // 1 x E

  static S6Params make(nn::ParameterSet& ps, const std::string& name, int inner, int dt_rank, int state_dim, Rng& rng);
};

/// Runs one S6 branch over an ordered sequence.
Var s6_sequence(const Var& seq, const S6Params& p, int dt_rank, int state_dim);

// ---- blocks ---------------------------------------------------------------------

class VSSBlock {
 public:
  VSSBlock(nn::ParameterSet& ps, const std::string& name, int channels, int inner, int dt_rank, int state_dim, Rng& rng);
  [[nodiscard]] FeatureMap operator()(const FeatureMap& f) const;

 private:
  int inner_, dt_rank_, state_dim_;
  nn::LayerNorm norm_;
  nn::Linear in_proj_;  // channels -> 2*inner (pathway 1 | pathway 2)
  nn::DepthwiseConv3x3 dwconv_;
  std::array<S6Params, 4> s6_;
  nn::LayerNorm out_norm_;
  nn::Linear out_proj_;  // gating linear layer, inner -> channels
};

/// Two VSS blocks in sequence.
class ResidualMambaBlock {
 public:
  ResidualMambaBlock(nn::ParameterSet& ps, const std::string& name, const BackboneConfig& cfg, Rng& rng);
  [[nodiscard]] FeatureMap operator()(const FeatureMap& f) const;

 private:
  VSSBlock first_;
  VSSBlock second_;
};

/// Pre-norm multi-head self-attention plus MLP, both residual.
class AttentionBlock {
 public:
  AttentionBlock(nn::ParameterSet& ps, const std::string& name, int channels, int heads, Rng& rng);
  [[nodiscard]] FeatureMap operator()(const FeatureMap& f) const;

 private:
  int heads_;
  nn::LayerNorm norm1_, norm2_;
  nn::Linear qkv_, proj_, fc1_, fc2_;
};

// ---- patch embedding -------------------------------------------------------------

/// Image (size*size x 1) -> patch grid with `embed_dim` channels.
FeatureMap patch_embed(const Var& image, int size, int patch, const nn::Linear& proj);
/// Feature map -> image (size*size x 1) through a per-token linear to patch*patch pixels.
Var patch_unembed(const FeatureMap& f, int patch, const nn::Linear& proj);
/// Strided patch merge: (H*W x C) -> (H/f * W/f x f*f*C), token order preserved.
FeatureMap space_to_depth(const FeatureMap& f, int factor);
/// Sub-pixel expansion: (H*W x f*f*C) -> (H*f * W*f x C).
FeatureMap depth_to_space(const FeatureMap& f, int factor);

Var image_to_var(const Image& img);
Image var_to_image(const Var& v, int rows, int cols);

// ---- U-shaped network ----------------------------------------------------------------

/// Called on the feature map entering each encoder stage; returns the map to use.
using EncoderHook = std::function<FeatureMap(int stage, const FeatureMap&)>;

class MambaUNet {
 public:
  MambaUNet(nn::ParameterSet& ps, const std::string& prefix, const BackboneConfig& cfg);

  /// `image` is (size*size x 1); returns image + learned residual.
  [[nodiscard]] Var forward(const Var& image, const EncoderHook& hook = {}) const;
  /// When set, the bottleneck output is replaced by zeros (architecture checks only).
  void set_zero_bottleneck(bool on) { zero_bottleneck_ = on; }

  [[nodiscard]] const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  nn::Linear embed_;
  std::vector<nn::Linear> down_;  // one per stage with factor > 1 (undefined otherwise)
  std::vector<ResidualMambaBlock> enc_;
  std::unique_ptr<AttentionBlock> bottleneck_;
  std::vector<nn::Linear> fuse_;  // skip concat 2C -> C
  std::vector<ResidualMambaBlock> dec_;
  std::vector<nn::Linear> up_;
  nn::LayerNorm final_norm_;
  nn::Linear unembed_;
  bool zero_bottleneck_ = false;
};

/// H_R: coarse reconstruction from a zero-filled image.
class ReconstructionModel {
 public:
  explicit ReconstructionModel(const BackboneConfig& cfg, const std::string& prefix = "recon");

  [[nodiscard]] Var forward(const Var& zero_filled) const { return net_.forward(zero_filled); }
  /// Inference on a normalised 96x96 image; throws if the input is not normalised.
  [[nodiscard]] Image reconstruct_coarse(const Image& zero_filled) const;

  [[nodiscard]] nn::ParameterSet& parameters() { return params_; }
  [[nodiscard]] const nn::ParameterSet& parameters() const { return params_; }
  [[nodiscard]] MambaUNet& network() { return net_; }
  [[nodiscard]] const BackboneConfig& config() const { return net_.config(); }

 private:
  nn::ParameterSet params_;
  MambaUNet net_;
};

/// Analytic parameter count of one MambaUNet (without SFI modules).
std::size_t parameter_count(const BackboneConfig& cfg);

/// Throws if the image is not finite and inside [0, 1].
void require_normalized(const Image& img, const char* what);

}  // namespace rsfr::backbone
