#pragma once

// End-to-end optimisation of the reconstruction and refinement networks
// under the hybrid loss, with the segmentation provider held fixed.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rsfr/backbone.hpp"
#include "rsfr/dwi.hpp"
#include "rsfr/fusion.hpp"
#include "rsfr/kspace.hpp"
#include "rsfr/losses.hpp"
#include "rsfr/phantom.hpp"
#include "rsfr/semantics.hpp"

namespace rsfr::training {

using nn::Var;

struct TrainConfig {
  int total_steps = 2000;
  int batch_size = 1;
  double base_lr = 2e-4;
  int warm_steps = 50000;   // W: learning rate held until this step
  int decay_steps = 20000;  // D: halving period after W
  std::uint64_t seed = 0;
  std::vector<int> af_schedule{4};
  semantics::SegmenterKind segmenter = semantics::SegmenterKind::fallback;
  bool deep_supervision = false;  // also apply the loss to the coarse image
  int log_every = 1;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  /// Schedule invariants are checked only when decay can happen within the run.
  void validate() const;
};

/// base_lr until step W, then halved every D steps:
/// lr(step) = base_lr * 0.5^floor((step - W) / D) for step >= W.
double learning_rate(const TrainConfig& cfg, int step);

// ---- data --------------------------------------------------------------------------

/// One supervised example at the network's operating resolution.
struct TrainingPair {
  Image ground_truth;  // band-limited, normalised
  Image zero_filled;   // |A^H A x| at the pair's acceleration, clamped to [0,1]
  Mask myo_mask;
  int af = 4;
  std::size_t phantom_index = 0;
  std::size_t slice_index = 0;
};

struct DatasetConfig {
  int n_phantoms = 16;
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;
  std::vector<int> af_list{4};
};

/// Randomly perturbed phantom geometries/tensors, deterministic in `seed`.
std::vector<phantom::PhantomSpec> phantom_family(int n, std::uint64_t seed, double noise_sigma);

/// Pads a 96x96 slice to the 256x96 acquisition grid, band-limits it to the
/// acquired window, crops and normalises (the ground truth); then applies
/// `mask` to produce the zero-filled input.
TrainingPair prepare_pair(const Image& slice, const kspace::SamplingMask& mask);
/// Zero-filled image of an already-prepared ground truth.
Image zero_filled_from(const Image& ground_truth, const kspace::SamplingMask& mask);
/// The band-limited, normalised ground truth only.
Image prepare_ground_truth(const Image& slice);

std::vector<TrainingPair> make_dataset(const DatasetConfig& cfg);
std::vector<TrainingPair> make_dataset(const std::vector<phantom::PhantomSpec>& phantoms, const std::vector<int>& af_list,
                                       std::uint64_t mask_seed);

// ---- models and optimisation --------------------------------------------------------

/// The two trainable networks of the pipeline.
struct Models {
  Models(const backbone::BackboneConfig& cfg, const fusion::SFIConfig& sfi);

  std::unique_ptr<backbone::ReconstructionModel> recon;
  std::unique_ptr<fusion::RefinementModel> refine;

  /// Both parameter sets, reconstruction first.
  [[nodiscard]] std::vector<const nn::ParameterSet*> parameter_sets() const;
  [[nodiscard]] std::string digest() const;
  void zero_grad();
};

struct ForwardResult {
  Var coarse;
  semantics::SemanticPrior prior;
  Var refined;
};

/// Coarse pass, prior from the (clamped) coarse image, refinement pass.
ForwardResult forward_pipeline(const Models& m, const Image& zero_filled, semantics::SegmenterKind kind,
                               const semantics::SegmenterContext& ctx);

/// Inference-mode images produced by one pass through the pipeline.
struct Reconstruction {
  Image coarse;
  semantics::SemanticPrior prior;
  Image refined;
};
Reconstruction reconstruct(const Models& m, const Image& zero_filled, semantics::SegmenterKind kind,
                           const semantics::SegmenterContext& ctx);

class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(const std::vector<nn::ParameterSet*>& sets, double lr);
  [[nodiscard]] int steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct LogRecord {
  int step = 0;
  double loss = 0.0;
  double loss_i = 0.0;
  double loss_k = 0.0;
  double loss_p = 0.0;
  double lr = 0.0;

  [[nodiscard]] std::string to_json() const;
};

/// Raised when the objective becomes non-finite; a state dump is written first when possible.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct TrainOptions {
  std::filesystem::path log_path;        // line-delimited JSON, optional
  std::filesystem::path checkpoint_dir;  // optional
  /// Returns a digest of any segmenter parameters; checked unchanged after training.
  std::function<std::string()> segmenter_digest;
  /// Per-sample provider context (e.g. the reference mask of that sample).
  std::function<semantics::SegmenterContext(const TrainingPair&)> context;
  std::function<void(const LogRecord&)> on_step;
};

struct TrainState {
  backbone::BackboneConfig backbone;
  fusion::SFIConfig sfi;
  losses::LossWeights weights;
  TrainConfig config;
  std::shared_ptr<Models> models;
  int step = 0;
  std::vector<LogRecord> log;
};

TrainState train_end_to_end(const std::vector<TrainingPair>& dataset, const TrainConfig& cfg,
                            const losses::LossWeights& weights, const backbone::BackboneConfig& bcfg,
                            const fusion::SFIConfig& sfi = {}, const TrainOptions& opts = {});

// ---- checkpoints ----------------------------------------------------------------------

/// Single file: one JSON header line (configs, step, parameter table), then
/// the parameter values as little-endian doubles in table order.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

std::string config_to_json(const backbone::BackboneConfig& cfg);
backbone::BackboneConfig backbone_config_from_json(const std::string& text);

}  // namespace rsfr::training
