#pragma once

// Pipeline orchestration: simulate -> mask -> train -> reconstruct
// (coarse -> segment -> refine) -> postprocess -> evaluate -> report.
//
// Every stage writes into `<out>/<stage>/` and records a content hash of its
// inputs in `<out>/manifest.json`; a stage whose recorded hash matches and
// whose outputs exist is skipped on rerun. One pipeline process may own an
// output directory at a time (`<out>/.rsfr.lock`).

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rsfr/backbone.hpp"
#include "rsfr/fusion.hpp"
#include "rsfr/losses.hpp"
#include "rsfr/semantics.hpp"
#include "rsfr/training.hpp"

namespace rsfr::pipeline {

enum class MaskMode { reference, fallback };

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "rsfr_out";
  int n_train_phantoms = 16;
  int n_test_phantoms = 2;
  double noise_sigma = 0.0;
  int af = 4;
  std::optional<double> center_fraction;
  backbone::BackboneConfig backbone;
  fusion::SFIConfig sfi;
  semantics::SegmenterKind segmenter = semantics::SegmenterKind::fallback;
  losses::LossWeights loss;
  training::TrainConfig train;
  MaskMode mask_mode = MaskMode::reference;
  int n_spokes = 36;
  int samples_per_spoke = 20;

  /// Canonical JSON (stable key order); the config hash is taken over this text without out_dir.
  [[nodiscard]] std::string to_json() const;
  static PipelineConfig from_json(const std::string& text);
  static PipelineConfig load(const std::filesystem::path& path);
  [[nodiscard]] std::string hash() const;
  void validate() const;
};

/// Provider used while training: the configured kind, except the external
/// service which is replaced by the fallback to keep training hermetic.
semantics::SegmenterKind training_segmenter(const PipelineConfig& cfg);

struct StageRecord {
  std::string name;
  std::string input_hash;
  std::vector<std::string> outputs;  // relative to out_dir
  std::map<std::string, std::string> info;
  std::string started;   // ISO-8601 UTC
  std::string finished;
  bool cached = false;
};

struct RunManifest {
  std::string config_hash;
  std::string version;
  std::uint64_t seed = 0;
  std::vector<StageRecord> stages;

  [[nodiscard]] std::string to_json(bool with_timestamps = true) const;
  static RunManifest from_json(const std::string& text);
  [[nodiscard]] const StageRecord* stage(const std::string& name) const;
};

/// Exclusive ownership of an output directory for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"simulate", "mask",     "train",    "reconstruct",
                                              "postprocess", "evaluate", "report"};
  return names;
}

/// Raised when a stage fails; the partial manifest has already been written.
class StageError : public Error {
 public:
  using Error::Error;
};

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg);

  /// Runs every stage in order, reusing cached stages.
  RunManifest run();
  /// Runs a single stage; its predecessors must have completed.
  StageRecord run_stage(const std::string& name);

  [[nodiscard]] const PipelineConfig& config() const { return cfg_; }
  [[nodiscard]] const RunManifest& manifest() const { return manifest_; }
  [[nodiscard]] std::filesystem::path dir(const std::string& stage) const { return cfg_.out_dir / stage; }

 private:
  std::string stage_hash(const std::string& name) const;
  StageRecord execute(const std::string& name);
  void save_manifest() const;
  void load_manifest();

  PipelineConfig cfg_;
  RunManifest manifest_;
};

RunManifest run_pipeline(const PipelineConfig& cfg);

// ---- stage building blocks (also used by the CLI subcommands) ----------------------

/// Test-set phantoms: a family seeded independently of the training phantoms.
std::vector<phantom::PhantomSpec> test_phantoms(const PipelineConfig& cfg);
std::vector<phantom::PhantomSpec> train_phantoms(const PipelineConfig& cfg);
kspace::SamplingMask evaluation_mask(const PipelineConfig& cfg);

/// Writes a DWI series as one array per slice with b-value/direction/seed/spec-hash sidecars.
void write_series(const std::filesystem::path& dir, const DWISeries& series, const phantom::PhantomSpec& spec);
DWISeries read_series(const std::filesystem::path& dir);
void write_mask(const std::filesystem::path& path, const Mask& mask);
Mask read_mask(const std::filesystem::path& path);
void write_prior(const std::filesystem::path& path, const semantics::SemanticPrior& prior);
semantics::SemanticPrior read_prior(const std::filesystem::path& path);

std::string phantom_spec_json(const phantom::PhantomSpec& spec);
phantom::PhantomSpec phantom_spec_from_json(const std::string& text);

/// Per-slice image metrics for the evaluate stage.
struct SliceMetrics {
  std::string method;
  int phantom = 0;
  int slice = 0;
  double psnr = 0, ssim = 0, perceptual = 0, myo_mae = 0;
};

/// CSV text for per-slice metrics; doubles printed with 17 significant digits.
std::string slice_metrics_csv(const std::vector<SliceMetrics>& rows);
std::vector<SliceMetrics> parse_slice_metrics_csv(const std::string& text);
/// Per-case global DT-parameter errors against the ground-truth reconstruction.
struct CaseMae {
  std::string method;
  int phantom = 0;
  double md = 0, fa = 0, ha_gradient = 0;
};

std::string case_mae_csv(const std::vector<CaseMae>& rows);
std::vector<CaseMae> parse_case_mae_csv(const std::string& text);

/// Table of "mean (std)" per method (SSIM 3 decimals, PSNR 2, perceptual 4, MAE 4).
std::string summary_table(const std::vector<SliceMetrics>& rows);

}  // namespace rsfr::pipeline
