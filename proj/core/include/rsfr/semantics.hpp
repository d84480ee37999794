#pragma once

// Segmentation model: turns a coarse reconstruction into a three-channel
// soft-mask prior through one of several interchangeable providers.

#include <array>
#include <chrono>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "rsfr/dwi.hpp"
#include "rsfr/image.hpp"

namespace rsfr::semantics {

inline constexpr int kPriorChannels = 3;

/// Three soft masks in [0,1] with descending confidence scores.
struct SemanticPrior {
  std::array<Image, kPriorChannels> masks;
  std::array<double, kPriorChannels> scores{0.0, 0.0, 0.0};

  static SemanticPrior zeros(Shape2 shape);
  [[nodiscard]] Shape2 shape() const { return masks[0].shape(); }
  /// Throws rsfr::Error if channel ranges, shapes or score order are violated.
  void validate() const;
  /// Token-major (rows*cols) x 3 layout used by the fusion module.
  [[nodiscard]] std::vector<double> interleaved() const;
};

enum class SegmenterKind { foundation_model, fallback, trained, reference, none };

std::string to_string(SegmenterKind kind);
SegmenterKind segmenter_kind_from_string(const std::string& name);

/// Raised when the mask service cannot be used; callers may retry with the fallback provider.
class DegradedModeError : public Error {
 public:
  using Error::Error;
};

struct MaskServiceConfig {
  std::string endpoint;  // e.g. http://127.0.0.1:8080/segment
  std::chrono::milliseconds timeout{5000};
  std::size_t max_in_flight = 4;

  /// Reads the endpoint from RSFR_MASK_ENDPOINT; empty if unset.
  static MaskServiceConfig from_env();
};

/// HTTP client for an external automatic-mask service.
///
/// Request body:  {"image": base64(float32 LE, row-major), "height": H, "width": W}
/// Response body: {"masks": [{"score": s, "height": h, "width": w,
///                            "dense": [h*w floats]} | {..., "rle": [run lengths]} ...]}
/// RLE runs alternate 0 and 1 starting with 0, row-major. The three highest
/// scored proposals are bilinearly resampled to the input shape and clamped.
class MaskServiceClient {
 public:
  explicit MaskServiceClient(MaskServiceConfig cfg);
  ~MaskServiceClient();
  MaskServiceClient(const MaskServiceClient&) = delete;
  MaskServiceClient& operator=(const MaskServiceClient&) = delete;

  /// Thread-safe; at most `max_in_flight` requests are outstanding at once.
  [[nodiscard]] SemanticPrior segment(const Image& x) const;
  [[nodiscard]] const MaskServiceConfig& config() const { return cfg_; }

 private:
  struct State;
  MaskServiceConfig cfg_;
  std::unique_ptr<State> state_;
};

/// Parses a service response into a prior of shape `target`.
SemanticPrior parse_mask_response(const std::string& body, Shape2 target);
/// float32 little-endian row-major payload, base64 encoded.
std::string encode_image_base64(const Image& x);
/// Bilinear resampling with pixel-centre alignment.
Image resample_bilinear(const Image& x, Shape2 target);

using TrainedSegmenter = std::function<SemanticPrior(const Image&)>;

/// Everything a provider may need besides the image itself.
struct SegmenterContext {
  std::optional<Mask> reference_mask;
  TrainedSegmenter trained;
  std::shared_ptr<const MaskServiceClient> client;
};

/// Otsu threshold, 4-connected components, three largest by area as binary
/// masks scored by their share of the image area.
SemanticPrior fallback_segment(const Image& x);

/// Reference provider: channel 0 is the given mask, the rest are zero.
SemanticPrior reference_prior(const Mask& mask);

/// Dispatches on `kind`; the input must be a normalised image.
SemanticPrior segment(const Image& coarse, SegmenterKind kind, const SegmenterContext& ctx = {});

/// Otsu threshold over a 256-bin histogram spanning [min, max].
double otsu_threshold(const Image& x);

double dice(const Mask& a, const Mask& b);
Mask binarize(const Image& x, double threshold = 0.5);

}  // namespace rsfr::semantics
