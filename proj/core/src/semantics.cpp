#include "rsfr/semantics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "rsfr/backbone.hpp"

namespace rsfr::semantics {

SemanticPrior SemanticPrior::zeros(Shape2 shape) {
  SemanticPrior p;
  for (auto& m : p.masks) m = Image(shape.rows, shape.cols, 0.0);
  return p;
}

void SemanticPrior::validate() const {
  const Shape2 s = masks[0].shape();
  for (int k = 0; k < kPriorChannels; ++k) {
    if (masks[k].shape() != s) throw Error("semantic prior: channel shapes differ");
    for (double v : masks[k].pixels()) {
      if (!(v >= 0.0 && v <= 1.0)) throw Error("semantic prior: mask value outside [0,1]");
    }
    if (k > 0 && scores[k] > scores[k - 1]) throw Error("semantic prior: scores not descending");
  }
}

std::vector<double> SemanticPrior::interleaved() const {
  const std::size_t n = masks[0].size();
  std::vector<double> out(n * kPriorChannels);
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < kPriorChannels; ++k) out[i * kPriorChannels + k] = masks[k].pixels()[i];
  }
  return out;
}

std::string to_string(SegmenterKind kind) {
  switch (kind) {
    case SegmenterKind::foundation_model: return "foundation_model";
    case SegmenterKind::fallback: return "fallback";
    case SegmenterKind::trained: return "trained";
    case SegmenterKind::reference: return "reference";
    case SegmenterKind::none: return "none";
  }
  return "none";
}

SegmenterKind segmenter_kind_from_string(const std::string& name) {
  for (auto k : {SegmenterKind::foundation_model, SegmenterKind::fallback, SegmenterKind::trained,
                 SegmenterKind::reference, SegmenterKind::none}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown segmenter kind '" + name + "'");
}

double otsu_threshold(const Image& x) {
  constexpr int kBins = 256;
  const double lo = x.min(), hi = x.max();
  if (!(hi > lo)) return hi;
  std::vector<double> hist(kBins, 0.0);
  for (double v : x.pixels()) {
    const int b = std::min(kBins - 1, static_cast<int>((v - lo) / (hi - lo) * kBins));
    hist[b] += 1.0;
  }
  const double total = static_cast<double>(x.size());
  double sum_all = 0.0;
  for (int b = 0; b < kBins; ++b) sum_all += b * hist[b];
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_bin = 0;
  for (int b = 0; b < kBins - 1; ++b) {
    w0 += hist[b];
    sum0 += b * hist[b];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = b;
    }
  }
  // upper edge of the last background bin
  return lo + (hi - lo) * (best_bin + 1) / kBins;
}

SemanticPrior fallback_segment(const Image& x) {
  backbone::require_normalized(x, "fallback_segment");
  const Shape2 s = x.shape();
  SemanticPrior prior = SemanticPrior::zeros(s);
  if (!(x.max() > x.min())) return prior;
  const double t = otsu_threshold(x);

  // 4-connected labelling by flood fill
  std::vector<int> label(s.size(), -1);
  std::vector<std::size_t> area;
  std::vector<int> stack;
  for (int r = 0; r < s.rows; ++r) {
    for (int c = 0; c < s.cols; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * s.cols + c;
      if (label[i] >= 0 || x.pixels()[i] < t) continue;
      const int id = static_cast<int>(area.size());
      area.push_back(0);
      stack.assign(1, static_cast<int>(i));
      label[i] = id;
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        ++area[id];
        const int pr = p / s.cols, pc = p % s.cols;
        const int nr[4] = {pr - 1, pr + 1, pr, pr};
        const int nc[4] = {pc, pc, pc - 1, pc + 1};
        for (int k = 0; k < 4; ++k) {
          if (nr[k] < 0 || nr[k] >= s.rows || nc[k] < 0 || nc[k] >= s.cols) continue;
          const int q = nr[k] * s.cols + nc[k];
          if (label[q] >= 0 || x.pixels()[q] < t) continue;
          label[q] = id;
          stack.push_back(q);
        }
      }
    }
  }
  std::vector<int> order(area.size());
  std::iota(order.begin(), order.end(), 0);
  // ties broken by label (raster order of first pixel) for determinism
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return area[a] > area[b]; });
  const int keep = std::min<int>(kPriorChannels, static_cast<int>(order.size()));
  for (int k = 0; k < keep; ++k) {
    auto px = prior.masks[k].pixels();
    for (std::size_t i = 0; i < label.size(); ++i) px[i] = label[i] == order[k] ? 1.0 : 0.0;
    prior.scores[k] = static_cast<double>(area[order[k]]) / static_cast<double>(s.size());
  }
  return prior;
}

SemanticPrior reference_prior(const Mask& mask) {
  SemanticPrior prior = SemanticPrior::zeros(mask.shape);
  auto px = prior.masks[0].pixels();
  for (std::size_t i = 0; i < mask.bits.size(); ++i) px[i] = mask.bits[i] ? 1.0 : 0.0;
  prior.scores[0] = 1.0;
  return prior;
}

SemanticPrior segment(const Image& coarse, SegmenterKind kind, const SegmenterContext& ctx) {
  backbone::require_normalized(coarse, "segment");
  switch (kind) {
    case SegmenterKind::none: return SemanticPrior::zeros(coarse.shape());
    case SegmenterKind::fallback: return fallback_segment(coarse);
    case SegmenterKind::reference: {
      if (!ctx.reference_mask) throw Error("segment: reference mask not provided");
      if (ctx.reference_mask->shape != coarse.shape()) throw Error("segment: reference mask shape mismatch");
      return reference_prior(*ctx.reference_mask);
    }
    case SegmenterKind::trained: {
      if (!ctx.trained) throw Error("segment: no trained segmenter configured");
      SemanticPrior p = ctx.trained(coarse);
      p.validate();
      return p;
    }
    case SegmenterKind::foundation_model: {
      if (!ctx.client) throw DegradedModeError("segment: no mask service configured");
      return ctx.client->segment(coarse);
    }
  }
  throw std::invalid_argument("segment: invalid kind");
}

double dice(const Mask& a, const Mask& b) {
  if (a.shape != b.shape) throw std::invalid_argument("dice: shape mismatch");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    na += a.bits[i] != 0;
    nb += b.bits[i] != 0;
    inter += (a.bits[i] != 0) && (b.bits[i] != 0);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

Mask binarize(const Image& x, double threshold) {
  Mask m(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) m.bits[i] = x.pixels()[i] >= threshold ? 1 : 0;
  return m;
}

}  // namespace rsfr::semantics
