#include "rsfr/backbone.hpp"

#include <algorithm>

#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <tuple>

namespace rsfr::backbone {
namespace {

using IndexPtr = std::shared_ptr<const std::vector<int>>;

// Element-level gather index for a row permutation of an (rows x cols) matrix.
IndexPtr row_gather_index(const std::vector<int>& rows_from, int cols) {
  auto idx = std::make_shared<std::vector<int>>(rows_from.size() * cols);
  for (std::size_t t = 0; t < rows_from.size(); ++t) {
    for (int c = 0; c < cols; ++c) (*idx)[t * cols + c] = rows_from[t] * cols + c;
  }
  return idx;
}

// Cached index tables; keys are small tuples of shape parameters.
template <typename Key, typename Make>
IndexPtr cached(std::map<Key, IndexPtr>& cache, const Key& key, Make make) {
  static std::mutex mu;
  std::lock_guard lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  return cache.emplace(key, make()).first->second;
}

IndexPtr scan_index(int h, int w, int cols, int k, bool inverse) {
  static std::map<std::tuple<int, int, int, int, bool>, IndexPtr> cache;
  return cached(cache, std::tuple{h, w, cols, k, inverse}, [&] {
    auto order = scan_order(h, w, k);
    return row_gather_index(inverse ? inverse_permutation(order) : order, cols);
  });
}

// (H*W x C) -> (H/f*W/f x f*f*C); output channel (dy*f+dx)*C + c.
IndexPtr s2d_index(int h, int w, int c, int f) {
  static std::map<std::tuple<int, int, int, int>, IndexPtr> cache;
  return cached(cache, std::tuple{h, w, c, f}, [&] {
    const int ho = h / f, wo = w / f, co = f * f * c;
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(ho) * wo * co);
    for (int y = 0; y < ho; ++y) {
      for (int x = 0; x < wo; ++x) {
        for (int dy = 0; dy < f; ++dy) {
          for (int dx = 0; dx < f; ++dx) {
            for (int ch = 0; ch < c; ++ch) {
              const int src = ((y * f + dy) * w + (x * f + dx)) * c + ch;
              (*idx)[(static_cast<std::size_t>(y) * wo + x) * co + (dy * f + dx) * c + ch] = src;
            }
          }
        }
      }
    }
    return IndexPtr(idx);
  });
}

// Inverse of s2d: (H*W x f*f*C) -> (H*f*W*f x C).
IndexPtr d2s_index(int h, int w, int c, int f) {
  static std::map<std::tuple<int, int, int, int>, IndexPtr> cache;
  return cached(cache, std::tuple{h, w, c, f}, [&] {
    const int ho = h * f, wo = w * f, ci = f * f * c;
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(ho) * wo * c);
    for (int y = 0; y < ho; ++y) {
      for (int x = 0; x < wo; ++x) {
        for (int ch = 0; ch < c; ++ch) {
          const int src = ((y / f) * w + (x / f)) * ci + ((y % f) * f + (x % f)) * c + ch;
          (*idx)[(static_cast<std::size_t>(y) * wo + x) * c + ch] = src;
        }
      }
    }
    return IndexPtr(idx);
  });
}

}  // namespace

// ---- config ------------------------------------------------------------------------

BackboneConfig BackboneConfig::toy() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::full() {
  BackboneConfig c;
  c.n_res_blocks = 8;
  c.embed_dim = 180;
  c.patch_size = 2;
  return c;
}

int BackboneConfig::grid_at(int stage) const {
  int g = input_size / patch_size;
  for (int i = 0; i <= stage; ++i) g /= scale_factors[i];
  return g;
}

void BackboneConfig::validate() const {
  if (n_res_blocks <= 0 || n_res_blocks % 2) throw std::invalid_argument("n_res_blocks must be even and positive");
  if (static_cast<int>(scale_factors.size()) < stages()) {
    throw std::invalid_argument("scale_factors needs one entry per encoder stage");
  }
  if (embed_dim <= 0 || patch_size <= 0 || state_dim <= 0 || expand <= 0 || input_size <= 0) {
    throw std::invalid_argument("backbone dimensions must be positive");
  }
  if (attention_heads <= 0 || embed_dim % attention_heads) {
    throw std::invalid_argument("embed_dim must be divisible by attention_heads");
  }
  int prod = patch_size;
  for (int i = 0; i < stages(); ++i) {
    if (scale_factors[i] < 1) throw std::invalid_argument("scale factors must be >= 1");
    prod *= scale_factors[i];
  }
  if (input_size % prod) {
    throw std::invalid_argument("input_size must be divisible by patch_size times the downsampling factors");
  }
}

// ---- cross-scan ----------------------------------------------------------------

std::vector<int> scan_order(int height, int width, int k) {
  if (k < 0 || k > 3) throw std::invalid_argument("scan_order: k must be 0..3");
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(height) * width);
  if (k % 2 == 0) {
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) order.push_back(y * width + x);
    }
  } else {
    for (int x = 0; x < width; ++x) {
      for (int y = 0; y < height; ++y) order.push_back(y * width + x);
    }
  }
  if (k >= 2) std::reverse(order.begin(), order.end());
  return order;
}

std::vector<int> inverse_permutation(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size(), -1);
  for (std::size_t t = 0; t < perm.size(); ++t) {
    if (perm[t] < 0 || static_cast<std::size_t>(perm[t]) >= perm.size() || inv[perm[t]] != -1) {
      throw std::invalid_argument("inverse_permutation: not a permutation");
    }
    inv[perm[t]] = static_cast<int>(t);
  }
  return inv;
}

ScanSequences scan_expand(const FeatureMap& f) {
  ScanSequences s;
  s.height = f.height;
  s.width = f.width;
  const int L = f.height * f.width, C = f.channels();
  for (int k = 0; k < 4; ++k) {
    s.orders[k] = scan_order(f.height, f.width, k);
    s.sequences[k] = nn::gather(f.values, L, C, scan_index(f.height, f.width, C, k, false));
  }
  return s;
}

FeatureMap scan_merge(const ScanSequences& s) {
  const int L = s.height * s.width, C = s.sequences[0].cols();
  Var acc;
  for (int k = 0; k < 4; ++k) {
    Var back = nn::gather(s.sequences[k], L, C, scan_index(s.height, s.width, C, k, true));
    acc = k == 0 ? back : nn::add(acc, back);
  }
  return {acc, s.height, s.width};
}

// ---- S6 ----------------------------------------------------------------------------

S6Params S6Params::make(nn::ParameterSet& ps, const std::string& name, int inner, int dt_rank, int state_dim,
                        Rng& rng) {
  S6Params p;
  p.x_proj = nn::Linear::make(ps, name + ".x_proj", inner, dt_rank + 2 * state_dim, rng, false);
  p.dt_proj.weight = ps.create(name + ".dt_proj.weight", dt_rank, inner,
                               nn::uniform_values(rng, static_cast<std::size_t>(dt_rank) * inner,
                                                  1.0 / std::sqrt(static_cast<double>(dt_rank))));
  // step sizes start log-uniform in [1e-3, 1e-1]; the bias is their inverse softplus
  std::vector<double> dt_bias(static_cast<std::size_t>(inner));
  for (auto& v : dt_bias) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = dt + std::log(-std::expm1(-dt));
  }
  p.dt_proj.bias = ps.create(name + ".dt_proj.bias", 1, inner, std::move(dt_bias));
  std::vector<double> a(static_cast<std::size_t>(inner) * state_dim);
  for (int e = 0; e < inner; ++e) {
    for (int n = 0; n < state_dim; ++n) a[static_cast<std::size_t>(e) * state_dim + n] = std::log(n + 1.0);
  }
  p.a_log = ps.create(name + ".a_log", inner, state_dim, std::move(a));
  p.d = ps.create(name + ".d", 1, inner, nn::constant_values(inner, 1.0));
  return p;
}

Var s6_sequence(const Var& seq, const S6Params& p, int dt_rank, int state_dim) {
  Var proj = p.x_proj(seq);
  Var dt_in = nn::slice_cols(proj, 0, dt_rank);
  Var b = nn::slice_cols(proj, dt_rank, dt_rank + state_dim);
  Var c = nn::slice_cols(proj, dt_rank + state_dim, dt_rank + 2 * state_dim);
  Var delta = nn::softplus(p.dt_proj(dt_in));
  return selective_scan(seq, delta, p.a_log, b, c, p.d);
}

// ---- VSS --------------------------------------------------------------------------

VSSBlock::VSSBlock(nn::ParameterSet& ps, const std::string& name, int channels, int inner, int dt_rank,
                   int state_dim, Rng& rng)
    : inner_(inner),
      dt_rank_(dt_rank),
      state_dim_(state_dim),
      norm_(nn::LayerNorm::make(ps, name + ".norm", channels)),
      in_proj_(nn::Linear::make(ps, name + ".in_proj", channels, 2 * inner, rng)),
      dwconv_(nn::DepthwiseConv3x3::make(ps, name + ".dwconv", inner, rng)),
      s6_{S6Params::make(ps, name + ".s6_0", inner, dt_rank, state_dim, rng),
          S6Params::make(ps, name + ".s6_1", inner, dt_rank, state_dim, rng),
          S6Params::make(ps, name + ".s6_2", inner, dt_rank, state_dim, rng),
          S6Params::make(ps, name + ".s6_3", inner, dt_rank, state_dim, rng)},
      out_norm_(nn::LayerNorm::make(ps, name + ".out_norm", inner)),
      out_proj_(nn::Linear::make(ps, name + ".out_proj", inner, channels, rng)) {}

FeatureMap VSSBlock::operator()(const FeatureMap& f) const {
  Var h = norm_(f.values);
  Var both = in_proj_(h);
  Var p1 = nn::slice_cols(both, 0, inner_);
  Var p2 = nn::slice_cols(both, inner_, 2 * inner_);
  p1 = nn::silu(dwconv_(p1, f.height, f.width));
  ScanSequences s = scan_expand({p1, f.height, f.width});
  for (int k = 0; k < 4; ++k) s.sequences[k] = s6_sequence(s.sequences[k], s6_[k], dt_rank_, state_dim_);
  Var y = out_norm_(scan_merge(s).values);
  Var gated = nn::mul(y, nn::silu(p2));
  return {nn::add(f.values, out_proj_(gated)), f.height, f.width};
}

ResidualMambaBlock::ResidualMambaBlock(nn::ParameterSet& ps, const std::string& name, const BackboneConfig& cfg,
                                       Rng& rng)
    : first_(ps, name + ".vss0", cfg.embed_dim, cfg.inner_dim(), cfg.dt_rank(), cfg.state_dim, rng),
      second_(ps, name + ".vss1", cfg.embed_dim, cfg.inner_dim(), cfg.dt_rank(), cfg.state_dim, rng) {}

FeatureMap ResidualMambaBlock::operator()(const FeatureMap& f) const { return second_(first_(f)); }

// ---- attention ------------------------------------------------------------------------

AttentionBlock::AttentionBlock(nn::ParameterSet& ps, const std::string& name, int channels, int heads, Rng& rng)
    : heads_(heads),
      norm1_(nn::LayerNorm::make(ps, name + ".norm1", channels)),
      norm2_(nn::LayerNorm::make(ps, name + ".norm2", channels)),
      qkv_(nn::Linear::make(ps, name + ".qkv", channels, 3 * channels, rng)),
      proj_(nn::Linear::make(ps, name + ".proj", channels, channels, rng)),
      fc1_(nn::Linear::make(ps, name + ".fc1", channels, 2 * channels, rng)),
      fc2_(nn::Linear::make(ps, name + ".fc2", 2 * channels, channels, rng)) {}

FeatureMap AttentionBlock::operator()(const FeatureMap& f) const {
  const int C = f.channels(), dh = C / heads_;
  Var qkv = qkv_(norm1_(f.values));
  std::vector<Var> heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads_; ++h) {
    Var q = nn::slice_cols(qkv, h * dh, (h + 1) * dh);
    Var k = nn::slice_cols(qkv, C + h * dh, C + (h + 1) * dh);
    Var v = nn::slice_cols(qkv, 2 * C + h * dh, 2 * C + (h + 1) * dh);
    Var attn = nn::softmax_rows(nn::scale(nn::matmul_nt(q, k), inv_sqrt));
    heads.push_back(nn::matmul(attn, v));
  }
  Var x = nn::add(f.values, proj_(nn::concat_cols(heads)));
  Var mlp = fc2_(nn::gelu(fc1_(norm2_(x))));
  return {nn::add(x, mlp), f.height, f.width};
}

// ---- embedding -------------------------------------------------------------------------

FeatureMap space_to_depth(const FeatureMap& f, int factor) {
  if (f.height % factor || f.width % factor) throw std::invalid_argument("space_to_depth: indivisible shape");
  const int ho = f.height / factor, wo = f.width / factor, c = f.channels();
  return {nn::gather(f.values, ho * wo, factor * factor * c, s2d_index(f.height, f.width, c, factor)), ho, wo};
}

FeatureMap depth_to_space(const FeatureMap& f, int factor) {
  const int ff = factor * factor;
  if (f.channels() % ff) throw std::invalid_argument("depth_to_space: channels not divisible by factor^2");
  const int c = f.channels() / ff, ho = f.height * factor, wo = f.width * factor;
  return {nn::gather(f.values, ho * wo, c, d2s_index(f.height, f.width, c, factor)), ho, wo};
}

FeatureMap patch_embed(const Var& image, int size, int patch, const nn::Linear& proj) {
  if (image.rows() != size * size || image.cols() != 1) throw std::invalid_argument("patch_embed: expected size^2 x 1");
  if (size % patch) throw std::invalid_argument("patch_embed: size not divisible by patch");
  FeatureMap patches = space_to_depth({image, size, size}, patch);
  return {proj(patches.values), patches.height, patches.width};
}

Var patch_unembed(const FeatureMap& f, int patch, const nn::Linear& proj) {
  FeatureMap pixels = depth_to_space({proj(f.values), f.height, f.width}, patch);
  return pixels.values;
}

Var image_to_var(const Image& img) {
  return Var::constant(img.rows() * img.cols(), 1, std::vector<double>(img.pixels().begin(), img.pixels().end()));
}

Image var_to_image(const Var& v, int rows, int cols) {
  if (v.size() != static_cast<std::size_t>(rows) * cols) throw std::invalid_argument("var_to_image: size mismatch");
  return Image(Shape2{rows, cols}, std::vector<double>(v.value().begin(), v.value().end()));
}

void require_normalized(const Image& img, const char* what) {
  for (double v : img.pixels()) {
    if (!std::isfinite(v) || v < -1e-9 || v > 1.0 + 1e-9) {
      throw std::invalid_argument(std::string(what) + ": input is not normalised to [0,1]");
    }
  }
}

// ---- U-Net --------------------------------------------------------------------------------

MambaUNet::MambaUNet(nn::ParameterSet& ps, const std::string& prefix, const BackboneConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const int C = cfg_.embed_dim, P = cfg_.patch_size, S = cfg_.stages();
  embed_ = nn::Linear::make(ps, prefix + ".embed", P * P, C, rng);
  for (int i = 0; i < S; ++i) {
    const int f = cfg_.scale_factors[i];
    down_.push_back(f > 1 ? nn::Linear::make(ps, prefix + ".down" + std::to_string(i), f * f * C, C, rng) : nn::Linear{});
    enc_.emplace_back(ps, prefix + ".enc" + std::to_string(i), cfg_, rng);
  }
  bottleneck_ = std::make_unique<AttentionBlock>(ps, prefix + ".bottleneck", C, cfg_.attention_heads, rng);
  for (int i = 0; i < S; ++i) {
    const int f = cfg_.scale_factors[i];
    fuse_.push_back(nn::Linear::make(ps, prefix + ".skip" + std::to_string(i), 2 * C, C, rng));
    dec_.emplace_back(ps, prefix + ".dec" + std::to_string(i), cfg_, rng);
    up_.push_back(f > 1 ? nn::Linear::make(ps, prefix + ".up" + std::to_string(i), C, f * f * C, rng) : nn::Linear{});
  }
  final_norm_ = nn::LayerNorm::make(ps, prefix + ".final_norm", C);
  // small output layer so an untrained network stays close to its global residual
  unembed_ = nn::Linear::make(ps, prefix + ".unembed", C, P * P, rng, true, 0.1);
}

Var MambaUNet::forward(const Var& image, const EncoderHook& hook) const {
  const int S = cfg_.stages();
  FeatureMap h = patch_embed(image, cfg_.input_size, cfg_.patch_size, embed_);
  std::vector<FeatureMap> skips;
  for (int i = 0; i < S; ++i) {
    const int f = cfg_.scale_factors[i];
    if (f > 1) {
      FeatureMap merged = space_to_depth(h, f);
      h = {down_[i](merged.values), merged.height, merged.width};
    }
    if (hook) h = hook(i, h);
    h = enc_[i](h);
    skips.push_back(h);
  }
  h = (*bottleneck_)(h);
  if (zero_bottleneck_) h.values = Var::zeros(h.values.rows(), h.values.cols());
  for (int i = S - 1; i >= 0; --i) {
    h.values = fuse_[i](nn::concat_cols({h.values, skips[i].values}));
    h = dec_[i](h);
    const int f = cfg_.scale_factors[i];
    if (f > 1) h = depth_to_space({up_[i](h.values), h.height, h.width}, f);
  }
  h.values = final_norm_(h.values);
  return nn::add(image, patch_unembed(h, cfg_.patch_size, unembed_));
}

ReconstructionModel::ReconstructionModel(const BackboneConfig& cfg, const std::string& prefix)
    : net_(params_, prefix, cfg) {}

Image ReconstructionModel::reconstruct_coarse(const Image& zero_filled) const {
  const int n = config().input_size;
  if (zero_filled.shape() != Shape2{n, n}) {
    throw std::invalid_argument("reconstruct_coarse: expected " + std::to_string(n) + "x" + std::to_string(n) +
                                " input, got " + to_string(zero_filled.shape()));
  }
  require_normalized(zero_filled, "reconstruct_coarse");
  nn::NoGradGuard guard;
  Image out = var_to_image(forward(image_to_var(zero_filled)), n, n);
  out.norm = zero_filled.norm;
  out.source_shape = zero_filled.source_shape;
  return out;
}

std::size_t parameter_count(const BackboneConfig& cfg) {
  nn::ParameterSet ps;
  MambaUNet net(ps, "count", cfg);
  return ps.scalar_count();
}

}  // namespace rsfr::backbone
