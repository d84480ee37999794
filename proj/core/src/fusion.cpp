#include "rsfr/fusion.hpp"

#include <algorithm>
#include <stdexcept>

namespace rsfr::fusion {

void SFIConfig::validate(int channels, int stages) const {
  if (conv_kernel != 3) throw std::invalid_argument("SFI: only a 3x3 convolution kernel is supported");
  if (attention_reduction <= 0 || channels % attention_reduction) {
    throw std::invalid_argument("SFI: attention reduction " + std::to_string(attention_reduction) +
                                " does not divide " + std::to_string(channels) + " channels");
  }
  if (injection_points) {
    for (int s : *injection_points) {
      if (s < 0 || s >= stages) throw std::invalid_argument("SFI: injection point " + std::to_string(s) + " out of range");
    }
  }
}

bool SFIConfig::injects(int stage) const {
  if (!injection_points) return true;
  return std::find(injection_points->begin(), injection_points->end(), stage) != injection_points->end();
}

SFIModule::SFIModule(nn::ParameterSet& ps, const std::string& name, int channels, int prior_channels, int reduction,
                     Rng& rng)
    : channels_(channels), prior_channels_(prior_channels) {
  conv_ = nn::Conv3x3::make(ps, name + ".conv", channels + prior_channels, channels, rng);
  in_gamma_ = ps.create(name + ".norm.weight", 1, channels, nn::constant_values(channels, 1.0));
  in_beta_ = ps.create(name + ".norm.bias", 1, channels, nn::constant_values(channels, 0.0));
  fc1_ = nn::Linear::make(ps, name + ".attn.fc1", channels, channels / reduction, rng);
  fc2_ = nn::Linear::make(ps, name + ".attn.fc2", channels / reduction, channels, rng);
}

Var SFIModule::pre_attention(const FeatureMap& f, const Var& prior) const {
  if (f.channels() != channels_) throw std::invalid_argument("SFI: feature channel mismatch");
  if (prior.rows() != f.values.rows() || prior.cols() != prior_channels_) {
    throw std::invalid_argument("SFI: prior does not match the feature map's spatial size");
  }
  Var x = nn::concat_cols({f.values, prior});
  x = conv_(x, f.height, f.width);
  x = nn::instance_norm(x, in_gamma_, in_beta_);
  return nn::gelu(x);
}

Var SFIModule::attention_from(const Var& g) const {
  return nn::sigmoid(fc2_(nn::relu(fc1_(nn::mean_rows(g)))));
}

Var SFIModule::attention_weights(const FeatureMap& f, const Var& prior) const {
  return attention_from(pre_attention(f, prior));
}

FeatureMap SFIModule::operator()(const FeatureMap& f, const Var& prior) const {
  Var g = pre_attention(f, prior);
  return {nn::mul_row(g, attention_from(g)), f.height, f.width};
}

Var pool_prior(const Var& prior, int size, int grid) {
  if (prior.rows() != size * size) throw std::invalid_argument("pool_prior: prior is not size x size");
  if (grid <= 0 || size % grid) throw std::invalid_argument("pool_prior: grid does not divide the image size");
  int factor = size / grid;
  if (factor & (factor - 1)) throw std::invalid_argument("pool_prior: downsampling factor is not a power of two");
  Var p = prior;
  int s = size;
  while (s > grid) {
    p = nn::avg_pool2(p, s, s);
    s /= 2;
  }
  return p;
}

Var prior_to_var(const semantics::SemanticPrior& prior) {
  const Shape2 s = prior.shape();
  return Var::constant(s.rows * s.cols, semantics::kPriorChannels, prior.interleaved());
}

namespace {

// H_FR shares the architecture of H_R but starts from different weights.
backbone::BackboneConfig reseeded(backbone::BackboneConfig cfg) {
  cfg.seed = derive_seed(cfg.seed, 0xf2);
  return cfg;
}

}  // namespace

RefinementModel::RefinementModel(const backbone::BackboneConfig& cfg, SFIConfig sfi, const std::string& prefix)
    : cfg_(cfg), net_(params_, prefix, reseeded(cfg)), sfi_cfg_(std::move(sfi)) {
  sfi_cfg_.validate(cfg.embed_dim, cfg.stages());
  Rng rng(derive_seed(cfg.seed, 0x5f1));
  for (int s = 0; s < cfg.stages(); ++s) {
    if (sfi_cfg_.injects(s)) {
      sfis_.emplace_back(std::in_place, params_, prefix + ".sfi" + std::to_string(s), cfg.embed_dim,
                         semantics::kPriorChannels, sfi_cfg_.attention_reduction, rng);
    } else {
      sfis_.emplace_back(std::nullopt);
    }
  }
}

const SFIModule* RefinementModel::sfi(int stage) const {
  if (stage < 0 || stage >= static_cast<int>(sfis_.size()) || !sfis_[stage]) return nullptr;
  return &*sfis_[stage];
}

Var RefinementModel::forward(const Var& coarse, const Var& prior) const {
  const auto& cfg = cfg_;
  const int n = cfg.input_size;
  if (prior.rows() != n * n || prior.cols() != semantics::kPriorChannels) {
    throw std::invalid_argument("refine: prior must be (n*n) x 3");
  }
  std::vector<Var> pooled(sfis_.size());
  for (std::size_t s = 0; s < sfis_.size(); ++s) {
    if (sfis_[s]) pooled[s] = pool_prior(prior, n, cfg.grid_at(static_cast<int>(s)));
  }
  return net_.forward(coarse, [&](int stage, const FeatureMap& f) {
    const SFIModule* m = sfi(stage);
    return m ? (*m)(f, pooled[stage]) : f;
  });
}

Image RefinementModel::refine(const Image& coarse, const semantics::SemanticPrior& prior) const {
  const int n = config().input_size;
  if (coarse.shape() != Shape2{n, n}) {
    throw std::invalid_argument("refine: expected " + std::to_string(n) + "x" + std::to_string(n) + " input, got " +
                                to_string(coarse.shape()));
  }
  backbone::require_normalized(coarse, "refine");
  if (prior.shape() != coarse.shape()) throw std::invalid_argument("refine: prior shape mismatch");
  prior.validate();
  nn::NoGradGuard guard;
  Image out = backbone::var_to_image(forward(backbone::image_to_var(coarse), prior_to_var(prior)), n, n);
  out.norm = coarse.norm;
  out.source_shape = coarse.source_shape;
  return out;
}

}  // namespace rsfr::fusion
