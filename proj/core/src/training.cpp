#include "rsfr/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "json.hpp"
#include "rsfr/array_io.hpp"

namespace rsfr::training {

using nlohmann::json;

void TrainConfig::validate() const {
  if (total_steps <= 0) throw std::invalid_argument("total_steps must be positive");
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (!(base_lr > 0)) throw std::invalid_argument("base_lr must be positive");
  if (decay_steps <= 0) throw std::invalid_argument("decay_steps must be positive");
  if (warm_steps < 0) throw std::invalid_argument("warm_steps must be non-negative");
  if (af_schedule.empty()) throw std::invalid_argument("af_schedule must not be empty");
  if (log_every <= 0) throw std::invalid_argument("log_every must be positive");
}

double learning_rate(const TrainConfig& cfg, int step) {
  if (step < cfg.warm_steps) return cfg.base_lr;
  return cfg.base_lr * std::ldexp(1.0, -((step - cfg.warm_steps) / cfg.decay_steps));
}

// ---- data ---------------------------------------------------------------------------

std::vector<phantom::PhantomSpec> phantom_family(int n, std::uint64_t seed, double noise_sigma) {
  std::vector<phantom::PhantomSpec> out;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    phantom::PhantomSpec s;
    s.lv_center = {47.5 + rng.uniform(-3.0, 3.0), 47.5 + rng.uniform(-3.0, 3.0)};
    s.r_endo = rng.uniform(15.0, 20.0);
    s.r_epi = s.r_endo + rng.uniform(9.0, 13.0);
    s.ha_endo = rng.uniform(50.0, 70.0);
    s.ha_epi = -rng.uniform(50.0, 70.0);
    s.eigenvalues = {rng.uniform(1.5e-3, 1.9e-3), rng.uniform(0.7e-3, 0.9e-3), rng.uniform(0.4e-3, 0.6e-3)};
    s.noise_sigma = noise_sigma;
    s.seed = derive_seed(seed, 1000 + static_cast<std::uint64_t>(i));
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

Image clamp01(Image x) {
  for (double& v : x.pixels()) v = std::clamp(v, 0.0, 1.0);
  return x;
}

const kspace::SamplingMask& full_window() {
  static const kspace::SamplingMask m = kspace::generate_mask(kspace::kDefaultPhaseEncodeLines, 1, 0);
  return m;
}

Image through_mask(const Image& x96, const kspace::SamplingMask& mask) {
  const Image padded = kspace::zero_pad(x96, mask.padded_shape);
  return kspace::center_crop(kspace::zero_fill(kspace::forward_operator(padded, mask), mask), kspace::kCropShape);
}

}  // namespace

Image prepare_ground_truth(const Image& slice) {
  if (slice.shape() != kspace::kCropShape) throw std::invalid_argument("prepare_ground_truth: expected a 96x96 slice");
  Image gt = kspace::normalize_minmax(through_mask(slice, full_window()));
  gt.source_shape = slice.shape();
  return gt;
}

Image zero_filled_from(const Image& ground_truth, const kspace::SamplingMask& mask) {
  Image zf = clamp01(through_mask(ground_truth, mask));
  zf.norm = ground_truth.norm;
  zf.source_shape = ground_truth.source_shape;
  return zf;
}

TrainingPair prepare_pair(const Image& slice, const kspace::SamplingMask& mask) {
  TrainingPair p;
  p.ground_truth = prepare_ground_truth(slice);
  p.zero_filled = zero_filled_from(p.ground_truth, mask);
  p.af = mask.af;
  return p;
}

std::vector<TrainingPair> make_dataset(const std::vector<phantom::PhantomSpec>& phantoms, const std::vector<int>& af_list,
                                       std::uint64_t mask_seed) {
  std::vector<TrainingPair> out;
  std::uint64_t counter = 0;
  for (std::size_t p = 0; p < phantoms.size(); ++p) {
    const auto field = phantom::generate_tensor_field(phantoms[p]);
    auto series = phantom::simulate_dwis(field, phantoms[p]);
    if (phantoms[p].noise_sigma > 0) series = phantom::add_rician_noise(series, phantoms[p]);
    for (std::size_t s = 0; s < series.size(); ++s) {
      for (int af : af_list) {
        const auto mask = kspace::generate_mask(kspace::kDefaultPhaseEncodeLines, af, derive_seed(mask_seed, counter++));
        TrainingPair pair = prepare_pair(series.slices[s], mask);
        pair.myo_mask = field.myo_mask;
        pair.phantom_index = p;
        pair.slice_index = s;
        out.push_back(std::move(pair));
      }
    }
  }
  return out;
}

std::vector<TrainingPair> make_dataset(const DatasetConfig& cfg) {
  return make_dataset(phantom_family(cfg.n_phantoms, cfg.seed, cfg.noise_sigma), cfg.af_list, derive_seed(cfg.seed, 77));
}

// ---- models -------------------------------------------------------------------------

Models::Models(const backbone::BackboneConfig& cfg, const fusion::SFIConfig& sfi)
    : recon(std::make_unique<backbone::ReconstructionModel>(cfg)),
      refine(std::make_unique<fusion::RefinementModel>(cfg, sfi)) {}

std::vector<const nn::ParameterSet*> Models::parameter_sets() const {
  return {&recon->parameters(), &refine->parameters()};
}

std::string Models::digest() const { return io::hash_hex(recon->parameters().digest() + refine->parameters().digest()); }

void Models::zero_grad() {
  recon->parameters().zero_grad();
  refine->parameters().zero_grad();
}

ForwardResult forward_pipeline(const Models& m, const Image& zero_filled, semantics::SegmenterKind kind,
                               const semantics::SegmenterContext& ctx) {
  const int n = m.recon->config().input_size;
  ForwardResult r;
  r.coarse = m.recon->forward(backbone::image_to_var(zero_filled));
  // the segmenter is frozen and sees the coarse image clamped to the normalised range
  r.prior = semantics::segment(clamp01(backbone::var_to_image(r.coarse, n, n)), kind, ctx);
  r.refined = m.refine->forward(r.coarse, fusion::prior_to_var(r.prior));
  return r;
}

Reconstruction reconstruct(const Models& m, const Image& zero_filled, semantics::SegmenterKind kind,
                           const semantics::SegmenterContext& ctx) {
  const int n = m.recon->config().input_size;
  if (zero_filled.shape() != Shape2{n, n}) throw std::invalid_argument("reconstruct: unexpected input shape");
  backbone::require_normalized(zero_filled, "reconstruct");
  nn::NoGradGuard guard;
  ForwardResult f = forward_pipeline(m, zero_filled, kind, ctx);
  Reconstruction out{backbone::var_to_image(f.coarse, n, n), std::move(f.prior), backbone::var_to_image(f.refined, n, n)};
  for (Image* im : {&out.coarse, &out.refined}) {
    im->norm = zero_filled.norm;
    im->source_shape = zero_filled.source_shape;
  }
  return out;
}

void Adam::step(const std::vector<nn::ParameterSet*>& sets, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
  std::size_t k = 0;
  for (auto* ps : sets) {
    for (const auto& e : ps->entries()) {
      nn::Var v = e.var;
      auto& val = v.mutable_value();
      auto& g = v.mutable_grad();
      if (m_.size() <= k) {
        m_.emplace_back(val.size(), 0.0);
        v_.emplace_back(val.size(), 0.0);
      }
      auto& m = m_[k];
      auto& s = v_[k];
      for (std::size_t i = 0; i < val.size(); ++i) {
        m[i] = b1_ * m[i] + (1 - b1_) * g[i];
        s[i] = b2_ * s[i] + (1 - b2_) * g[i] * g[i];
        val[i] -= lr * (m[i] / c1) / (std::sqrt(s[i] / c2) + eps_);
      }
      ++k;
    }
  }
}

std::string LogRecord::to_json() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "{\"step\":%d,\"loss\":%.17g,\"loss_i\":%.17g,\"loss_k\":%.17g,\"loss_p\":%.17g,\"lr\":%.17g}",
                step, loss, loss_i, loss_k, loss_p, lr);
  return buf;
}

TrainState train_end_to_end(const std::vector<TrainingPair>& dataset, const TrainConfig& cfg,
                            const losses::LossWeights& weights, const backbone::BackboneConfig& bcfg,
                            const fusion::SFIConfig& sfi, const TrainOptions& opts) {
  cfg.validate();
  weights.validate();
  if (dataset.empty()) throw std::invalid_argument("train_end_to_end: empty dataset");
#if defined(__GLIBC__)
  // graphs allocate and free large buffers every step; keep them off mmap
  mallopt(M_MMAP_THRESHOLD, 1 << 25);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  TrainState st;
  st.backbone = bcfg;
  st.sfi = sfi;
  st.weights = weights;
  st.config = cfg;
  st.models = std::make_shared<Models>(bcfg, sfi);
  Models& m = *st.models;
  const int n = bcfg.input_size;
  const std::string seg_before = opts.segmenter_digest ? opts.segmenter_digest() : std::string();
  std::unique_ptr<losses::FeatureExtractor> extractor;
  if (weights.gamma > 0) extractor = std::make_unique<losses::FeatureExtractor>(derive_seed(cfg.seed, 0xfe));

  std::ofstream log;
  if (!opts.log_path.empty()) {
    if (opts.log_path.has_parent_path()) std::filesystem::create_directories(opts.log_path.parent_path());
    log.open(opts.log_path, std::ios::trunc);
    if (!log) throw Error("cannot open training log " + opts.log_path.string());
  }
  if (!opts.checkpoint_dir.empty()) std::filesystem::create_directories(opts.checkpoint_dir);

  // samples restricted to the configured acceleration factors, visited in seeded epochs
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (std::find(cfg.af_schedule.begin(), cfg.af_schedule.end(), dataset[i].af) != cfg.af_schedule.end()) pool.push_back(i);
  }
  if (pool.empty()) throw std::invalid_argument("train_end_to_end: no samples match af_schedule");
  Rng order_rng(derive_seed(cfg.seed, 0xda7a));
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      order = pool;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  Adam adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  std::vector<nn::ParameterSet*> sets{&m.recon->parameters(), &m.refine->parameters()};
  for (int step = 0; step < cfg.total_steps; ++step) {
    m.zero_grad();
    LogRecord rec;
    rec.step = step;
    rec.lr = learning_rate(cfg, step);
    for (int b = 0; b < cfg.batch_size; ++b) {
      const TrainingPair& pair = dataset[next_index()];
      const semantics::SegmenterContext ctx = opts.context ? opts.context(pair) : semantics::SegmenterContext{};
      ForwardResult f = forward_pipeline(m, pair.zero_filled, cfg.segmenter, ctx);
      const Var gt = backbone::image_to_var(pair.ground_truth);
      losses::LossTerms t = losses::hybrid_loss(gt, f.refined, n, weights, extractor.get());
      Var total = t.total;
      if (cfg.deep_supervision) {
        total = nn::add(total, losses::hybrid_loss(gt, f.coarse, n, weights, extractor.get()).total);
      }
      const double inv_b = 1.0 / cfg.batch_size;
      rec.loss += total.item() * inv_b;
      rec.loss_i += t.image * inv_b;
      rec.loss_k += t.kspace * inv_b;
      rec.loss_p += t.perceptual * inv_b;
      if (!std::isfinite(total.item())) break;
      nn::backward(total, inv_b);
    }
    if (!std::isfinite(rec.loss)) {
      st.step = step;
      if (!opts.checkpoint_dir.empty()) save_checkpoint(opts.checkpoint_dir / "diverged.ckpt", st);
      throw DivergenceError("training diverged at step " + std::to_string(step) + " (non-finite loss)");
    }
    adam.step(sets, rec.lr);
    st.step = step + 1;
    if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
      st.log.push_back(rec);
      if (log) log << rec.to_json() << '\n' << std::flush;
    }
    if (opts.on_step) opts.on_step(rec);
    if (cfg.checkpoint_every > 0 && !opts.checkpoint_dir.empty() && (step + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(opts.checkpoint_dir / ("step_" + std::to_string(step + 1) + ".ckpt"), st);
    }
  }
  if (opts.segmenter_digest && opts.segmenter_digest() != seg_before) {
    throw Error("segmenter parameters changed during training");
  }
  return st;
}

// ---- checkpoints --------------------------------------------------------------------------

namespace {

json backbone_json(const backbone::BackboneConfig& c) {
  return {{"n_res_blocks", c.n_res_blocks}, {"embed_dim", c.embed_dim},  {"scale_factors", c.scale_factors},
          {"patch_size", c.patch_size},     {"state_dim", c.state_dim},  {"expand", c.expand},
          {"attention_heads", c.attention_heads}, {"input_size", c.input_size}, {"seed", c.seed}};
}

backbone::BackboneConfig backbone_from(const json& j) {
  backbone::BackboneConfig c;
  c.n_res_blocks = j.value("n_res_blocks", c.n_res_blocks);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.scale_factors = j.value("scale_factors", c.scale_factors);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.state_dim = j.value("state_dim", c.state_dim);
  c.expand = j.value("expand", c.expand);
  c.attention_heads = j.value("attention_heads", c.attention_heads);
  c.input_size = j.value("input_size", c.input_size);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

}  // namespace

std::string config_to_json(const backbone::BackboneConfig& cfg) { return backbone_json(cfg).dump(); }

backbone::BackboneConfig backbone_config_from_json(const std::string& text) { return backbone_from(json::parse(text)); }

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  if (!state.models) throw std::invalid_argument("save_checkpoint: state has no models");
  json header;
  header["format"] = "rsfr-checkpoint-1";
  header["backbone"] = backbone_json(state.backbone);
  json sfi = {{"attention_reduction", state.sfi.attention_reduction}};
  if (state.sfi.injection_points) sfi["injection_points"] = *state.sfi.injection_points;
  header["sfi"] = sfi;
  header["weights"] = {{"alpha", state.weights.alpha}, {"beta", state.weights.beta}, {"gamma", state.weights.gamma},
                       {"epsilon", state.weights.epsilon}};
  header["step"] = state.step;
  const TrainConfig& tc = state.config;
  header["train"] = {{"total_steps", tc.total_steps},
                     {"batch_size", tc.batch_size},
                     {"base_lr", tc.base_lr},
                     {"warm_steps", tc.warm_steps},
                     {"decay_steps", tc.decay_steps},
                     {"seed", tc.seed},
                     {"af_schedule", tc.af_schedule},
                     {"segmenter", semantics::to_string(tc.segmenter)},
                     {"deep_supervision", tc.deep_supervision},
                     {"log_every", tc.log_every},
                     {"checkpoint_every", tc.checkpoint_every},
                     {"adam_beta1", tc.adam_beta1},
                     {"adam_beta2", tc.adam_beta2},
                     {"adam_eps", tc.adam_eps}};
  json table = json::array();
  std::string payload;
  for (const auto* ps : state.models->parameter_sets()) {
    for (const auto& e : ps->entries()) {
      table.push_back({{"name", e.name}, {"rows", e.var.rows()}, {"cols", e.var.cols()}});
      for (double v : e.var.value()) {
        auto bits = std::bit_cast<std::uint64_t>(v);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        payload.append(reinterpret_cast<const char*>(&bits), sizeof bits);
      }
    }
  }
  header["params"] = table;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw Error("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
  if (header.value("format", "") != "rsfr-checkpoint-1") throw Error("unrecognised checkpoint format");
  TrainState st;
  st.backbone = backbone_from(header.at("backbone"));
  st.sfi.attention_reduction = header.at("sfi").value("attention_reduction", 4);
  if (header.at("sfi").contains("injection_points")) {
    st.sfi.injection_points = header.at("sfi").at("injection_points").get<std::vector<int>>();
  }
  const auto& w = header.at("weights");
  st.weights = {w.at("alpha").get<double>(), w.at("beta").get<double>(), w.at("gamma").get<double>(),
                w.at("epsilon").get<double>()};
  st.step = header.value("step", 0);
  if (header.contains("train")) {
    const auto& t = header.at("train");
    TrainConfig& tc = st.config;
    tc.total_steps = t.value("total_steps", tc.total_steps);
    tc.batch_size = t.value("batch_size", tc.batch_size);
    tc.base_lr = t.value("base_lr", tc.base_lr);
    tc.warm_steps = t.value("warm_steps", tc.warm_steps);
    tc.decay_steps = t.value("decay_steps", tc.decay_steps);
    tc.seed = t.value("seed", tc.seed);
    tc.af_schedule = t.value("af_schedule", tc.af_schedule);
    tc.segmenter = semantics::segmenter_kind_from_string(t.value("segmenter", std::string("fallback")));
    tc.deep_supervision = t.value("deep_supervision", tc.deep_supervision);
    tc.log_every = t.value("log_every", tc.log_every);
    tc.checkpoint_every = t.value("checkpoint_every", tc.checkpoint_every);
    tc.adam_beta1 = t.value("adam_beta1", tc.adam_beta1);
    tc.adam_beta2 = t.value("adam_beta2", tc.adam_beta2);
    tc.adam_eps = t.value("adam_eps", tc.adam_eps);
  }
  st.models = std::make_shared<Models>(st.backbone, st.sfi);
  std::map<std::string, nn::Var> by_name;
  for (auto* ps : st.models->parameter_sets()) {
    for (const auto& e : ps->entries()) by_name.emplace(e.name, e.var);
  }
  std::size_t loaded = 0;
  for (const auto& entry : header.at("params")) {
    const auto name = entry.at("name").get<std::string>();
    const int rows = entry.at("rows").get<int>(), cols = entry.at("cols").get<int>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("checkpoint parameter '" + name + "' does not exist in the model");
    nn::Var v = it->second;
    if (v.rows() != rows || v.cols() != cols) throw Error("checkpoint parameter '" + name + "' has the wrong shape");
    auto& vals = v.mutable_value();
    for (double& x : vals) {
      std::uint64_t bits = 0;
      if (!in.read(reinterpret_cast<char*>(&bits), sizeof bits)) throw Error("checkpoint payload is truncated");
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      x = std::bit_cast<double>(bits);
    }
    ++loaded;
  }
  if (loaded != by_name.size()) throw Error("checkpoint does not cover every model parameter");
  return st;
}

}  // namespace rsfr::training
