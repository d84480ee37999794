#include "rsfr/pipeline.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "rsfr/array_io.hpp"
#include "rsfr/dtfit.hpp"
#include "rsfr/metrics.hpp"
#include "rsfr/phantom.hpp"
#include "rsfr/report.hpp"

#ifndef RSFR_VERSION
#define RSFR_VERSION "0.0.0"
#endif

namespace rsfr::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

const char* to_string(MaskMode m) { return m == MaskMode::reference ? "reference" : "fallback"; }

MaskMode mask_mode_from(const std::string& s) {
  if (s == "reference") return MaskMode::reference;
  if (s == "fallback") return MaskMode::fallback;
  throw std::invalid_argument("unknown mask mode '" + s + "'");
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

ordered_json backbone_json(const backbone::BackboneConfig& c) {
  return {{"n_res_blocks", c.n_res_blocks}, {"embed_dim", c.embed_dim}, {"scale_factors", c.scale_factors},
          {"patch_size", c.patch_size},     {"state_dim", c.state_dim}, {"expand", c.expand},
          {"attention_heads", c.attention_heads}, {"input_size", c.input_size}, {"seed", c.seed}};
}

const std::vector<std::string> kMethods{"gt", "zf", "coarse", "refined"};

std::string case_dir(int p) { return "test_" + std::to_string(p); }
std::string slice_file(const std::string& what, std::size_t k) { return what + "_" + std::to_string(k) + ".npy"; }

}  // namespace

// ---- config -----------------------------------------------------------------------------

std::string PipelineConfig::to_json() const {
  ordered_json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir.string();
  j["data"] = {{"n_train_phantoms", n_train_phantoms}, {"n_test_phantoms", n_test_phantoms}, {"noise_sigma", noise_sigma}};
  j["mask"] = {{"af", af}, {"center_fraction", center_fraction ? json(*center_fraction) : json(nullptr)}};
  j["backbone"] = backbone_json(backbone);
  ordered_json sfi_j = {{"attention_reduction", sfi.attention_reduction}};
  sfi_j["injection_points"] = sfi.injection_points ? json(*sfi.injection_points) : json(nullptr);
  j["sfi"] = sfi_j;
  j["segmenter"] = semantics::to_string(segmenter);
  j["loss"] = {{"alpha", loss.alpha}, {"beta", loss.beta}, {"gamma", loss.gamma}, {"epsilon", loss.epsilon}};
  j["train"] = {{"total_steps", train.total_steps},   {"batch_size", train.batch_size},
                {"base_lr", train.base_lr},           {"warm_steps", train.warm_steps},
                {"decay_steps", train.decay_steps},   {"deep_supervision", train.deep_supervision},
                {"log_every", train.log_every},       {"checkpoint_every", train.checkpoint_every}};
  j["postprocess"] = {{"mask_mode", to_string(mask_mode)}, {"n_spokes", n_spokes}, {"samples_per_spoke", samples_per_spoke}};
  return j.dump(2);
}

PipelineConfig PipelineConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir.string());
    if (j.contains("data")) {
      const auto& d = j["data"];
      c.n_train_phantoms = d.value("n_train_phantoms", c.n_train_phantoms);
      c.n_test_phantoms = d.value("n_test_phantoms", c.n_test_phantoms);
      c.noise_sigma = d.value("noise_sigma", c.noise_sigma);
    }
    if (j.contains("mask")) {
      const auto& m = j["mask"];
      c.af = m.value("af", c.af);
      if (m.contains("center_fraction") && !m["center_fraction"].is_null()) c.center_fraction = m["center_fraction"].get<double>();
    }
    if (j.contains("backbone")) c.backbone = training::backbone_config_from_json(j["backbone"].dump());
    if (j.contains("sfi")) {
      const auto& s = j["sfi"];
      c.sfi.attention_reduction = s.value("attention_reduction", c.sfi.attention_reduction);
      if (s.contains("injection_points") && !s["injection_points"].is_null()) {
        c.sfi.injection_points = s["injection_points"].get<std::vector<int>>();
      }
    }
    if (j.contains("segmenter")) c.segmenter = semantics::segmenter_kind_from_string(j["segmenter"].get<std::string>());
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      c.loss.alpha = l.value("alpha", c.loss.alpha);
      c.loss.beta = l.value("beta", c.loss.beta);
      c.loss.gamma = l.value("gamma", c.loss.gamma);
      c.loss.epsilon = l.value("epsilon", c.loss.epsilon);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      c.train.total_steps = t.value("total_steps", c.train.total_steps);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.base_lr = t.value("base_lr", c.train.base_lr);
      c.train.warm_steps = t.value("warm_steps", c.train.warm_steps);
      c.train.decay_steps = t.value("decay_steps", c.train.decay_steps);
      c.train.deep_supervision = t.value("deep_supervision", c.train.deep_supervision);
      c.train.log_every = t.value("log_every", c.train.log_every);
      c.train.checkpoint_every = t.value("checkpoint_every", c.train.checkpoint_every);
    }
    if (j.contains("postprocess")) {
      const auto& p = j["postprocess"];
      c.mask_mode = mask_mode_from(p.value("mask_mode", std::string(to_string(c.mask_mode))));
      c.n_spokes = p.value("n_spokes", c.n_spokes);
      c.samples_per_spoke = p.value("samples_per_spoke", c.samples_per_spoke);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config has a field of the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) { return from_json(io::read_text(path)); }

std::string PipelineConfig::hash() const {
  // where outputs go is not part of what they are
  json j = json::parse(to_json());
  j.erase("out_dir");
  return io::hash_hex(j.dump());
}

void PipelineConfig::validate() const {
  if (n_train_phantoms <= 0 || n_test_phantoms <= 0) throw std::invalid_argument("phantom counts must be positive");
  if (noise_sigma < 0) throw std::invalid_argument("noise_sigma must be non-negative");
  backbone.validate();
  sfi.validate(backbone.embed_dim, backbone.stages());
  loss.validate();
  train.validate();
  (void)kspace::generate_mask(kspace::kDefaultPhaseEncodeLines, af, center_fraction.value_or(kspace::default_center_fraction(af)), 0);
  if (n_spokes <= 0 || samples_per_spoke < 3) throw std::invalid_argument("invalid line-profile sampling");
}

semantics::SegmenterKind training_segmenter(const PipelineConfig& cfg) {
  return cfg.segmenter == semantics::SegmenterKind::foundation_model ? semantics::SegmenterKind::fallback : cfg.segmenter;
}

// ---- manifest ---------------------------------------------------------------------------

std::string RunManifest::to_json(bool with_timestamps) const {
  ordered_json j;
  j["config_hash"] = config_hash;
  j["version"] = version;
  j["seed"] = seed;
  ordered_json st = ordered_json::array();
  for (const auto& s : stages) {
    ordered_json e;
    e["name"] = s.name;
    e["input_hash"] = s.input_hash;
    e["outputs"] = s.outputs;
    e["info"] = s.info;
    if (with_timestamps) {
      e["started"] = s.started;
      e["finished"] = s.finished;
      e["cached"] = s.cached;
    }
    st.push_back(e);
  }
  j["stages"] = st;
  return j.dump(2);
}

RunManifest RunManifest::from_json(const std::string& text) {
  const json j = json::parse(text);
  RunManifest m;
  m.config_hash = j.value("config_hash", "");
  m.version = j.value("version", "");
  m.seed = j.value("seed", std::uint64_t{0});
  for (const auto& e : j.value("stages", json::array())) {
    StageRecord s;
    s.name = e.value("name", "");
    s.input_hash = e.value("input_hash", "");
    s.outputs = e.value("outputs", std::vector<std::string>{});
    s.info = e.value("info", std::map<std::string, std::string>{});
    s.started = e.value("started", "");
    s.finished = e.value("finished", "");
    s.cached = e.value("cached", false);
    m.stages.push_back(std::move(s));
  }
  return m;
}

const StageRecord* RunManifest::stage(const std::string& name) const {
  for (const auto& s : stages) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".rsfr.lock") {
  fs::create_directories(dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) {
    throw Error("output directory " + dir.string() + " is locked by another pipeline process (remove " +
                path_.string() + " if that process is gone)");
  }
  std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
  std::fclose(f);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---- persistence helpers -----------------------------------------------------------------

std::string phantom_spec_json(const phantom::PhantomSpec& s) {
  ordered_json j;
  j["grid_size"] = s.grid_size;
  j["lv_center"] = {s.lv_center.x, s.lv_center.y};
  j["r_endo"] = s.r_endo;
  j["r_epi"] = s.r_epi;
  j["ha_endo"] = s.ha_endo;
  j["ha_epi"] = s.ha_epi;
  j["eigenvalues"] = s.eigenvalues;
  j["b_values"] = s.b_values;
  json dirs = json::array();
  for (const auto& d : s.directions) dirs.push_back({d.x(), d.y(), d.z()});
  j["directions"] = dirs;
  j["b0_repetitions"] = s.b0_repetitions;
  j["s0"] = s.s0;
  j["background"] = s.background;
  j["noise_sigma"] = s.noise_sigma;
  j["seed"] = s.seed;
  return j.dump();
}

phantom::PhantomSpec phantom_spec_from_json(const std::string& text) {
  const json j = json::parse(text);
  phantom::PhantomSpec s;
  s.grid_size = j.value("grid_size", s.grid_size);
  if (j.contains("lv_center")) s.lv_center = {j["lv_center"][0].get<double>(), j["lv_center"][1].get<double>()};
  s.r_endo = j.value("r_endo", s.r_endo);
  s.r_epi = j.value("r_epi", s.r_epi);
  s.ha_endo = j.value("ha_endo", s.ha_endo);
  s.ha_epi = j.value("ha_epi", s.ha_epi);
  s.eigenvalues = j.value("eigenvalues", s.eigenvalues);
  s.b_values = j.value("b_values", s.b_values);
  if (j.contains("directions")) {
    s.directions.clear();
    for (const auto& d : j["directions"]) s.directions.emplace_back(d[0].get<double>(), d[1].get<double>(), d[2].get<double>());
  }
  s.b0_repetitions = j.value("b0_repetitions", s.b0_repetitions);
  s.s0 = j.value("s0", s.s0);
  s.background = j.value("background", s.background);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

void write_series(const fs::path& dir, const DWISeries& series, const phantom::PhantomSpec& spec) {
  fs::create_directories(dir);
  const std::string spec_text = phantom_spec_json(spec);
  const std::string spec_hash = io::hash_hex(spec_text);
  io::write_text(dir / "spec.json", spec_text + "\n");
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& g = series.directions[k];
    ordered_json side = {{"b_value", series.b_values[k]}, {"direction", {g.x(), g.y(), g.z()}},
                         {"seed", spec.seed},             {"spec_hash", spec_hash},
                         {"index", k}};
    io::write_image(dir / slice_file("dwi", k), series.slices[k], side.dump());
  }
  io::write_text(dir / "series.json", json{{"count", series.size()}}.dump() + "\n");
}

DWISeries read_series(const fs::path& dir) {
  const auto n = json::parse(io::read_text(dir / "series.json")).at("count").get<std::size_t>();
  DWISeries s;
  for (std::size_t k = 0; k < n; ++k) {
    const fs::path p = dir / slice_file("dwi", k);
    s.slices.push_back(io::read_image(p));
    const json side = json::parse(io::read_text(io::sidecar_path(p)));
    s.b_values.push_back(side.at("b_value").get<double>());
    const auto& d = side.at("direction");
    s.directions.emplace_back(d[0].get<double>(), d[1].get<double>(), d[2].get<double>());
  }
  return s;
}

void write_mask(const fs::path& path, const Mask& mask) {
  io::write_npy_u8(path, {static_cast<std::size_t>(mask.shape.rows), static_cast<std::size_t>(mask.shape.cols)}, mask.bits);
}

Mask read_mask(const fs::path& path) {
  const io::NpyArray a = io::read_npy(path);
  if (a.shape.size() != 2) throw Error("mask file " + path.string() + " is not 2D");
  Mask m(Shape2{static_cast<int>(a.shape[0]), static_cast<int>(a.shape[1])});
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = a.real[i] != 0.0;
  return m;
}

void write_prior(const fs::path& path, const semantics::SemanticPrior& prior) {
  const Shape2 s = prior.shape();
  std::vector<double> v;
  for (const auto& m : prior.masks) v.insert(v.end(), m.pixels().begin(), m.pixels().end());
  io::write_npy(path, {3, static_cast<std::size_t>(s.rows), static_cast<std::size_t>(s.cols)}, v);
  json side = {{"scores", prior.scores}};
  io::write_text(io::sidecar_path(path), side.dump() + "\n");
}

semantics::SemanticPrior read_prior(const fs::path& path) {
  const io::NpyArray a = io::read_npy(path);
  if (a.shape.size() != 3 || a.shape[0] != 3) throw Error("prior file " + path.string() + " is not 3 x H x W");
  const Shape2 s{static_cast<int>(a.shape[1]), static_cast<int>(a.shape[2])};
  semantics::SemanticPrior p = semantics::SemanticPrior::zeros(s);
  for (int k = 0; k < 3; ++k) {
    std::copy_n(a.real.begin() + static_cast<std::ptrdiff_t>(k * s.size()), s.size(), p.masks[k].pixels().begin());
  }
  const json side = json::parse(io::read_text(io::sidecar_path(path)));
  const auto scores = side.at("scores").get<std::vector<double>>();
  for (int k = 0; k < 3; ++k) p.scores[k] = scores.at(k);
  return p;
}

std::string slice_metrics_csv(const std::vector<SliceMetrics>& rows) {
  std::string out = "method,phantom,slice,psnr,ssim,perceptual,myo_mae\n";
  for (const auto& r : rows) {
    out += r.method + "," + std::to_string(r.phantom) + "," + std::to_string(r.slice) + "," + fmt17(r.psnr) + "," +
           fmt17(r.ssim) + "," + fmt17(r.perceptual) + "," + fmt17(r.myo_mae) + "\n";
  }
  return out;
}

namespace {

std::vector<std::vector<std::string>> parse_csv(const std::string& text, std::size_t columns) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != columns) throw Error("CSV row has " + std::to_string(cells.size()) + " cells, expected " + std::to_string(columns));
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

std::vector<SliceMetrics> parse_slice_metrics_csv(const std::string& text) {
  std::vector<SliceMetrics> out;
  for (const auto& c : parse_csv(text, 7)) {
    out.push_back({c[0], std::stoi(c[1]), std::stoi(c[2]), std::stod(c[3]), std::stod(c[4]), std::stod(c[5]), std::stod(c[6])});
  }
  return out;
}

std::string case_mae_csv(const std::vector<CaseMae>& rows) {
  std::string out = "method,phantom,mae_md,mae_fa,mae_ha_gradient\n";
  for (const auto& r : rows) {
    out += r.method + "," + std::to_string(r.phantom) + "," + fmt17(r.md) + "," + fmt17(r.fa) + "," + fmt17(r.ha_gradient) + "\n";
  }
  return out;
}

std::vector<CaseMae> parse_case_mae_csv(const std::string& text) {
  std::vector<CaseMae> out;
  for (const auto& c : parse_csv(text, 5)) out.push_back({c[0], std::stoi(c[1]), std::stod(c[2]), std::stod(c[3]), std::stod(c[4])});
  return out;
}

std::string summary_table(const std::vector<SliceMetrics>& rows) {
  std::vector<std::string> methods;
  for (const auto& r : rows) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  }
  std::string out = "method,ssim,psnr,perceptual,myo_mae,psnr_infinite\n";
  for (const auto& m : methods) {
    std::vector<double> ssim, psnr, perc, mae;
    for (const auto& r : rows) {
      if (r.method != m) continue;
      ssim.push_back(r.ssim);
      psnr.push_back(r.psnr);
      perc.push_back(r.perceptual);
      mae.push_back(r.myo_mae);
    }
    std::size_t infinite = 0;
    const auto finite_psnr = metrics::finite_only(psnr, &infinite);
    out += m + "," + metrics::format_mean_std(ssim, 3) + "," +
           (finite_psnr.empty() ? std::string("inf") : metrics::format_mean_std(finite_psnr, 2)) + "," +
           metrics::format_mean_std(perc, 4) + "," + metrics::format_mean_std(mae, 4) + "," + std::to_string(infinite) + "\n";
  }
  return out;
}

// ---- data -----------------------------------------------------------------------------------

std::vector<phantom::PhantomSpec> train_phantoms(const PipelineConfig& cfg) {
  return training::phantom_family(cfg.n_train_phantoms, derive_seed(cfg.seed, 0x7a1), cfg.noise_sigma);
}

std::vector<phantom::PhantomSpec> test_phantoms(const PipelineConfig& cfg) {
  return training::phantom_family(cfg.n_test_phantoms, derive_seed(cfg.seed, 0x7e57), cfg.noise_sigma);
}

kspace::SamplingMask evaluation_mask(const PipelineConfig& cfg) {
  return kspace::generate_mask(kspace::kDefaultPhaseEncodeLines, cfg.af,
                               cfg.center_fraction.value_or(kspace::default_center_fraction(cfg.af)),
                               derive_seed(cfg.seed, 0x3a5c));
}

// ---- pipeline ---------------------------------------------------------------------------------

Pipeline::Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  fs::create_directories(cfg_.out_dir);
  load_manifest();
  manifest_.config_hash = cfg_.hash();
  manifest_.version = RSFR_VERSION;
  manifest_.seed = cfg_.seed;
}

void Pipeline::load_manifest() {
  const fs::path p = cfg_.out_dir / "manifest.json";
  if (!fs::exists(p)) return;
  try {
    manifest_ = RunManifest::from_json(io::read_text(p));
  } catch (const std::exception&) {
    manifest_ = {};  // unreadable manifests are treated as absent
  }
}

void Pipeline::save_manifest() const { io::write_text(cfg_.out_dir / "manifest.json", manifest_.to_json() + "\n"); }

std::string Pipeline::stage_hash(const std::string& name) const {
  const json j = json::parse(cfg_.to_json());
  json subset;
  if (name == "simulate") {
    subset = {j["seed"], j["data"]};
  } else if (name == "mask") {
    subset = {j["seed"], j["mask"]};
  } else if (name == "train") {
    subset = {stage_hash("simulate"), stage_hash("mask"), j["backbone"], j["sfi"], semantics::to_string(training_segmenter(cfg_)),
              j["loss"], j["train"]};
  } else if (name == "reconstruct") {
    subset = {stage_hash("train"), j["segmenter"]};
  } else if (name == "postprocess") {
    subset = {stage_hash("reconstruct"), j["postprocess"]};
  } else if (name == "evaluate") {
    subset = {stage_hash("postprocess"), j["loss"]};
  } else if (name == "report") {
    subset = {stage_hash("evaluate")};
  } else {
    throw std::invalid_argument("unknown stage '" + name + "'");
  }
  return io::hash_hex(name + subset.dump());
}

RunManifest Pipeline::run() {
  DirectoryLock lock(cfg_.out_dir);
  for (const auto& name : stage_names()) run_stage(name);
  return manifest_;
}

StageRecord Pipeline::run_stage(const std::string& name) {
  const auto& names = stage_names();
  const auto pos = std::find(names.begin(), names.end(), name);
  if (pos == names.end()) throw std::invalid_argument("unknown stage '" + name + "'");
  // predecessors must be complete and current
  for (auto it = names.begin(); it != pos; ++it) {
    const StageRecord* rec = manifest_.stage(*it);
    if (!rec) throw StageError("stage '" + name + "' requires stage '" + *it + "' to run first");
    if (rec->input_hash != stage_hash(*it)) {
      throw StageError("stage '" + *it + "' output is stale (hash " + rec->input_hash + ", expected " + stage_hash(*it) + ")");
    }
  }
  const std::string h = stage_hash(name);
  if (const StageRecord* rec = manifest_.stage(name); rec && rec->input_hash == h) {
    bool present = true;
    for (const auto& o : rec->outputs) present = present && fs::exists(cfg_.out_dir / o);
    if (present) {
      StageRecord cached = *rec;
      cached.cached = true;
      for (auto& s : manifest_.stages) {
        if (s.name == name) s = cached;
      }
      save_manifest();
      return cached;
    }
  }
  // drop this stage and everything after it from the manifest
  std::vector<StageRecord> kept;
  for (const auto& s : manifest_.stages) {
    const auto sp = std::find(names.begin(), names.end(), s.name);
    if (sp < pos) kept.push_back(s);
  }
  manifest_.stages = std::move(kept);
  StageRecord rec;
  const std::string started = now_iso();
  try {
    rec = execute(name);
  } catch (const std::exception& e) {
    save_manifest();
    throw StageError("stage '" + name + "' failed: " + e.what());
  }
  rec.name = name;
  rec.input_hash = h;
  rec.started = started;
  rec.finished = now_iso();
  manifest_.stages.push_back(rec);
  save_manifest();
  return rec;
}

StageRecord Pipeline::execute(const std::string& name) {
  StageRecord rec;
  const fs::path out = dir(name);
  fs::create_directories(out);
  auto rel = [&](const fs::path& p) { return fs::relative(p, cfg_.out_dir).generic_string(); };

  if (name == "simulate") {
    const auto tests = test_phantoms(cfg_);
    for (std::size_t p = 0; p < tests.size(); ++p) {
      const auto field = phantom::generate_tensor_field(tests[p]);
      auto series = phantom::simulate_dwis(field, tests[p]);
      if (tests[p].noise_sigma > 0) series = phantom::add_rician_noise(series, tests[p]);
      const fs::path d = out / case_dir(static_cast<int>(p));
      write_series(d, series, tests[p]);
      write_mask(d / "myo_mask.npy", field.myo_mask);
      rec.outputs.push_back(rel(d / "series.json"));
    }
    json specs = json::array();
    for (const auto& s : train_phantoms(cfg_)) specs.push_back(json::parse(phantom_spec_json(s)));
    io::write_text(out / "train_specs.json", specs.dump() + "\n");
    rec.outputs.push_back(rel(out / "train_specs.json"));
    rec.info["test_phantoms"] = std::to_string(tests.size());
  } else if (name == "mask") {
    const auto mask = evaluation_mask(cfg_);
    io::write_text(out / "mask.txt", kspace::mask_to_text(mask));
    io::write_text(out / "mask.json",
                   json{{"af", mask.af}, {"center_fraction", mask.center_fraction}, {"sampled", mask.sampled()}}.dump() + "\n");
    rec.outputs = {rel(out / "mask.txt")};
    rec.info["sampled_lines"] = std::to_string(mask.sampled());
  } else if (name == "train") {
    std::vector<phantom::PhantomSpec> specs;
    for (const auto& s : json::parse(io::read_text(dir("simulate") / "train_specs.json"))) specs.push_back(phantom_spec_from_json(s.dump()));
    const auto data = training::make_dataset(specs, {cfg_.af}, derive_seed(cfg_.seed, 0x77));
    training::TrainConfig tc = cfg_.train;
    tc.seed = cfg_.seed;
    tc.af_schedule = {cfg_.af};
    tc.segmenter = training_segmenter(cfg_);
    training::TrainOptions opts;
    opts.log_path = out / "log.jsonl";
    opts.context = [](const training::TrainingPair& pair) {
      semantics::SegmenterContext ctx;
      ctx.reference_mask = pair.myo_mask;
      return ctx;
    };
    if (tc.checkpoint_every > 0) opts.checkpoint_dir = out / "checkpoints";
    const auto state = training::train_end_to_end(data, tc, cfg_.loss, cfg_.backbone, cfg_.sfi, opts);
    training::save_checkpoint(out / "model.ckpt", state);
    rec.outputs = {rel(out / "model.ckpt"), rel(out / "log.jsonl")};
    rec.info["checkpoint"] = io::file_hash(out / "model.ckpt");
    rec.info["train_slices"] = std::to_string(data.size());
    rec.info["initial_loss"] = fmt17(state.log.front().loss);
    rec.info["final_loss"] = fmt17(state.log.back().loss);
  } else if (name == "reconstruct") {
    const auto state = training::load_checkpoint(dir("train") / "model.ckpt");
    const auto mask = kspace::mask_from_text(io::read_text(dir("mask") / "mask.txt"), cfg_.af);
    semantics::SegmenterContext base_ctx;
    if (cfg_.segmenter == semantics::SegmenterKind::foundation_model) {
      base_ctx.client = std::make_shared<semantics::MaskServiceClient>(semantics::MaskServiceConfig::from_env());
    }
    for (int p = 0; p < cfg_.n_test_phantoms; ++p) {
      const fs::path src = dir("simulate") / case_dir(p);
      const fs::path d = out / case_dir(p);
      fs::create_directories(d);
      const DWISeries series = read_series(src);
      semantics::SegmenterContext ctx = base_ctx;
      ctx.reference_mask = read_mask(src / "myo_mask.npy");
      for (std::size_t k = 0; k < series.size(); ++k) {
        const Image gt = training::prepare_ground_truth(series.slices[k]);
        const Image zf = training::zero_filled_from(gt, mask);
        const auto r = training::reconstruct(*state.models, zf, cfg_.segmenter, ctx);
        io::write_image(d / slice_file("gt", k), gt);
        io::write_image(d / slice_file("zf", k), zf);
        io::write_image(d / slice_file("coarse", k), r.coarse);
        io::write_image(d / slice_file("refined", k), r.refined);
        write_prior(d / slice_file("prior", k), r.prior);
      }
      rec.outputs.push_back(rel(d / slice_file("refined", series.size() - 1)));
    }
    rec.info["checkpoint"] = io::file_hash(dir("train") / "model.ckpt");
  } else if (name == "postprocess") {
    for (int p = 0; p < cfg_.n_test_phantoms; ++p) {
      const fs::path src = dir("simulate") / case_dir(p);
      const fs::path rdir = dir("reconstruct") / case_dir(p);
      const fs::path d = out / case_dir(p);
      fs::create_directories(d);
      const DWISeries raw = read_series(src);
      const auto spec = phantom_spec_from_json(io::read_text(src / "spec.json"));
      Mask analysis = read_mask(src / "myo_mask.npy");
      Point2 center = spec.lv_center;
      if (cfg_.mask_mode == MaskMode::fallback) {
        const Image b0 = io::read_image(rdir / slice_file("gt", 0));
        const auto seg = semantics::fallback_segment(b0);
        analysis = dtfit::annulus_from_segmentation(semantics::binarize(seg.masks[0]), &center);
      }
      write_mask(d / "analysis_mask.npy", analysis);
      ordered_json summary;
      summary["lv_center"] = {center.x, center.y};
      for (const auto& m : kMethods) {
        DWISeries s = raw;
        for (std::size_t k = 0; k < s.size(); ++k) {
          const Image img = io::read_image(rdir / slice_file(m, k));
          s.slices[k] = kspace::denormalize(img);
        }
        const auto map = dtfit::fit_tensor_lls(s, analysis);
        const auto params = dtfit::compute_params(map, center, cfg_.n_spokes, cfg_.samples_per_spoke);
        const std::string units_md = R"({"units":"mm^2/s"})", units_fa = R"({"units":"1"})", units_ha = R"({"units":"degrees"})";
        io::write_image(d / (m + "_md.npy"), Image(map.shape, params.md), units_md);
        io::write_image(d / (m + "_fa.npy"), Image(map.shape, params.fa), units_fa);
        io::write_image(d / (m + "_ha.npy"), Image(map.shape, params.ha), units_ha);
        const auto prof = dtfit::ha_line_profile(params.ha, analysis, center, cfg_.n_spokes, cfg_.samples_per_spoke);
        std::string csv = "depth,ha,spoke_id\n";
        std::string fits = "spoke_id,slope,intercept,r_squared,rmse\n";
        for (const auto& lp : prof.profiles) {
          for (std::size_t i = 0; i < lp.depth.size(); ++i) {
            csv += fmt17(lp.depth[i]) + "," + fmt17(lp.ha[i]) + "," + std::to_string(lp.spoke) + "\n";
          }
          fits += std::to_string(lp.spoke) + "," + fmt17(lp.slope) + "," + fmt17(lp.intercept) + "," + fmt17(lp.r_squared) +
                  "," + fmt17(lp.rmse) + "\n";
        }
        io::write_text(d / (m + "_profiles.csv"), csv);
        io::write_text(d / (m + "_profile_fits.csv"), fits);
        summary[m] = {{"md", metrics::masked_mean(params.md, analysis)},
                      {"fa", metrics::masked_mean(params.fa, analysis)},
                      {"ha_gradient", params.ha_gradient},
                      {"skipped_spokes", prof.skipped}};
      }
      io::write_text(d / "params.json", summary.dump(2) + "\n");
      rec.outputs.push_back(rel(d / "params.json"));
    }
  } else if (name == "evaluate") {
    const losses::FeatureExtractor extractor(derive_seed(cfg_.seed, 0xfe));
    std::vector<SliceMetrics> rows;
    std::vector<CaseMae> maes;
    for (int p = 0; p < cfg_.n_test_phantoms; ++p) {
      const fs::path rdir = dir("reconstruct") / case_dir(p);
      const fs::path pdir = dir("postprocess") / case_dir(p);
      const Mask myo = read_mask(dir("simulate") / case_dir(p) / "myo_mask.npy");
      const std::size_t n = read_series(dir("simulate") / case_dir(p)).size();
      for (std::size_t k = 0; k < n; ++k) {
        const Image gt = io::read_image(rdir / slice_file("gt", k));
        for (const std::string m : {"zf", "coarse", "refined"}) {
          const Image x = io::read_image(rdir / slice_file(m, k));
          double mae = 0;
          for (std::size_t i = 0; i < gt.size(); ++i) {
            if (myo.bits[i]) mae += std::abs(gt.pixels()[i] - x.pixels()[i]);
          }
          rows.push_back({m, p, static_cast<int>(k), metrics::psnr(gt, x), metrics::ssim(gt, x),
                          metrics::perceptual_distance(gt, x, extractor), mae / static_cast<double>(myo.count())});
        }
      }
      const Mask analysis = read_mask(pdir / "analysis_mask.npy");
      auto load_params = [&](const std::string& m) {
        dtfit::DTParams prm;
        prm.shape = analysis.shape;
        prm.myo_mask = analysis;
        prm.md = io::read_image(pdir / (m + "_md.npy")).vector();
        prm.fa = io::read_image(pdir / (m + "_fa.npy")).vector();
        prm.ha = io::read_image(pdir / (m + "_ha.npy")).vector();
        prm.ha_gradient = json::parse(io::read_text(pdir / "params.json")).at(m).at("ha_gradient").get<double>();
        return prm;
      };
      const auto ref = load_params("gt");
      for (const std::string m : {"zf", "coarse", "refined"}) {
        const auto g = metrics::mae_global(ref, load_params(m), analysis);
        maes.push_back({m, p, g.md, g.fa, g.ha_gradient});
      }
    }
    io::write_text(out / "metrics.csv", slice_metrics_csv(rows));
    io::write_text(out / "dt_mae.csv", case_mae_csv(maes));
    io::write_text(out / "summary.csv", summary_table(rows));
    std::string jsonl;
    for (const auto& r : rows) {
      jsonl += json{{"method", r.method}, {"phantom", r.phantom}, {"slice", r.slice}, {"psnr", std::isfinite(r.psnr) ? json(r.psnr) : json("inf")},
                    {"ssim", r.ssim}, {"perceptual", r.perceptual}, {"myo_mae", r.myo_mae}}
                   .dump() +
               "\n";
    }
    io::write_text(out / "metrics.jsonl", jsonl);
    rec.outputs = {rel(out / "metrics.csv"), rel(out / "dt_mae.csv"), rel(out / "summary.csv")};
    rec.info["metrics_hash"] = io::file_hash(out / "metrics.csv");
  } else if (name == "report") {
    for (const auto& f : report::make_report(cfg_.out_dir)) rec.outputs.push_back(rel(f));
  }
  return rec;
}

RunManifest run_pipeline(const PipelineConfig& cfg) {
  Pipeline p(cfg);
  return p.run();
}

}  // namespace rsfr::pipeline
