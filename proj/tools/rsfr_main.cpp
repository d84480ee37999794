// rsfr: command-line front end for the reconstruction pipeline.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "rsfr/array_io.hpp"
#include "rsfr/dtfit.hpp"
#include "rsfr/kspace.hpp"
#include "rsfr/metrics.hpp"
#include "rsfr/phantom.hpp"
#include "rsfr/pipeline.hpp"
#include "rsfr/report.hpp"
#include "rsfr/semantics.hpp"
#include "rsfr/training.hpp"

namespace fs = std::filesystem;
using namespace rsfr;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

pipeline::PipelineConfig load_config(const Globals& g) {
  pipeline::PipelineConfig cfg;
  if (!g.config.empty()) cfg = pipeline::PipelineConfig::load(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.out_dir = g.out;
  cfg.validate();
  return cfg;
}

void run_stages(const pipeline::PipelineConfig& cfg, const std::vector<std::string>& stages) {
  pipeline::DirectoryLock lock(cfg.out_dir);
  pipeline::Pipeline p(cfg);
  for (const auto& s : stages) {
    const auto rec = p.run_stage(s);
    std::cout << s << (rec.cached ? " (cached)" : "") << "\n";
  }
}

Image read_normalized(const fs::path& p) {
  Image x = io::read_image(p);
  if (!x.norm) x = kspace::normalize_minmax(x);
  return x;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rsfr: coarse-to-fine cardiac DWI reconstruction"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Pipeline configuration (JSON)");
  app.add_option("--seed", g.seed, "Override the configuration seed");
  app.add_option("--out", g.out, "Output file or directory");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate a phantom DWI series");
  sim->fallthrough();
  sim->callback([&] {
    phantom::PhantomSpec spec;
    if (!g.config.empty()) {
      const auto j = nlohmann::json::parse(io::read_text(g.config));
      if (j.contains("phantom")) spec = pipeline::phantom_spec_from_json(j["phantom"].dump());
    }
    if (g.seed) spec.seed = *g.seed;
    const fs::path out = g.out.empty() ? fs::path("phantom") : fs::path(g.out);
    const auto field = phantom::generate_tensor_field(spec);
    auto series = phantom::simulate_dwis(field, spec);
    if (spec.noise_sigma > 0) series = phantom::add_rician_noise(series, spec);
    pipeline::write_series(out, series, spec);
    pipeline::write_mask(out / "myo_mask.npy", field.myo_mask);
    std::cout << "wrote " << series.size() << " slices to " << out << "\n";
  });

  // mask
  auto* mask = app.add_subcommand("mask", "Write a Cartesian sampling mask");
  mask->fallthrough();
  int af = 4, n_pe = kspace::kDefaultPhaseEncodeLines;
  std::optional<double> cf;
  std::uint64_t mask_seed = 0;
  mask->add_option("--af", af, "Acceleration factor (1, 2, 4 or 8)");
  mask->add_option("--n-pe", n_pe, "Phase-encode lines");
  mask->add_option("--center-fraction", cf, "Fully sampled centre fraction");
  mask->add_option("--seed", mask_seed, "Offset seed");
  mask->callback([&] {
    const std::uint64_t seed = g.seed.value_or(mask_seed);
    const auto m = kspace::generate_mask(n_pe, af, cf.value_or(kspace::default_center_fraction(af)), seed);
    const std::string text = kspace::mask_to_text(m);
    if (g.out.empty()) {
      std::cout << text;
    } else {
      io::write_text(g.out, text);
    }
  });

  // train
  auto* train = app.add_subcommand("train", "Simulate data and train both networks");
  train->fallthrough();
  train->callback([&] { run_stages(load_config(g), {"simulate", "mask", "train"}); });

  // reconstruct
  auto* rec = app.add_subcommand("reconstruct", "Coarse reconstruction, segmentation and refinement");
  rec->fallthrough();
  std::string ckpt, in_path, kind_name = "fallback", ref_mask;
  rec->add_option("--checkpoint", ckpt, "Checkpoint (single-image mode)");
  rec->add_option("--in", in_path, "Zero-filled normalised image (single-image mode)");
  rec->add_option("--kind", kind_name, "Segmenter kind");
  rec->add_option("--reference", ref_mask, "Reference mask for --kind reference");
  rec->callback([&] {
    if (in_path.empty()) {
      run_stages(load_config(g), {"simulate", "mask", "train", "reconstruct"});
      return;
    }
    if (ckpt.empty()) throw CLI::RequiredError("--checkpoint");
    const auto state = training::load_checkpoint(ckpt);
    semantics::SegmenterContext ctx;
    const auto kind = semantics::segmenter_kind_from_string(kind_name);
    if (!ref_mask.empty()) ctx.reference_mask = pipeline::read_mask(ref_mask);
    if (kind == semantics::SegmenterKind::foundation_model) {
      ctx.client = std::make_shared<semantics::MaskServiceClient>(semantics::MaskServiceConfig::from_env());
    }
    const auto r = training::reconstruct(*state.models, read_normalized(in_path), kind, ctx);
    const fs::path out = g.out.empty() ? fs::path("reconstruction") : fs::path(g.out);
    fs::create_directories(out);
    io::write_image(out / "coarse.npy", r.coarse);
    io::write_image(out / "refined.npy", r.refined);
    pipeline::write_prior(out / "prior.npy", r.prior);
  });

  // segment
  auto* seg = app.add_subcommand("segment", "Semantic prior from a coarse image");
  seg->fallthrough();
  std::string seg_in, seg_kind = "fallback", seg_ref;
  seg->add_option("--in", seg_in, "Coarse image")->required();
  seg->add_option("--kind", seg_kind, "foundation_model | fallback | reference | none");
  seg->add_option("--reference", seg_ref, "Reference mask for --kind reference");
  seg->callback([&] {
    semantics::SegmenterContext ctx;
    const auto kind = semantics::segmenter_kind_from_string(seg_kind);
    if (!seg_ref.empty()) ctx.reference_mask = pipeline::read_mask(seg_ref);
    if (kind == semantics::SegmenterKind::foundation_model) {
      ctx.client = std::make_shared<semantics::MaskServiceClient>(semantics::MaskServiceConfig::from_env());
    }
    Image x = read_normalized(seg_in);
    for (double& v : x.pixels()) v = std::clamp(v, 0.0, 1.0);
    const auto prior = semantics::segment(x, kind, ctx);
    pipeline::write_prior(g.out.empty() ? fs::path("prior.npy") : fs::path(g.out), prior);
  });

  // postprocess
  auto* post = app.add_subcommand("postprocess", "Tensor fit and MD/FA/HA maps for a DWI series");
  post->fallthrough();
  std::string series_dir, mask_mode = "reference";
  int spokes = 36, samples = 20;
  post->add_option("--series", series_dir, "Series directory (as written by simulate)")->required();
  post->add_option("--mask-mode", mask_mode, "reference | fallback");
  post->add_option("--spokes", spokes, "Radial spokes");
  post->add_option("--samples", samples, "Samples per spoke");
  post->callback([&] {
    const DWISeries s = pipeline::read_series(series_dir);
    Mask m;
    Point2 center;
    if (mask_mode == "reference") {
      m = pipeline::read_mask(fs::path(series_dir) / "myo_mask.npy");
      center = pipeline::phantom_spec_from_json(io::read_text(fs::path(series_dir) / "spec.json")).lv_center;
    } else if (mask_mode == "fallback") {
      const auto prior = semantics::fallback_segment(kspace::normalize_minmax(s.slices[0]));
      m = dtfit::annulus_from_segmentation(semantics::binarize(prior.masks[0]), &center);
    } else {
      throw CLI::ValidationError("--mask-mode", "expected reference or fallback");
    }
    const auto map = dtfit::fit_tensor_lls(s, m);
    const auto params = dtfit::compute_params(map, center, spokes, samples);
    const fs::path out = g.out.empty() ? fs::path("dtparams") : fs::path(g.out);
    fs::create_directories(out);
    io::write_image(out / "md.npy", Image(map.shape, params.md), R"({"units":"mm^2/s"})");
    io::write_image(out / "fa.npy", Image(map.shape, params.fa), R"({"units":"1"})");
    io::write_image(out / "ha.npy", Image(map.shape, params.ha), R"({"units":"degrees"})");
    const auto prof = dtfit::ha_line_profile(params.ha, m, center, spokes, samples);
    std::string csv = "depth,ha,spoke_id\n";
    for (const auto& lp : prof.profiles) {
      for (std::size_t i = 0; i < lp.depth.size(); ++i) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%d\n", lp.depth[i], lp.ha[i], lp.spoke);
        csv += buf;
      }
    }
    io::write_text(out / "profiles.csv", csv);
    std::printf("HA gradient %.4f deg/depth (%zu spokes, %d skipped)\n", params.ha_gradient, prof.profiles.size(), prof.skipped);
  });

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Image metrics between matching arrays of two directories");
  eval->fallthrough();
  std::string ref_dir, test_dir;
  eval->add_option("--ref", ref_dir, "Reference directory")->required();
  eval->add_option("--test", test_dir, "Test directory")->required();
  eval->callback([&] {
    const losses::FeatureExtractor extractor(derive_seed(g.seed.value_or(0), 0xfe));
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(ref_dir)) {
      if (e.path().extension() == ".npy" && fs::exists(fs::path(test_dir) / e.path().filename())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::string csv = "file,psnr,ssim,perceptual\n";
    for (const auto& f : files) {
      const Image a = io::read_image(f), b = io::read_image(fs::path(test_dir) / f.filename());
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g\n", f.filename().string().c_str(), metrics::psnr(a, b),
                    metrics::ssim(a, b), metrics::perceptual_distance(a, b, extractor));
      csv += buf;
    }
    if (g.out.empty()) {
      std::cout << csv;
    } else {
      io::write_text(g.out, csv);
    }
  });

  // report
  auto* rep = app.add_subcommand("report", "Figures for a completed run directory");
  rep->fallthrough();
  rep->callback([&] {
    const fs::path dir = g.out.empty() ? load_config(g).out_dir : fs::path(g.out);
    for (const auto& f : report::make_report(dir)) std::cout << f.string() << "\n";
  });

  // run
  auto* run = app.add_subcommand("run", "Full pipeline");
  run->fallthrough();
  run->callback([&] {
    const auto cfg = load_config(g);
    pipeline::Pipeline p(cfg);
    pipeline::DirectoryLock lock(cfg.out_dir);
    for (const auto& s : pipeline::stage_names()) {
      const auto r = p.run_stage(s);
      std::cout << s << (r.cached ? " (cached)" : "") << "\n" << std::flush;
    }
    std::cout << "manifest: " << (cfg.out_dir / "manifest.json").string() << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const semantics::DegradedModeError& e) {
    std::cerr << "degraded mode: " << e.what() << " (retry with --kind fallback)\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
