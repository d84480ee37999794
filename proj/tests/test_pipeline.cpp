#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "rsfr/array_io.hpp"
#include "rsfr/dtfit.hpp"
#include "rsfr/metrics.hpp"
#include "rsfr/pipeline.hpp"
#include "rsfr/report.hpp"

using namespace rsfr;
using namespace rsfr::pipeline;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

PipelineConfig tiny_run(const fs::path& out) {
  PipelineConfig c;
  c.seed = 5;
  c.out_dir = out;
  c.n_train_phantoms = 1;
  c.n_test_phantoms = 1;
  c.backbone = backbone::BackboneConfig::toy();
  c.backbone.embed_dim = 8;
  c.backbone.state_dim = 4;
  c.backbone.scale_factors = {1, 2};
  c.train.total_steps = 2;
  c.train.base_lr = 1e-3;
  c.train.warm_steps = 1;
  c.train.decay_steps = 1;
  return c;
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("config JSON round trip and hash") {
  PipelineConfig c;
  c.seed = 9;
  c.af = 8;
  c.center_fraction = 0.04;
  c.segmenter = semantics::SegmenterKind::none;
  c.sfi.injection_points = std::vector<int>{0};
  c.loss.gamma = 0.0;
  c.train.total_steps = 17;
  c.mask_mode = MaskMode::fallback;
  const auto back = PipelineConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());
  CHECK(back.af == 8);
  CHECK(back.segmenter == semantics::SegmenterKind::none);
  CHECK(back.sfi.injection_points == std::vector<int>{0});
  auto other = c;
  other.seed = 10;
  CHECK(other.hash() != c.hash());
  CHECK_THROWS(PipelineConfig::from_json("{not json"));
  auto bad = c;
  bad.af = 3;
  CHECK_THROWS(bad.validate());

  CHECK(training_segmenter(c) == semantics::SegmenterKind::none);
  c.segmenter = semantics::SegmenterKind::foundation_model;
  CHECK(training_segmenter(c) == semantics::SegmenterKind::fallback);
}

TEST_CASE("config file loading") {
  const TempDir dir("rsfr_cfg_test");
  const fs::path p = dir.path / "cfg.json";
  io::write_text(p, R"({"seed": 3, "mask": {"af": 2}, "train": {"total_steps": 11}, "segmenter": "reference"})");
  const auto c = PipelineConfig::load(p);
  CHECK(c.seed == 3);
  CHECK(c.af == 2);
  CHECK(c.train.total_steps == 11);
  CHECK(c.segmenter == semantics::SegmenterKind::reference);
  CHECK_THROWS(PipelineConfig::load(dir.path / "missing.json"));
}

TEST_CASE("directory lock is exclusive") {
  const TempDir dir("rsfr_lock_test");
  {
    DirectoryLock a(dir.path);
    CHECK_THROWS(DirectoryLock(dir.path));
  }
  CHECK_NOTHROW(DirectoryLock(dir.path));
}

TEST_CASE("metric CSVs round trip") {
  const std::vector<SliceMetrics> rows{{"refined", 0, 3, 31.25, 0.875, 0.0123, 0.04},
                                       {"zf", 1, 0, metrics::kInfinitePsnr, 1.0, 0.0, 0.0},
                                       {"coarse", 2, 12, 1.0 / 3.0, 0.1, 2.0 / 7.0, 1e-17}};
  const auto text = slice_metrics_csv(rows);
  const auto back = parse_slice_metrics_csv(text);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].method == rows[i].method);
    CHECK(back[i].phantom == rows[i].phantom);
    CHECK(back[i].slice == rows[i].slice);
    CHECK(back[i].psnr == rows[i].psnr);
    CHECK(back[i].ssim == rows[i].ssim);
    CHECK(back[i].perceptual == rows[i].perceptual);
    CHECK(back[i].myo_mae == rows[i].myo_mae);
  }
  CHECK(slice_metrics_csv(back) == text);

  const std::vector<CaseMae> mae{{"refined", 0, 1e-5, 0.02, 3.5}, {"zf", 1, 2.0 / 3.0, 0.0, 0.1}};
  const auto mt = case_mae_csv(mae);
  CHECK(case_mae_csv(parse_case_mae_csv(mt)) == mt);
  CHECK(parse_case_mae_csv(mt)[0].md == 1e-5);
  CHECK_THROWS(parse_slice_metrics_csv("method,phantom\nx,1\n"));
}

TEST_CASE("summary table reproduces mean (std) from per-slice rows") {
  const std::vector<SliceMetrics> rows{{"refined", 0, 0, 30.0, 0.8, 0.1, 0.01},
                                       {"refined", 0, 1, 32.0, 0.9, 0.2, 0.03},
                                       {"zf", 0, 0, metrics::kInfinitePsnr, 1.0, 0.0, 0.0}};
  CHECK(summary_table(rows) ==
        "method,ssim,psnr,perceptual,myo_mae,psnr_infinite\n"
        "refined,0.850 (0.071),31.00 (1.41),0.1500 (0.0707),0.0200 (0.0141),0\n"
        "zf,1.000 (0.000),inf,0.0000 (0.0000),0.0000 (0.0000),1\n");
}

TEST_CASE("array container round trip") {
  const TempDir dir("rsfr_npy_test");
  Mask m({3, 4});
  m.bits[5] = 1;
  write_mask(dir.path / "m.npy", m);
  CHECK(read_mask(dir.path / "m.npy").bits == m.bits);
  auto prior = semantics::SemanticPrior::zeros({3, 4});
  prior.masks[1](2, 3) = 0.75;
  prior.scores = {0.5, 0.25, 0.0};
  write_prior(dir.path / "p.npy", prior);
  const auto back = read_prior(dir.path / "p.npy");
  CHECK(back.masks[1](2, 3) == 0.75);
  CHECK(back.scores == prior.scores);
  phantom::PhantomSpec s;
  s.r_endo = 17.25;
  CHECK(phantom_spec_json(phantom_spec_from_json(phantom_spec_json(s))) == phantom_spec_json(s));
}

TEST_CASE("stages require their predecessors") {
  const TempDir dir("rsfr_stage_order_test");
  Pipeline p(tiny_run(dir.path));
  CHECK_THROWS_AS(p.run_stage("train"), Error);
  CHECK_THROWS(p.run_stage("bogus"));
}

TEST_CASE("tiny end-to-end run: outputs, cache, report and determinism") {
  const TempDir dir("rsfr_pipeline_test");
  const auto cfg = tiny_run(dir.path / "a");
  const auto manifest = run_pipeline(cfg);
  REQUIRE(manifest.stages.size() == stage_names().size());
  for (std::size_t i = 0; i < stage_names().size(); ++i) {
    CHECK(manifest.stages[i].name == stage_names()[i]);
    CHECK_FALSE(manifest.stages[i].cached);
    for (const auto& o : manifest.stages[i].outputs) CHECK(fs::exists(cfg.out_dir / o));
  }
  CHECK(manifest.config_hash == cfg.hash());
  const fs::path rdir = cfg.out_dir / "reconstruct" / "test_0";
  for (const std::string kind : {"gt", "zf", "coarse", "prior", "refined"}) CHECK(fs::exists(rdir / (kind + "_0.npy")));
  CHECK(fs::exists(cfg.out_dir / "postprocess" / "test_0" / "refined_md.npy"));
  CHECK(fs::exists(cfg.out_dir / "evaluate" / "metrics.csv"));

  // report: four non-empty files
  const auto files = report::make_report(cfg.out_dir);
  CHECK(files.size() == 4);
  for (const auto& f : files) CHECK(fs::file_size(f) > 0);

  // error-map panel maximum equals the recomputed max |gt - x|
  const json panel = json::parse(io::read_text(cfg.out_dir / "report" / "recon_panel.json"));
  const std::string k = std::to_string(panel["slice"].get<int>());
  const Image gt = io::read_image(rdir / ("gt_" + k + ".npy"));
  double panel_max = 0;
  for (const std::string m : {"zf", "coarse", "refined"}) {
    const Image x = io::read_image(rdir / (m + "_" + k + ".npy"));
    double e = 0;
    for (std::size_t i = 0; i < x.size(); ++i) e = std::max(e, std::abs(gt.pixels()[i] - x.pixels()[i]));
    CHECK(panel["err_max"][m].get<double>() == e);
    panel_max = std::max(panel_max, e);
  }
  CHECK(panel["panel_err_max"].get<double>() == panel_max);

  // HA plot annotations come from the same profile CSV
  const json fits = json::parse(io::read_text(cfg.out_dir / "report" / "ha_profile.json"));
  const std::string svg = io::read_text(cfg.out_dir / "report" / "ha_profile.svg");
  for (const std::string m : {"gt", "refined"}) {
    std::vector<double> x, y;
    for (const auto& row : csv_rows(cfg.out_dir / "postprocess" / "test_0" / (m + "_profiles.csv"))) {
      x.push_back(std::stod(row[0]));
      y.push_back(std::stod(row[1]));
    }
    const auto line = dtfit::fit_line(x, y);
    CHECK(fits[m]["r_squared"].get<double>() == doctest::Approx(line.r_squared).epsilon(1e-9));
    CHECK(fits[m]["rmse"].get<double>() == doctest::Approx(line.rmse).epsilon(1e-9));
    CHECK(fits[m]["slope"].get<double>() == doctest::Approx(line.slope).epsilon(1e-9));
    CHECK(svg.find(m + ": R2=") != std::string::npos);
  }

  // rerun: every stage cached, outputs untouched
  const std::string metrics_hash = io::file_hash(cfg.out_dir / "evaluate" / "metrics.csv");
  const auto again = run_pipeline(cfg);
  for (const auto& st : again.stages) CHECK(st.cached);
  CHECK(io::file_hash(cfg.out_dir / "evaluate" / "metrics.csv") == metrics_hash);

  // a postprocess-only change keeps the earlier stages cached
  auto changed = cfg;
  changed.n_spokes = 24;
  const auto partial = run_pipeline(changed);
  CHECK(partial.stage("train")->cached);
  CHECK(partial.stage("reconstruct")->cached);
  CHECK_FALSE(partial.stage("postprocess")->cached);
  CHECK_FALSE(partial.stage("evaluate")->cached);

  // a second directory with the same config reproduces the metrics and manifest contents
  auto twin = cfg;
  twin.out_dir = dir.path / "b";
  const auto m2 = run_pipeline(twin);
  CHECK(io::file_hash(twin.out_dir / "evaluate" / "metrics.csv") == metrics_hash);
  CHECK(m2.to_json(false) == manifest.to_json(false));
  CHECK(RunManifest::from_json(m2.to_json()).to_json() == m2.to_json());
}

TEST_CASE("ablation arm without a segmenter") {
  const TempDir dir("rsfr_none_arm_test");
  auto cfg = tiny_run(dir.path);
  cfg.segmenter = semantics::SegmenterKind::none;
  run_pipeline(cfg);
  const auto prior = read_prior(cfg.out_dir / "reconstruct" / "test_0" / "prior_0.npy");
  for (const auto& m : prior.masks) CHECK(m.max() == 0.0);
  CHECK(fs::exists(cfg.out_dir / "evaluate" / "metrics.csv"));
}

TEST_CASE("report requires a completed run") {
  const TempDir dir("rsfr_report_missing_test");
  CHECK_THROWS_AS(report::make_report(dir.path), Error);
}
