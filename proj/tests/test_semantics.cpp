#include <atomic>
#include <chrono>
#include <thread>

#include "rsfr/semantics.hpp"  // before httplib, see mask_client.cpp

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "rsfr/kspace.hpp"
#include "rsfr/phantom.hpp"
#include "test_util.hpp"

using namespace rsfr;
using namespace rsfr::semantics;
using nlohmann::json;

namespace {

// Local mask service whose handler the test controls.
class MockService {
 public:
  explicit MockService(httplib::Server::Handler handler) {
    server_.Post("/segment", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockService() {
    server_.stop();
    thread_.join();
  }
  [[nodiscard]] MaskServiceConfig config() const {
    MaskServiceConfig c;
    c.endpoint = "http://127.0.0.1:" + std::to_string(port_) + "/segment";
    c.timeout = std::chrono::milliseconds(2000);
    return c;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

json dense_item(double score, int h, int w, double value) {
  return {{"score", score}, {"height", h}, {"width", w}, {"dense", std::vector<double>(static_cast<std::size_t>(h) * w, value)}};
}

Image phantom_b0() {
  const phantom::PhantomSpec s;
  return kspace::normalize_minmax(phantom::simulate_dwis(phantom::generate_tensor_field(s), s).slices[0]);
}

}  // namespace

TEST_CASE("none and reference providers") {
  const Image x = phantom_b0();
  const auto none = segment(x, SegmenterKind::none);
  for (const auto& m : none.masks) CHECK(m.max() == 0.0);
  CHECK(none.scores == std::array<double, 3>{0, 0, 0});
  CHECK(none.shape() == x.shape());

  const phantom::PhantomSpec s;
  const auto field = phantom::generate_tensor_field(s);
  SegmenterContext ctx;
  ctx.reference_mask = field.myo_mask;
  const auto ref = segment(x, SegmenterKind::reference, ctx);
  CHECK(binarize(ref.masks[0]).bits == field.myo_mask.bits);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(ref.masks[0].pixels()[i] == double(field.myo_mask.bits[i]));
  CHECK(ref.masks[1].max() == 0.0);
  CHECK_THROWS(segment(x, SegmenterKind::reference));
  CHECK_THROWS_AS(segment(x, SegmenterKind::foundation_model), DegradedModeError);
  CHECK_THROWS(segment(Image(96, 96, 2.0), SegmenterKind::none));
}

TEST_CASE("fallback recovers the phantom annulus on every noiseless slice") {
  const phantom::PhantomSpec s;
  const auto field = phantom::generate_tensor_field(s);
  const auto series = phantom::simulate_dwis(field, s);
  for (const auto& slice : series.slices) {
    const auto p = fallback_segment(kspace::normalize_minmax(slice));
    CHECK(dice(binarize(p.masks[0]), field.myo_mask) >= 0.9);
    CHECK_NOTHROW(p.validate());
  }
  const auto a = fallback_segment(phantom_b0()), b = fallback_segment(phantom_b0());
  for (int k = 0; k < 3; ++k) CHECK(a.masks[k].vector() == b.masks[k].vector());
}

TEST_CASE("fallback on a uniform image and on two blobs") {
  const auto u = fallback_segment(Image(32, 32, 0.5));
  for (const auto& m : u.masks) CHECK(m.max() == 0.0);
  CHECK(u.scores[0] == 0.0);

  Image x(40, 40, 0.0);
  for (int r = 2; r < 8; ++r)
    for (int c = 2; c < 8; ++c) x(r, c) = 1.0;  // 36 px
  for (int r = 20; r < 30; ++r)
    for (int c = 20; c < 35; ++c) x(r, c) = 0.9;  // 150 px
  const auto p = fallback_segment(x);
  CHECK(binarize(p.masks[0]).count() == 150);
  CHECK(binarize(p.masks[1]).count() == 36);
  CHECK(p.masks[2].max() == 0.0);
  CHECK(p.scores[0] == doctest::Approx(150.0 / 1600.0));
  CHECK(p.scores[1] == doctest::Approx(36.0 / 1600.0));
  CHECK(p.scores[2] == 0.0);
  CHECK(p.masks[0](25, 25) == 1.0);
}

TEST_CASE("otsu threshold separates a bimodal image") {
  Image x(10, 10, 0.1);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 10; ++c) x(r, c) = 0.8;
  const double t = otsu_threshold(x);
  CHECK(t > 0.1);
  CHECK(t < 0.8);
}

TEST_CASE("prior validation") {
  auto p = SemanticPrior::zeros({4, 4});
  CHECK_NOTHROW(p.validate());
  p.masks[1](0, 0) = 1.5;
  CHECK_THROWS(p.validate());
  p = SemanticPrior::zeros({4, 4});
  p.scores = {0.1, 0.5, 0.0};
  CHECK_THROWS(p.validate());
  p = SemanticPrior::zeros({4, 4});
  p.masks[0](1, 2) = 0.25;
  p.masks[2](3, 3) = 1.0;
  const auto v = p.interleaved();
  CHECK(v[(1 * 4 + 2) * 3 + 0] == 0.25);
  CHECK(v[(3 * 4 + 3) * 3 + 2] == 1.0);
  CHECK(to_string(segmenter_kind_from_string("foundation_model")) == "foundation_model");
  CHECK_THROWS(segmenter_kind_from_string("sam"));
}

TEST_CASE("mask service client: passthrough, padding, clamping, resampling, RLE") {
  json reply;
  std::string last_body;
  MockService svc([&](const httplib::Request& req, httplib::Response& res) {
    last_body = req.body;
    res.set_content(reply.dump(), "application/json");
  });
  MaskServiceClient client(svc.config());
  Rng rng(1);
  const Image x = testing::random_image(rng, 96, 96);

  Image known(96, 96, 0.0);
  for (int r = 10; r < 30; ++r) known(r, 40) = 0.7;
  reply = {{"masks", json::array({dense_item(0.2, 96, 96, 0.3), dense_item(0.9, 96, 96, 0.0), dense_item(0.5, 96, 96, 1.0),
                                  dense_item(0.1, 96, 96, 0.6)})}};
  reply["masks"][1]["dense"] = known.vector();
  auto p = client.segment(x);
  CHECK(p.scores == std::array<double, 3>{0.9, 0.5, 0.2});
  CHECK(p.masks[0].vector() == known.vector());
  CHECK(p.masks[1].min() == 1.0);
  CHECK(p.masks[2].max() == 0.3);

  const json req = json::parse(last_body);
  CHECK(req["height"] == 96);
  CHECK(req["width"] == 96);
  CHECK(req["image"].get<std::string>() == encode_image_base64(x));
  CHECK(req["image"].get<std::string>().size() == 4 * ((96 * 96 * 4 + 2) / 3));

  reply = {{"masks", json::array({dense_item(0.8, 96, 96, 1.0), dense_item(0.4, 96, 96, 0.5)})}};
  p = client.segment(x);
  CHECK(p.masks[2].max() == 0.0);
  CHECK(p.scores[2] == 0.0);

  reply = {{"masks", json::array({dense_item(0.8, 96, 96, 3.0), dense_item(0.4, 96, 96, -2.0)})}};
  p = client.segment(x);
  CHECK(p.masks[0].min() == 1.0);
  CHECK(p.masks[1].max() == 0.0);

  reply = {{"masks", json::array({dense_item(0.8, 48, 48, 0.25)})}};
  p = client.segment(x);
  CHECK(p.masks[0].shape() == Shape2{96, 96});
  CHECK(p.masks[0].min() == doctest::Approx(0.25));
  CHECK(p.masks[0].max() == doctest::Approx(0.25));

  // 2x3 mask 0 1 1 / 0 0 1 as runs of zeros and ones starting with zero
  reply = {{"masks", json::array({{{"score", 0.6}, {"height", 2}, {"width", 3}, {"rle", {1, 2, 2, 1}}}})}};
  const auto q = parse_mask_response(reply.dump(), {2, 3});
  CHECK(q.masks[0].vector() == std::vector<double>{0, 1, 1, 0, 0, 1});
  CHECK_THROWS(parse_mask_response(R"({"masks":[{"score":1,"height":2,"width":2,"rle":[1,5]}]})", {2, 2}));
  CHECK_THROWS(parse_mask_response("not json", {2, 2}));
  CHECK_THROWS(parse_mask_response(R"({"nomasks":[]})", {2, 2}));
}

TEST_CASE("mask service client: failures are degraded-mode errors") {
  Rng rng(2);
  const Image x = testing::random_image(rng, 8, 8);
  {
    MockService svc([](const httplib::Request&, httplib::Response& res) {
      res.status = 500;
      res.set_content("boom", "text/plain");
    });
    MaskServiceClient client(svc.config());
    CHECK_THROWS_AS(client.segment(x), DegradedModeError);
  }
  {
    MockService svc([](const httplib::Request&, httplib::Response& res) {
      std::this_thread::sleep_for(std::chrono::milliseconds(600));
      res.set_content(R"({"masks":[]})", "application/json");
    });
    auto cfg = svc.config();
    cfg.timeout = std::chrono::milliseconds(150);
    MaskServiceClient client(cfg);
    CHECK_THROWS_AS(client.segment(x), DegradedModeError);
  }
  MaskServiceConfig dead;
  dead.endpoint = "http://127.0.0.1:1/segment";
  dead.timeout = std::chrono::milliseconds(300);
  CHECK_THROWS_AS(MaskServiceClient(dead).segment(x), DegradedModeError);
  CHECK_THROWS_AS(MaskServiceClient(MaskServiceConfig{}), DegradedModeError);
}

TEST_CASE("mask service client bounds in-flight requests") {
  std::atomic<int> active{0}, peak{0};
  MockService svc([&](const httplib::Request&, httplib::Response& res) {
    const int now = ++active;
    int prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(80));
    --active;
    res.set_content(R"({"masks":[]})", "application/json");
  });
  auto cfg = svc.config();
  cfg.max_in_flight = 2;
  const MaskServiceClient client(cfg);
  Rng rng(3);
  const Image x = testing::random_image(rng, 8, 8);
  std::vector<std::thread> threads;
  std::atomic<int> ok{0};
  for (int i = 0; i < 6; ++i) {
    threads.emplace_back([&] {
      if (client.segment(x).scores[0] == 0.0) ++ok;
    });
  }
  for (auto& t : threads) t.join();
  CHECK(ok == 6);
  CHECK(peak.load() <= 2);
  CHECK(peak.load() >= 1);
}

TEST_CASE("endpoint comes from the environment") {
  ::setenv("RSFR_MASK_ENDPOINT", "http://example.invalid:9/x", 1);
  CHECK(MaskServiceConfig::from_env().endpoint == "http://example.invalid:9/x");
  ::unsetenv("RSFR_MASK_ENDPOINT");
  CHECK(MaskServiceConfig::from_env().endpoint.empty());
}

TEST_CASE("bilinear resampling keeps constants and is identity at equal shape") {
  Rng rng(4);
  const Image x = testing::random_image(rng, 6, 6);
  CHECK(resample_bilinear(x, {6, 6}).vector() == x.vector());
  const Image c = resample_bilinear(Image(5, 7, 0.4), {11, 3});
  CHECK(c.min() == doctest::Approx(0.4));
  CHECK(c.max() == doctest::Approx(0.4));
}
