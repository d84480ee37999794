#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <semaphore>
#include <string>
#include <vector>

// Eigen must precede httplib: <resolv.h> defines a `_res` macro that breaks Eigen headers
#include "rsfr/semantics.hpp"

#include "httplib.h"
#include "json.hpp"

namespace rsfr::semantics {

using nlohmann::json;

MaskServiceConfig MaskServiceConfig::from_env() {
  MaskServiceConfig cfg;
  if (const char* e = std::getenv("RSFR_MASK_ENDPOINT")) cfg.endpoint = e;
  return cfg;
}

std::string encode_image_base64(const Image& x) {
  std::string raw(x.size() * sizeof(float), '\0');
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(x.pixels()[i]));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(raw.data() + i * sizeof(float), &bits, sizeof(bits));
  }
  return httplib::detail::base64_encode(raw);
}

Image resample_bilinear(const Image& x, Shape2 target) {
  if (x.shape() == target) return x;
  Image out(target.rows, target.cols);
  const double sy = static_cast<double>(x.rows()) / target.rows;
  const double sx = static_cast<double>(x.cols()) / target.cols;
  for (int r = 0; r < target.rows; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(x.rows() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, x.rows() - 1);
    const double wy = fy - y0;
    for (int c = 0; c < target.cols; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(x.cols() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, x.cols() - 1);
      const double wx = fx - x0;
      out(r, c) = (1 - wy) * ((1 - wx) * x(y0, x0) + wx * x(y0, x1)) + wy * ((1 - wx) * x(y1, x0) + wx * x(y1, x1));
    }
  }
  return out;
}

namespace {

Image decode_mask(const json& item) {
  const int h = item.at("height").get<int>(), w = item.at("width").get<int>();
  if (h <= 0 || w <= 0) throw Error("mask response: non-positive mask shape");
  Image m(h, w, 0.0);
  auto px = m.pixels();
  if (item.contains("dense")) {
    const auto& d = item.at("dense");
    if (!d.is_array() || d.size() != px.size()) throw Error("mask response: dense mask has wrong length");
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = d[i].get<double>();
  } else if (item.contains("rle")) {
    std::size_t pos = 0;
    bool on = false;
    for (const auto& run : item.at("rle")) {
      const auto n = run.get<std::int64_t>();
      if (n < 0 || pos + static_cast<std::size_t>(n) > px.size()) throw Error("mask response: RLE overruns mask");
      if (on) std::fill_n(px.begin() + static_cast<std::ptrdiff_t>(pos), n, 1.0);
      pos += static_cast<std::size_t>(n);
      on = !on;
    }
    if (pos != px.size()) throw Error("mask response: RLE does not cover mask");
  } else {
    throw Error("mask response: item has neither 'dense' nor 'rle'");
  }
  return m;
}

}  // namespace

SemanticPrior parse_mask_response(const std::string& body, Shape2 target) {
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::exception& e) {
    throw Error(std::string("mask response: invalid JSON: ") + e.what());
  }
  if (!doc.contains("masks") || !doc["masks"].is_array()) throw Error("mask response: missing 'masks' array");
  struct Proposal {
    double score;
    Image mask;
  };
  std::vector<Proposal> props;
  try {
    for (const auto& item : doc["masks"]) props.push_back({item.at("score").get<double>(), decode_mask(item)});
  } catch (const json::exception& e) {
    throw Error(std::string("mask response: malformed item: ") + e.what());
  }
  std::stable_sort(props.begin(), props.end(), [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
  SemanticPrior prior = SemanticPrior::zeros(target);
  for (int k = 0; k < kPriorChannels && k < static_cast<int>(props.size()); ++k) {
    Image m = resample_bilinear(props[k].mask, target);
    for (double& v : m.pixels()) v = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    prior.masks[k] = std::move(m);
    prior.scores[k] = props[k].score;
  }
  return prior;
}

struct MaskServiceClient::State {
  explicit State(std::ptrdiff_t n) : slots(n) {}
  mutable std::counting_semaphore<1024> slots;
  std::string host;  // scheme://host:port
  std::string path;
};

MaskServiceClient::MaskServiceClient(MaskServiceConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.endpoint.empty()) throw DegradedModeError("mask service endpoint is not configured");
  if (cfg_.max_in_flight == 0 || cfg_.max_in_flight > 1024) throw std::invalid_argument("max_in_flight must be in [1, 1024]");
  state_ = std::make_unique<State>(static_cast<std::ptrdiff_t>(cfg_.max_in_flight));
  const auto scheme = cfg_.endpoint.find("://");
  const auto path_at = cfg_.endpoint.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  state_->host = cfg_.endpoint.substr(0, path_at);
  state_->path = path_at == std::string::npos ? "/" : cfg_.endpoint.substr(path_at);
}

MaskServiceClient::~MaskServiceClient() = default;

SemanticPrior MaskServiceClient::segment(const Image& x) const {
  const json req = {{"image", encode_image_base64(x)}, {"height", x.rows()}, {"width", x.cols()}};
  state_->slots.acquire();
  struct Release {
    std::counting_semaphore<1024>& s;
    ~Release() { s.release(); }
  } release{state_->slots};

  httplib::Client cli(state_->host);
  const auto secs = cfg_.timeout.count() / 1000;
  const auto usecs = (cfg_.timeout.count() % 1000) * 1000;
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  auto res = cli.Post(state_->path, req.dump(), "application/json");
  if (!res) throw DegradedModeError("mask service unreachable at " + cfg_.endpoint + ": " + httplib::to_string(res.error()));
  if (res->status != 200) throw DegradedModeError("mask service returned HTTP " + std::to_string(res->status));
  return parse_mask_response(res->body, x.shape());
}

}  // namespace rsfr::semantics
