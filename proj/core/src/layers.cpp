#include "rsfr/layers.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "rsfr/array_io.hpp"

namespace rsfr::nn {

Var ParameterSet::create(const std::string& name, int rows, int cols, std::vector<double> init) {
  for (const auto& p : params_) {
    if (p.name == name) throw std::invalid_argument("duplicate parameter name " + name);
  }
  params_.push_back({name, Var::parameter(rows, cols, std::move(init))});
  return params_.back().var;
}

const Var& ParameterSet::get(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.var;
  }
  throw std::out_of_range("no parameter named " + name);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

std::string ParameterSet::digest() const {
  std::string bytes;
  for (const auto& p : params_) {
    bytes += p.name;
    bytes += std::to_string(p.var.rows()) + "x" + std::to_string(p.var.cols());
    const auto v = p.var.value();
    bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  return io::hash_hex(bytes);
}

std::size_t ParameterSet::load_values(const ParameterSet& other) {
  std::size_t copied = 0;
  for (auto& p : params_) {
    for (const auto& q : other.params_) {
      if (q.name != p.name) continue;
      if (q.var.size() != p.var.size()) throw std::invalid_argument("parameter " + p.name + " has a different shape");
      auto& dst = p.var.mutable_value();
      const auto src = q.var.value();
      std::copy(src.begin(), src.end(), dst.begin());
      ++copied;
    }
  }
  return copied;
}

std::vector<double> uniform_values(Rng& rng, std::size_t n, double bound) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return v;
}

std::vector<double> constant_values(std::size_t n, double v) { return std::vector<double>(n, v); }

Linear Linear::make(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng, bool with_bias,
                    double gain) {
  const double bound = gain / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = ps.create(name + ".weight", in, out, uniform_values(rng, static_cast<std::size_t>(in) * out, bound));
  if (with_bias) l.bias = ps.create(name + ".bias", 1, out, uniform_values(rng, static_cast<std::size_t>(out), bound));
  return l;
}

LayerNorm LayerNorm::make(ParameterSet& ps, const std::string& name, int channels) {
  LayerNorm n;
  n.gamma = ps.create(name + ".gamma", 1, channels, constant_values(channels, 1.0));
  n.beta = ps.create(name + ".beta", 1, channels, constant_values(channels, 0.0));
  return n;
}

Conv3x3 Conv3x3::make(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(9.0 * in);
  Conv3x3 c;
  c.weight = ps.create(name + ".weight", 9 * in, out, uniform_values(rng, static_cast<std::size_t>(9) * in * out, bound));
  c.bias = ps.create(name + ".bias", 1, out, uniform_values(rng, static_cast<std::size_t>(out), bound));
  return c;
}

DepthwiseConv3x3 DepthwiseConv3x3::make(ParameterSet& ps, const std::string& name, int channels, Rng& rng) {
  const double bound = 1.0 / 3.0;
  DepthwiseConv3x3 c;
  c.weight = ps.create(name + ".weight", 9, channels, uniform_values(rng, static_cast<std::size_t>(9) * channels, bound));
  c.bias = ps.create(name + ".bias", 1, channels, uniform_values(rng, static_cast<std::size_t>(channels), bound));
  return c;
}

}  // namespace rsfr::nn
