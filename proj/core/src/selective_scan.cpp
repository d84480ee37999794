#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "rsfr/backbone.hpp"

// State is laid out state-major (n, e) so the innermost loops run over the
// contiguous channel axis.

namespace rsfr::backbone {

Var selective_scan(const Var& u, const Var& delta, const Var& a_log, const Var& b, const Var& c, const Var& d) {
  const int L = u.rows(), E = u.cols(), N = a_log.cols();
  if (delta.rows() != L || delta.cols() != E || a_log.rows() != E || b.rows() != L || b.cols() != N ||
      c.rows() != L || c.cols() != N || d.rows() != 1 || d.cols() != E) {
    throw std::invalid_argument("selective_scan: inconsistent shapes");
  }
  const bool track = nn::grad_enabled() && (u.requires_grad() || delta.requires_grad() || a_log.requires_grad() ||
                                            b.requires_grad() || c.requires_grad() || d.requires_grad());

  auto out = std::make_shared<nn::Node>();
  out->rows = L;
  out->cols = E;
  out->value.assign(static_cast<std::size_t>(L) * E, 0.0);

  const double* uv = u.value().data();
  const double* dv = delta.value().data();
  const double* bv = b.value().data();
  const double* cv = c.value().data();
  const double* Dv = d.value().data();
  // A transposed to (n, e)
  std::vector<double> A(static_cast<std::size_t>(N) * E);
  for (int e = 0; e < E; ++e) {
    for (int n = 0; n < N; ++n) A[static_cast<std::size_t>(n) * E + e] = -std::exp(a_log.value()[static_cast<std::size_t>(e) * N + n]);
  }

  const std::size_t step = static_cast<std::size_t>(N) * E;
  std::shared_ptr<std::vector<double>> hist;
  if (track) hist = std::make_shared<std::vector<double>>(static_cast<std::size_t>(L) * step);
  std::vector<double> state(step, 0.0);
  double* y = out->value.data();
  for (int t = 0; t < L; ++t) {
    const double* ut = uv + static_cast<std::size_t>(t) * E;
    const double* dt = dv + static_cast<std::size_t>(t) * E;
    double* yt = y + static_cast<std::size_t>(t) * E;
    double* h = track ? hist->data() + t * step : state.data();
    const double* hp = track ? (t > 0 ? hist->data() + (t - 1) * step : state.data()) : state.data();
    for (int e = 0; e < E; ++e) yt[e] = Dv[e] * ut[e];
    for (int n = 0; n < N; ++n) {
      const double bn = bv[static_cast<std::size_t>(t) * N + n];
      const double cn = cv[static_cast<std::size_t>(t) * N + n];
      const double* an = A.data() + static_cast<std::size_t>(n) * E;
      double* hn = h + static_cast<std::size_t>(n) * E;
      const double* hpn = hp + static_cast<std::size_t>(n) * E;
#pragma omp simd
      for (int e = 0; e < E; ++e) {
        const double v = std::exp(dt[e] * an[e]) * hpn[e] + dt[e] * bn * ut[e];
        hn[e] = v;
        yt[e] += cn * v;
      }
    }
  }

  if (track) {
    out->requires_grad = true;
    out->parents = {u.node(), delta.node(), a_log.node(), b.node(), c.node(), d.node()};
    out->backward = [L, E, N, step, hist, A = std::move(A)](nn::Node& self) {
      auto& pu = *self.parents[0];
      auto& pdelta = *self.parents[1];
      auto& pa = *self.parents[2];
      auto& pb = *self.parents[3];
      auto& pc = *self.parents[4];
      auto& pd = *self.parents[5];
      std::vector<double> gu(static_cast<std::size_t>(L) * E, 0.0), gdelta(gu.size(), 0.0);
      std::vector<double> ga(step, 0.0), gd(static_cast<std::size_t>(E), 0.0);
      std::vector<double> gb(static_cast<std::size_t>(L) * N, 0.0), gc(gb.size(), 0.0);
      std::vector<double> dh(step, 0.0), zeros(step, 0.0);
      const double* uv = pu.value.data();
      const double* dv = pdelta.value.data();
      const double* bv = pb.value.data();
      const double* cv = pc.value.data();
      const double* Dv = pd.value.data();
      const double* gy = self.grad.data();
      for (int t = L - 1; t >= 0; --t) {
        const double* ut = uv + static_cast<std::size_t>(t) * E;
        const double* dt = dv + static_cast<std::size_t>(t) * E;
        const double* gyt = gy + static_cast<std::size_t>(t) * E;
        double* gut = gu.data() + static_cast<std::size_t>(t) * E;
        double* gdt = gdelta.data() + static_cast<std::size_t>(t) * E;
        const double* h = hist->data() + t * step;
        const double* hp = t > 0 ? hist->data() + (t - 1) * step : zeros.data();
        for (int e = 0; e < E; ++e) {
          gd[e] += gyt[e] * ut[e];
          gut[e] += gyt[e] * Dv[e];
        }
        for (int n = 0; n < N; ++n) {
          const double bn = bv[static_cast<std::size_t>(t) * N + n];
          const double cn = cv[static_cast<std::size_t>(t) * N + n];
          const double* an = A.data() + static_cast<std::size_t>(n) * E;
          const double* hn = h + static_cast<std::size_t>(n) * E;
          const double* hpn = hp + static_cast<std::size_t>(n) * E;
          double* dhn = dh.data() + static_cast<std::size_t>(n) * E;
          double* gan = ga.data() + static_cast<std::size_t>(n) * E;
          double sum_c = 0.0, sum_b = 0.0;
#pragma omp simd reduction(+ : sum_c, sum_b)
          for (int e = 0; e < E; ++e) {
            sum_c += gyt[e] * hn[e];
            const double g = dhn[e] + gyt[e] * cn;
            const double decay = std::exp(dt[e] * an[e]);
            const double gdecay = g * hpn[e] * decay;  // d/d(dt*A) of the decay term
            gdt[e] += gdecay * an[e] + g * bn * ut[e];
            gan[e] += gdecay * dt[e] * an[e];  // chain through A = -exp(a_log)
            sum_b += g * dt[e] * ut[e];
            gut[e] += g * dt[e] * bn;
            dhn[e] = g * decay;
          }
          gc[static_cast<std::size_t>(t) * N + n] += sum_c;
          gb[static_cast<std::size_t>(t) * N + n] += sum_b;
        }
      }
      auto add_into = [](nn::Node& p, const std::vector<double>& g) {
        if (!p.requires_grad) return;
        auto& dst = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      };
      add_into(pu, gu);
      add_into(pdelta, gdelta);
      if (pa.requires_grad) {
        auto& dst = pa.ensure_grad();
        for (int e = 0; e < E; ++e) {
          for (int n = 0; n < N; ++n) dst[static_cast<std::size_t>(e) * N + n] += ga[static_cast<std::size_t>(n) * E + e];
        }
      }
      add_into(pb, gb);
      add_into(pc, gc);
      add_into(pd, gd);
    };
  }
  return nn::Var(out);
}

}  // namespace rsfr::backbone
