#include "rsfr/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace rsfr::nn {
namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMat>;
using CMapR = Eigen::Map<const RowMat>;

MapR map(Buffer& v, int r, int c) { return MapR(v.data(), r, c); }
CMapR cmap(const Buffer& v, int r, int c) { return CMapR(v.data(), r, c); }
Eigen::Map<const Eigen::RowVectorXd> crow(const Buffer& v, int c) {
  return Eigen::Map<const Eigen::RowVectorXd>(v.data(), c);
}

std::shared_ptr<Node> result(int rows, int cols, std::initializer_list<const Var*> inputs) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  if (g_grad_enabled) {
    for (const Var* in : inputs) {
      if (in->defined() && in->requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
      for (const Var* in : inputs) {
        if (in->defined()) n->parents.push_back(in->node());
      }
    }
  }
  return n;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

bool wants(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

template <typename F, typename D>
Var unary(const Var& a, F f, D df) {
  auto out = result(a.rows(), a.cols(), {&a});
  const auto& x = a.node()->value;
  for (std::size_t i = 0; i < x.size(); ++i) out->value[i] = f(x[i]);
  if (out->requires_grad) {
    out->backward = [df](Node& self) {
      auto& p = *self.parents[0];
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.value[i], self.value[i]);
    };
  }
  return Var(out);
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var Var::constant(int rows, int cols, std::vector<double> values) {
  if (values.size() != static_cast<std::size_t>(rows) * cols) throw std::invalid_argument("Var::constant: size mismatch");
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(values.begin(), values.end());
  return Var(n);
}

Var Var::zeros(int rows, int cols) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  return Var(n);
}

Var Var::parameter(int rows, int cols, std::vector<double> values) {
  Var v = constant(rows, cols, std::move(values));
  v.node_->requires_grad = true;
  return v;
}

Var Var::detach() const {
  auto n = std::make_shared<Node>();
  n->rows = rows();
  n->cols = cols();
  n->value = node_->value;
  return Var(n);
}

void Var::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& out, double seed) {
  if (out.size() != 1) throw std::invalid_argument("backward: output must be a scalar");
  if (!out.requires_grad()) return;
  // iterative post-order DFS for a topological order
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{out.node().get(), 0}};
  visited.insert(out.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  out.node()->ensure_grad()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  auto out = result(a.rows(), a.cols(), {&a, &b});
  const auto &x = a.node()->value, &y = b.node()->value;
  for (std::size_t i = 0; i < x.size(); ++i) out->value[i] = x[i] + y[i];
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      for (auto& p : self.parents) {
        if (!wants(p)) continue;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return Var(out);
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  auto out = result(a.rows(), a.cols(), {&a, &b});
  const auto &x = a.node()->value, &y = b.node()->value;
  for (std::size_t i = 0; i < x.size(); ++i) out->value[i] = x[i] - y[i];
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      for (std::size_t k = 0; k < 2; ++k) {
        auto& p = self.parents[k];
        if (!wants(p)) continue;
        auto& g = p->ensure_grad();
        const double s = k == 0 ? 1.0 : -1.0;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
      }
    };
  }
  return Var(out);
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  auto out = result(a.rows(), a.cols(), {&a, &b});
  const auto &x = a.node()->value, &y = b.node()->value;
  for (std::size_t i = 0; i < x.size(); ++i) out->value[i] = x[i] * y[i];
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (wants(pa)) {
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
      }
      if (wants(pb)) {
        auto& g = pb->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
      }
    };
  }
  return Var(out);
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: row must be 1 x cols");
  auto out = result(a.rows(), a.cols(), {&a, &row});
  const int R = a.rows(), C = a.cols();
  const auto &x = a.node()->value, &b = row.node()->value;
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) out->value[static_cast<std::size_t>(r) * C + c] = x[static_cast<std::size_t>(r) * C + c] + b[c];
  }
  if (out->requires_grad) {
    out->backward = [R, C](Node& self) {
      if (wants(self.parents[0])) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (wants(self.parents[1])) {
        auto& g = self.parents[1]->ensure_grad();
        for (int r = 0; r < R; ++r) {
          for (int c = 0; c < C; ++c) g[c] += self.grad[static_cast<std::size_t>(r) * C + c];
        }
      }
    };
  }
  return Var(out);
}

Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("mul_row: row must be 1 x cols");
  auto out = result(a.rows(), a.cols(), {&a, &row});
  const int R = a.rows(), C = a.cols();
  const auto &x = a.node()->value, &w = row.node()->value;
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) out->value[static_cast<std::size_t>(r) * C + c] = x[static_cast<std::size_t>(r) * C + c] * w[c];
  }
  if (out->requires_grad) {
    out->backward = [R, C](Node& self) {
      auto& pa = self.parents[0];
      auto& pw = self.parents[1];
      if (wants(pa)) {
        auto& g = pa->ensure_grad();
        for (int r = 0; r < R; ++r) {
          for (int c = 0; c < C; ++c) g[static_cast<std::size_t>(r) * C + c] += self.grad[static_cast<std::size_t>(r) * C + c] * pw->value[c];
        }
      }
      if (wants(pw)) {
        auto& g = pw->ensure_grad();
        for (int r = 0; r < R; ++r) {
          for (int c = 0; c < C; ++c) g[c] += self.grad[static_cast<std::size_t>(r) * C + c] * pa->value[static_cast<std::size_t>(r) * C + c];
        }
      }
    };
  }
  return Var(out);
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size() || terms.empty()) throw std::invalid_argument("weighted_sum: size mismatch");
  auto out = std::make_shared<Node>();
  out->rows = out->cols = 1;
  out->value = {0.0};
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (terms[k].size() != 1) throw std::invalid_argument("weighted_sum: terms must be scalars");
    out->value[0] += weights[k] * terms[k].item();
    if (g_grad_enabled && terms[k].requires_grad()) out->requires_grad = true;
  }
  if (out->requires_grad) {
    for (const auto& t : terms) out->parents.push_back(t.node());
    out->backward = [weights](Node& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        if (wants(self.parents[k])) self.parents[k]->ensure_grad()[0] += weights[k] * self.grad[0];
      }
    };
  }
  return Var(out);
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var gelu(const Var& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x); });
}

Var sigmoid(const Var& a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var softplus(const Var& a) {
  return unary(
      a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return sigmoid_scalar(x); });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

// ---- linear algebra ----------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const int M = a.rows(), K = a.cols(), N = b.cols();
  auto out = result(M, N, {&a, &b});
  map(out->value, M, N).noalias() = cmap(a.node()->value, M, K) * cmap(b.node()->value, K, N);
  if (out->requires_grad) {
    out->backward = [M, K, N](Node& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      auto gy = cmap(self.grad, M, N);
      if (wants(pa)) map(pa->ensure_grad(), M, K).noalias() += gy * cmap(pb->value, K, N).transpose();
      if (wants(pb)) map(pb->ensure_grad(), K, N).noalias() += cmap(pa->value, M, K).transpose() * gy;
    };
  }
  return Var(out);
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  const int M = a.rows(), K = a.cols(), N = b.rows();
  auto out = result(M, N, {&a, &b});
  map(out->value, M, N).noalias() = cmap(a.node()->value, M, K) * cmap(b.node()->value, N, K).transpose();
  if (out->requires_grad) {
    out->backward = [M, K, N](Node& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      auto gy = cmap(self.grad, M, N);
      if (wants(pa)) map(pa->ensure_grad(), M, K).noalias() += gy * cmap(pb->value, N, K);
      if (wants(pb)) map(pb->ensure_grad(), N, K).noalias() += gy.transpose() * cmap(pa->value, M, K);
    };
  }
  return Var(out);
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  if (x.cols() != w.rows()) {
    throw std::invalid_argument("linear: input has " + std::to_string(x.cols()) + " features, weight expects " +
                                std::to_string(w.rows()));
  }
  const int L = x.rows(), I = w.rows(), O = w.cols();
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rows() != 1 || bias.cols() != O)) throw std::invalid_argument("linear: bias shape");
  auto out = result(L, O, {&x, &w, &bias});
  auto y = map(out->value, L, O);
  y.noalias() = cmap(x.node()->value, L, I) * cmap(w.node()->value, I, O);
  if (has_bias) y.rowwise() += crow(bias.node()->value, O);
  if (out->requires_grad) {
    out->backward = [L, I, O, has_bias](Node& self) {
      auto& px = self.parents[0];
      auto& pw = self.parents[1];
      auto gy = cmap(self.grad, L, O);
      if (wants(px)) map(px->ensure_grad(), L, I).noalias() += gy * cmap(pw->value, I, O).transpose();
      if (wants(pw)) map(pw->ensure_grad(), I, O).noalias() += cmap(px->value, L, I).transpose() * gy;
      if (has_bias && wants(self.parents[2])) map(self.parents[2]->ensure_grad(), 1, O) += gy.colwise().sum();
    };
  }
  return Var(out);
}

Var softmax_rows(const Var& a) {
  const int R = a.rows(), C = a.cols();
  auto out = result(R, C, {&a});
  const auto& x = a.node()->value;
  for (int r = 0; r < R; ++r) {
    const double* xr = x.data() + static_cast<std::size_t>(r) * C;
    double* yr = out->value.data() + static_cast<std::size_t>(r) * C;
    const double m = *std::max_element(xr, xr + C);
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += (yr[c] = std::exp(xr[c] - m));
    for (int c = 0; c < C; ++c) yr[c] /= s;
  }
  if (out->requires_grad) {
    out->backward = [R, C](Node& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (int r = 0; r < R; ++r) {
        const double* y = self.value.data() + static_cast<std::size_t>(r) * C;
        const double* gy = self.grad.data() + static_cast<std::size_t>(r) * C;
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += gy[c] * y[c];
        for (int c = 0; c < C; ++c) g[static_cast<std::size_t>(r) * C + c] += y[c] * (gy[c] - dot);
      }
    };
  }
  return Var(out);
}

// ---- normalisation ------------------------------------------------------------

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int R = x.rows(), C = x.cols();
  if (gamma.cols() != C || beta.cols() != C) throw std::invalid_argument("layer_norm: affine shape");
  auto out = result(R, C, {&x, &gamma, &beta});
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(R);
  const auto &xv = x.node()->value, &gv = gamma.node()->value, &bv = beta.node()->value;
  for (int r = 0; r < R; ++r) {
    const double* xr = xv.data() + static_cast<std::size_t>(r) * C;
    double mu = 0.0;
    for (int c = 0; c < C; ++c) mu += xr[c];
    mu /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= C;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int c = 0; c < C; ++c) {
      const auto i = static_cast<std::size_t>(r) * C + c;
      (*xhat)[i] = (xr[c] - mu) * is;
      out->value[i] = (*xhat)[i] * gv[c] + bv[c];
    }
  }
  if (out->requires_grad) {
    out->backward = [R, C, xhat, inv_std](Node& self) {
      auto& px = self.parents[0];
      auto& pg = self.parents[1];
      auto& pb = self.parents[2];
      const auto& gv = pg->value;
      if (wants(pg) || wants(pb)) {
        auto& gg = pg->ensure_grad();
        auto& gb = pb->ensure_grad();
        for (int r = 0; r < R; ++r) {
          for (int c = 0; c < C; ++c) {
            const auto i = static_cast<std::size_t>(r) * C + c;
            gg[c] += self.grad[i] * (*xhat)[i];
            gb[c] += self.grad[i];
          }
        }
      }
      if (wants(px)) {
        auto& gx = px->ensure_grad();
        for (int r = 0; r < R; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (int c = 0; c < C; ++c) {
            const auto i = static_cast<std::size_t>(r) * C + c;
            const double d = self.grad[i] * gv[c];
            m1 += d;
            m2 += d * (*xhat)[i];
          }
          m1 /= C;
          m2 /= C;
          for (int c = 0; c < C; ++c) {
            const auto i = static_cast<std::size_t>(r) * C + c;
            gx[i] += (*inv_std)[r] * (self.grad[i] * gv[c] - m1 - (*xhat)[i] * m2);
          }
        }
      }
    };
  }
  return Var(out);
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int R = x.rows(), C = x.cols();
  if (gamma.cols() != C || beta.cols() != C) throw std::invalid_argument("instance_norm: affine shape");
  auto out = result(R, C, {&x, &gamma, &beta});
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(C);
  const auto &xv = x.node()->value, &gv = gamma.node()->value, &bv = beta.node()->value;
  std::vector<double> mu(C, 0.0), var(C, 0.0);
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) mu[c] += xv[static_cast<std::size_t>(r) * C + c];
  }
  for (int c = 0; c < C; ++c) mu[c] /= R;
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      const double d = xv[static_cast<std::size_t>(r) * C + c] - mu[c];
      var[c] += d * d;
    }
  }
  for (int c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] / R + eps);
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      const auto i = static_cast<std::size_t>(r) * C + c;
      (*xhat)[i] = (xv[i] - mu[c]) * (*inv_std)[c];
      out->value[i] = (*xhat)[i] * gv[c] + bv[c];
    }
  }
  if (out->requires_grad) {
    out->backward = [R, C, xhat, inv_std](Node& self) {
      auto& px = self.parents[0];
      auto& pg = self.parents[1];
      auto& pb = self.parents[2];
      const auto& gv = pg->value;
      std::vector<double> m1(C, 0.0), m2(C, 0.0), sg(C, 0.0), sgx(C, 0.0);
      for (int r = 0; r < R; ++r) {
        for (int c = 0; c < C; ++c) {
          const auto i = static_cast<std::size_t>(r) * C + c;
          sg[c] += self.grad[i];
          sgx[c] += self.grad[i] * (*xhat)[i];
        }
      }
      if (wants(pg) || wants(pb)) {
        auto& gg = pg->ensure_grad();
        auto& gb = pb->ensure_grad();
        for (int c = 0; c < C; ++c) {
          gg[c] += sgx[c];
          gb[c] += sg[c];
        }
      }
      if (wants(px)) {
        auto& gx = px->ensure_grad();
        for (int c = 0; c < C; ++c) {
          m1[c] = sg[c] * gv[c] / R;
          m2[c] = sgx[c] * gv[c] / R;
        }
        for (int r = 0; r < R; ++r) {
          for (int c = 0; c < C; ++c) {
            const auto i = static_cast<std::size_t>(r) * C + c;
            gx[i] += (*inv_std)[c] * (self.grad[i] * gv[c] - m1[c] - (*xhat)[i] * m2[c]);
          }
        }
      }
    };
  }
  return Var(out);
}

Var mean_rows(const Var& x) {
  const int R = x.rows(), C = x.cols();
  auto out = result(1, C, {&x});
  map(out->value, 1, C) = cmap(x.node()->value, R, C).colwise().mean();
  if (out->requires_grad) {
    out->backward = [R, C](Node& self) {
      map(self.parents[0]->ensure_grad(), R, C).rowwise() += crow(self.grad, C) / static_cast<double>(R);
    };
  }
  return Var(out);
}

Var avg_pool2(const Var& x, int height, int width) {
  if (height % 2 || width % 2 || x.rows() != height * width) throw std::invalid_argument("avg_pool2: shape");
  const int C = x.cols(), H2 = height / 2, W2 = width / 2;
  auto out = result(H2 * W2, C, {&x});
  const auto& xv = x.node()->value;
  for (int y = 0; y < H2; ++y) {
    for (int xx = 0; xx < W2; ++xx) {
      double* o = out->value.data() + (static_cast<std::size_t>(y) * W2 + xx) * C;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const double* s = xv.data() + (static_cast<std::size_t>(2 * y + dy) * width + 2 * xx + dx) * C;
          for (int c = 0; c < C; ++c) o[c] += 0.25 * s[c];
        }
      }
    }
  }
  if (out->requires_grad) {
    out->backward = [C, H2, W2, width](Node& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (int y = 0; y < H2; ++y) {
        for (int xx = 0; xx < W2; ++xx) {
          const double* go = self.grad.data() + (static_cast<std::size_t>(y) * W2 + xx) * C;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              double* gs = g.data() + (static_cast<std::size_t>(2 * y + dy) * width + 2 * xx + dx) * C;
              for (int c = 0; c < C; ++c) gs[c] += 0.25 * go[c];
            }
          }
        }
      }
    };
  }
  return Var(out);
}

// ---- convolution ----------------------------------------------------------------

namespace {

// im2col for a 3x3 / pad 1 window: row = pixel, column = (ky*3+kx)*C + c
Buffer im2col3x3(const Buffer& x, int H, int W, int C) {
  Buffer cols(static_cast<std::size_t>(H) * W * 9 * C, 0.0);
  for (int y = 0; y < H; ++y) {
    for (int xx = 0; xx < W; ++xx) {
      double* row = cols.data() + (static_cast<std::size_t>(y) * W + xx) * 9 * C;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = xx + kx - 1;
          if (sx < 0 || sx >= W) continue;
          std::copy_n(x.data() + (static_cast<std::size_t>(sy) * W + sx) * C, C, row + (ky * 3 + kx) * C);
        }
      }
    }
  }
  return cols;
}

void col2im3x3_add(const Buffer& cols, int H, int W, int C, Buffer& gx) {
  for (int y = 0; y < H; ++y) {
    for (int xx = 0; xx < W; ++xx) {
      const double* row = cols.data() + (static_cast<std::size_t>(y) * W + xx) * 9 * C;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = xx + kx - 1;
          if (sx < 0 || sx >= W) continue;
          double* g = gx.data() + (static_cast<std::size_t>(sy) * W + sx) * C;
          const double* s = row + (ky * 3 + kx) * C;
          for (int c = 0; c < C; ++c) g[c] += s[c];
        }
      }
    }
  }
}

}  // namespace

Var conv3x3(const Var& x, int height, int width, const Var& w, const Var& bias) {
  const int Ci = x.cols(), Co = w.cols(), L = height * width;
  if (x.rows() != L || w.rows() != 9 * Ci) throw std::invalid_argument("conv3x3: shape");
  auto cols = std::make_shared<Buffer>(im2col3x3(x.node()->value, height, width, Ci));
  const bool has_bias = bias.defined();
  auto out = result(L, Co, {&x, &w, &bias});
  auto y = map(out->value, L, Co);
  y.noalias() = cmap(*cols, L, 9 * Ci) * cmap(w.node()->value, 9 * Ci, Co);
  if (has_bias) y.rowwise() += crow(bias.node()->value, Co);
  if (out->requires_grad) {
    out->backward = [cols, height, width, Ci, Co, L, has_bias](Node& self) {
      auto& px = self.parents[0];
      auto& pw = self.parents[1];
      auto gy = cmap(self.grad, L, Co);
      if (wants(pw)) map(pw->ensure_grad(), 9 * Ci, Co).noalias() += cmap(*cols, L, 9 * Ci).transpose() * gy;
      if (has_bias && wants(self.parents[2])) map(self.parents[2]->ensure_grad(), 1, Co) += gy.colwise().sum();
      if (wants(px)) {
        Buffer gcols(static_cast<std::size_t>(L) * 9 * Ci);
        map(gcols, L, 9 * Ci).noalias() = gy * cmap(pw->value, 9 * Ci, Co).transpose();
        col2im3x3_add(gcols, height, width, Ci, px->ensure_grad());
      }
    };
  }
  return Var(out);
}

Var depthwise_conv3x3(const Var& x, int height, int width, const Var& w, const Var& bias) {
  const int C = x.cols(), H = height, W = width;
  if (x.rows() != H * W || w.rows() != 9 || w.cols() != C) throw std::invalid_argument("depthwise_conv3x3: shape");
  const bool has_bias = bias.defined();
  auto out = result(H * W, C, {&x, &w, &bias});
  const auto &xv = x.node()->value, &wv = w.node()->value;
  for (int y = 0; y < H; ++y) {
    for (int xx = 0; xx < W; ++xx) {
      double* o = out->value.data() + (static_cast<std::size_t>(y) * W + xx) * C;
      if (has_bias) std::copy_n(bias.node()->value.data(), C, o);
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = xx + kx - 1;
          if (sx < 0 || sx >= W) continue;
          const double* s = xv.data() + (static_cast<std::size_t>(sy) * W + sx) * C;
          const double* k = wv.data() + static_cast<std::size_t>(ky * 3 + kx) * C;
          for (int c = 0; c < C; ++c) o[c] += k[c] * s[c];
        }
      }
    }
  }
  if (out->requires_grad) {
    out->backward = [C, H, W, has_bias](Node& self) {
      auto& px = self.parents[0];
      auto& pw = self.parents[1];
      const bool gx_on = wants(px), gw_on = wants(pw);
      Buffer* gx = gx_on ? &px->ensure_grad() : nullptr;
      Buffer* gw = gw_on ? &pw->ensure_grad() : nullptr;
      for (int y = 0; y < H; ++y) {
        for (int xx = 0; xx < W; ++xx) {
          const double* go = self.grad.data() + (static_cast<std::size_t>(y) * W + xx) * C;
          for (int ky = 0; ky < 3; ++ky) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= H) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int sx = xx + kx - 1;
              if (sx < 0 || sx >= W) continue;
              const auto src = (static_cast<std::size_t>(sy) * W + sx) * C;
              const auto kof = static_cast<std::size_t>(ky * 3 + kx) * C;
              if (gw_on) {
                const double* s = px->value.data() + src;
                double* g = gw->data() + kof;
                for (int c = 0; c < C; ++c) g[c] += go[c] * s[c];
              }
              if (gx_on) {
                const double* k = pw->value.data() + kof;
                double* g = gx->data() + src;
                for (int c = 0; c < C; ++c) g[c] += go[c] * k[c];
              }
            }
          }
        }
      }
      if (has_bias && wants(self.parents[2])) {
        auto& gb = self.parents[2]->ensure_grad();
        for (int i = 0; i < H * W; ++i) {
          for (int c = 0; c < C; ++c) gb[c] += self.grad[static_cast<std::size_t>(i) * C + c];
        }
      }
    };
  }
  return Var(out);
}

// ---- reshaping --------------------------------------------------------------------

Var gather(const Var& x, int rows, int cols, std::shared_ptr<const std::vector<int>> index) {
  if (index->size() != static_cast<std::size_t>(rows) * cols) throw std::invalid_argument("gather: index size");
  auto out = result(rows, cols, {&x});
  const auto& xv = x.node()->value;
  const auto& idx = *index;
  for (std::size_t i = 0; i < idx.size(); ++i) out->value[i] = idx[i] >= 0 ? xv[static_cast<std::size_t>(idx[i])] : 0.0;
  if (out->requires_grad) {
    out->backward = [index](Node& self) {
      auto& g = self.parents[0]->ensure_grad();
      const auto& idx = *index;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= 0) g[static_cast<std::size_t>(idx[i])] += self.grad[i];
      }
    };
  }
  return Var(out);
}

Var slice_cols(const Var& x, int begin, int end) {
  if (begin < 0 || end > x.cols() || begin >= end) throw std::invalid_argument("slice_cols: range");
  const int R = x.rows(), C = x.cols(), W = end - begin;
  auto out = result(R, W, {&x});
  map(out->value, R, W) = cmap(x.node()->value, R, C).middleCols(begin, W);
  if (out->requires_grad) {
    out->backward = [R, C, W, begin](Node& self) {
      map(self.parents[0]->ensure_grad(), R, C).middleCols(begin, W) += cmap(self.grad, R, W);
    };
  }
  return Var(out);
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int R = parts[0].rows();
  int C = 0;
  for (const auto& p : parts) {
    if (p.rows() != R) throw std::invalid_argument("concat_cols: row mismatch");
    C += p.cols();
  }
  auto out = std::make_shared<Node>();
  out->rows = R;
  out->cols = C;
  out->value.resize(static_cast<std::size_t>(R) * C);
  int off = 0;
  for (const auto& p : parts) {
    map(out->value, R, C).middleCols(off, p.cols()) = cmap(p.node()->value, R, p.cols());
    off += p.cols();
    if (g_grad_enabled && p.requires_grad()) out->requires_grad = true;
  }
  if (out->requires_grad) {
    std::vector<int> widths;
    for (const auto& p : parts) {
      out->parents.push_back(p.node());
      widths.push_back(p.cols());
    }
    out->backward = [R, C, widths](Node& self) {
      int off = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        if (wants(self.parents[k])) {
          map(self.parents[k]->ensure_grad(), R, widths[k]) += cmap(self.grad, R, C).middleCols(off, widths[k]);
        }
        off += widths[k];
      }
    };
  }
  return Var(out);
}

// ---- reductions ------------------------------------------------------------------

Var sum(const Var& x) {
  auto out = result(1, 1, {&x});
  for (double v : x.node()->value) out->value[0] += v;
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      for (auto& g : self.parents[0]->ensure_grad()) g += self.grad[0];
    };
  }
  return Var(out);
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Var mean_abs(const Var& x) {
  auto out = result(1, 1, {&x});
  const double n = static_cast<double>(x.size());
  for (double v : x.node()->value) out->value[0] += std::abs(v);
  out->value[0] /= n;
  if (out->requires_grad) {
    out->backward = [n](Node& self) {
      auto& p = *self.parents[0];
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = p.value[i] > 0 ? 1.0 : (p.value[i] < 0 ? -1.0 : 0.0);
        g[i] += self.grad[0] * s / n;
      }
    };
  }
  return Var(out);
}

Var charbonnier(const Var& residual, double eps) {
  auto out = result(1, 1, {&residual});
  double ss = 0.0;
  for (double v : residual.node()->value) ss += v * v;
  out->value[0] = std::sqrt(ss + eps * eps);
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      auto& p = *self.parents[0];
      auto& g = p.ensure_grad();
      const double k = self.grad[0] / self.value[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * p.value[i];
    };
  }
  return Var(out);
}

}  // namespace rsfr::nn
