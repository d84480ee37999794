#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices, sized for the reconstruction networks.
//
// Every value is a 2D matrix. Feature maps are stored token-major: an H x W
// map with C channels is an (H*W) x C matrix whose row index is y*W + x.
// Graphs are built per sample; parameters are long-lived leaves whose
// gradients accumulate across backward passes until zeroed.

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace rsfr::nn {

/// 64-byte aligned allocation. Vectorised Eigen reductions peel a different
/// number of leading elements depending on the start address, so identical
/// inputs at different alignments could round differently; fixed alignment
/// keeps every result bit-reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct Node {
  int rows = 0;
  int cols = 0;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  [[nodiscard]] std::size_t size() const { return value.size(); }
  Buffer& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(int rows, int cols, std::vector<double> values);
  static Var zeros(int rows, int cols);
  static Var parameter(int rows, int cols, std::vector<double> values);

  [[nodiscard]] int rows() const { return node_->rows; }
  [[nodiscard]] int cols() const { return node_->cols; }
  [[nodiscard]] std::size_t size() const { return node_->value.size(); }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] std::span<const double> value() const { return node_->value; }
  [[nodiscard]] Buffer& mutable_value() { return node_->value; }
  [[nodiscard]] std::span<const double> grad() const { return node_->grad; }
  [[nodiscard]] Buffer& mutable_grad() { return node_->ensure_grad(); }
  [[nodiscard]] double item() const { return node_->value.at(0); }
  [[nodiscard]] double at(int r, int c) const { return node_->value[static_cast<std::size_t>(r) * cols() + c]; }
  [[nodiscard]] const std::shared_ptr<Node>& node() const { return node_; }
  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }

  /// Same values, cut from the graph.
  [[nodiscard]] Var detach() const;
  void zero_grad();

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Runs reverse accumulation from a scalar (1x1) output, seeding d(out)/d(out) = seed.
void backward(const Var& out, double seed = 1.0);

// ---- elementwise and broadcast -------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// a (R x C) + row (1 x C) broadcast over rows.
Var add_row(const Var& a, const Var& row);
/// a (R x C) * row (1 x C) broadcast over rows.
Var mul_row(const Var& a, const Var& row);
/// Weighted sum of scalars (1x1 each).
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

Var silu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var softplus(const Var& a);
Var tanh(const Var& a);

// ---- linear algebra -------------------------------------------------------
/// a (M x K) * b (K x N).
Var matmul(const Var& a, const Var& b);
/// a (M x K) * b^T where b is (N x K).
Var matmul_nt(const Var& a, const Var& b);
/// x (L x in) * w (in x out) + bias (1 x out, optional).
Var linear(const Var& x, const Var& w, const Var& bias);
Var softmax_rows(const Var& a);

// ---- normalisation and pooling -------------------------------------------
/// Normalises each row over its columns (channel-last layer norm).
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Normalises each column over rows (per-channel instance norm over space).
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Column means, 1 x C.
Var mean_rows(const Var& x);
/// 2x2 average pooling of an (H*W) x C map.
Var avg_pool2(const Var& x, int height, int width);

// ---- convolution (3x3, stride 1, zero padding 1) -------------------------
/// x (H*W x Cin), w (9*Cin x Cout) with row index (ky*3+kx)*Cin + ci, bias 1 x Cout.
Var conv3x3(const Var& x, int height, int width, const Var& w, const Var& bias);
/// x (H*W x C), w (9 x C), bias 1 x C.
Var depthwise_conv3x3(const Var& x, int height, int width, const Var& w, const Var& bias);

// ---- reshaping ------------------------------------------------------------
/// out.flat[i] = x.flat[index[i]] (index -1 yields 0). Gradients scatter-add.
Var gather(const Var& x, int rows, int cols, std::shared_ptr<const std::vector<int>> index);
Var slice_cols(const Var& x, int begin, int end);
Var concat_cols(const std::vector<Var>& parts);

// ---- reductions -------------------------------------------------------------
Var sum(const Var& x);
Var mean(const Var& x);
/// Mean absolute value.
Var mean_abs(const Var& x);
/// sqrt(sum(x^2) + eps^2).
Var charbonnier(const Var& residual, double eps);

}  // namespace rsfr::nn
