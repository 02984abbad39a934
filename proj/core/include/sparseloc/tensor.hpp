#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sparseloc/common.hpp"
#include "sparseloc/rng.hpp"

namespace sparseloc {

using Shape = std::vector<int>;

std::int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorNode;
}

// Dense 64-bit float tensor with reverse-mode autodiff.
//
// Tensors are value-semantic handles to shared nodes of a define-by-run
// graph: every op records its parents and a backward closure on the output
// node. backward() on a scalar loss walks reachable nodes exactly once in
// reverse construction order and accumulates dLoss/dLeaf into every
// requires_grad leaf.
//
// All stored values must be finite; an op producing NaN/Inf throws
// NumericError. Data of leaf tensors may be mutated between graphs (that is
// how the optimizer updates parameters); op outputs are immutable.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  std::int64_t size() const;
  bool requires_grad() const;
  bool is_leaf() const;

  std::span<const double> data() const;
  // Leaf-only. Mutating a leaf that feeds a still-live graph invalidates that
  // graph; callers mutate only between steps.
  std::span<double> mutable_data();

  double item() const;
  double at(std::initializer_list<int> idx) const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Reverse-mode sweep from a scalar loss.
  void backward() const;

  std::uint64_t node_id() const;
  const std::string& op_name() const;

 private:
  friend Tensor make_op_output(Shape shape, std::vector<double> data, std::string op,
                               std::vector<Tensor> parents,
                               std::function<void(detail::TensorNode&)> backward_fn);
  friend detail::TensorNode* node_of(const Tensor& t);

  std::shared_ptr<detail::TensorNode> node_;
};

// Disables graph recording in the current thread for its lifetime; ops
// executed under the guard produce leaf outputs. Used by inference paths.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_mode_enabled();

// ---- ops ----
// Elementwise binaries broadcast trailing dimensions (numpy rules); gradients
// reduce-sum over broadcast axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// [.., M, K] x [.., K, N] -> [.., M, N]; batch dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// Max-subtracted, slices along `axis` sum to 1.
Tensor softmax(const Tensor& x, int axis);

// Normalizes the last axis to mean 0 / variance 1 (biased), then applies
// per-element gain and bias of that axis length. eps must be > 0.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// x [B,C,H,W] (or [C,H,W]) cross-correlated with kernel [O,C,k,k]; k odd.
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad);

// Bilinear, align-corners-false. Upsampling only (out >= in).
Tensor bilinear_upsample(const Tensor& x, int out_h, int out_w);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor slice(const Tensor& x, int axis, int start, int stop);
Tensor concat(std::span<const Tensor> tensors, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Mean over all elements of max(x,0) - x*z + log1p(exp(-|x|)). Gradient flows
// to logits only.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// Permutation/gather primitive: x viewed as rows of `row_len` contiguous
// elements; output row r copies input row row_map[r]. Backward scatter-adds.
Tensor gather_rows(const Tensor& x, std::int64_t row_len, std::vector<std::int64_t> row_map,
                   Shape out_shape);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- gradient verification oracle ----
struct FiniteDiffOptions {
  double step = 1e-5;
  // < 0 checks every coordinate; otherwise a deterministic random subset of
  // this size chosen with `seed`.
  std::int64_t max_coords = -1;
  std::uint64_t seed = 0;
};

// Central finite differences of a scalar-valued f against the analytic
// gradient at x. Returns max over checked coordinates of
// |analytic - numeric| / (|numeric| + 1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         const FiniteDiffOptions& opts);
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step = 1e-5);

// ---- profiler instrumentation ----
// While enabled, every matmul adds 2*batch*M*N*K to a process-wide counter
// (multiply-add counted as 2). Covers matmul contractions only; meant for
// single-threaded cost-accounting oracles.
void set_matmul_flop_counting(bool enabled);
void reset_matmul_flop_count();
std::uint64_t matmul_flop_count();

}  // namespace sparseloc
