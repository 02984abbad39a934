#include "sparseloc/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace sparseloc {

std::int64_t shape_size(const Shape& shape) {
  std::int64_t n = 1;
  for (const int e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t id = 0;
  std::string op;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

using Node = detail::TensorNode;
using NodePtr = std::shared_ptr<Node>;

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

constexpr std::int64_t kParallelUnaryThreshold = 1 << 17;

std::atomic<std::uint64_t> g_matmul_flops{0};
std::atomic<bool> g_count_flops{false};

void validate_shape(const Shape& shape, const char* what) {
  for (const int e : shape) {
    if (e <= 0) throw ShapeError(std::string(what) + ": extents must be positive, got " + shape_str(shape));
  }
}

void check_finite(const std::vector<double>& values, const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(what + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

NodePtr new_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (int d = static_cast<int>(shape.size()) - 2; d >= 0; --d) {
    strides[d] = strides[d + 1] * shape[d + 1];
  }
  return strides;
}

}  // namespace

Tensor make_op_output(Shape shape, std::vector<double> data, std::string op,
                      std::vector<Tensor> parents,
                      std::function<void(detail::TensorNode&)> backward_fn) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError(op + ": data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  check_finite(data, op);
  NodePtr node = new_node(std::move(shape), std::move(data));
  node->op = std::move(op);

  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) needs_grad = needs_grad || p.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents.reserve(parents.size());
    for (Tensor& p : parents) node->parents.push_back(p.node_);
    node->backward_fn = std::move(backward_fn);
  }
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

detail::TensorNode* node_of(const Tensor& t) { return t.node_.get(); }

// ---- Tensor methods ----

Tensor::Tensor() = default;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape, "full");
  std::vector<double> data(static_cast<std::size_t>(shape_size(shape)), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape, "from_data");
  if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("from_data: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  check_finite(data, "from_data");
  NodePtr node = new_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  validate_shape(shape, "randn");
  std::vector<double> data(static_cast<std::size_t>(shape_size(shape)));
  for (double& v : data) v = rng.normal(0.0, stddev);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ShapeError("shape(): tensor is undefined");
  return node_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

std::int64_t Tensor::size() const { return node_ ? node_->size() : 0; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_ && node_->leaf; }

std::span<const double> Tensor::data() const {
  if (!node_) throw ShapeError("data(): tensor is undefined");
  return {node_->data.data(), node_->data.size()};
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw ShapeError("mutable_data(): tensor is undefined");
  if (!node_->leaf) {
    throw NumericError("mutable_data(): op outputs are immutable (op '" + node_->op + "')");
  }
  return {node_->data.data(), node_->data.size()};
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item(): tensor has shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) {
    throw ShapeError("at(): index rank " + std::to_string(idx.size()) + " vs shape " + shape_str(s));
  }
  const auto strides = row_major_strides(s);
  std::int64_t flat = 0;
  int d = 0;
  for (const int i : idx) {
    if (i < 0 || i >= s[d]) throw ShapeError("at(): index out of bounds in dim " + std::to_string(d));
    flat += i * strides[d];
    ++d;
  }
  return node_->data[static_cast<std::size_t>(flat)];
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw NumericError("grad(): no gradient present (call backward() first)");
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
  if (node_ && node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
}

std::uint64_t Tensor::node_id() const { return node_ ? node_->id : 0; }

const std::string& Tensor::op_name() const {
  static const std::string empty;
  return node_ ? node_->op : empty;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_mode_enabled() { return g_grad_enabled; }

// ---- backward ----

void Tensor::backward() const {
  if (!node_) throw ShapeError("backward(): tensor is undefined");
  if (size() != 1) {
    throw ShapeError("backward(): loss must be a scalar, got shape " + shape_str(shape()));
  }
  Node* root = node_.get();
  if (!root->requires_grad) return;

  // Reachable requires_grad nodes, then reverse construction order. Children
  // always carry larger ids than their parents, so every node's gradient is
  // complete before its backward closure runs.
  std::vector<Node*> nodes;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const NodePtr& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

  root->grad.assign(1, 1.0);
  static const bool profile = std::getenv("SPARSELOC_PROFILE_BACKWARD") != nullptr;
  std::map<std::string, double>* op_seconds = nullptr;
  static std::map<std::string, double> profile_totals;
  if (profile) op_seconds = &profile_totals;

  for (Node* n : nodes) {
    if (n->backward_fn && !n->grad.empty()) {
      if (op_seconds) {
        const auto t0 = std::chrono::steady_clock::now();
        n->backward_fn(*n);
        const auto t1 = std::chrono::steady_clock::now();
        (*op_seconds)[n->op] += std::chrono::duration<double>(t1 - t0).count();
      } else {
        n->backward_fn(*n);
      }
    }
    if (!n->leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
  if (op_seconds) {
    std::fprintf(stderr, "backward profile:\n");
    for (const auto& [op, secs] : *op_seconds) std::fprintf(stderr, "  %-18s %.4f s\n", op.c_str(), secs);
  }
}

// ---- broadcasting ----

namespace {

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const int ra = static_cast<int>(a.size());
  const int rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Shape out(r);
  for (int d = 0; d < r; ++d) {
    const int ea = d < r - ra ? 1 : a[d - (r - ra)];
    const int eb = d < r - rb ? 1 : b[d - (r - rb)];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcastable");
    }
    out[d] = std::max(ea, eb);
  }
  return out;
}

// Strides of `s` right-aligned against `out`, zero on broadcast dims.
std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  const int rs = static_cast<int>(s.size());
  const int r = static_cast<int>(out.size());
  const auto own = row_major_strides(s);
  std::vector<std::int64_t> strides(r, 0);
  for (int d = 0; d < rs; ++d) {
    const int od = d + (r - rs);
    strides[od] = (s[d] == 1 && out[od] != 1) ? 0 : own[d];
  }
  return strides;
}

// Walks the broadcast iteration space, calling visit(out_flat, a_off, b_off).
template <typename Visit>
void broadcast_walk(const Shape& out, const std::vector<std::int64_t>& astr,
                    const std::vector<std::int64_t>& bstr, Visit&& visit) {
  const std::int64_t n = shape_size(out);
  const int r = static_cast<int>(out.size());
  if (r == 0) {
    visit(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ao = 0, bo = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    visit(i, ao, bo);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      ao += astr[d];
      bo += bstr[d];
      if (idx[d] < out[d]) break;
      idx[d] = 0;
      ao -= astr[d] * out[d];
      bo -= bstr[d] * out[d];
    }
  }
}

enum class BinaryKind { Add, Sub, Mul };

Tensor binary_elementwise(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), name);
  const auto astr = broadcast_strides(a.shape(), out_shape);
  const auto bstr = broadcast_strides(b.shape(), out_shape);
  const std::int64_t n = shape_size(out_shape);
  std::vector<double> out(static_cast<std::size_t>(n));

  const double* ap = a.data().data();
  const double* bp = b.data().data();
  if (a.shape() == b.shape()) {
    // Contiguous fast path.
    switch (kind) {
      case BinaryKind::Add:
        for (std::int64_t i = 0; i < n; ++i) out[i] = ap[i] + bp[i];
        break;
      case BinaryKind::Sub:
        for (std::int64_t i = 0; i < n; ++i) out[i] = ap[i] - bp[i];
        break;
      case BinaryKind::Mul:
        for (std::int64_t i = 0; i < n; ++i) out[i] = ap[i] * bp[i];
        break;
    }
  } else {
    broadcast_walk(out_shape, astr, bstr, [&](std::int64_t i, std::int64_t ao, std::int64_t bo) {
      switch (kind) {
        case BinaryKind::Add: out[i] = ap[ao] + bp[bo]; break;
        case BinaryKind::Sub: out[i] = ap[ao] - bp[bo]; break;
        case BinaryKind::Mul: out[i] = ap[ao] * bp[bo]; break;
      }
    });
  }

  Shape oshape = out_shape;
  return make_op_output(
      std::move(oshape), std::move(out), name, {a, b},
      [out_shape, astr, bstr, kind](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        const double* g = self.grad.data();
        const bool ga = pa->requires_grad;
        const bool gb = pb->requires_grad;
        if (ga) pa->ensure_grad();
        if (gb) pb->ensure_grad();
        const double* av = pa->data.data();
        const double* bv = pb->data.data();

        if (pa->shape == pb->shape) {
          // Contiguous fast path; disjoint ranges parallelize safely.
          double* dga = ga ? pa->grad.data() : nullptr;
          double* dgb = gb ? pb->grad.data() : nullptr;
          const auto run = [&](std::int64_t lo, std::int64_t hi) {
            switch (kind) {
              case BinaryKind::Add:
                for (std::int64_t i = lo; i < hi; ++i) {
                  if (dga) dga[i] += g[i];
                  if (dgb) dgb[i] += g[i];
                }
                break;
              case BinaryKind::Sub:
                for (std::int64_t i = lo; i < hi; ++i) {
                  if (dga) dga[i] += g[i];
                  if (dgb) dgb[i] -= g[i];
                }
                break;
              case BinaryKind::Mul:
                for (std::int64_t i = lo; i < hi; ++i) {
                  if (dga) dga[i] += g[i] * bv[i];
                  if (dgb) dgb[i] += g[i] * av[i];
                }
                break;
            }
          };
          if (self.size() >= kParallelUnaryThreshold) {
            parallel_for(self.size(), run);
          } else {
            run(0, self.size());
          }
          return;
        }

        broadcast_walk(out_shape, astr, bstr, [&](std::int64_t i, std::int64_t ao, std::int64_t bo) {
          switch (kind) {
            case BinaryKind::Add:
              if (ga) pa->grad[ao] += g[i];
              if (gb) pb->grad[bo] += g[i];
              break;
            case BinaryKind::Sub:
              if (ga) pa->grad[ao] += g[i];
              if (gb) pb->grad[bo] -= g[i];
              break;
            case BinaryKind::Mul:
              if (ga) pa->grad[ao] += g[i] * bv[bo];
              if (gb) pb->grad[bo] += g[i] * av[ao];
              break;
          }
        });
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinaryKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinaryKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinaryKind::Mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  const std::int64_t n = x.size();
  std::vector<double> out(static_cast<std::size_t>(n));
  const double* xp = x.data().data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = xp[i] * factor;
  return make_op_output(x.shape(), std::move(out), "scale", {x}, [factor](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    for (std::int64_t i = 0; i < self.size(); ++i) p->grad[i] += g[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  const std::int64_t n = x.size();
  std::vector<double> out(static_cast<std::size_t>(n));
  const double* xp = x.data().data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = xp[i] + value;
  return make_op_output(x.shape(), std::move(out), "add_scalar", {x}, [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    for (std::int64_t i = 0; i < self.size(); ++i) p->grad[i] += g[i];
  });
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& x) {
  const std::int64_t n = x.size();
  std::vector<double> out(static_cast<std::size_t>(n));
  const double* xp = x.data().data();
  const auto run = [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      out[i] = 0.5 * xp[i] * (1.0 + std::erf(xp[i] * kInvSqrt2));
    }
  };
  if (n >= kParallelUnaryThreshold) {
    parallel_for(n, run);
  } else {
    run(0, n);
  }
  return make_op_output(x.shape(), std::move(out), "gelu", {x}, [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    const double* xv = p->data.data();
    double* dst = p->grad.data();
    const auto run = [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(xv[i] * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv[i] * xv[i]);
        dst[i] += g[i] * (cdf + xv[i] * pdf);
      }
    };
    if (self.size() >= kParallelUnaryThreshold) {
      parallel_for(self.size(), run);
    } else {
      run(0, self.size());
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  const std::int64_t n = x.size();
  std::vector<double> out(static_cast<std::size_t>(n));
  const double* xp = x.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = xp[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_op_output(x.shape(), std::move(out), "sigmoid", {x}, [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    const double* y = self.data.data();
    for (std::int64_t i = 0; i < self.size(); ++i) p->grad[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

// ---- matmul ----

namespace {

constexpr std::int64_t kParallelFlopThreshold = 1 << 21;

constexpr std::int64_t kMatmulKTile = 64;

// C[m,:] (+)= A[m,:] * B, saxpy over k. k is tiled so a B tile stays cache
// resident across the row range; per-cell accumulation order is unchanged
// (k ascending), so tiling is bit-identical to the plain loop.
void mm_rows(const double* a, const double* b, double* c, std::int64_t m_begin, std::int64_t m_end,
             std::int64_t K, std::int64_t N, bool accumulate) {
  if (!accumulate) {
    for (std::int64_t m = m_begin; m < m_end; ++m) {
      std::memset(c + m * N, 0, sizeof(double) * static_cast<std::size_t>(N));
    }
  }
  for (std::int64_t k0 = 0; k0 < K; k0 += kMatmulKTile) {
    const std::int64_t k1 = std::min(K, k0 + kMatmulKTile);
    std::int64_t m = m_begin;
    // 4-row micro-kernel: each B row is loaded once for four output rows.
    for (; m + 4 <= m_end; m += 4) {
      double* c0 = c + m * N;
      double* c1 = c0 + N;
      double* c2 = c1 + N;
      double* c3 = c2 + N;
      const double* a0 = a + m * K;
      const double* a1 = a0 + K;
      const double* a2 = a1 + K;
      const double* a3 = a2 + K;
      for (std::int64_t k = k0; k < k1; ++k) {
        const double av0 = a0[k], av1 = a1[k], av2 = a2[k], av3 = a3[k];
        const double* brow = b + k * N;
        for (std::int64_t n = 0; n < N; ++n) {
          const double bv = brow[n];
          c0[n] += av0 * bv;
          c1[n] += av1 * bv;
          c2[n] += av2 * bv;
          c3[n] += av3 * bv;
        }
      }
    }
    for (; m < m_end; ++m) {
      double* crow = c + m * N;
      const double* arow = a + m * K;
      for (std::int64_t k = k0; k < k1; ++k) {
        const double av = arow[k];
        const double* brow = b + k * N;
        for (std::int64_t n = 0; n < N; ++n) crow[n] += av * brow[n];
      }
    }
  }
}

// Dot product with eight independent accumulators; the fixed reduction order
// keeps results deterministic while breaking the serial dependency chain that
// blocks vectorization of a plain `acc +=` loop.
double dot_unrolled(const double* a, const double* b, std::int64_t n) {
  double acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0, acc4 = 0, acc5 = 0, acc6 = 0, acc7 = 0;
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 += a[i] * b[i];
    acc1 += a[i + 1] * b[i + 1];
    acc2 += a[i + 2] * b[i + 2];
    acc3 += a[i + 3] * b[i + 3];
    acc4 += a[i + 4] * b[i + 4];
    acc5 += a[i + 5] * b[i + 5];
    acc6 += a[i + 6] * b[i + 6];
    acc7 += a[i + 7] * b[i + 7];
  }
  double acc = ((acc0 + acc1) + (acc2 + acc3)) + ((acc4 + acc5) + (acc6 + acc7));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// C[m,k] += sum_n A[m,n] * B[k,n]  (i.e. A * B^T with B stored row-major
// [K,N]); k tiled so B rows stay cache resident across the row range.
void mm_nt_rows(const double* a, const double* b, double* c, std::int64_t m_begin,
                std::int64_t m_end, std::int64_t N, std::int64_t K) {
  for (std::int64_t k0 = 0; k0 < K; k0 += kMatmulKTile) {
    const std::int64_t k1 = std::min(K, k0 + kMatmulKTile);
    for (std::int64_t m = m_begin; m < m_end; ++m) {
      const double* arow = a + m * N;
      double* crow = c + m * K;
      for (std::int64_t k = k0; k < k1; ++k) {
        crow[k] += dot_unrolled(arow, b + k * N, N);
      }
    }
  }
}

// C[k, n0:n1] += sum_m A[m,k] * B[m, n0:n1]  (i.e. A^T * B). Column-sliced so
// callers can parallelize over n without write races.
void mm_tn_cols(const double* a, const double* b, double* c, std::int64_t M, std::int64_t K,
                std::int64_t N, std::int64_t n_begin, std::int64_t n_end) {
  for (std::int64_t m = 0; m < M; ++m) {
    const double* arow = a + m * K;
    const double* brow = b + m * N;
    for (std::int64_t k = 0; k < K; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      double* crow = c + k * N;
      for (std::int64_t n = n_begin; n < n_end; ++n) crow[n] += av * brow[n];
    }
  }
}

struct MatmulPlan {
  std::int64_t batch = 1;
  std::int64_t M = 0, K = 0, N = 0;
  std::vector<std::int64_t> a_off;  // per-batch element offsets of the [M,K] block
  std::vector<std::int64_t> b_off;  // per-batch element offsets of the [K,N] block
  bool a_batch_injective = true;
  bool b_batch_injective = true;
  Shape out_shape;
};

MatmulPlan plan_matmul(const Shape& sa, const Shape& sb) {
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(sa) + " x " +
                     shape_str(sb));
  }
  MatmulPlan plan;
  plan.M = sa[sa.size() - 2];
  plan.K = sa[sa.size() - 1];
  plan.N = sb[sb.size() - 1];
  const std::int64_t kb = sb[sb.size() - 2];
  if (plan.K != kb) {
    throw ShapeError("matmul: inner extents disagree, " + shape_str(sa) + " x " + shape_str(sb));
  }

  // Rank-2 right operand: fold all left batch/row dims into one row count.
  if (sb.size() == 2) {
    plan.batch = 1;
    plan.M = shape_size(sa) / plan.K;
    plan.a_off = {0};
    plan.b_off = {0};
    plan.out_shape = sa;
    plan.out_shape.back() = static_cast<int>(plan.N);
    return plan;
  }

  const Shape a_batch(sa.begin(), sa.end() - 2);
  const Shape b_batch(sb.begin(), sb.end() - 2);
  const Shape batch = broadcast_shapes(a_batch, b_batch, "matmul");
  plan.batch = shape_size(batch);
  plan.out_shape = batch;
  plan.out_shape.push_back(static_cast<int>(plan.M));
  plan.out_shape.push_back(static_cast<int>(plan.N));

  const auto astr = broadcast_strides(a_batch, batch);
  const auto bstr = broadcast_strides(b_batch, batch);
  plan.a_off.resize(static_cast<std::size_t>(plan.batch));
  plan.b_off.resize(static_cast<std::size_t>(plan.batch));
  broadcast_walk(batch, astr, bstr, [&](std::int64_t i, std::int64_t ao, std::int64_t bo) {
    plan.a_off[i] = ao * plan.M * plan.K;
    plan.b_off[i] = bo * plan.K * plan.N;
  });
  plan.a_batch_injective = shape_size(a_batch) == plan.batch;
  plan.b_batch_injective = shape_size(b_batch) == plan.batch;
  return plan;
}

}  // namespace

void set_matmul_flop_counting(bool enabled) { g_count_flops.store(enabled); }
void reset_matmul_flop_count() { g_matmul_flops.store(0); }
std::uint64_t matmul_flop_count() { return g_matmul_flops.load(); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  const MatmulPlan plan = plan_matmul(a.shape(), b.shape());
  const std::int64_t flops = 2 * plan.batch * plan.M * plan.N * plan.K;
  if (g_count_flops.load(std::memory_order_relaxed)) {
    g_matmul_flops.fetch_add(static_cast<std::uint64_t>(flops));
  }

  std::vector<double> out(static_cast<std::size_t>(plan.batch * plan.M * plan.N));
  const double* ap = a.data().data();
  const double* bp = b.data().data();

  const std::int64_t total_rows = plan.batch * plan.M;
  const auto run_rows = [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t bi = begin / plan.M; bi <= (end - 1) / plan.M; ++bi) {
      const std::int64_t lo = std::max(begin, bi * plan.M) - bi * plan.M;
      const std::int64_t hi = std::min(end, (bi + 1) * plan.M) - bi * plan.M;
      mm_rows(ap + plan.a_off[bi], bp + plan.b_off[bi], out.data() + bi * plan.M * plan.N, lo, hi,
              plan.K, plan.N, false);
    }
  };
  if (flops >= kParallelFlopThreshold) {
    parallel_for(total_rows, run_rows);
  } else {
    run_rows(0, total_rows);
  }

  return make_op_output(
      plan.out_shape, std::move(out), "matmul", {a, b}, [plan](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        const double* g = self.grad.data();
        const double* av = pa->data.data();
        const double* bv = pb->data.data();
        const std::int64_t M = plan.M, K = plan.K, N = plan.N;

        if (pa->requires_grad) {
          pa->ensure_grad();
          double* ga = pa->grad.data();
          // dA = dC * B^T per batch element.
          const auto run = [&](std::int64_t bi_begin, std::int64_t bi_end) {
            for (std::int64_t bi = bi_begin; bi < bi_end; ++bi) {
              mm_nt_rows(g + bi * M * N, bv + plan.b_off[bi], ga + plan.a_off[bi], 0, M, N, K);
            }
          };
          if (plan.a_batch_injective && plan.batch > 1 && 2 * plan.batch * M * N * K >= kParallelFlopThreshold) {
            parallel_for(plan.batch, run);
          } else if (plan.batch == 1 && 2 * M * N * K >= kParallelFlopThreshold) {
            parallel_for(M, [&](std::int64_t lo, std::int64_t hi) {
              mm_nt_rows(g, bv + plan.b_off[0], ga + plan.a_off[0], lo, hi, N, K);
            });
          } else {
            run(0, plan.batch);
          }
        }

        if (pb->requires_grad) {
          pb->ensure_grad();
          double* gb = pb->grad.data();
          // dB = A^T * dC per batch element; column-sliced when B is shared.
          if (plan.b_batch_injective && plan.batch > 1) {
            const auto run = [&](std::int64_t bi_begin, std::int64_t bi_end) {
              for (std::int64_t bi = bi_begin; bi < bi_end; ++bi) {
                mm_tn_cols(av + plan.a_off[bi], g + bi * M * N, gb + plan.b_off[bi], M, K, N, 0, N);
              }
            };
            if (2 * plan.batch * M * N * K >= kParallelFlopThreshold) {
              parallel_for(plan.batch, run);
            } else {
              run(0, plan.batch);
            }
          } else if (plan.batch == 1) {
            if (2 * M * N * K >= kParallelFlopThreshold) {
              parallel_for(N, [&](std::int64_t n0, std::int64_t n1) {
                mm_tn_cols(av, g, gb, M, K, N, n0, n1);
              });
            } else {
              mm_tn_cols(av, g, gb, M, K, N, 0, N);
            }
          } else {
            for (std::int64_t bi = 0; bi < plan.batch; ++bi) {
              mm_tn_cols(av + plan.a_off[bi], g + bi * M * N, gb + plan.b_off[bi], M, K, N, 0, N);
            }
          }
        }
      });
}

// ---- softmax ----

namespace {

int canonical_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  }
  return a;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  const int ax = canonical_axis(axis, static_cast<int>(s.size()), "softmax");
  const std::int64_t lanes = s[ax];
  std::int64_t inner = 1;
  for (std::size_t d = ax + 1; d < s.size(); ++d) inner *= s[d];
  const std::int64_t outer = x.size() / (lanes * inner);

  std::vector<double> out(static_cast<std::size_t>(x.size()));
  const double* xp = x.data().data();
  const auto run_fwd = [&](std::int64_t o0, std::int64_t o1) {
    for (std::int64_t o = o0; o < o1; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * lanes * inner + i;
        double mx = xp[base];
        for (std::int64_t l = 1; l < lanes; ++l) mx = std::max(mx, xp[base + l * inner]);
        double denom = 0.0;
        for (std::int64_t l = 0; l < lanes; ++l) {
          const double e = std::exp(xp[base + l * inner] - mx);
          out[base + l * inner] = e;
          denom += e;
        }
        const double inv = 1.0 / denom;
        for (std::int64_t l = 0; l < lanes; ++l) out[base + l * inner] *= inv;
      }
    }
  };
  if (x.size() >= kParallelUnaryThreshold && outer > 1) {
    parallel_for(outer, run_fwd);
  } else {
    run_fwd(0, outer);
  }

  return make_op_output(s, std::move(out), "softmax", {x}, [lanes, inner, outer](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    const double* y = self.data.data();
    double* dx = p->grad.data();
    const auto run = [&](std::int64_t o0, std::int64_t o1) {
      for (std::int64_t o = o0; o < o1; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = o * lanes * inner + i;
          double dot = 0.0;
          for (std::int64_t l = 0; l < lanes; ++l) {
            dot += g[base + l * inner] * y[base + l * inner];
          }
          for (std::int64_t l = 0; l < lanes; ++l) {
            const std::int64_t k = base + l * inner;
            dx[k] += y[k] * (g[k] - dot);
          }
        }
      }
    };
    if (self.size() >= kParallelUnaryThreshold && outer > 1) {
      parallel_for(outer, run);
    } else {
      run(0, outer);
    }
  });
}

// ---- layer_norm ----

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive, got " + std::to_string(eps));
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("layer_norm: input must have rank >= 1");
  const std::int64_t D = s.back();
  const auto check_param = [&](const Tensor& t, const char* name) {
    if (t.rank() != 1 || t.shape()[0] != D) {
      throw ShapeError(std::string("layer_norm: ") + name + " must have shape [" +
                       std::to_string(D) + "], got " + shape_str(t.shape()));
    }
  };
  check_param(gain, "gain");
  check_param(bias, "bias");

  const std::int64_t rows = x.size() / D;
  std::vector<double> out(static_cast<std::size_t>(x.size()));
  auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows) * 2);

  const double* xp = x.data().data();
  const double* gp = gain.data().data();
  const double* bp = bias.data().data();
  const auto run_rows = [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const double* row = xp + r * D;
      double mu = 0.0;
      for (std::int64_t d = 0; d < D; ++d) mu += row[d];
      mu /= static_cast<double>(D);
      double var = 0.0;
      for (std::int64_t d = 0; d < D; ++d) {
        const double c = row[d] - mu;
        var += c * c;
      }
      var /= static_cast<double>(D);
      const double inv = 1.0 / std::sqrt(var + eps);
      (*stats)[2 * r] = mu;
      (*stats)[2 * r + 1] = inv;
      double* orow = out.data() + r * D;
      for (std::int64_t d = 0; d < D; ++d) orow[d] = (row[d] - mu) * inv * gp[d] + bp[d];
    }
  };
  if (rows * D >= kParallelUnaryThreshold) {
    parallel_for(rows, run_rows);
  } else {
    run_rows(0, rows);
  }

  return make_op_output(s, std::move(out), "layer_norm", {x, gain, bias}, [D, rows, stats](Node& self) {
    Node* px = self.parents[0].get();
    Node* pg = self.parents[1].get();
    Node* pb = self.parents[2].get();
    const double* g = self.grad.data();
    const double* xv = px->data.data();
    const double* gv = pg->data.data();
    if (px->requires_grad) px->ensure_grad();
    if (pg->requires_grad) pg->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    const double invD = 1.0 / static_cast<double>(D);

    // dx rows are independent; gain/bias accumulate across all rows and are
    // reduced single-threaded afterwards to keep summation order fixed.
    if (px->requires_grad) {
      double* dx = px->grad.data();
      const auto run = [&](std::int64_t r0, std::int64_t r1) {
        for (std::int64_t r = r0; r < r1; ++r) {
          const double mu = (*stats)[2 * r];
          const double inv = (*stats)[2 * r + 1];
          const double* xrow = xv + r * D;
          const double* grow = g + r * D;
          double m1 = 0.0, m2 = 0.0;  // mean(dxh), mean(dxh*xh)
          for (std::int64_t d = 0; d < D; ++d) {
            const double xh = (xrow[d] - mu) * inv;
            const double dxh = grow[d] * gv[d];
            m1 += dxh;
            m2 += dxh * xh;
          }
          m1 *= invD;
          m2 *= invD;
          for (std::int64_t d = 0; d < D; ++d) {
            const double xh = (xrow[d] - mu) * inv;
            dx[r * D + d] += inv * (grow[d] * gv[d] - m1 - xh * m2);
          }
        }
      };
      if (rows * D >= kParallelUnaryThreshold) {
        parallel_for(rows, run);
      } else {
        run(0, rows);
      }
    }
    if (pg->requires_grad || pb->requires_grad) {
      for (std::int64_t r = 0; r < rows; ++r) {
        const double mu = (*stats)[2 * r];
        const double inv = (*stats)[2 * r + 1];
        const double* xrow = xv + r * D;
        const double* grow = g + r * D;
        for (std::int64_t d = 0; d < D; ++d) {
          if (pg->requires_grad) pg->grad[d] += grow[d] * ((xrow[d] - mu) * inv);
          if (pb->requires_grad) pb->grad[d] += grow[d];
        }
      }
    }
  });
}

// ---- conv2d (im2col + matmul kernels) ----

namespace {

struct ConvDims {
  std::int64_t B, C, H, W, O, k, stride, pad, Ho, Wo;
  bool squeeze_batch;
};

ConvDims conv_dims(const Shape& xs, const Shape& ks, int stride, int pad) {
  ConvDims d{};
  d.squeeze_batch = xs.size() == 3;
  if (xs.size() != 4 && xs.size() != 3) {
    throw ShapeError("conv2d: input must be [B,C,H,W] or [C,H,W], got " + shape_str(xs));
  }
  if (ks.size() != 4) throw ShapeError("conv2d: kernel must be [O,C,k,k], got " + shape_str(ks));
  const int off = d.squeeze_batch ? 0 : 1;
  d.B = d.squeeze_batch ? 1 : xs[0];
  d.C = xs[off];
  d.H = xs[off + 1];
  d.W = xs[off + 2];
  d.O = ks[0];
  d.k = ks[2];
  if (ks[1] != d.C) {
    throw ShapeError("conv2d: kernel channels " + std::to_string(ks[1]) + " vs input channels " +
                     std::to_string(d.C));
  }
  if (ks[2] != ks[3]) throw ShapeError("conv2d: kernel must be square, got " + shape_str(ks));
  if (d.k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd, got " + std::to_string(d.k));
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (pad < 0) throw ConfigError("conv2d: pad must be >= 0");
  d.stride = stride;
  d.pad = pad;
  d.Ho = (d.H + 2 * pad - d.k) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.k) / stride + 1;
  if (d.H + 2 * pad < d.k || d.W + 2 * pad < d.k || d.Ho <= 0 || d.Wo <= 0) {
    throw ConfigError("conv2d: non-positive output extent for input " + shape_str(xs) +
                      ", kernel " + std::to_string(d.k) + ", stride " + std::to_string(stride) +
                      ", pad " + std::to_string(pad));
  }
  return d;
}

// Valid index range [lo, hi) of an output coordinate `o` such that
// o*stride - pad + tap stays inside [0, extent).
struct TapRange {
  std::int64_t lo, hi;
};

TapRange tap_range(std::int64_t tap, std::int64_t pad, std::int64_t stride, std::int64_t in_extent,
                   std::int64_t out_extent) {
  const std::int64_t shift = pad - tap;  // o*stride >= shift
  std::int64_t lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
  std::int64_t hi = (in_extent - 1 - tap + pad) / stride + 1;
  lo = std::max<std::int64_t>(lo, 0);
  hi = std::min(hi, out_extent);
  return {lo, std::max(lo, hi)};
}

// y[b,o] plane, one (b,o) pair per call: saxpy rows over every (c,u,v) tap.
void conv_fwd_plane(const double* x, const double* kernel, double* yplane, const ConvDims& d,
                    std::int64_t b, std::int64_t o) {
  std::memset(yplane, 0, sizeof(double) * static_cast<std::size_t>(d.Ho * d.Wo));
  for (std::int64_t c = 0; c < d.C; ++c) {
    const double* xplane = x + (b * d.C + c) * d.H * d.W;
    for (std::int64_t u = 0; u < d.k; ++u) {
      const TapRange ohr = tap_range(u, d.pad, d.stride, d.H, d.Ho);
      for (std::int64_t v = 0; v < d.k; ++v) {
        const double kval = kernel[((o * d.C + c) * d.k + u) * d.k + v];
        const TapRange owr = tap_range(v, d.pad, d.stride, d.W, d.Wo);
        const std::int64_t n = owr.hi - owr.lo;
        for (std::int64_t oh = ohr.lo; oh < ohr.hi; ++oh) {
          const double* xrow = xplane + (oh * d.stride - d.pad + u) * d.W +
                               (owr.lo * d.stride - d.pad + v);
          double* yrow = yplane + oh * d.Wo + owr.lo;
          if (d.stride == 1) {
            for (std::int64_t i = 0; i < n; ++i) yrow[i] += kval * xrow[i];
          } else {
            for (std::int64_t i = 0; i < n; ++i) yrow[i] += kval * xrow[i * d.stride];
          }
        }
      }
    }
  }
}

// dx[b,c] plane, one (b,c) pair per call.
void conv_bwd_input_plane(const double* dy, const double* kernel, double* dxplane,
                          const ConvDims& d, std::int64_t b, std::int64_t c) {
  for (std::int64_t o = 0; o < d.O; ++o) {
    const double* gplane = dy + (b * d.O + o) * d.Ho * d.Wo;
    for (std::int64_t u = 0; u < d.k; ++u) {
      const TapRange ohr = tap_range(u, d.pad, d.stride, d.H, d.Ho);
      for (std::int64_t v = 0; v < d.k; ++v) {
        const double kval = kernel[((o * d.C + c) * d.k + u) * d.k + v];
        const TapRange owr = tap_range(v, d.pad, d.stride, d.W, d.Wo);
        const std::int64_t n = owr.hi - owr.lo;
        for (std::int64_t oh = ohr.lo; oh < ohr.hi; ++oh) {
          const double* grow = gplane + oh * d.Wo + owr.lo;
          double* dxrow = dxplane + (oh * d.stride - d.pad + u) * d.W +
                          (owr.lo * d.stride - d.pad + v);
          if (d.stride == 1) {
            for (std::int64_t i = 0; i < n; ++i) dxrow[i] += kval * grow[i];
          } else {
            for (std::int64_t i = 0; i < n; ++i) dxrow[i * d.stride] += kval * grow[i];
          }
        }
      }
    }
  }
}

// dK[o,:,:,:] slice, one output channel per call: strided row dots.
void conv_bwd_kernel_slice(const double* x, const double* dy, double* dk, const ConvDims& d,
                           std::int64_t o) {
  for (std::int64_t c = 0; c < d.C; ++c) {
    for (std::int64_t u = 0; u < d.k; ++u) {
      const TapRange ohr = tap_range(u, d.pad, d.stride, d.H, d.Ho);
      for (std::int64_t v = 0; v < d.k; ++v) {
        const TapRange owr = tap_range(v, d.pad, d.stride, d.W, d.Wo);
        const std::int64_t n = owr.hi - owr.lo;
        double acc = 0.0;
        for (std::int64_t b = 0; b < d.B; ++b) {
          const double* gplane = dy + (b * d.O + o) * d.Ho * d.Wo;
          const double* xplane = x + (b * d.C + c) * d.H * d.W;
          for (std::int64_t oh = ohr.lo; oh < ohr.hi; ++oh) {
            const double* grow = gplane + oh * d.Wo + owr.lo;
            const double* xrow = xplane + (oh * d.stride - d.pad + u) * d.W +
                                 (owr.lo * d.stride - d.pad + v);
            if (d.stride == 1) {
              acc += dot_unrolled(grow, xrow, n);
            } else {
              double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
              std::int64_t i = 0;
              for (; i + 4 <= n; i += 4) {
                a0 += grow[i] * xrow[i * d.stride];
                a1 += grow[i + 1] * xrow[(i + 1) * d.stride];
                a2 += grow[i + 2] * xrow[(i + 2) * d.stride];
                a3 += grow[i + 3] * xrow[(i + 3) * d.stride];
              }
              acc += (a0 + a1) + (a2 + a3);
              for (; i < n; ++i) acc += grow[i] * xrow[i * d.stride];
            }
          }
        }
        dk[((o * d.C + c) * d.k + u) * d.k + v] += acc;
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad) {
  const ConvDims d = conv_dims(x.shape(), kernel.shape(), stride, pad);
  const std::int64_t R = d.Ho * d.Wo;
  const std::int64_t flops = 2 * d.B * d.O * d.C * d.k * d.k * R;

  std::vector<double> out(static_cast<std::size_t>(d.B * d.O * R));
  const double* xp = x.data().data();
  const double* kp = kernel.data().data();
  const auto run_fwd = [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const std::int64_t b = t / d.O;
      const std::int64_t o = t % d.O;
      conv_fwd_plane(xp, kp, out.data() + t * R, d, b, o);
    }
  };
  if (flops >= kParallelFlopThreshold && d.B * d.O > 1) {
    parallel_for(d.B * d.O, run_fwd);
  } else {
    run_fwd(0, d.B * d.O);
  }

  Shape out_shape = d.squeeze_batch
                        ? Shape{static_cast<int>(d.O), static_cast<int>(d.Ho), static_cast<int>(d.Wo)}
                        : Shape{static_cast<int>(d.B), static_cast<int>(d.O), static_cast<int>(d.Ho),
                                static_cast<int>(d.Wo)};

  return make_op_output(
      std::move(out_shape), std::move(out), "conv2d", {x, kernel}, [d, flops](Node& self) {
        Node* px = self.parents[0].get();
        Node* pk = self.parents[1].get();
        const double* g = self.grad.data();
        const double* xv = px->data.data();
        const double* kv = pk->data.data();

        if (px->requires_grad) {
          px->ensure_grad();
          double* dx = px->grad.data();
          const auto run = [&](std::int64_t t0, std::int64_t t1) {
            for (std::int64_t t = t0; t < t1; ++t) {
              conv_bwd_input_plane(g, kv, dx + t * d.H * d.W, d, t / d.C, t % d.C);
            }
          };
          if (flops >= kParallelFlopThreshold && d.B * d.C > 1) {
            parallel_for(d.B * d.C, run);
          } else {
            run(0, d.B * d.C);
          }
        }
        if (pk->requires_grad) {
          pk->ensure_grad();
          double* dk = pk->grad.data();
          const auto run = [&](std::int64_t o0, std::int64_t o1) {
            for (std::int64_t o = o0; o < o1; ++o) conv_bwd_kernel_slice(xv, g, dk, d, o);
          };
          if (flops >= kParallelFlopThreshold && d.O > 1) {
            parallel_for(d.O, run);
          } else {
            run(0, d.O);
          }
        }
      });
}

// ---- bilinear upsample ----

namespace {

struct AxisTaps {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> w_hi;  // weight of hi tap; lo gets (1 - w_hi)
};

AxisTaps bilinear_taps(std::int64_t in, std::int64_t out) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_hi.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t d = 0; d < out; ++d) {
    const double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    const double floor_src = std::floor(src);
    std::int64_t i0 = static_cast<std::int64_t>(floor_src);
    double f = src - floor_src;
    if (i0 < 0) {
      i0 = 0;
      f = 0.0;
    }
    std::int64_t i1 = i0 + 1;
    if (i1 > in - 1) {
      i1 = in - 1;
      if (i0 > in - 1) i0 = in - 1;
      if (i0 == i1) f = 0.0;
    }
    t.lo[d] = i0;
    t.hi[d] = i1;
    t.w_hi[d] = f;
  }
  return t;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, int out_h, int out_w) {
  const Shape& s = x.shape();
  const bool squeeze = s.size() == 3;
  if (s.size() != 4 && s.size() != 3) {
    throw ShapeError("bilinear_upsample: input must be [B,C,H,W] or [C,H,W], got " + shape_str(s));
  }
  const std::int64_t B = squeeze ? 1 : s[0];
  const std::int64_t C = s[squeeze ? 0 : 1];
  const std::int64_t H = s[squeeze ? 1 : 2];
  const std::int64_t W = s[squeeze ? 2 : 3];
  if (out_h < H || out_w < W) {
    throw ConfigError("bilinear_upsample: target " + std::to_string(out_h) + "x" +
                      std::to_string(out_w) + " smaller than input " + std::to_string(H) + "x" +
                      std::to_string(W) + " (upsample only)");
  }

  const AxisTaps th = bilinear_taps(H, out_h);
  const AxisTaps tw = bilinear_taps(W, out_w);
  std::vector<double> out(static_cast<std::size_t>(B * C * out_h * out_w));
  const double* xp = x.data().data();
  const auto run_planes = [&](std::int64_t bc0, std::int64_t bc1) {
    for (std::int64_t bc = bc0; bc < bc1; ++bc) {
      const double* plane = xp + bc * H * W;
      double* oplane = out.data() + bc * out_h * out_w;
      for (std::int64_t oh = 0; oh < out_h; ++oh) {
        const double fh = th.w_hi[oh];
        const double* r0 = plane + th.lo[oh] * W;
        const double* r1 = plane + th.hi[oh] * W;
        double* orow = oplane + oh * out_w;
        for (std::int64_t ow = 0; ow < out_w; ++ow) {
          const double fw = tw.w_hi[ow];
          const double top = r0[tw.lo[ow]] * (1.0 - fw) + r0[tw.hi[ow]] * fw;
          const double bot = r1[tw.lo[ow]] * (1.0 - fw) + r1[tw.hi[ow]] * fw;
          orow[ow] = top * (1.0 - fh) + bot * fh;
        }
      }
    }
  };
  if (B * C > 1 && B * C * out_h * out_w >= kParallelUnaryThreshold) {
    parallel_for(B * C, run_planes);
  } else {
    run_planes(0, B * C);
  }

  Shape out_shape = squeeze ? Shape{static_cast<int>(C), out_h, out_w}
                            : Shape{static_cast<int>(B), static_cast<int>(C), out_h, out_w};
  const std::int64_t oh64 = out_h, ow64 = out_w;
  return make_op_output(
      std::move(out_shape), std::move(out), "bilinear_upsample", {x},
      [B, C, H, W, oh64, ow64, th, tw](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double* g = self.grad.data();
        // Planes are write-disjoint.
        const auto run = [&](std::int64_t bc0, std::int64_t bc1) {
          for (std::int64_t bc = bc0; bc < bc1; ++bc) {
            double* dplane = p->grad.data() + bc * H * W;
            const double* gplane = g + bc * oh64 * ow64;
            for (std::int64_t oh = 0; oh < oh64; ++oh) {
              const double fh = th.w_hi[oh];
              double* d0 = dplane + th.lo[oh] * W;
              double* d1 = dplane + th.hi[oh] * W;
              const double* grow = gplane + oh * ow64;
              for (std::int64_t ow = 0; ow < ow64; ++ow) {
                const double fw = tw.w_hi[ow];
                const double gv = grow[ow];
                d0[tw.lo[ow]] += gv * (1.0 - fw) * (1.0 - fh);
                d0[tw.hi[ow]] += gv * fw * (1.0 - fh);
                d1[tw.lo[ow]] += gv * (1.0 - fw) * fh;
                d1[tw.hi[ow]] += gv * fw * fh;
              }
            }
          }
        };
        if (B * C > 1 && B * C * oh64 * ow64 >= kParallelUnaryThreshold) {
          parallel_for(B * C, run);
        } else {
          run(0, B * C);
        }
      });
}

// ---- shape ops ----

Tensor reshape(const Tensor& x, Shape shape) {
  validate_shape(shape, "reshape");
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op_output(std::move(shape), std::move(out), "reshape", {x}, [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    for (std::int64_t i = 0; i < self.size(); ++i) p->grad[i] += g[i];
  });
}

namespace {

// out[flat under out_shape] = in[flat under in_shape at permuted index].
// Chunked so disjoint output ranges can run on separate threads.
void permute_copy_range(const double* in, double* out, const Shape& out_shape,
                        const std::vector<std::int64_t>& strides, bool add, std::int64_t begin,
                        std::int64_t end) {
  const int r = static_cast<int>(out_shape.size());
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  {
    std::int64_t rem = begin;
    for (int d = r - 1; d >= 0; --d) {
      idx[d] = rem % out_shape[d];
      rem /= out_shape[d];
      off += idx[d] * strides[d];
    }
  }
  for (std::int64_t i = begin; i < end; ++i) {
    if (add) {
      out[i] += in[off];
    } else {
      out[i] = in[off];
    }
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      off += strides[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      off -= strides[d] * out_shape[d];
    }
  }
}

void permute_copy(const double* in, double* out, const Shape& in_shape,
                  const std::vector<int>& axes, bool add) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(r);
  for (int d = 0; d < r; ++d) out_shape[d] = in_shape[axes[d]];
  const auto in_strides = row_major_strides(in_shape);
  std::vector<std::int64_t> strides(r);
  for (int d = 0; d < r; ++d) strides[d] = in_strides[axes[d]];

  const std::int64_t n = shape_size(in_shape);
  if (n >= kParallelUnaryThreshold) {
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
      permute_copy_range(in, out, out_shape, strides, add, lo, hi);
    });
  } else {
    permute_copy_range(in, out, out_shape, strides, add, 0, n);
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (static_cast<int>(axes.size()) != r) {
    throw ShapeError("permute: axes count " + std::to_string(axes.size()) + " vs rank " +
                     std::to_string(r));
  }
  std::vector<bool> used(r, false);
  for (const int a : axes) {
    if (a < 0 || a >= r || used[a]) throw ShapeError("permute: axes must be a permutation of 0.." + std::to_string(r - 1));
    used[a] = true;
  }
  Shape out_shape(r);
  for (int d = 0; d < r; ++d) out_shape[d] = s[axes[d]];
  std::vector<double> out(static_cast<std::size_t>(x.size()));
  permute_copy(x.data().data(), out.data(), s, axes, false);

  // Backward permutes the gradient by the inverse axes.
  std::vector<int> inverse(r);
  for (int d = 0; d < r; ++d) inverse[axes[d]] = d;
  Shape fwd_out = out_shape;
  return make_op_output(std::move(out_shape), std::move(out), "permute", {x},
                        [inverse, fwd_out](Node& self) {
                          Node* p = self.parents[0].get();
                          if (!p->requires_grad) return;
                          p->ensure_grad();
                          permute_copy(self.grad.data(), p->grad.data(), fwd_out, inverse, true);
                        });
}

Tensor slice(const Tensor& x, int axis, int start, int stop) {
  const Shape& s = x.shape();
  const int ax = canonical_axis(axis, static_cast<int>(s.size()), "slice");
  if (start < 0 || stop > s[ax] || start >= stop) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(stop) +
                     ") invalid for extent " + std::to_string(s[ax]));
  }
  std::int64_t inner = 1;
  for (std::size_t d = ax + 1; d < s.size(); ++d) inner *= s[d];
  const std::int64_t outer = x.size() / (inner * s[ax]);
  const std::int64_t span = stop - start;

  Shape out_shape = s;
  out_shape[ax] = static_cast<int>(span);
  std::vector<double> out(static_cast<std::size_t>(outer * span * inner));
  const double* xp = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * span * inner, xp + (o * s[ax] + start) * inner,
                sizeof(double) * static_cast<std::size_t>(span * inner));
  }
  const std::int64_t extent = s[ax];
  return make_op_output(std::move(out_shape), std::move(out), "slice", {x},
                        [outer, inner, span, extent, start](Node& self) {
                          Node* p = self.parents[0].get();
                          if (!p->requires_grad) return;
                          p->ensure_grad();
                          const double* g = self.grad.data();
                          for (std::int64_t o = 0; o < outer; ++o) {
                            double* dst = p->grad.data() + (o * extent + start) * inner;
                            const double* src = g + o * span * inner;
                            for (std::int64_t i = 0; i < span * inner; ++i) dst[i] += src[i];
                          }
                        });
}

Tensor concat(std::span<const Tensor> tensors, int axis) {
  if (tensors.empty()) throw ShapeError("concat: needs at least one tensor");
  const Shape& first = tensors[0].shape();
  const int ax = canonical_axis(axis, static_cast<int>(first.size()), "concat");
  std::int64_t total_extent = 0;
  for (const Tensor& t : tensors) {
    const Shape& ts = t.shape();
    if (ts.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < ts.size(); ++d) {
      if (static_cast<int>(d) != ax && ts[d] != first[d]) {
        throw ShapeError("concat: shapes " + shape_str(first) + " and " + shape_str(ts) +
                         " differ outside axis " + std::to_string(ax));
      }
    }
    total_extent += ts[ax];
  }
  std::int64_t inner = 1;
  for (std::size_t d = ax + 1; d < first.size(); ++d) inner *= first[d];
  std::int64_t outer = 1;
  for (int d = 0; d < ax; ++d) outer *= first[d];

  Shape out_shape = first;
  out_shape[ax] = static_cast<int>(total_extent);
  std::vector<double> out(static_cast<std::size_t>(outer * total_extent * inner));
  std::vector<std::int64_t> extents;
  std::int64_t off = 0;
  for (const Tensor& t : tensors) {
    const std::int64_t e = t.shape()[ax];
    extents.push_back(e);
    const double* tp = t.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + (o * total_extent + off) * inner, tp + o * e * inner,
                  sizeof(double) * static_cast<std::size_t>(e * inner));
    }
    off += e;
  }

  std::vector<Tensor> parents(tensors.begin(), tensors.end());
  return make_op_output(std::move(out_shape), std::move(out), "concat", std::move(parents),
                        [outer, inner, total_extent, extents](Node& self) {
                          const double* g = self.grad.data();
                          std::int64_t off = 0;
                          for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                            Node* p = self.parents[pi].get();
                            const std::int64_t e = extents[pi];
                            if (p->requires_grad) {
                              p->ensure_grad();
                              for (std::int64_t o = 0; o < outer; ++o) {
                                double* dst = p->grad.data() + o * e * inner;
                                const double* src = g + (o * total_extent + off) * inner;
                                for (std::int64_t i = 0; i < e * inner; ++i) dst[i] += src[i];
                              }
                            }
                            off += e;
                          }
                        });
}

// ---- reductions & loss ----

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (const double v : x.data()) acc += v;
  return make_op_output({1}, {acc}, "sum", {x}, [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double g = self.grad[0];
    for (double& d : p->grad) d += g;
  });
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (const double v : x.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  return make_op_output({1}, {acc * inv}, "mean", {x}, [inv](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double g = self.grad[0] * inv;
    for (double& d : p->grad) d += g;
  });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("bce_with_logits: logits " + shape_str(logits.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  const std::int64_t n = logits.size();
  const double* x = logits.data().data();
  const double* z = targets.data().data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    acc += std::max(x[i], 0.0) - x[i] * z[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  const double inv = 1.0 / static_cast<double>(n);
  return make_op_output({1}, {acc * inv}, "bce_with_logits", {logits, targets}, [inv](Node& self) {
    Node* px = self.parents[0].get();
    Node* pz = self.parents[1].get();
    const double g = self.grad[0] * inv;
    const double* x = px->data.data();
    const double* z = pz->data.data();
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::int64_t i = 0; i < px->size(); ++i) {
        const double s = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                                     : std::exp(x[i]) / (1.0 + std::exp(x[i]));
        px->grad[i] += g * (s - z[i]);
      }
    }
    if (pz->requires_grad) {
      pz->ensure_grad();
      for (std::int64_t i = 0; i < pz->size(); ++i) pz->grad[i] += g * (-x[i]);
    }
  });
}

// ---- gather_rows ----

Tensor gather_rows(const Tensor& x, std::int64_t row_len, std::vector<std::int64_t> row_map,
                   Shape out_shape) {
  if (row_len <= 0) throw ShapeError("gather_rows: row_len must be positive");
  if (x.size() % row_len != 0) {
    throw ShapeError("gather_rows: input size " + std::to_string(x.size()) +
                     " not divisible by row_len " + std::to_string(row_len));
  }
  const std::int64_t in_rows = x.size() / row_len;
  const std::int64_t out_rows = static_cast<std::int64_t>(row_map.size());
  if (shape_size(out_shape) != out_rows * row_len) {
    throw ShapeError("gather_rows: out_shape " + shape_str(out_shape) + " does not hold " +
                     std::to_string(out_rows) + " rows of " + std::to_string(row_len));
  }
  for (const std::int64_t r : row_map) {
    if (r < 0 || r >= in_rows) throw ShapeError("gather_rows: row index out of range");
  }

  std::vector<double> out(static_cast<std::size_t>(out_rows * row_len));
  const double* xp = x.data().data();
  const auto copy_rows = [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      std::memcpy(out.data() + r * row_len, xp + row_map[r] * row_len,
                  sizeof(double) * static_cast<std::size_t>(row_len));
    }
  };
  if (out_rows * row_len >= kParallelUnaryThreshold) {
    parallel_for(out_rows, copy_rows);
  } else {
    copy_rows(0, out_rows);
  }

  auto map = std::make_shared<std::vector<std::int64_t>>(std::move(row_map));
  return make_op_output(std::move(out_shape), std::move(out), "gather_rows", {x},
                        [map, row_len, out_rows](Node& self) {
                          Node* p = self.parents[0].get();
                          if (!p->requires_grad) return;
                          p->ensure_grad();
                          const double* g = self.grad.data();
                          // Scatter rows may repeat in the map, so the
                          // accumulation stays single-threaded.
                          for (std::int64_t r = 0; r < out_rows; ++r) {
                            double* dst = p->grad.data() + (*map)[r] * row_len;
                            const double* src = g + r * row_len;
                            for (std::int64_t i = 0; i < row_len; ++i) dst[i] += src[i];
                          }
                        });
}

// ---- finite differences ----

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         const FiniteDiffOptions& opts) {
  if (opts.step <= 0.0) throw ConfigError("finite_diff_check: step must be positive");
  const Shape shape = x.shape();
  const std::vector<double> base(x.data().begin(), x.data().end());
  const std::int64_t n = static_cast<std::int64_t>(base.size());

  // Analytic gradient.
  std::vector<double> analytic(base.size(), 0.0);
  {
    Tensor probe = Tensor::from_data(shape, base, /*requires_grad=*/true);
    Tensor loss = f(probe);
    if (loss.size() != 1) {
      throw ShapeError("finite_diff_check: f must be scalar-valued, got " + shape_str(loss.shape()));
    }
    loss.backward();
    if (probe.has_grad()) {
      const auto g = probe.grad();
      analytic.assign(g.begin(), g.end());
    }
  }

  // Coordinate set: everything, or a deterministic sample.
  std::vector<std::int64_t> coords;
  if (opts.max_coords < 0 || opts.max_coords >= n) {
    coords.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
  } else {
    std::vector<std::int64_t> all(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) all[i] = i;
    Rng rng(splitmix64(opts.seed ^ 0x5eedc0de));
    for (std::int64_t i = 0; i < opts.max_coords; ++i) {
      const std::int64_t j = rng.uniform_int(i, n - 1);
      std::swap(all[i], all[j]);
    }
    coords.assign(all.begin(), all.begin() + opts.max_coords);
  }

  NoGradGuard no_grad;
  double max_rel = 0.0;
  std::vector<double> work = base;
  for (const std::int64_t c : coords) {
    work[c] = base[c] + opts.step;
    const double fp = f(Tensor::from_data(shape, work)).item();
    work[c] = base[c] - opts.step;
    const double fm = f(Tensor::from_data(shape, work)).item();
    work[c] = base[c];
    const double numeric = (fp - fm) / (2.0 * opts.step);
    const double rel = std::abs(analytic[c] - numeric) / (std::abs(numeric) + 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step) {
  FiniteDiffOptions opts;
  opts.step = step;
  return finite_diff_check(f, x, opts);
}

}  // namespace sparseloc
