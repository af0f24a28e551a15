#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "selfroll/rng.hpp"

namespace selfroll {

class Tape;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated on first accumulation

  // Autodiff bookkeeping. A tensor is a leaf until some op on a tape produces
  // it; non-leaf grads are scratch and get re-zeroed per backward sweep.
  bool produced_by_op = false;
  const Tape* producer = nullptr;
  std::uint64_t sweep_seen = 0;
};

// Cheap shared handle. Values are written only by the producing op (or, for
// leaves, by the owner between tapes), so handles can be copied freely.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor randn(Rng& rng, Shape shape, double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t size() const { return d_->value.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }
  bool is_leaf() const { return !d_->produced_by_op; }

  std::span<const double> value() const { return d_->value; }
  std::span<double> mutable_value() { return d_->value; }
  std::span<const double> grad() const;
  bool has_grad() const { return !d_->grad.empty(); }

  double scalar_value() const;
  double at(std::size_t r, std::size_t c) const;

  void zero_grad();

  // Same values, fresh leaf, no gradient linkage.
  Tensor detached_copy() const;

  std::shared_ptr<TensorData> node() const { return d_; }
  static Tensor wrap(std::shared_ptr<TensorData> d) { return Tensor(std::move(d)); }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
};

// Values captured at stop-gradient boundaries. grad_check replays a log so
// finite differences run on the same stopped graph that autodiff saw.
struct BoundaryLog {
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> values;
};

// Define-by-run tape. Ops append themselves during the forward pass, which
// guarantees topological order; backward() walks the list once in reverse.
// Single-owner: one tape per training step, never shared across threads.
class Tape {
 public:
  enum class BoundaryMode { normal, record, replay };

  Tape() = default;
  Tape(BoundaryLog* log, BoundaryMode mode);

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t node_count() const { return nodes_.size(); }
  bool grad_enabled() const { return no_grad_depth_ == 0 && mode_ != BoundaryMode::replay; }
  bool replaying() const { return mode_ == BoundaryMode::replay; }

  // Accumulates into every reachable requires_grad tensor; calling twice
  // without zero_grad doubles leaf gradients.
  void backward(const Tensor& loss);

  // Identity in the forward direction, zero gradient upstream. In record mode
  // the value is logged; in replay mode the argument may be undefined and the
  // logged value is returned instead.
  Tensor stop_gradient(const Tensor& t);

  class NoGradScope {
   public:
    explicit NoGradScope(Tape& t) : tape_(t) { ++tape_.no_grad_depth_; }
    ~NoGradScope() { --tape_.no_grad_depth_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

   private:
    Tape& tape_;
  };
  NoGradScope no_grad() { return NoGradScope(*this); }

  // Used by ops; not part of the public surface. Closures own their input
  // references; the tape only needs the output for reachability pruning.
  void record(std::shared_ptr<TensorData> output, std::function<void()> backward_fn);
  void prepare_accum(TensorData& d);

  // Running count of attention multiply-adds, maintained by masked_attention:
  // 4 * queries * keys * width per call (scores plus value mixing).
  std::uint64_t attn_flops() const { return attn_flops_; }
  void add_attn_flops(std::uint64_t f) { attn_flops_ += f; }

 private:
  struct Node {
    std::shared_ptr<TensorData> output;
    std::function<void()> backward_fn;
  };

  std::vector<Node> nodes_;
  int no_grad_depth_ = 0;
  BoundaryMode mode_ = BoundaryMode::normal;
  BoundaryLog* boundary_log_ = nullptr;
  std::size_t boundary_cursor_ = 0;
  std::uint64_t sweep_id_ = 0;
  std::uint64_t attn_flops_ = 0;
};

// Dense boolean attention mask; allow[r * cols + c] == true means query row r
// may attend to key row c.
struct BoolMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allow;

  static BoolMatrix all_true(std::size_t rows, std::size_t cols);
  bool at(std::size_t r, std::size_t c) const { return allow[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { allow[r * cols + c] = v ? 1 : 0; }
};

// ---- primitive ops (matrix-shaped tensors unless noted) --------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(Tape& tape, const Tensor& a, double c);
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);  // a . b^T, b is [n,k]
Tensor row_bias_add(Tape& tape, const Tensor& x, const Tensor& bias);  // bias [1,n]
Tensor softmax_rows(Tape& tape, const Tensor& x);
Tensor mask_fill(Tape& tape, const Tensor& x, const BoolMatrix& keep, double fill);
Tensor gelu(Tape& tape, const Tensor& x);
Tensor softplus(Tape& tape, const Tensor& x);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor embedding_rows(Tape& tape, const Tensor& table, std::span<const std::size_t> indices);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_rows(Tape& tape, std::span<const Tensor> parts);
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);
Tensor repeat_rows(Tape& tape, const Tensor& x, std::size_t times);
Tensor sum_all(Tape& tape, const Tensor& x);
Tensor mean_all(Tape& tape, const Tensor& x);

// Scaled dot-product attention with optional masking; pass nullptr for full
// attention. Disallowed logits become -inf before the softmax. Rows with no
// allowed entry are rejected.
Tensor masked_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        const BoolMatrix* mask);

// ---- parameters and gradient checking ---------------------------------------

// Ordered name -> tensor map; iteration order is insertion order so optimizer
// sweeps and serialization are deterministic.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t count() const { return items_.size(); }
  std::size_t total_size() const;
  void zero_grad();

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct GradCheckOptions {
  // Cap on probed coordinates per tensor; when it binds, the largest-gradient
  // coordinates are checked.
  std::size_t probe_limit_per_tensor = static_cast<std::size_t>(-1);
};

// Central finite differences against the tape gradient, on the stopped graph:
// the first evaluation records every stop-gradient boundary and the FD
// evaluations replay it, so truncated paths compare as the constants they are.
// Returns the worst relative error with denominator max(|a|, |n|, 1e-8).
double grad_check(ParameterStore& params, const std::function<Tensor(Tape&)>& loss_fn,
                  double step, const GradCheckOptions& opt = {});

}  // namespace selfroll
