#include "selfroll/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace selfroll {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

void check_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void check_finite(const std::string& op, const Tensor& t) {
  for (double v : t.value()) {
    if (std::isnan(v)) shape_error(op, "NaN input");
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  auto d = std::make_shared<TensorData>();
  d->value.assign(shape_numel(shape), fill);
  d->shape = std::move(shape);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    shape_error("Tensor::from_data", "shape " + shape_str(shape) + " does not hold " +
                                         std::to_string(data.size()) + " values");
  }
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->value = std::move(data);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double v) { return from_data({1, 1}, {v}); }

Tensor Tensor::randn(Rng& rng, Shape shape, double stddev, bool requires_grad) {
  std::vector<double> data(shape_numel(shape));
  for (auto& x : data) x = stddev * rng.normal();
  return from_data(std::move(shape), std::move(data), requires_grad);
}

std::size_t Tensor::rows() const {
  if (d_->shape.size() != 2) shape_error("Tensor::rows", "tensor is not 2-D");
  return d_->shape[0];
}

std::size_t Tensor::cols() const {
  if (d_->shape.size() != 2) shape_error("Tensor::cols", "tensor is not 2-D");
  return d_->shape[1];
}

std::span<const double> Tensor::grad() const {
  if (d_->grad.empty()) {
    throw std::runtime_error("Tensor::grad: no gradient has been accumulated");
  }
  return d_->grad;
}

double Tensor::scalar_value() const {
  if (size() != 1) shape_error("Tensor::scalar_value", "size is " + std::to_string(size()));
  return d_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return d_->value[r * cols() + c]; }

void Tensor::zero_grad() { d_->grad.assign(d_->value.size(), 0.0); }

Tensor Tensor::detached_copy() const {
  auto d = std::make_shared<TensorData>();
  d->shape = d_->shape;
  d->value = d_->value;
  d->requires_grad = false;
  return Tensor(std::move(d));
}

// ---- Tape -------------------------------------------------------------------

Tape::Tape(BoundaryLog* log, BoundaryMode mode) : mode_(mode), boundary_log_(log) {
  if (mode != BoundaryMode::normal && log == nullptr) {
    throw std::invalid_argument("Tape: record/replay modes need a boundary log");
  }
  if (mode == BoundaryMode::record) {
    log->shapes.clear();
    log->values.clear();
  }
}

void Tape::record(std::shared_ptr<TensorData> output, std::function<void()> backward_fn) {
  output->produced_by_op = true;
  output->producer = this;
  nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
}

void Tape::prepare_accum(TensorData& d) {
  if (d.produced_by_op && d.sweep_seen != sweep_id_) {
    d.grad.assign(d.value.size(), 0.0);
  }
  d.sweep_seen = sweep_id_;
  if (d.grad.size() != d.value.size()) {
    d.grad.assign(d.value.size(), 0.0);
  }
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.is_leaf() && loss.node()->producer != this) {
    throw std::invalid_argument("backward: loss was not produced on this tape");
  }
  ++sweep_id_;
  prepare_accum(*loss.node());
  loss.node()->grad[0] += 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    // Skip nodes not on a path to this sweep's loss.
    if (it->output->sweep_seen != sweep_id_) continue;
    it->backward_fn();
  }
}

Tensor Tape::stop_gradient(const Tensor& t) {
  switch (mode_) {
    case BoundaryMode::normal:
      return t.detached_copy();
    case BoundaryMode::record:
      boundary_log_->shapes.push_back(t.shape());
      boundary_log_->values.emplace_back(t.value().begin(), t.value().end());
      return t.detached_copy();
    case BoundaryMode::replay: {
      if (boundary_cursor_ >= boundary_log_->values.size()) {
        throw std::runtime_error("stop_gradient: boundary log exhausted during replay");
      }
      auto i = boundary_cursor_++;
      return Tensor::from_data(boundary_log_->shapes[i], boundary_log_->values[i]);
    }
  }
  throw std::logic_error("stop_gradient: unreachable");
}

// ---- ops ----------------------------------------------------------------------

namespace {

bool want_grad(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

struct Accum {
  Tape* tape;
  std::shared_ptr<TensorData> d;
  bool wanted;

  Accum(Tape& t, const Tensor& x) : tape(&t), d(x.node()), wanted(x.requires_grad()) {}

  // Call once per backward invocation before writing into d->grad.
  std::vector<double>* prep() const {
    if (!wanted) return nullptr;
    tape->prepare_accum(*d);
    return &d->grad;
  }
};

Tensor make_output(Shape shape, bool with_grad) {
  return Tensor::zeros(std::move(shape), with_grad);
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  const bool g = want_grad(tape, {&a, &b});
  Tensor out = make_output(a.shape(), g);
  auto& ov = out.node()->value;
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (g) {
    tape.record(out.node(),
                [ga = Accum(tape, a), gb = Accum(tape, b), on = out.node()]() {
                  const auto& grad = on->grad;
                  if (auto* d = ga.prep()) {
                    for (std::size_t i = 0; i < grad.size(); ++i) (*d)[i] += grad[i];
                  }
                  if (auto* d = gb.prep()) {
                    for (std::size_t i = 0; i < grad.size(); ++i) (*d)[i] += grad[i];
                  }
                });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  const bool g = want_grad(tape, {&a, &b});
  Tensor out = make_output(a.shape(), g);
  auto& ov = out.node()->value;
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (g) {
    tape.record(out.node(),
                [ga = Accum(tape, a), gb = Accum(tape, b), on = out.node()]() {
                  const auto& grad = on->grad;
                  if (auto* d = ga.prep()) {
                    for (std::size_t i = 0; i < grad.size(); ++i) (*d)[i] += grad[i];
                  }
                  if (auto* d = gb.prep()) {
                    for (std::size_t i = 0; i < grad.size(); ++i) (*d)[i] -= grad[i];
                  }
                });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  const bool g = want_grad(tape, {&a, &b});
  Tensor out = make_output(a.shape(), g);
  auto& ov = out.node()->value;
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (g) {
    tape.record(out.node(),
                [ga = Accum(tape, a), gb = Accum(tape, b), an = a.node(), bn = b.node(),
                 on = out.node()]() {
                  const auto& grad = on->grad;
                  if (auto* d = ga.prep()) {
                    for (std::size_t i = 0; i < grad.size(); ++i) (*d)[i] += grad[i] * bn->value[i];
                  }
                  if (auto* d = gb.prep()) {
                    for (std::size_t i = 0; i < grad.size(); ++i) (*d)[i] += grad[i] * an->value[i];
                  }
                });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
  const bool g = want_grad(tape, {&a});
  Tensor out = make_output(a.shape(), g);
  auto& ov = out.node()->value;
  auto av = a.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (g) {
    tape.record(out.node(), [ga = Accum(tape, a), c, on = out.node()]() {
      const auto& grad = on->grad;
      if (auto* d = ga.prep()) {
        for (std::size_t i = 0; i < grad.size(); ++i) (*d)[i] += grad[i] * c;
      }
    });
  }
  return out;
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    shape_error("matmul", "inner extents differ: " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
  }
  const bool g = want_grad(tape, {&a, &b});
  Tensor out = make_output({m, n}, g);
  auto& ov = out.node()->value;
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += aip * bv[p * n + j];
    }
  }
  if (g) {
    tape.record(out.node(),
                [ga = Accum(tape, a), gb = Accum(tape, b), an = a.node(), bn = b.node(),
                 on = out.node(), m, k, n]() {
                  const auto& grad = on->grad;
                  if (auto* d = ga.prep()) {
                    // a.grad += g . b^T
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                          s += grad[i * n + j] * bn->value[p * n + j];
                        }
                        (*d)[i * k + p] += s;
                      }
                    }
                  }
                  if (auto* d = gb.prep()) {
                    // b.grad += a^T . g
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t p = 0; p < k; ++p) {
                        const double aip = an->value[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) {
                          (*d)[p * n + j] += aip * grad[i * n + j];
                        }
                      }
                    }
                  }
                });
  }
  return out;
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    shape_error("matmul_nt", "inner extents differ: " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()) + "^T");
  }
  const bool g = want_grad(tape, {&a, &b});
  Tensor out = make_output({m, n}, g);
  auto& ov = out.node()->value;
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += av[i * k + p] * bv[j * k + p];
      ov[i * n + j] = s;
    }
  }
  if (g) {
    tape.record(out.node(),
                [ga = Accum(tape, a), gb = Accum(tape, b), an = a.node(), bn = b.node(),
                 on = out.node(), m, k, n]() {
                  const auto& grad = on->grad;
                  if (auto* d = ga.prep()) {
                    // a.grad += g . b
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t j = 0; j < n; ++j) {
                        const double gij = grad[i * n + j];
                        for (std::size_t p = 0; p < k; ++p) {
                          (*d)[i * k + p] += gij * bn->value[j * k + p];
                        }
                      }
                    }
                  }
                  if (auto* d = gb.prep()) {
                    // b.grad += g^T . a
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t j = 0; j < n; ++j) {
                        const double gij = grad[i * n + j];
                        for (std::size_t p = 0; p < k; ++p) {
                          (*d)[j * k + p] += gij * an->value[i * k + p];
                        }
                      }
                    }
                  }
                });
  }
  return out;
}

Tensor row_bias_add(Tape& tape, const Tensor& x, const Tensor& bias) {
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.rows() != 1 || bias.cols() != n) {
    shape_error("row_bias_add", "bias must be [1x" + std::to_string(n) + "], got " +
                                    shape_str(bias.shape()));
  }
  const bool g = want_grad(tape, {&x, &bias});
  Tensor out = make_output({m, n}, g);
  auto& ov = out.node()->value;
  auto xv = x.value(), bv = bias.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] + bv[j];
  }
  if (g) {
    tape.record(out.node(),
                [gx = Accum(tape, x), gb = Accum(tape, bias), on = out.node(), m, n]() {
                  const auto& grad = on->grad;
                  if (auto* d = gx.prep()) {
                    for (std::size_t i = 0; i < grad.size(); ++i) (*d)[i] += grad[i];
                  }
                  if (auto* d = gb.prep()) {
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t j = 0; j < n; ++j) (*d)[j] += grad[i * n + j];
                    }
                  }
                });
  }
  return out;
}

Tensor softmax_rows(Tape& tape, const Tensor& x) {
  check_finite("softmax_rows", x);
  const std::size_t m = x.rows(), n = x.cols();
  const bool g = want_grad(tape, {&x});
  Tensor out = make_output({m, n}, g);
  auto& ov = out.node()->value;
  auto xv = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[i * n + j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      shape_error("softmax_rows", "row " + std::to_string(i) + " has no finite entry");
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(xv[i * n + j] - mx);
      ov[i * n + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] /= denom;
  }
  if (g) {
    tape.record(out.node(), [gx = Accum(tape, x), on = out.node(), m, n]() {
      const auto& grad = on->grad;
      const auto& y = on->value;
      if (auto* d = gx.prep()) {
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += grad[i * n + j] * y[i * n + j];
          for (std::size_t j = 0; j < n; ++j) {
            (*d)[i * n + j] += y[i * n + j] * (grad[i * n + j] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor mask_fill(Tape& tape, const Tensor& x, const BoolMatrix& keep, double fill) {
  const std::size_t m = x.rows(), n = x.cols();
  if (keep.rows != m || keep.cols != n) {
    shape_error("mask_fill", "mask is " + std::to_string(keep.rows) + "x" +
                                 std::to_string(keep.cols) + ", tensor is " +
                                 shape_str(x.shape()));
  }
  const bool g = want_grad(tape, {&x});
  Tensor out = make_output({m, n}, g);
  auto& ov = out.node()->value;
  auto xv = x.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = keep.allow[i] ? xv[i] : fill;
  if (g) {
    tape.record(out.node(),
                [gx = Accum(tape, x), on = out.node(), allow = keep.allow]() {
                  const auto& grad = on->grad;
                  if (auto* d = gx.prep()) {
                    for (std::size_t i = 0; i < grad.size(); ++i) {
                      if (allow[i]) (*d)[i] += grad[i];
                    }
                  }
                });
  }
  return out;
}

Tensor gelu(Tape& tape, const Tensor& x) {
  const bool g = want_grad(tape, {&x});
  Tensor out = make_output(x.shape(), g);
  auto& ov = out.node()->value;
  auto xv = x.value();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  }
  if (g) {
    tape.record(out.node(), [gx = Accum(tape, x), xn = x.node(), on = out.node()]() {
      const auto& grad = on->grad;
      if (auto* d = gx.prep()) {
        for (std::size_t i = 0; i < grad.size(); ++i) {
          const double v = xn->value[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          (*d)[i] += grad[i] * (cdf + v * pdf);
        }
      }
    });
  }
  return out;
}

Tensor softplus(Tape& tape, const Tensor& x) {
  const bool g = want_grad(tape, {&x});
  Tensor out = make_output(x.shape(), g);
  auto& ov = out.node()->value;
  auto xv = x.value();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = std::max(xv[i], 0.0) + std::log1p(std::exp(-std::abs(xv[i])));
  }
  if (g) {
    tape.record(out.node(), [gx = Accum(tape, x), xn = x.node(), on = out.node()]() {
      const auto& grad = on->grad;
      if (auto* d = gx.prep()) {
        for (std::size_t i = 0; i < grad.size(); ++i) {
          const double v = xn->value[i];
          const double sig = 1.0 / (1.0 + std::exp(-v));
          (*d)[i] += grad[i] * sig;
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    shape_error("layer_norm", "gain/bias must be [1x" + std::to_string(n) + "]");
  }
  const bool g = want_grad(tape, {&x, &gain, &bias});
  Tensor out = make_output({m, n}, g);
  auto& ov = out.node()->value;
  auto xv = x.value(), gv = gain.value(), bv = bias.value();
  std::vector<double> inv_std(m), mean(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = xv[i * n + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    mean[i] = mu;
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      ov[i * n + j] = (xv[i * n + j] - mu) * is * gv[j] + bv[j];
    }
  }
  if (g) {
    tape.record(
        out.node(),
        [gx = Accum(tape, x), gg = Accum(tape, gain), gb = Accum(tape, bias), xn = x.node(),
         gn = gain.node(), on = out.node(), mean = std::move(mean), inv_std = std::move(inv_std),
         m, n]() {
          const auto& grad = on->grad;
          auto* dx = gx.prep();
          auto* dg = gg.prep();
          auto* db = gb.prep();
          for (std::size_t i = 0; i < m; ++i) {
            const double is = inv_std[i];
            // xhat_j = (x_j - mu) * is
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double xhat = (xn->value[i * n + j] - mean[i]) * is;
              const double gy = grad[i * n + j] * gn->value[j];
              sum_gy += gy;
              sum_gy_xhat += gy * xhat;
              if (dg) (*dg)[j] += grad[i * n + j] * xhat;
              if (db) (*db)[j] += grad[i * n + j];
            }
            if (dx) {
              const double inv_n = 1.0 / static_cast<double>(n);
              for (std::size_t j = 0; j < n; ++j) {
                const double xhat = (xn->value[i * n + j] - mean[i]) * is;
                const double gy = grad[i * n + j] * gn->value[j];
                (*dx)[i * n + j] += is * (gy - inv_n * sum_gy - inv_n * xhat * sum_gy_xhat);
              }
            }
          }
        });
  }
  return out;
}

Tensor embedding_rows(Tape& tape, const Tensor& table, std::span<const std::size_t> indices) {
  const std::size_t rows = table.rows(), n = table.cols();
  for (auto idx : indices) {
    if (idx >= rows) {
      shape_error("embedding_rows", "index " + std::to_string(idx) + " out of " +
                                        std::to_string(rows) + " rows");
    }
  }
  const bool g = want_grad(tape, {&table});
  Tensor out = make_output({indices.size(), n}, g);
  auto& ov = out.node()->value;
  auto tv = table.value();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(indices[i] * n), n, ov.begin() + i * n);
  }
  if (g) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    tape.record(out.node(),
                [gt = Accum(tape, table), on = out.node(), idx = std::move(idx), n]() {
                  const auto& grad = on->grad;
                  if (auto* d = gt.prep()) {
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                      for (std::size_t j = 0; j < n; ++j) {
                        (*d)[idx[i] * n + j] += grad[i * n + j];
                      }
                    }
                  }
                });
  }
  return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    shape_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const bool g = want_grad(tape, {&x});
  Tensor out = Tensor::from_data(std::move(shape), {x.value().begin(), x.value().end()}, g);
  if (g) {
    tape.record(out.node(), [gx = Accum(tape, x), on = out.node()]() {
      const auto& grad = on->grad;
      if (auto* d = gx.prep()) {
        for (std::size_t i = 0; i < grad.size(); ++i) (*d)[i] += grad[i];
      }
    });
  }
  return out;
}

Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t start, std::size_t count) {
  const std::size_t m = x.rows(), n = x.cols();
  if (start + count > m) {
    shape_error("slice_rows", "rows [" + std::to_string(start) + ", " +
                                  std::to_string(start + count) + ") exceed " + std::to_string(m));
  }
  const bool g = want_grad(tape, {&x});
  Tensor out = make_output({count, n}, g);
  auto& ov = out.node()->value;
  auto xv = x.value();
  std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(start * n), count * n, ov.begin());
  if (g) {
    tape.record(out.node(), [gx = Accum(tape, x), on = out.node(), start, n]() {
      const auto& grad = on->grad;
      if (auto* d = gx.prep()) {
        for (std::size_t i = 0; i < grad.size(); ++i) (*d)[start * n + i] += grad[i];
      }
    });
  }
  return out;
}

Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t start, std::size_t count) {
  const std::size_t m = x.rows(), n = x.cols();
  if (start + count > n) {
    shape_error("slice_cols", "cols [" + std::to_string(start) + ", " +
                                  std::to_string(start + count) + ") exceed " + std::to_string(n));
  }
  const bool g = want_grad(tape, {&x});
  Tensor out = make_output({m, count}, g);
  auto& ov = out.node()->value;
  auto xv = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(i * n + start), count,
                ov.begin() + i * count);
  }
  if (g) {
    tape.record(out.node(), [gx = Accum(tape, x), on = out.node(), m, n, start,
                                         count]() {
      const auto& grad = on->grad;
      if (auto* d = gx.prep()) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < count; ++j) (*d)[i * n + start + j] += grad[i * count + j];
        }
      }
    });
  }
  return out;
}

Tensor concat_rows(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) shape_error("concat_rows", "no parts");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) shape_error("concat_rows", "column counts differ");
    m += p.rows();
  }
  bool g = false;
  if (tape.grad_enabled()) {
    for (const auto& p : parts) g = g || p.requires_grad();
  }
  Tensor out = make_output({m, n}, g);
  auto& ov = out.node()->value;
  std::size_t row = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().begin(), p.size(), ov.begin() + row * n);
    row += p.rows();
  }
  if (g) {
    std::vector<Accum> accums;
    std::vector<std::size_t> offsets, sizes;
    std::size_t off = 0;
    for (const auto& p : parts) {
      accums.emplace_back(tape, p);
      offsets.push_back(off);
      sizes.push_back(p.size());
      off += p.size();
    }
    tape.record(out.node(),
                [accums = std::move(accums), offsets = std::move(offsets),
                 sizes = std::move(sizes), on = out.node()]() {
                  const auto& grad = on->grad;
                  for (std::size_t k = 0; k < accums.size(); ++k) {
                    if (auto* d = accums[k].prep()) {
                      for (std::size_t i = 0; i < sizes[k]; ++i) (*d)[i] += grad[offsets[k] + i];
                    }
                  }
                });
  }
  return out;
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) shape_error("concat_cols", "no parts");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) shape_error("concat_cols", "row counts differ");
    n += p.cols();
  }
  bool g = false;
  if (tape.grad_enabled()) {
    for (const auto& p : parts) g = g || p.requires_grad();
  }
  Tensor out = make_output({m, n}, g);
  auto& ov = out.node()->value;
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    auto pv = p.value();
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(i * pc), pc,
                  ov.begin() + i * n + col);
    }
    col += pc;
  }
  if (g) {
    std::vector<Accum> accums;
    std::vector<std::size_t> col_offsets, col_counts;
    std::size_t off = 0;
    for (const auto& p : parts) {
      accums.emplace_back(tape, p);
      col_offsets.push_back(off);
      col_counts.push_back(p.cols());
      off += p.cols();
    }
    tape.record(out.node(),
                [accums = std::move(accums), col_offsets = std::move(col_offsets),
                 col_counts = std::move(col_counts), on = out.node(), m, n]() {
                  const auto& grad = on->grad;
                  for (std::size_t k = 0; k < accums.size(); ++k) {
                    if (auto* d = accums[k].prep()) {
                      const std::size_t pc = col_counts[k];
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < pc; ++j) {
                          (*d)[i * pc + j] += grad[i * n + col_offsets[k] + j];
                        }
                      }
                    }
                  }
                });
  }
  return out;
}

Tensor repeat_rows(Tape& tape, const Tensor& x, std::size_t times) {
  const std::size_t m = x.rows(), n = x.cols();
  const bool g = want_grad(tape, {&x});
  Tensor out = make_output({m * times, n}, g);
  auto& ov = out.node()->value;
  auto xv = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t r = 0; r < times; ++r) {
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(i * n), n,
                  ov.begin() + (i * times + r) * n);
    }
  }
  if (g) {
    tape.record(out.node(), [gx = Accum(tape, x), on = out.node(), m, n, times]() {
      const auto& grad = on->grad;
      if (auto* d = gx.prep()) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t r = 0; r < times; ++r) {
            for (std::size_t j = 0; j < n; ++j) (*d)[i * n + j] += grad[(i * times + r) * n + j];
          }
        }
      }
    });
  }
  return out;
}

Tensor sum_all(Tape& tape, const Tensor& x) {
  const bool g = want_grad(tape, {&x});
  Tensor out = make_output({1, 1}, g);
  double s = 0.0;
  for (double v : x.value()) s += v;
  out.node()->value[0] = s;
  if (g) {
    tape.record(out.node(), [gx = Accum(tape, x), on = out.node()]() {
      const double grad = on->grad[0];
      if (auto* d = gx.prep()) {
        for (auto& v : *d) v += grad;
      }
    });
  }
  return out;
}

Tensor mean_all(Tape& tape, const Tensor& x) {
  if (x.size() == 0) shape_error("mean_all", "empty tensor");
  return scale(tape, sum_all(tape, x), 1.0 / static_cast<double>(x.size()));
}

Tensor masked_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        const BoolMatrix* mask) {
  const std::size_t dim = q.cols();
  if (k.cols() != dim) shape_error("masked_attention", "q/k width mismatch");
  if (v.rows() != k.rows()) shape_error("masked_attention", "k/v row mismatch");
  if (mask != nullptr) {
    if (mask->rows != q.rows() || mask->cols != k.rows()) {
      shape_error("masked_attention", "mask is " + std::to_string(mask->rows) + "x" +
                                          std::to_string(mask->cols) + ", need " +
                                          std::to_string(q.rows()) + "x" +
                                          std::to_string(k.rows()));
    }
    for (std::size_t i = 0; i < mask->rows; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < mask->cols && !any; ++j) any = mask->at(i, j);
      if (!any) {
        shape_error("masked_attention", "row " + std::to_string(i) + " is fully masked");
      }
    }
  }
  tape.add_attn_flops(4ull * q.rows() * k.rows() * dim);
  Tensor scores = matmul_nt(tape, q, k);
  scores = scale(tape, scores, 1.0 / std::sqrt(static_cast<double>(dim)));
  if (mask != nullptr) {
    scores = mask_fill(tape, scores, *mask, -std::numeric_limits<double>::infinity());
  }
  Tensor weights = softmax_rows(tape, scores);
  return matmul(tape, weights, v);
}

BoolMatrix BoolMatrix::all_true(std::size_t rows, std::size_t cols) {
  BoolMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.allow.assign(rows * cols, 1);
  return m;
}

// ---- ParameterStore / grad_check ---------------------------------------------

Tensor& ParameterStore::add(const std::string& name, Tensor t) {
  if (contains(name)) {
    throw std::invalid_argument("ParameterStore::add: duplicate name " + name);
  }
  t.set_requires_grad(true);
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParameterStore::at(const std::string& name) {
  for (auto& [n, t] : items_) {
    if (n == name) return t;
  }
  throw std::out_of_range("ParameterStore::at: no parameter named " + name);
}

const Tensor& ParameterStore::at(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return t;
  }
  throw std::out_of_range("ParameterStore::at: no parameter named " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return true;
  }
  return false;
}

std::size_t ParameterStore::total_size() const {
  std::size_t s = 0;
  for (const auto& [n, t] : items_) s += t.size();
  return s;
}

void ParameterStore::zero_grad() {
  for (auto& [n, t] : items_) t.zero_grad();
}

double grad_check(ParameterStore& params, const std::function<Tensor(Tape&)>& loss_fn,
                  double step, const GradCheckOptions& opt) {
  if (!(step > 0.0) || step > 1e-3) {
    throw std::invalid_argument("grad_check: step must be in (0, 1e-3]");
  }

  BoundaryLog log;
  std::vector<std::vector<double>> analytic;
  double base_loss = 0.0;
  {
    Tape tape(&log, Tape::BoundaryMode::record);
    params.zero_grad();
    Tensor loss = loss_fn(tape);
    base_loss = loss.scalar_value();
    if (!std::isfinite(base_loss)) {
      throw std::runtime_error("grad_check: loss is not finite at the base point");
    }
    tape.backward(loss);
    for (auto& [name, t] : params) {
      analytic.emplace_back(t.node()->grad.begin(), t.node()->grad.end());
      if (analytic.back().empty()) analytic.back().assign(t.size(), 0.0);
    }
  }
  // Smallest derivative magnitude central differences can resolve to the
  // working tolerance: accumulated rounding in the loss evaluation divided by
  // the widest admissible step. Gradients below it can only be checked for
  // agreement at this resolution, not for relative error.
  const double fd_resolution = 4e-6 * std::max(1.0, std::abs(base_loss));

  auto eval = [&]() {
    Tape tape(&log, Tape::BoundaryMode::replay);
    const double v = loss_fn(tape).scalar_value();
    if (!std::isfinite(v)) {
      throw std::runtime_error("grad_check: loss is not finite at a perturbed point");
    }
    return v;
  };

  double worst = 0.0;
  std::size_t pi = 0;
  for (auto& [name, t] : params) {
    auto value = t.mutable_value();
    const std::size_t n = value.size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (n > opt.probe_limit_per_tensor) {
      // Probe the most informative coordinates: central differences cannot
      // certify near-dead coordinates (|grad| just above the 1e-8 floor) in
      // 64-bit arithmetic, and any real backward defect distorts the large
      // gradients as well.
      std::sort(coords.begin(), coords.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(analytic[pi][a]) > std::abs(analytic[pi][b]);
      });
      coords.resize(opt.probe_limit_per_tensor);
    }
    for (auto c : coords) {
      const double exact = analytic[pi][c];
      double numeric_last = 0.0;
      auto rel_at = [&](double h) {
        const double saved = value[c];
        value[c] = saved + h;
        const double up = eval();
        value[c] = saved - h;
        const double down = eval();
        value[c] = saved;
        numeric_last = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(exact), std::abs(numeric_last), 1e-8});
        return std::abs(exact - numeric_last) / denom;
      };
      double err = rel_at(step);
      if (err > 1e-6 && step < 1e-3) {
        // Central-difference error is U-shaped in the step: small steps are
        // truncation-optimal, the largest admissible step suppresses roundoff
        // on flat coordinates. A wrong gradient fails at both.
        err = std::min(err, rel_at(1e-3));
      }
      if (err > 1e-6 && std::abs(exact) < fd_resolution &&
          std::abs(numeric_last) < fd_resolution) {
        // Both sides agree that the derivative vanishes at FD resolution; the
        // relative formula would only amplify rounding noise here.
        err = 0.0;
      }
      worst = std::max(worst, err);
    }
    ++pi;
  }
  return worst;
}

}  // namespace selfroll
