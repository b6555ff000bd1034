#pragma once

// Dense 64-bit tensors with a reverse-mode autograd graph.
//
// A Var is a handle to a graph node. Ops build new nodes that remember their
// inputs and a backprop closure; backward() walks the graph reachable from a
// scalar loss in reverse creation order. Leaves created through Parameter keep
// their gradient buffer across calls until sgd_step()/zero_grad() clears it.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace vpm {

using Shape = std::vector<int>;
using Rng = std::mt19937_64;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != numel(shape_)) {
      throw ShapeError("tensor of shape " + shape_str(shape_) + " given " +
                       std::to_string(values_.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor randn(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.values_) v = dist(rng);
    return t;
  }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.values_) v = dist(rng);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  // Row-major accessors for rank-2 and rank-3 tensors.
  double& at(int r, int c) { return values_[static_cast<std::size_t>(r) * shape_[1] + c]; }
  double at(int r, int c) const { return values_[static_cast<std::size_t>(r) * shape_[1] + c]; }
  double& at(int c, int y, int x) {
    return values_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  double at(int c, int y, int x) const {
    return values_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }

  double item() const {
    if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return values_[0];
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != values_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<double> values_;
};

namespace detail {

struct Node {
  Tensor value;
  std::vector<double> grad;  // empty until a gradient reaches this node
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t order = 0;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline std::uint64_t next_order() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<detail::Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->order = detail::next_order();
  }

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }

  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Builds the result node of an op. `backprop` receives the result node with
  // its gradient populated and must push gradients into the inputs.
  static Var make(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> backprop) {
    Var out(std::move(value));
    out.node_->leaf = false;
    for (const Var& in : inputs) {
      if (in.requires_grad()) out.node_->requires_grad = true;
      out.node_->inputs.push_back(in.node_);
    }
    if (out.node_->requires_grad) out.node_->backprop = std::move(backprop);
    return out;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Gradient buffer of an op input, or nullptr when it does not take gradients.
inline double* grad_of(detail::Node& result, std::size_t input) {
  auto& in = *result.inputs[input];
  if (!in.requires_grad) return nullptr;
  return in.ensure_grad().data();
}

inline void backward(const Var& loss) {
  if (loss.value().size() != 1 || loss.value().rank() != 0) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> nodes;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node().get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    nodes.push_back(n);
    for (auto& in : n->inputs) stack.push_back(in.get());
  }
  // Inputs are always created before their consumers.
  std::sort(nodes.begin(), nodes.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->order > b->order; });
  for (detail::Node* n : nodes) {
    if (!n->leaf) n->grad.assign(n->value.size(), 0.0);
  }
  loss.node()->ensure_grad()[0] += 1.0;
  for (detail::Node* n : nodes) {
    if (n->backprop) n->backprop(*n);
  }
  // Interior buffers are not needed once propagated.
  for (detail::Node* n : nodes) {
    if (!n->leaf) std::vector<double>().swap(n->grad);
  }
}

class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor value, bool learnable = true)
      : name_(std::move(name)), var_(std::move(value), learnable), learnable_(learnable) {}

  const std::string& name() const { return name_; }
  const Var& var() const { return var_; }
  Var& var() { return var_; }
  const Tensor& value() const { return var_.value(); }
  Tensor& mutable_value() { return var_.mutable_value(); }
  std::span<const double> grad() const { return var_.grad(); }
  std::span<double> mutable_grad() { return var_.node()->grad; }
  bool learnable() const { return learnable_; }
  void zero_grad() { var_.zero_grad(); }

  operator const Var&() const { return var_; }  // NOLINT: params feed ops directly

 private:
  std::string name_;
  Var var_;
  bool learnable_ = true;
};

inline void zero_grad(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

// Global L2 norm of all learnable gradients.
inline double grad_norm(std::span<Parameter* const> params) {
  double s = 0.0;
  for (const Parameter* p : params) {
    if (!p->learnable()) continue;
    for (double g : p->grad()) s += g * g;
  }
  return std::sqrt(s);
}

inline void scale_grads(std::span<Parameter* const> params, double factor) {
  for (Parameter* p : params) {
    if (!p->learnable()) continue;
    for (double& g : p->mutable_grad()) g *= factor;
  }
}

inline void sgd_step(std::span<Parameter* const> params, double lr) {
  for (Parameter* p : params) {
    if (!p->learnable()) continue;
    auto g = p->grad();
    if (!g.empty()) {
      auto v = p->mutable_value().values();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    }
    p->zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Ops

inline Var conv2d(const Var& input, const Var& kernel, const Var* bias, int stride, int pad) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  if (is.size() != 3 || ks.size() != 4 || ks[1] != is[0] || ks[2] != ks[3]) {
    throw ShapeError("conv2d: input " + shape_str(is) + " incompatible with kernel " + shape_str(ks));
  }
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and pad >= 0");
  const int cin = is[0], ih = is[1], iw = is[2];
  const int cout = ks[0], k = ks[2];
  if (k > ih + 2 * pad || k > iw + 2 * pad) {
    throw ShapeError("conv2d: kernel " + shape_str(ks) + " larger than padded input " + shape_str(is));
  }
  if (bias && (bias->shape().size() != 1 || bias->dim(0) != cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " does not match kernel " + shape_str(ks));
  }
  const int oh = (ih + 2 * pad - k) / stride + 1;
  const int ow = (iw + 2 * pad - k) / stride + 1;

  // Output column range [lo, hi) whose input column ox*stride+kx-pad is in bounds.
  auto col_range = [=](int kx) {
    int lo = 0;
    while (lo < ow && lo * stride + kx - pad < 0) ++lo;
    int hi = ow;
    while (hi > lo && (hi - 1) * stride + kx - pad >= iw) --hi;
    return std::pair<int, int>(lo, hi);
  };

  Tensor out(Shape{cout, oh, ow});
  const double* x = input.value().data();
  const double* w = kernel.value().data();
  double* y = out.data();
  for (int co = 0; co < cout; ++co) {
    double* yplane = y + static_cast<std::size_t>(co) * oh * ow;
    if (bias) std::fill(yplane, yplane + oh * ow, bias->value()[co]);
    for (int ci = 0; ci < cin; ++ci) {
      const double* xplane = x + static_cast<std::size_t>(ci) * ih * iw;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double wv = w[((static_cast<std::size_t>(co) * cin + ci) * k + ky) * k + kx];
          auto [lo, hi] = col_range(kx);
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= ih) continue;
            const double* xrow = xplane + static_cast<std::size_t>(iy) * iw + kx - pad;
            double* yrow = yplane + static_cast<std::size_t>(oy) * ow;
            for (int ox = lo; ox < hi; ++ox) yrow[ox] += wv * xrow[ox * stride];
          }
        }
      }
    }
  }

  std::vector<Var> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return Var::make(std::move(out), std::move(inputs), [=](detail::Node& self) {
    const double* gy = self.grad.data();
    const double* xv = self.inputs[0]->value.data();
    const double* wv_all = self.inputs[1]->value.data();
    double* gx = grad_of(self, 0);
    double* gw = grad_of(self, 1);
    double* gb = has_bias ? grad_of(self, 2) : nullptr;
    for (int co = 0; co < cout; ++co) {
      const double* gplane = gy + static_cast<std::size_t>(co) * oh * ow;
      if (gb) {
        double s = 0.0;
        for (int i = 0; i < oh * ow; ++i) s += gplane[i];
        gb[co] += s;
      }
      for (int ci = 0; ci < cin; ++ci) {
        const std::size_t xoff = static_cast<std::size_t>(ci) * ih * iw;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const std::size_t widx = ((static_cast<std::size_t>(co) * cin + ci) * k + ky) * k + kx;
            const double wv = wv_all[widx];
            auto [lo, hi] = col_range(kx);
            double acc = 0.0;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= ih) continue;
              const std::size_t row = xoff + static_cast<std::size_t>(iy) * iw + kx - pad;
              const double* grow = gplane + static_cast<std::size_t>(oy) * ow;
              if (gw) {
                const double* xrow = xv + row;
                for (int ox = lo; ox < hi; ++ox) acc += grow[ox] * xrow[ox * stride];
              }
              if (gx) {
                double* gxrow = gx + row;
                for (int ox = lo; ox < hi; ++ox) gxrow[ox * stride] += wv * grow[ox];
              }
            }
            if (gw) gw[widx] += acc;
          }
        }
      }
    }
  });
}

inline Var conv2d(const Var& input, const Var& kernel, int stride, int pad) {
  return conv2d(input, kernel, nullptr, stride, pad);
}
inline Var conv2d(const Var& input, const Var& kernel, const Var& bias, int stride, int pad) {
  return conv2d(input, kernel, &bias, stride, pad);
}

// Leaky when negative_slope > 0.
inline Var relu(const Var& x, double negative_slope = 0.0) {
  Tensor out(x.shape());
  const auto in = x.value().values();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : negative_slope * in[i];
  return Var::make(std::move(out), {x}, [negative_slope](detail::Node& self) {
    double* gx = grad_of(self, 0);
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += xv[i] > 0.0 ? self.grad[i] : negative_slope * self.grad[i];
  });
}

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return Var::make(std::move(out), {x}, [](detail::Node& self) {
    double* gx = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

// [c,h,w] -> [c]
inline Var global_average_pool(const Var& x) {
  if (x.shape().size() != 3) throw ShapeError("global_average_pool: expected [c,h,w], got " + shape_str(x.shape()));
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out(Shape{c});
  for (int ch = 0; ch < c; ++ch) {
    const double* p = x.value().data() + ch * hw;
    out[ch] = std::accumulate(p, p + hw, 0.0) / static_cast<double>(hw);
  }
  return Var::make(std::move(out), {x}, [c, hw](detail::Node& self) {
    double* gx = grad_of(self, 0);
    for (int ch = 0; ch < c; ++ch) {
      const double g = self.grad[ch] / static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) gx[ch * hw + i] += g;
    }
  });
}

// weights [d_out, d], bias [d_out], input [d] -> [d_out]
inline Var fully_connected(const Var& input, const Var& weights, const Var& bias) {
  const Shape& ws = weights.shape();
  if (input.shape().size() != 1 || ws.size() != 2 || ws[1] != input.dim(0) || bias.shape().size() != 1 ||
      bias.dim(0) != ws[0]) {
    throw ShapeError("fully_connected: input " + shape_str(input.shape()) + ", weights " + shape_str(ws) +
                     ", bias " + shape_str(bias.shape()));
  }
  const int dout = ws[0], din = ws[1];
  Tensor out(Shape{dout});
  const double* x = input.value().data();
  const double* w = weights.value().data();
  for (int o = 0; o < dout; ++o) {
    double s = bias.value()[o];
    const double* row = w + static_cast<std::size_t>(o) * din;
    for (int i = 0; i < din; ++i) s += row[i] * x[i];
    out[o] = s;
  }
  return Var::make(std::move(out), {input, weights, bias}, [dout, din](detail::Node& self) {
    const double* xv = self.inputs[0]->value.data();
    const double* wv = self.inputs[1]->value.data();
    double* gx = grad_of(self, 0);
    double* gw = grad_of(self, 1);
    double* gb = grad_of(self, 2);
    for (int o = 0; o < dout; ++o) {
      const double g = self.grad[o];
      if (gb) gb[o] += g;
      if (gw) {
        double* row = gw + static_cast<std::size_t>(o) * din;
        for (int i = 0; i < din; ++i) row[i] += g * xv[i];
      }
      if (gx) {
        const double* row = wv + static_cast<std::size_t>(o) * din;
        for (int i = 0; i < din; ++i) gx[i] += g * row[i];
      }
    }
  });
}

namespace detail {

// Max-subtracted softmax of `n` values at stride `step`.
inline void softmax_into(const double* in, double* out, int n, std::size_t step) {
  double mx = in[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, in[i * step]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    out[i * step] = std::exp(in[i * step] - mx);
    s += out[i * step];
  }
  for (int i = 0; i < n; ++i) out[i * step] /= s;
}

}  // namespace detail

inline Var softmax(const Var& logits) {
  if (logits.shape().size() != 1 || logits.dim(0) < 1) {
    throw ShapeError("softmax: expected non-empty vector, got " + shape_str(logits.shape()));
  }
  const int k = logits.dim(0);
  Tensor out(Shape{k});
  detail::softmax_into(logits.value().data(), out.data(), k, 1);
  return Var::make(std::move(out), {logits}, [k](detail::Node& self) {
    double* gx = grad_of(self, 0);
    const Tensor& y = self.value;
    double dot = 0.0;
    for (int i = 0; i < k; ++i) dot += self.grad[i] * y[i];
    for (int i = 0; i < k; ++i) gx[i] += y[i] * (self.grad[i] - dot);
  });
}

// -log softmax(logits)[label], computed through log-sum-exp.
inline Var cross_entropy(const Var& logits, int label) {
  if (logits.shape().size() != 1) throw ShapeError("cross_entropy: expected vector, got " + shape_str(logits.shape()));
  const int k = logits.dim(0);
  if (label < 0 || label >= k) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
  }
  const double* z = logits.value().data();
  const double mx = *std::max_element(z, z + k);
  double s = 0.0;
  for (int i = 0; i < k; ++i) s += std::exp(z[i] - mx);
  const double lse = mx + std::log(s);
  return Var::make(Tensor::scalar(lse - z[label]), {logits}, [k, label, lse](detail::Node& self) {
    double* gx = grad_of(self, 0);
    const double g = self.grad[0];
    const double* zv = self.inputs[0]->value.data();
    for (int i = 0; i < k; ++i) gx[i] += g * (std::exp(zv[i] - lse) - (i == label ? 1.0 : 0.0));
  });
}

inline Var sum(const Var& x) {
  const auto v = x.value().values();
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  return Var::make(Tensor::scalar(s), {x}, [](detail::Node& self) {
    double* gx = grad_of(self, 0);
    const std::size_t n = self.inputs[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
  });
}

inline Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t in = 0; in < 2; ++in) {
      if (double* g = grad_of(self, in)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Var scale(const Var& x, double s) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x.value()[i];
  return Var::make(std::move(out), {x}, [s](detail::Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
  });
}

inline Var add_scalar(const Var& x, double s) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] + s;
  return Var::make(std::move(out), {x}, [](detail::Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

// Sum of scalars; an empty list gives a constant zero.
inline Var add_n(const std::vector<Var>& terms) {
  double s = 0.0;
  for (const Var& t : terms) s += t.item();
  return Var::make(Tensor::scalar(s), terms, [](detail::Node& self) {
    for (std::size_t in = 0; in < self.inputs.size(); ++in) {
      if (double* g = grad_of(self, in)) g[0] += self.grad[0];
    }
  });
}

// Euclidean norm; the subgradient at zero is taken as zero.
inline Var norm(const Var& x) {
  const auto v = x.value().values();
  double s = 0.0;
  for (double e : v) s += e * e;
  const double n = std::sqrt(s);
  return Var::make(Tensor::scalar(n), {x}, [n](detail::Node& self) {
    if (n == 0.0) return;
    double* g = grad_of(self, 0);
    const auto& xv = self.inputs[0]->value;
    const double scale_ = self.grad[0] / n;
    for (std::size_t i = 0; i < xv.size(); ++i) g[i] += scale_ * xv[i];
  });
}

// Row `r` of a [rows, cols] tensor.
inline Var row(const Var& x, int r) {
  if (x.shape().size() != 2 || r < 0 || r >= x.dim(0)) {
    throw ShapeError("row " + std::to_string(r) + " of " + shape_str(x.shape()));
  }
  const int cols = x.dim(1);
  std::vector<double> v(x.value().data() + static_cast<std::size_t>(r) * cols,
                        x.value().data() + static_cast<std::size_t>(r + 1) * cols);
  return Var::make(Tensor(Shape{cols}, std::move(v)), {x}, [r, cols](detail::Node& self) {
    double* g = grad_of(self, 0) + static_cast<std::size_t>(r) * cols;
    for (int i = 0; i < cols; ++i) g[i] += self.grad[i];
  });
}

}  // namespace vpm
