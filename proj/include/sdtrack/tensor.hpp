#pragma once

// Minimal dense tensor with reverse-mode automatic differentiation. The op
// set is exactly what the tracker needs: matmul, conv2d (grouped/depthwise),
// batch norm, elementwise arithmetic, reductions, shape ops, argmax-stop-grad
// gather, and the spiking nonlinearity whose backward is a surrogate
// derivative. Ops never mutate their inputs (batch norm's running-stat
// buffers, which are documented train-mode state, are the one exception).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "sdtrack/core.hpp"
#include "sdtrack/neurons.hpp"

namespace sdtrack::ad {

inline std::int64_t numel_of(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::vector<std::int64_t> strides_of(const std::vector<int>& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  return s;
}

template <typename T>
struct Node {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

// Graph recording switch; disabled regions build value-only tensors.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    require(numel_of(shape) == static_cast<std::int64_t>(data.size()),
            "tensor: data length does not match shape");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    std::vector<T> d(static_cast<std::size_t>(numel_of(shape)), T(0));
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(std::vector<int> shape, T v, bool requires_grad = false) {
    std::vector<T> d(static_cast<std::size_t>(numel_of(shape)), v);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<int>& shape() const { return n_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(n_->value.size()); }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::vector<T>& value() { return n_->value; }
  const std::vector<T>& value() const { return n_->value; }
  std::vector<T>& grad() { n_->ensure_grad(); return n_->grad; }
  const std::vector<T>& grad_view() const { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }
  void zero_grad() { if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0)); }
  T item() const {
    require(numel() == 1, "tensor: item() requires a scalar");
    return n_->value[0];
  }

  std::shared_ptr<Node<T>> node() const { return n_; }
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(std::vector<int> shape, std::vector<T> value,
                  std::vector<Tensor<T>> parents, std::function<void(Node<T>&)> bw,
                  const char* name) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = name;
  bool track = grad_mode();
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (track && needs) {
    n->requires_grad = true;
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(bw);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
void accum(Node<T>& p, std::size_t i, T v) {
  p.grad[i] += v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward pass

template <typename T>
void backward(const Tensor<T>& loss) {
  require(loss.numel() == 1, "backward: loss must be a scalar");
  require(loss.requires_grad(), "backward: loss does not require grad");

  // Topological order by iterative post-order DFS.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward_fn) continue;
    for (auto& p : n->parents)
      if (p->requires_grad) p->ensure_grad();
    n->ensure_grad();
    n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {
template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), op, ": shape mismatch");
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> v(a.value());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += b.value()[i];
  return detail::make_op<T>(a.shape(), std::move(v), {a, b},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          if (pa.requires_grad) pa.grad[i] += n.grad[i];
          if (pb.requires_grad) pb.grad[i] += n.grad[i];
        }
      },
      "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> v(a.value());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= b.value()[i];
  return detail::make_op<T>(a.shape(), std::move(v), {a, b},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          if (pa.requires_grad) pa.grad[i] += n.grad[i];
          if (pb.requires_grad) pb.grad[i] -= n.grad[i];
        }
      },
      "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> v(a.value());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= b.value()[i];
  return detail::make_op<T>(a.shape(), std::move(v), {a, b},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          if (pa.requires_grad) pa.grad[i] += n.grad[i] * pb.value[i];
          if (pb.requires_grad) pb.grad[i] += n.grad[i] * pa.value[i];
        }
      },
      "mul");
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "div");
  std::vector<T> v(a.value());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] /= b.value()[i];
  return detail::make_op<T>(a.shape(), std::move(v), {a, b},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          T bv = pb.value[i];
          if (pa.requires_grad) pa.grad[i] += n.grad[i] / bv;
          if (pb.requires_grad) pb.grad[i] -= n.grad[i] * pa.value[i] / (bv * bv);
        }
      },
      "div");
}

// Ties route the gradient to the first operand.
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "minimum");
  std::vector<T> v(a.value());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::min(v[i], b.value()[i]);
  return detail::make_op<T>(a.shape(), std::move(v), {a, b},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          bool pick_a = pa.value[i] <= pb.value[i];
          if (pick_a && pa.requires_grad) pa.grad[i] += n.grad[i];
          if (!pick_a && pb.requires_grad) pb.grad[i] += n.grad[i];
        }
      },
      "minimum");
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "maximum");
  std::vector<T> v(a.value());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(v[i], b.value()[i]);
  return detail::make_op<T>(a.shape(), std::move(v), {a, b},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          bool pick_a = pa.value[i] >= pb.value[i];
          if (pick_a && pa.requires_grad) pa.grad[i] += n.grad[i];
          if (!pick_a && pb.requires_grad) pb.grad[i] += n.grad[i];
        }
      },
      "maximum");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> v(a.value());
  for (T& x : v) x *= c;
  return detail::make_op<T>(a.shape(), std::move(v), {a},
      [c](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += c * n.grad[i];
      },
      "scale");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> v(a.value());
  for (T& x : v) x += c;
  return detail::make_op<T>(a.shape(), std::move(v), {a},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
      },
      "add_scalar");
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) { return scale(a, T(-1)); }

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> v(a.value());
  for (T& x : v) x = std::exp(x);
  return detail::make_op<T>(a.shape(), std::move(v), {a},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * n.value[i];
      },
      "exp");
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> v(a.value());
  for (T& x : v) x = std::log(x);
  return detail::make_op<T>(a.shape(), std::move(v), {a},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          pa.grad[i] += n.grad[i] / pa.value[i];
      },
      "log");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> v(a.value());
  for (T& x : v) x = T(1) / (T(1) + std::exp(-x));
  return detail::make_op<T>(a.shape(), std::move(v), {a},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          pa.grad[i] += n.grad[i] * n.value[i] * (T(1) - n.value[i]);
      },
      "sigmoid");
}

// Gradient passes only strictly inside the clamp range.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  std::vector<T> v(a.value());
  for (T& x : v) x = std::clamp(x, lo, hi);
  return detail::make_op<T>(a.shape(), std::move(v), {a},
      [lo, hi](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          if (pa.value[i] > lo && pa.value[i] < hi) pa.grad[i] += n.grad[i];
      },
      "clamp");
}

// Adds a per-channel vector along the given axis (broadcast over the rest).
template <typename T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& b, int axis) {
  require(axis >= 0 && axis < x.rank(), "add_channel: bad axis");
  const std::int64_t C = x.dim(axis);
  require(b.numel() == C, "add_channel: channel count mismatch");
  auto st = strides_of(x.shape());
  const std::int64_t ax_stride = st[static_cast<std::size_t>(axis)];
  std::vector<T> v(x.value());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] += b.value()[static_cast<std::size_t>((static_cast<std::int64_t>(i) / ax_stride) % C)];
  return detail::make_op<T>(x.shape(), std::move(v), {x, b},
      [ax_stride, C](Node<T>& n) {
        auto& px = *n.parents[0];
        auto& pb = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          if (px.requires_grad) px.grad[i] += n.grad[i];
          if (pb.requires_grad)
            pb.grad[static_cast<std::size_t>((static_cast<std::int64_t>(i) / ax_stride) % C)] +=
                n.grad[i];
        }
      },
      "add_channel");
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = std::accumulate(a.value().begin(), a.value().end(), T(0));
  return detail::make_op<T>({1}, {s}, {a},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += n.grad[0];
      },
      "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T s = std::accumulate(a.value().begin(), a.value().end(), T(0));
  T inv = T(1) / static_cast<T>(a.numel());
  return detail::make_op<T>({1}, {s * inv}, {a},
      [inv](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += n.grad[0] * inv;
      },
      "mean");
}

// Maximum over all elements; gradient routes to the first maximal element.
template <typename T>
Tensor<T> max_all(const Tensor<T>& a) {
  require(a.numel() > 0, "max_all: empty tensor");
  std::size_t idx = 0;
  for (std::size_t i = 1; i < a.value().size(); ++i)
    if (a.value()[i] > a.value()[idx]) idx = i;
  return detail::make_op<T>({1}, {a.value()[idx]}, {a},
      [idx](Node<T>& n) {
        n.parents[0]->grad[idx] += n.grad[0];
      },
      "max_all");
}

// Sum over a single axis (the axis is removed from the shape).
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis) {
  require(axis >= 0 && axis < a.rank(), "sum_axis: bad axis");
  const auto& sh = a.shape();
  std::vector<int> out_shape;
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis) out_shape.push_back(sh[static_cast<std::size_t>(i)]);
  if (out_shape.empty()) out_shape.push_back(1);

  std::int64_t outer = 1, axis_n = sh[static_cast<std::size_t>(axis)], inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < a.rank(); ++i) inner *= sh[static_cast<std::size_t>(i)];

  std::vector<T> v(static_cast<std::size_t>(outer * inner), T(0));
  const T* in = a.value().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t k = 0; k < axis_n; ++k) {
      const T* src = in + (o * axis_n + k) * inner;
      T* dst = v.data() + o * inner;
      for (std::int64_t j = 0; j < inner; ++j) dst[j] += src[j];
    }
  return detail::make_op<T>(std::move(out_shape), std::move(v), {a},
      [outer, axis_n, inner](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t k = 0; k < axis_n; ++k) {
            T* dst = pa.grad.data() + (o * axis_n + k) * inner;
            const T* src = n.grad.data() + o * inner;
            for (std::int64_t j = 0; j < inner; ++j) dst[j] += src[j];
          }
      },
      "sum_axis");
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> new_shape) {
  require(numel_of(new_shape) == a.numel(), "reshape: element count mismatch");
  std::vector<T> v(a.value());
  return detail::make_op<T>(std::move(new_shape), std::move(v), {a},
      [](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
      },
      "reshape");
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::vector<int> perm) {
  require(static_cast<int>(perm.size()) == a.rank(), "transpose: perm rank mismatch");
  const auto& sh = a.shape();
  std::vector<int> out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    out_shape[i] = sh[static_cast<std::size_t>(perm[i])];
  auto in_strides = strides_of(sh);
  auto out_strides = strides_of(out_shape);
  // in_index_stride_for_out_axis[i] = stride in input of output axis i
  std::vector<std::int64_t> map_strides(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    map_strides[i] = in_strides[static_cast<std::size_t>(perm[i])];

  const std::int64_t n = a.numel();
  std::vector<T> v(static_cast<std::size_t>(n));
  const int rank = a.rank();
  for (std::int64_t out_i = 0; out_i < n; ++out_i) {
    std::int64_t rem = out_i, in_i = 0;
    for (int d = 0; d < rank; ++d) {
      std::int64_t c = rem / out_strides[static_cast<std::size_t>(d)];
      rem -= c * out_strides[static_cast<std::size_t>(d)];
      in_i += c * map_strides[static_cast<std::size_t>(d)];
    }
    v[static_cast<std::size_t>(out_i)] = a.value()[static_cast<std::size_t>(in_i)];
  }
  return detail::make_op<T>(std::move(out_shape), std::move(v), {a},
      [out_strides, map_strides, n, rank](Node<T>& n_) {
        auto& pa = *n_.parents[0];
        for (std::int64_t out_i = 0; out_i < n; ++out_i) {
          std::int64_t rem = out_i, in_i = 0;
          for (int d = 0; d < rank; ++d) {
            std::int64_t c = rem / out_strides[static_cast<std::size_t>(d)];
            rem -= c * out_strides[static_cast<std::size_t>(d)];
            in_i += c * map_strides[static_cast<std::size_t>(d)];
          }
          pa.grad[static_cast<std::size_t>(in_i)] += n_.grad[static_cast<std::size_t>(out_i)];
        }
      },
      "transpose");
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::vector<int> starts, std::vector<int> sizes) {
  require(static_cast<int>(starts.size()) == a.rank() && starts.size() == sizes.size(),
          "slice: rank mismatch");
  const auto& sh = a.shape();
  for (std::size_t i = 0; i < starts.size(); ++i)
    require(starts[i] >= 0 && sizes[i] >= 0 && starts[i] + sizes[i] <= sh[i],
            "slice: out of bounds on axis ", i);
  auto in_strides = strides_of(sh);
  auto out_strides = strides_of(sizes);
  const std::int64_t n = numel_of(sizes);
  const int rank = a.rank();
  std::int64_t base = 0;
  for (std::size_t i = 0; i < starts.size(); ++i) base += starts[i] * in_strides[i];

  std::vector<T> v(static_cast<std::size_t>(n));
  for (std::int64_t oi = 0; oi < n; ++oi) {
    std::int64_t rem = oi, ii = base;
    for (int d = 0; d < rank; ++d) {
      std::int64_t c = rem / out_strides[static_cast<std::size_t>(d)];
      rem -= c * out_strides[static_cast<std::size_t>(d)];
      ii += c * in_strides[static_cast<std::size_t>(d)];
    }
    v[static_cast<std::size_t>(oi)] = a.value()[static_cast<std::size_t>(ii)];
  }
  return detail::make_op<T>(sizes, std::move(v), {a},
      [in_strides, out_strides, base, n, rank](Node<T>& n_) {
        auto& pa = *n_.parents[0];
        for (std::int64_t oi = 0; oi < n; ++oi) {
          std::int64_t rem = oi, ii = base;
          for (int d = 0; d < rank; ++d) {
            std::int64_t c = rem / out_strides[static_cast<std::size_t>(d)];
            rem -= c * out_strides[static_cast<std::size_t>(d)];
            ii += c * in_strides[static_cast<std::size_t>(d)];
          }
          pa.grad[static_cast<std::size_t>(ii)] += n_.grad[static_cast<std::size_t>(oi)];
        }
      },
      "slice");
}

// Embeds `a` into a zero tensor of shape out_shape at the given offsets.
template <typename T>
Tensor<T> place(const Tensor<T>& a, std::vector<int> out_shape, std::vector<int> offsets) {
  require(out_shape.size() == offsets.size() &&
              static_cast<int>(out_shape.size()) == a.rank(),
          "place: rank mismatch");
  const auto& sh = a.shape();
  for (std::size_t i = 0; i < offsets.size(); ++i)
    require(offsets[i] >= 0 && offsets[i] + sh[i] <= out_shape[i],
            "place: block exceeds target on axis ", i);
  auto out_strides = strides_of(out_shape);
  auto in_strides = strides_of(sh);
  const std::int64_t n = a.numel();
  const int rank = a.rank();
  std::int64_t base = 0;
  for (std::size_t i = 0; i < offsets.size(); ++i) base += offsets[i] * out_strides[i];

  std::vector<T> v(static_cast<std::size_t>(numel_of(out_shape)), T(0));
  for (std::int64_t ai = 0; ai < n; ++ai) {
    std::int64_t rem = ai, oi = base;
    for (int d = 0; d < rank; ++d) {
      std::int64_t c = rem / in_strides[static_cast<std::size_t>(d)];
      rem -= c * in_strides[static_cast<std::size_t>(d)];
      oi += c * out_strides[static_cast<std::size_t>(d)];
    }
    v[static_cast<std::size_t>(oi)] = a.value()[static_cast<std::size_t>(ai)];
  }
  return detail::make_op<T>(out_shape, std::move(v), {a},
      [in_strides, out_strides, base, n, rank](Node<T>& n_) {
        auto& pa = *n_.parents[0];
        for (std::int64_t ai = 0; ai < n; ++ai) {
          std::int64_t rem = ai, oi = base;
          for (int d = 0; d < rank; ++d) {
            std::int64_t c = rem / in_strides[static_cast<std::size_t>(d)];
            rem -= c * in_strides[static_cast<std::size_t>(d)];
            oi += c * out_strides[static_cast<std::size_t>(d)];
          }
          pa.grad[static_cast<std::size_t>(ai)] += n_.grad[static_cast<std::size_t>(oi)];
        }
      },
      "place");
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  require(a.rank() == b.rank(), "concat: rank mismatch");
  require(axis >= 0 && axis < a.rank(), "concat: bad axis");
  for (int i = 0; i < a.rank(); ++i)
    require(i == axis || a.dim(i) == b.dim(i), "concat: shape mismatch on axis ", i);
  std::vector<int> out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] += b.dim(axis);

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::int64_t an = a.dim(axis) * inner, bn = b.dim(axis) * inner;

  std::vector<T> v(static_cast<std::size_t>(outer * (an + bn)));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(a.value().data() + o * an, an, v.data() + o * (an + bn));
    std::copy_n(b.value().data() + o * bn, bn, v.data() + o * (an + bn) + an);
  }
  return detail::make_op<T>(std::move(out_shape), std::move(v), {a, b},
      [outer, an, bn](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (std::int64_t o = 0; o < outer; ++o) {
          const T* g = n.grad.data() + o * (an + bn);
          if (pa.requires_grad)
            for (std::int64_t i = 0; i < an; ++i) pa.grad[static_cast<std::size_t>(o * an + i)] += g[i];
          if (pb.requires_grad)
            for (std::int64_t i = 0; i < bn; ++i) pb.grad[static_cast<std::size_t>(o * bn + i)] += g[an + i];
        }
      },
      "concat");
}

// ---------------------------------------------------------------------------
// Matmul (rank >= 2; equal leading batch dims)

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() >= 2 && b.rank() == a.rank(), "matmul: rank mismatch");
  const int r = a.rank();
  for (int i = 0; i < r - 2; ++i)
    require(a.dim(i) == b.dim(i), "matmul: batch dim mismatch on axis ", i);
  const std::int64_t M = a.dim(r - 2), K = a.dim(r - 1), N = b.dim(r - 1);
  require(b.dim(r - 2) == K, "matmul: inner dimension mismatch (", K, " vs ", b.dim(r - 2), ")");
  std::int64_t batch = 1;
  for (int i = 0; i < r - 2; ++i) batch *= a.dim(i);

  std::vector<int> out_shape = a.shape();
  out_shape[static_cast<std::size_t>(r - 1)] = static_cast<int>(N);
  std::vector<T> v(static_cast<std::size_t>(batch * M * N), T(0));
  const T* A = a.value().data();
  const T* B = b.value().data();
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    const T* Ab = A + bi * M * K;
    const T* Bb = B + bi * K * N;
    T* Cb = v.data() + bi * M * N;
    for (std::int64_t i = 0; i < M; ++i)
      for (std::int64_t k = 0; k < K; ++k) {
        T av = Ab[i * K + k];
        if (av == T(0)) continue;
        const T* brow = Bb + k * N;
        T* crow = Cb + i * N;
        for (std::int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
  }
  return detail::make_op<T>(std::move(out_shape), std::move(v), {a, b},
      [batch, M, K, N](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (std::int64_t bi = 0; bi < batch; ++bi) {
          const T* Ab = pa.value.data() + bi * M * K;
          const T* Bb = pb.value.data() + bi * K * N;
          const T* Gb = n.grad.data() + bi * M * N;
          if (pa.requires_grad) {
            T* dA = pa.grad.data() + bi * M * K;
            for (std::int64_t i = 0; i < M; ++i)
              for (std::int64_t k = 0; k < K; ++k) {
                const T* grow = Gb + i * N;
                const T* brow = Bb + k * N;
                T acc = T(0);
                for (std::int64_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
                dA[i * K + k] += acc;
              }
          }
          if (pb.requires_grad) {
            T* dB = pb.grad.data() + bi * K * N;
            for (std::int64_t i = 0; i < M; ++i)
              for (std::int64_t k = 0; k < K; ++k) {
                T av = Ab[i * K + k];
                if (av == T(0)) continue;
                const T* grow = Gb + i * N;
                T* drow = dB + k * N;
                for (std::int64_t j = 0; j < N; ++j) drow[j] += av * grow[j];
              }
          }
        }
      },
      "matmul");
}

// ---------------------------------------------------------------------------
// conv2d: input (N, Cin, H, W), weight (Cout, Cin/groups, kh, kw), optional
// bias (Cout). Cross-correlation semantics.

namespace detail {

struct ConvDims {
  std::int64_t n, cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad, groups;
  std::int64_t cin_g, cout_g;
};

inline ConvDims conv_dims(const std::vector<int>& xs, const std::vector<int>& ws, int stride,
                          int pad, int groups) {
  require(xs.size() == 4 && ws.size() == 4, "conv2d: input and weight must be rank-4");
  ConvDims d;
  d.n = xs[0]; d.cin = xs[1]; d.h = xs[2]; d.w = xs[3];
  d.cout = ws[0]; d.kh = ws[2]; d.kw = ws[3];
  d.stride = stride; d.pad = pad; d.groups = groups;
  require(stride >= 1 && pad >= 0 && groups >= 1, "conv2d: bad stride/pad/groups");
  require(d.cin % groups == 0 && d.cout % groups == 0,
          "conv2d: channels not divisible by groups");
  d.cin_g = d.cin / groups;
  d.cout_g = d.cout / groups;
  require(ws[1] == d.cin_g, "conv2d: weight in-channels ", ws[1], " != ", d.cin_g);
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  require(d.ho >= 1 && d.wo >= 1, "conv2d: output would be empty");
  return d;
}

// Valid output-column range for a given kernel column.
inline void conv_ow_range(std::int64_t kw_i, std::int64_t w, std::int64_t wo, int stride, int pad,
                          std::int64_t& lo, std::int64_t& hi) {
  // need 0 <= ow*stride - pad + kw_i < w
  std::int64_t off = kw_i - pad;
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  hi = (w - 1 - off) / stride + 1;
  if (hi > wo) hi = wo;
  if (lo > hi) lo = hi;
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad, int groups) {
  auto d = detail::conv_dims(x.shape(), w.shape(), stride, pad, groups);
  bool has_bias = bias.defined();
  if (has_bias)
    require(bias.numel() == d.cout, "conv2d: bias length must equal out channels");

  std::vector<T> out(static_cast<std::size_t>(d.n * d.cout * d.ho * d.wo), T(0));
  const T* X = x.value().data();
  const T* W = w.value().data();
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t g = 0; g < d.groups; ++g)
      for (std::int64_t cog = 0; cog < d.cout_g; ++cog) {
        std::int64_t co = g * d.cout_g + cog;
        T* out_base = out.data() + (n * d.cout + co) * d.ho * d.wo;
        if (has_bias) {
          T bv = bias.value()[static_cast<std::size_t>(co)];
          for (std::int64_t i = 0; i < d.ho * d.wo; ++i) out_base[i] += bv;
        }
        for (std::int64_t cig = 0; cig < d.cin_g; ++cig) {
          std::int64_t ci = g * d.cin_g + cig;
          const T* in_base = X + (n * d.cin + ci) * d.h * d.w;
          const T* w_base = W + ((co * d.cin_g) + cig) * d.kh * d.kw;
          for (std::int64_t kh_i = 0; kh_i < d.kh; ++kh_i)
            for (std::int64_t kw_i = 0; kw_i < d.kw; ++kw_i) {
              T wv = w_base[kh_i * d.kw + kw_i];
              if (wv == T(0)) continue;
              std::int64_t lo, hi;
              detail::conv_ow_range(kw_i, d.w, d.wo, stride, pad, lo, hi);
              for (std::int64_t oh = 0; oh < d.ho; ++oh) {
                std::int64_t ih = oh * stride - pad + kh_i;
                if (ih < 0 || ih >= d.h) continue;
                const T* in_row = in_base + ih * d.w - pad + kw_i;
                T* out_row = out_base + oh * d.wo;
                if (stride == 1) {
                  for (std::int64_t ow = lo; ow < hi; ++ow) out_row[ow] += wv * in_row[ow];
                } else {
                  for (std::int64_t ow = lo; ow < hi; ++ow)
                    out_row[ow] += wv * in_row[ow * stride];
                }
              }
            }
        }
      }

  std::vector<int> out_shape{static_cast<int>(d.n), static_cast<int>(d.cout),
                             static_cast<int>(d.ho), static_cast<int>(d.wo)};
  std::vector<Tensor<T>> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return detail::make_op<T>(std::move(out_shape), std::move(out), std::move(parents),
      [d, has_bias](Node<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        Node<T>* pb = has_bias ? nd.parents[2].get() : nullptr;
        const T* G = nd.grad.data();
        if (pb && pb->requires_grad) {
          for (std::int64_t n = 0; n < d.n; ++n)
            for (std::int64_t co = 0; co < d.cout; ++co) {
              const T* g = G + (n * d.cout + co) * d.ho * d.wo;
              T acc = T(0);
              for (std::int64_t i = 0; i < d.ho * d.wo; ++i) acc += g[i];
              pb->grad[static_cast<std::size_t>(co)] += acc;
            }
        }
        for (std::int64_t n = 0; n < d.n; ++n)
          for (std::int64_t g = 0; g < d.groups; ++g)
            for (std::int64_t cog = 0; cog < d.cout_g; ++cog) {
              std::int64_t co = g * d.cout_g + cog;
              const T* g_base = G + (n * d.cout + co) * d.ho * d.wo;
              for (std::int64_t cig = 0; cig < d.cin_g; ++cig) {
                std::int64_t ci = g * d.cin_g + cig;
                const T* in_base = px.value.data() + (n * d.cin + ci) * d.h * d.w;
                T* din_base = px.requires_grad ? px.grad.data() + (n * d.cin + ci) * d.h * d.w : nullptr;
                const std::int64_t w_off = ((co * d.cin_g) + cig) * d.kh * d.kw;
                for (std::int64_t kh_i = 0; kh_i < d.kh; ++kh_i)
                  for (std::int64_t kw_i = 0; kw_i < d.kw; ++kw_i) {
                    std::int64_t lo, hi;
                    detail::conv_ow_range(kw_i, d.w, d.wo, d.stride, d.pad, lo, hi);
                    T wv = pw.value[static_cast<std::size_t>(w_off + kh_i * d.kw + kw_i)];
                    T wacc = T(0);
                    for (std::int64_t oh = 0; oh < d.ho; ++oh) {
                      std::int64_t ih = oh * d.stride - d.pad + kh_i;
                      if (ih < 0 || ih >= d.h) continue;
                      const T* g_row = g_base + oh * d.wo;
                      std::int64_t row_off = ih * d.w - d.pad + kw_i;
                      if (pw.requires_grad) {
                        const T* in_row = in_base + row_off;
                        for (std::int64_t ow = lo; ow < hi; ++ow)
                          wacc += g_row[ow] * in_row[ow * d.stride];
                      }
                      if (din_base) {
                        T* din_row = din_base + row_off;
                        for (std::int64_t ow = lo; ow < hi; ++ow)
                          din_row[ow * d.stride] += wv * g_row[ow];
                      }
                    }
                    if (pw.requires_grad)
                      pw.grad[static_cast<std::size_t>(w_off + kh_i * d.kw + kw_i)] += wacc;
                  }
              }
            }
      },
      "conv2d");
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad, int groups) {
  return conv2d(x, w, Tensor<T>(), stride, pad, groups);
}

// ---------------------------------------------------------------------------
// Batch norm over an arbitrary channel axis. Training mode normalizes with
// batch statistics and updates the running buffers in place (the documented
// train-mode side effect); eval mode uses the stored statistics.

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, int axis, bool training,
                     T momentum = T(0.1), T eps = T(1e-5)) {
  require(axis >= 0 && axis < x.rank(), "batch_norm: bad axis");
  const std::int64_t C = x.dim(axis);
  require(gamma.numel() == C && beta.numel() == C && running_mean.numel() == C &&
              running_var.numel() == C,
          "batch_norm: per-channel parameter size mismatch");
  const std::int64_t n = x.numel();
  const std::int64_t m = n / C;  // elements per channel

  auto st = strides_of(x.shape());
  const std::int64_t ax_stride = st[static_cast<std::size_t>(axis)];
  auto channel_of = [C, ax_stride](std::int64_t i) { return (i / ax_stride) % C; };

  std::vector<T> mean_c(static_cast<std::size_t>(C), T(0));
  std::vector<T> var_c(static_cast<std::size_t>(C), T(0));
  if (training) {
    require(m > 0, "batch_norm: empty input");
    for (std::int64_t i = 0; i < n; ++i)
      mean_c[static_cast<std::size_t>(channel_of(i))] += x.value()[static_cast<std::size_t>(i)];
    for (auto& v : mean_c) v /= static_cast<T>(m);
    for (std::int64_t i = 0; i < n; ++i) {
      T dvi = x.value()[static_cast<std::size_t>(i)] - mean_c[static_cast<std::size_t>(channel_of(i))];
      var_c[static_cast<std::size_t>(channel_of(i))] += dvi * dvi;
    }
    for (auto& v : var_c) v /= static_cast<T>(m);
    // Running update (unbiased variance when possible).
    T unbias = m > 1 ? static_cast<T>(m) / static_cast<T>(m - 1) : T(1);
    for (std::int64_t c = 0; c < C; ++c) {
      auto ci = static_cast<std::size_t>(c);
      running_mean.value()[ci] = (T(1) - momentum) * running_mean.value()[ci] + momentum * mean_c[ci];
      running_var.value()[ci] =
          (T(1) - momentum) * running_var.value()[ci] + momentum * var_c[ci] * unbias;
    }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mean_c[static_cast<std::size_t>(c)] = running_mean.value()[static_cast<std::size_t>(c)];
      var_c[static_cast<std::size_t>(c)] = running_var.value()[static_cast<std::size_t>(c)];
    }
  }

  std::vector<T> inv_std(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c)
    inv_std[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var_c[static_cast<std::size_t>(c)] + eps);

  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    auto c = static_cast<std::size_t>(channel_of(i));
    T xh = (x.value()[static_cast<std::size_t>(i)] - mean_c[c]) * inv_std[c];
    (*xhat)[static_cast<std::size_t>(i)] = xh;
    out[static_cast<std::size_t>(i)] = gamma.value()[c] * xh + beta.value()[c];
  }

  return detail::make_op<T>(x.shape(), std::move(out), {x, gamma, beta},
      [xhat, inv_std, channel_of, m, C, training](Node<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pg = *nd.parents[1];
        auto& pb = *nd.parents[2];
        const std::int64_t n = static_cast<std::int64_t>(nd.grad.size());
        std::vector<T> sum_g(static_cast<std::size_t>(C), T(0));
        std::vector<T> sum_gx(static_cast<std::size_t>(C), T(0));
        for (std::int64_t i = 0; i < n; ++i) {
          auto c = static_cast<std::size_t>(channel_of(i));
          sum_g[c] += nd.grad[static_cast<std::size_t>(i)];
          sum_gx[c] += nd.grad[static_cast<std::size_t>(i)] * (*xhat)[static_cast<std::size_t>(i)];
        }
        if (pg.requires_grad)
          for (std::int64_t c = 0; c < C; ++c) pg.grad[static_cast<std::size_t>(c)] += sum_gx[static_cast<std::size_t>(c)];
        if (pb.requires_grad)
          for (std::int64_t c = 0; c < C; ++c) pb.grad[static_cast<std::size_t>(c)] += sum_g[static_cast<std::size_t>(c)];
        if (px.requires_grad) {
          for (std::int64_t i = 0; i < n; ++i) {
            auto c = static_cast<std::size_t>(channel_of(i));
            T g = nd.grad[static_cast<std::size_t>(i)];
            T gxh = (*xhat)[static_cast<std::size_t>(i)];
            T dx;
            if (training) {
              dx = pg.value[c] * inv_std[c] *
                   (g - sum_g[c] / static_cast<T>(m) - gxh * sum_gx[c] / static_cast<T>(m));
            } else {
              dx = pg.value[c] * inv_std[c] * g;
            }
            px.grad[static_cast<std::size_t>(i)] += dx;
          }
        }
      },
      "batch_norm");
}

// ---------------------------------------------------------------------------
// Spiking nonlinearity. Input is the already-shifted membrane (u - u_thr);
// forward is the exact step/quantize function, backward is the surrogate.

template <typename T>
Tensor<T> spike_activation(const Tensor<T>& u_minus_thr, const NeuronConfig<T>& cfg) {
  std::vector<T> v(u_minus_thr.value());
  if (cfg.kind == NeuronKind::ILIF) {
    for (T& x : v) x = sdtrack::detail::ilif_quantize(x, cfg.d);
  } else {
    for (T& x : v) x = x >= T(0) ? T(1) : T(0);
  }
  return detail::make_op<T>(u_minus_thr.shape(), std::move(v), {u_minus_thr},
      [cfg](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          pa.grad[i] += n.grad[i] * surrogate_grad_at(pa.value[i], cfg);
      },
      "spike");
}

// Differentiable stand-in whose true derivative equals the surrogate; used to
// validate the surrogate-backed path against finite differences.
template <typename T>
Tensor<T> spike_surrogate_standin(const Tensor<T>& u_minus_thr, const NeuronConfig<T>& cfg) {
  std::vector<T> v(u_minus_thr.value());
  if (cfg.kind == NeuronKind::ILIF) {
    for (T& x : v) x = std::clamp(x, T(0), T(cfg.d));
  } else {
    const T w = cfg.surrogate_width;
    for (T& x : v) x = std::clamp((x + w) / (T(2) * w), T(0), T(1));
  }
  return detail::make_op<T>(u_minus_thr.shape(), std::move(v), {u_minus_thr},
      [cfg](Node<T>& n) {
        auto& pa = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          pa.grad[i] += n.grad[i] * surrogate_grad_at(pa.value[i], cfg);
      },
      "spike_standin");
}

// ---------------------------------------------------------------------------
// Gather / argmax

template <typename T>
std::int64_t argmax_flat(const Tensor<T>& x) {
  require(x.numel() > 0, "argmax: empty tensor");
  std::size_t idx = 0;
  for (std::size_t i = 1; i < x.value().size(); ++i)
    if (x.value()[i] > x.value()[idx]) idx = i;  // first max wins (row-major)
  return static_cast<std::int64_t>(idx);
}

// Extracts a single element; gradient scatters back to that element. The
// index itself carries no gradient.
template <typename T>
Tensor<T> gather_flat(const Tensor<T>& x, std::int64_t index) {
  require(index >= 0 && index < x.numel(), "gather: index out of range");
  return detail::make_op<T>({1}, {x.value()[static_cast<std::size_t>(index)]}, {x},
      [index](Node<T>& n) {
        n.parents[0]->grad[static_cast<std::size_t>(index)] += n.grad[0];
      },
      "gather");
}

template <typename T>
Tensor<T> constant_like(const std::vector<int>& shape, std::vector<T> data) {
  return Tensor<T>::from(shape, std::move(data), false);
}

}  // namespace sdtrack::ad
