// Dense float tensors with taped reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Operations on tensors that
// (transitively) depend on a requires_grad leaf record a backward closure;
// everything else is a plain value computation. backward() walks the tape
// once, accumulates into leaf gradients and releases the interior graph.
//
// Shapes are row-major. Most ops are rank-2 ([rows, cols], rows = tokens);
// elementwise ops accept any shape. The only broadcast is a [1, c] operand
// added to an [r, c] operand.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace promptdoor::nc {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty == absent
  bool requires_grad = false;
  bool leaf = true;
  bool released = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  std::string name;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->data.assign(numel_of(shape), 0.0f);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(float v) { return from({}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

  std::span<const float> data() const { return node_->data; }
  std::span<float> mutable_data() { return node_->data; }
  float operator()(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  float item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->leaf) throw GraphError("set_requires_grad: only leaf tensors can be toggled");
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const float> grad() const { return node_->grad; }
  std::span<float> mutable_grad() { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
  }
  void clear_grad() { node_->grad.clear(); }

  const std::string& name() const { return node_->name; }
  Tensor& named(std::string n) {
    node_->name = std::move(n);
    return *this;
  }

  // Detached copy: same values, no history, no grad.
  Tensor detach() const { return from(shape(), node_->data); }

  const std::shared_ptr<Node>& node() const { return node_; }

  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " + shape_str(t.shape()));
  }
}

inline Tensor make_result(Shape shape, std::vector<float> data,
                          std::initializer_list<Tensor> inputs) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->leaf = false;
  for (const auto& in : inputs) {
    if (in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto& in : inputs) n->parents.push_back(in.node());
  }
  return Tensor(std::move(n));
}

inline Tensor make_result(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->leaf = false;
  for (const auto& in : inputs) {
    if (in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto& in : inputs) n->parents.push_back(in.node());
  }
  return Tensor(std::move(n));
}

inline void on_backward(Tensor& out, std::function<void(Node&)> fn) {
  if (out.requires_grad()) out.node()->backward = std::move(fn);
}

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace detail

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(shape()));
  }
  if (node_->released) throw GraphError("backward: graph was already released");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node* n : order) {
    if (n->leaf) continue;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->released = true;
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

enum class Transpose { none, rhs };

// a [n, k] x b [k, m]  (or b [m, k] when trans == Transpose::rhs)
inline Tensor matmul(const Tensor& a, const Tensor& b, Transpose trans = Transpose::none) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const bool tb = trans == Transpose::rhs;
  const std::size_t n = a.rows(), k = a.cols();
  const std::size_t bk = tb ? b.cols() : b.rows();
  const std::size_t m = tb ? b.rows() : b.cols();
  if (k != bk) {
    throw ShapeError("matmul: inner dimensions differ, lhs " + shape_str(a.shape()) + " rhs " +
                     shape_str(b.shape()) + (tb ? " (rhs transposed)" : ""));
  }
  std::vector<float> out(n * m);
  detail::Map C(out.data(), n, m);
  detail::MapC A(a.data().data(), n, k);
  detail::MapC B(b.data().data(), b.rows(), b.cols());
  if (tb) {
    C.noalias() = A * B.transpose();
  } else {
    C.noalias() = A * B;
  }
  Tensor r = detail::make_result({n, m}, std::move(out), {a, b});
  detail::on_backward(r, [n, k, m, tb](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    detail::MapC dC(self.grad.data(), n, m);
    const std::size_t br = tb ? m : k, bc = tb ? k : m;
    if (pa.requires_grad) {
      pa.ensure_grad();
      detail::Map dA(pa.grad.data(), n, k);
      detail::MapC B(pb.data.data(), br, bc);
      if (tb) {
        dA.noalias() += dC * B;
      } else {
        dA.noalias() += dC * B.transpose();
      }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      detail::Map dB(pb.grad.data(), br, bc);
      detail::MapC A(pa.data.data(), n, k);
      if (tb) {
        dB.noalias() += dC.transpose() * A;
      } else {
        dB.noalias() += A.transpose() * dC;
      }
    }
  });
  return r;
}

// ---------------------------------------------------------------------------
// Elementwise

// Same shapes, or a [r, c] + b [1, c] (row broadcast over the leading dim).
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool bcast = !same && a.rank() == 2 && b.rank() == 2 && b.rows() == 1 && b.cols() == a.cols();
  if (!same && !bcast) {
    throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  std::vector<float> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  const std::size_t c = b.numel();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[bcast ? i % c : i];
  Tensor r = detail::make_result(a.shape(), std::move(out), {a, b});
  detail::on_backward(r, [bcast, c](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[bcast ? i % c : i] += self.grad[i];
    }
  });
  return r;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor r = detail::make_result(a.shape(), std::move(out), {a, b});
  detail::on_backward(r, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
  return r;
}

inline Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  Tensor r = detail::make_result(a.shape(), std::move(out), {a});
  detail::on_backward(r, [s](Node& self) {
    Node& pa = detail::parent(self, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += s * self.grad[i];
  });
  return r;
}

namespace detail {

// y = f(x) elementwise, dy/dx = df(x, y).
template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
  Tensor r = make_result(a.shape(), std::move(out), {a});
  on_backward(r, [df](Node& self) {
    Node& pa = parent(self, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      pa.grad[i] += self.grad[i] * df(pa.data[i], self.data[i]);
    }
  });
  return r;
}

}  // namespace detail

inline Tensor log(const Tensor& a) {
  return detail::unary(
      a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; });
}

// tanh approximation of GELU
inline Tensor gelu(const Tensor& a) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float c = 0.044715f;
  return detail::unary(
      a,
      [](float x) { return 0.5f * x * (1.0f + std::tanh(k * (x + c * x * x * x))); },
      [](float x, float) {
        const float u = k * (x + c * x * x * x);
        const float t = std::tanh(u);
        const float du = k * (1.0f + 3.0f * c * x * x);
        return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
      });
}

inline Tensor sum(const Tensor& a) {
  float s = 0.0f;
  for (float v : a.data()) s += v;
  Tensor r = detail::make_result({}, {s}, {a});
  detail::on_backward(r, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    pa.ensure_grad();
    for (auto& g : pa.grad) g += self.grad[0];
  });
  return r;
}

// ---------------------------------------------------------------------------
// Structural

// Concatenation along the token (row) axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  std::size_t rows = 0;
  const std::size_t c = parts.front().cols();
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.cols() != c) {
      throw ShapeError("concat_rows: width mismatch, " + shape_str(parts.front().shape()) +
                       " vs " + shape_str(p.shape()));
    }
    rows += p.rows();
  }
  std::vector<float> out;
  out.reserve(rows * c);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Tensor r = detail::make_result({rows, c}, std::move(out), parts);
  detail::on_backward(r, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      const float* g = self.grad.data() + offsets[i];
      for (std::size_t j = 0; j < p.grad.size(); ++j) p.grad[j] += g[j];
    }
  });
  return r;
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a, "slice_rows");
  if (begin > end || end > a.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + shape_str(a.shape()));
  }
  const std::size_t c = a.cols();
  std::vector<float> out(a.data().begin() + begin * c, a.data().begin() + end * c);
  Tensor r = detail::make_result({end - begin, c}, std::move(out), {a});
  detail::on_backward(r, [begin, c](Node& self) {
    Node& pa = detail::parent(self, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[begin * c + i] += self.grad[i];
  });
  return r;
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a, "slice_cols");
  if (begin > end || end > a.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + shape_str(a.shape()));
  }
  const std::size_t n = a.rows(), c = a.cols(), w = end - begin;
  std::vector<float> out(n * w);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + i * c + begin, w, out.begin() + i * w);
  }
  Tensor r = detail::make_result({n, w}, std::move(out), {a});
  detail::on_backward(r, [n, c, w, begin](Node& self) {
    Node& pa = detail::parent(self, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < w; ++j) pa.grad[i * c + begin + j] += self.grad[i * w + j];
    }
  });
  return r;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t n = parts.front().rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != n) {
      throw ShapeError("concat_cols: row mismatch, " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    }
    c += p.cols();
  }
  std::vector<float> out(n * c);
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (col offset, width)
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(p.data().begin() + i * w, w, out.begin() + i * c + off);
    }
    spans.emplace_back(off, w);
    off += w;
  }
  Tensor r = detail::make_result({n, c}, std::move(out), parts);
  detail::on_backward(r, [spans, n, c](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      const auto [o, w] = spans[k];
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < w; ++j) p.grad[i * w + j] += self.grad[i * c + o + j];
      }
    }
  });
  return r;
}

// Rows of `table` [V, d] selected by ids -> [len, d].
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  detail::require_rank2(table, "embedding");
  const std::size_t V = table.rows(), d = table.cols();
  std::vector<float> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table " +
                       shape_str(table.shape()));
    }
    std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  Tensor r = detail::make_result({ids.size(), d}, std::move(out), {table});
  std::vector<int> idv(ids.begin(), ids.end());
  detail::on_backward(r, [idv = std::move(idv), d](Node& self) {
    Node& pt = detail::parent(self, 0);
    pt.ensure_grad();
    for (std::size_t i = 0; i < idv.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) pt.grad[idv[i] * d + j] += self.grad[i * d + j];
    }
  });
  return r;
}

// ---------------------------------------------------------------------------
// Normalizations and attention helpers

inline Tensor softmax_rows(const Tensor& a) {
  detail::require_rank2(a, "softmax_rows");
  const std::size_t n = a.rows(), c = a.cols();
  std::vector<float> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const float* x = a.data().data() + i * c;
    float* y = out.data() + i * c;
    const float mx = *std::max_element(x, x + c);
    float s = 0.0f;
    for (std::size_t j = 0; j < c; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= s;
  }
  Tensor r = detail::make_result({n, c}, std::move(out), {a});
  detail::on_backward(r, [n, c](Node& self) {
    Node& pa = detail::parent(self, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const float* y = self.data.data() + i * c;
      const float* dy = self.grad.data() + i * c;
      float dot = 0.0f;
      for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) pa.grad[i * c + j] += y[j] * (dy[j] - dot);
    }
  });
  return r;
}

inline Tensor log_softmax_rows(const Tensor& a) {
  detail::require_rank2(a, "log_softmax_rows");
  const std::size_t n = a.rows(), c = a.cols();
  std::vector<float> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const float* x = a.data().data() + i * c;
    const float mx = *std::max_element(x, x + c);
    float s = 0.0f;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[j] - mx);
    const float lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[j] - lse;
  }
  Tensor r = detail::make_result({n, c}, std::move(out), {a});
  detail::on_backward(r, [n, c](Node& self) {
    Node& pa = detail::parent(self, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const float* y = self.data.data() + i * c;
      const float* dy = self.grad.data() + i * c;
      float gs = 0.0f;
      for (std::size_t j = 0; j < c; ++j) gs += dy[j];
      for (std::size_t j = 0; j < c; ++j) pa.grad[i * c + j] += dy[j] - std::exp(y[j]) * gs;
    }
  });
  return r;
}

// Per-row normalization with affine gain/bias of shape [1, d].
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         float eps = 1e-5f) {
  detail::require_rank2(x, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " with gain " +
                     shape_str(gain.shape()) + " and bias " + shape_str(bias.shape()));
  }
  std::vector<float> out(n * d), xhat(n * d), rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* xi = x.data().data() + i * d;
    float mu = 0.0f;
    for (std::size_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<float>(d);
    float var = 0.0f;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<float>(d);
    rstd[i] = 1.0f / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xi[j] - mu) * rstd[i];
      out[i * d + j] = xhat[i * d + j] * gain.data()[j] + bias.data()[j];
    }
  }
  Tensor r = detail::make_result({n, d}, std::move(out), {x, gain, bias});
  detail::on_backward(r, [n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
    Node& px = detail::parent(self, 0);
    Node& pg = detail::parent(self, 1);
    Node& pb = detail::parent(self, 2);
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    if (px.requires_grad) px.ensure_grad();
    std::vector<float> dxhat(d);
    for (std::size_t i = 0; i < n; ++i) {
      const float* dy = self.grad.data() + i * d;
      const float* xh = xhat.data() + i * d;
      float m1 = 0.0f, m2 = 0.0f;
      for (std::size_t j = 0; j < d; ++j) {
        if (pg.requires_grad) pg.grad[j] += dy[j] * xh[j];
        if (pb.requires_grad) pb.grad[j] += dy[j];
        dxhat[j] = dy[j] * pg.data[j];
        m1 += dxhat[j];
        m2 += dxhat[j] * xh[j];
      }
      if (!px.requires_grad) continue;
      m1 /= static_cast<float>(d);
      m2 /= static_cast<float>(d);
      for (std::size_t j = 0; j < d; ++j) {
        px.grad[i * d + j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
      }
    }
  });
  return r;
}

// Entry (i, j) is replaced by `fill` when j > i + offset. With a cached prefix of
// length p in front of the query rows, offset = p keeps attention causal.
inline Tensor causal_mask_fill(const Tensor& scores, std::size_t offset = 0,
                               float fill = -std::numeric_limits<float>::infinity()) {
  detail::require_rank2(scores, "causal_mask_fill");
  const std::size_t n = scores.rows(), c = scores.cols();
  std::vector<float> out(scores.data().begin(), scores.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + offset + 1; j < c; ++j) out[i * c + j] = fill;
  }
  Tensor r = detail::make_result({n, c}, std::move(out), {scores});
  detail::on_backward(r, [n, c, offset](Node& self) {
    Node& pa = detail::parent(self, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t lim = std::min(c, i + offset + 1);
      for (std::size_t j = 0; j < lim; ++j) pa.grad[i * c + j] += self.grad[i * c + j];
    }
  });
  return r;
}

// Rotary position encoding applied independently to each head of width
// cols/heads; row i sits at absolute position offset + i.
inline Tensor rotary(const Tensor& x, std::size_t heads, std::size_t offset, float base = 10000.0f) {
  detail::require_rank2(x, "rotary");
  const std::size_t n = x.rows(), c = x.cols();
  if (heads == 0 || c % heads != 0 || (c / heads) % 2 != 0) {
    throw ShapeError("rotary: width " + std::to_string(c) + " does not split into " +
                     std::to_string(heads) + " even-width heads");
  }
  const std::size_t dh = c / heads, half = dh / 2;
  std::vector<float> cs(n * half), sn(n * half);
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = static_cast<double>(offset + i);
    for (std::size_t k = 0; k < half; ++k) {
      const double theta = pos * std::pow(static_cast<double>(base), -2.0 * k / dh);
      cs[i * half + k] = static_cast<float>(std::cos(theta));
      sn[i * half + k] = static_cast<float>(std::sin(theta));
    }
  }
  std::vector<float> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t k = 0; k < half; ++k) {
        const std::size_t a = i * c + h * dh + 2 * k;
        const float x0 = x.data()[a], x1 = x.data()[a + 1];
        const float co = cs[i * half + k], si = sn[i * half + k];
        out[a] = x0 * co - x1 * si;
        out[a + 1] = x0 * si + x1 * co;
      }
    }
  }
  Tensor r = detail::make_result({n, c}, std::move(out), {x});
  detail::on_backward(r, [n, c, heads, dh, half, cs = std::move(cs), sn = std::move(sn)](Node& self) {
    Node& px = detail::parent(self, 0);
    px.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t k = 0; k < half; ++k) {
          const std::size_t a = i * c + h * dh + 2 * k;
          const float g0 = self.grad[a], g1 = self.grad[a + 1];
          const float co = cs[i * half + k], si = sn[i * half + k];
          px.grad[a] += g0 * co + g1 * si;
          px.grad[a + 1] += -g0 * si + g1 * co;
        }
      }
    }
  });
  return r;
}

// ---------------------------------------------------------------------------
// Losses and estimators

// Mean over rows of -log softmax(logits)[target]; fused with log-softmax.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.rows(), V = logits.cols();
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                     std::to_string(targets.size()) + " targets");
  }
  if (n == 0) throw ShapeError("cross_entropy: no rows");
  std::vector<float> probs(n * V);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) +
                       " outside vocabulary of " + std::to_string(V));
    }
    const float* z = logits.data().data() + i * V;
    const float mx = *std::max_element(z, z + V);
    float s = 0.0f;
    for (std::size_t j = 0; j < V; ++j) s += (probs[i * V + j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < V; ++j) probs[i * V + j] /= s;
    total += static_cast<double>(mx + std::log(s) - z[targets[i]]);
  }
  Tensor r = detail::make_result({}, {static_cast<float>(total / n)}, {logits});
  std::vector<int> tv(targets.begin(), targets.end());
  detail::on_backward(r, [n, V, probs = std::move(probs), tv = std::move(tv)](Node& self) {
    Node& pl = detail::parent(self, 0);
    pl.ensure_grad();
    const float g = self.grad[0] / static_cast<float>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < V; ++j) pl.grad[i * V + j] += g * probs[i * V + j];
      pl.grad[i * V + tv[i]] -= g;
    }
  });
  return r;
}

// Forward value is `hard`; the backward pass routes the incoming gradient to
// `soft` unchanged (straight-through estimator).
inline Tensor straight_through(const Tensor& soft, std::vector<float> hard) {
  if (hard.size() != soft.numel()) {
    throw ShapeError("straight_through: " + std::to_string(hard.size()) +
                     " hard values for soft " + shape_str(soft.shape()));
  }
  Tensor r = detail::make_result(soft.shape(), std::move(hard), {soft});
  detail::on_backward(r, [](Node& self) {
    Node& ps = detail::parent(self, 0);
    ps.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ps.grad[i] += self.grad[i];
  });
  return r;
}

// Lowest index wins ties.
inline std::size_t argmax(std::span<const float> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace promptdoor::nc
