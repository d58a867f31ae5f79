#pragma once

// Reverse-mode automatic differentiation on small dense tensors.
//
// Tensors are handles to shared graph nodes. Every operation records its
// parents and a backward rule; backward rules build their adjoints out of
// the same public ops, so gradient() can itself emit a differentiable graph
// (create_graph) and second-order gradients come out of the same machinery.
//
// Scope is deliberately small: rank 0/1/2, double precision, row-major,
// single-threaded. Shapes are checked eagerly and mismatches throw
// ShapeError naming the op and both shapes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace metanb {

using Shape = std::vector<std::size_t>;

// Raised when operand shapes are incompatible with an op.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a computation leaves the numeric domain (zero norms,
// non-finite losses, diverging training).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

// Thread-local switch: when off, ops produce plain constants and record
// nothing. gradient() flips it according to create_graph.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// RAII guard that disables graph recording in its scope.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Maps the adjoint of this node to adjoints of each parent (aligned with
  // `parents`; a default-constructed Tensor means "no contribution").
  std::function<std::vector<Tensor>(const Tensor&)> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad && detail::grad_mode();
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), v);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  static Tensor scalar(double v) { return from_data({}, {v}); }

  // Leaf parameter: data that gradients are taken with respect to.
  static Tensor param(Shape shape, std::vector<double> data) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    if (shape_numel(n->shape) != n->value.size())
      throw ShapeError("param: shape/data size mismatch");
    n->requires_grad = true;  // leaves stay differentiable regardless of grad mode
    return Tensor(std::move(n));
  }

  // Re-wraps an existing graph node (used by backward closures that refer to
  // their own output through a weak_ptr).
  static Tensor wrap_node(std::shared_ptr<detail::Node> n) {
    if (!n) throw std::logic_error("wrap_node: node expired");
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return check().shape; }
  std::size_t rank() const { return check().shape.size(); }
  std::size_t numel() const { return check().value.size(); }
  bool requires_grad() const { return check().requires_grad; }
  bool is_leaf() const { return !check().backward; }
  const std::vector<double>& data() const { return check().value; }

  std::size_t rows() const {
    if (rank() != 2) throw ShapeError("rows: tensor is not 2-d: " + shape_str(shape()));
    return shape()[0];
  }
  std::size_t cols() const {
    if (rank() != 2) throw ShapeError("cols: tensor is not 2-d: " + shape_str(shape()));
    return shape()[1];
  }

  double item() const {
    if (numel() != 1)
      throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    return check().value[0];
  }
  double at(std::size_t i) const { return check().value.at(i); }
  double at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw ShapeError("at(r,c): tensor is not 2-d");
    return check().value.at(r * shape()[1] + c);
  }

  // In-place update of a leaf's storage (optimizer steps, FD probes).
  // Graph nodes are immutable once recorded, so this is leaf-only.
  void set_data(const std::vector<double>& d) {
    auto& n = check();
    if (n.backward) throw std::logic_error("set_data: tensor is not a leaf");
    if (d.size() != n.value.size())
      throw ShapeError("set_data: size mismatch: " + std::to_string(d.size()) + " vs " +
                       std::to_string(n.value.size()));
    n.value = d;
  }

  // Constant copy sharing no graph history.
  Tensor detach() const { return from_data(shape(), data(), false); }

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  detail::Node& check() const {
    if (!node_) throw std::logic_error("use of undefined Tensor");
    return *node_;
  }
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                        std::vector<Tensor> parents,
                        std::function<std::vector<Tensor>(const Tensor&)> backward);
};

// Builds an op result node. Records parents/backward only when grad mode is
// on and some parent needs gradients; otherwise the result is a constant.
inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<std::vector<Tensor>(const Tensor&)> backward) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  if (detail::grad_mode())
    for (const auto& p : parents)
      if (p.defined() && p.requires_grad()) needs = true;
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

// ---- broadcasting -----------------------------------------------------------

namespace detail {

enum class Bcast { same, a_scalar, b_scalar, b_row, b_col, a_row, a_col, outer_ab, outer_ba };

// Supported patterns: identical shapes, scalar vs anything, 2-d [r,c] against
// a one-row [1,c] or one-column [r,1] operand (either side), and the outer
// combination [r,1] with [1,c].
inline Bcast bcast_kind(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Bcast::same;
  if (shape_numel(a) == 1) return Bcast::a_scalar;
  if (shape_numel(b) == 1) return Bcast::b_scalar;
  if (a.size() == 2 && b.size() == 2) {
    if (a[1] == 1 && b[0] == 1) return Bcast::outer_ab;
    if (a[0] == 1 && b[1] == 1) return Bcast::outer_ba;
    if (b[0] == 1 && b[1] == a[1]) return Bcast::b_row;
    if (b[1] == 1 && b[0] == a[0]) return Bcast::b_col;
    if (a[0] == 1 && a[1] == b[1]) return Bcast::a_row;
    if (a[1] == 1 && a[0] == b[0]) return Bcast::a_col;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                   shape_str(b));
}

inline Shape bcast_out(Bcast k, const Tensor& a, const Tensor& b) {
  switch (k) {
    case Bcast::a_scalar:
    case Bcast::a_row:
    case Bcast::a_col:
      return b.shape();
    case Bcast::outer_ab:
      return {a.shape()[0], b.shape()[1]};
    case Bcast::outer_ba:
      return {b.shape()[0], a.shape()[1]};
    default:
      return a.shape();
  }
}

// Index of the element of `t` used at flat output position (r,c) / i.
template <typename F>
inline void bcast_apply(Bcast k, const Tensor& a, const Tensor& b, const Shape& out, F&& f) {
  const auto& av = a.data();
  const auto& bv = b.data();
  std::size_t n = shape_numel(out);
  switch (k) {
    case Bcast::same:
      for (std::size_t i = 0; i < n; ++i) f(i, av[i], bv[i]);
      return;
    case Bcast::a_scalar: {
      double s = av[0];
      for (std::size_t i = 0; i < n; ++i) f(i, s, bv[i]);
      return;
    }
    case Bcast::b_scalar: {
      double s = bv[0];
      for (std::size_t i = 0; i < n; ++i) f(i, av[i], s);
      return;
    }
    case Bcast::b_row: {
      std::size_t r = out[0], c = out[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) f(i * c + j, av[i * c + j], bv[j]);
      return;
    }
    case Bcast::b_col: {
      std::size_t r = out[0], c = out[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) f(i * c + j, av[i * c + j], bv[i]);
      return;
    }
    case Bcast::a_row: {
      std::size_t r = out[0], c = out[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) f(i * c + j, av[j], bv[i * c + j]);
      return;
    }
    case Bcast::a_col: {
      std::size_t r = out[0], c = out[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) f(i * c + j, av[i], bv[i * c + j]);
      return;
    }
    case Bcast::outer_ab: {
      std::size_t r = out[0], c = out[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) f(i * c + j, av[i], bv[j]);
      return;
    }
    case Bcast::outer_ba: {
      std::size_t r = out[0], c = out[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) f(i * c + j, av[j], bv[i]);
      return;
    }
  }
}

}  // namespace detail

Tensor sum(const Tensor& t);
Tensor sum_dim0(const Tensor& t);
Tensor sum_dim1(const Tensor& t);
Tensor reshape(const Tensor& t, Shape shape);

// Reduces a gradient shaped like the broadcast output back to `target` shape
// by summing over the broadcast directions.
inline Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (shape_numel(target) == 1) return reshape(sum(g), Shape(target));
  if (target.size() == 2 && target[0] == 1) return sum_dim0(g);
  if (target.size() == 2 && target[1] == 1) return sum_dim1(g);
  throw ShapeError("reduce_to: cannot reduce " + shape_str(g.shape()) + " to " +
                   shape_str(target));
}

// ---- elementwise binary ops -------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  auto k = detail::bcast_kind("add", a.shape(), b.shape());
  Shape out = detail::bcast_out(k, a, b);
  std::vector<double> v(shape_numel(out));
  detail::bcast_apply(k, a, b, out, [&](std::size_t i, double x, double y) { v[i] = x + y; });
  Shape sa = a.shape(), sb = b.shape();
  return make_op("add", std::move(out), std::move(v), {a, b},
                 [sa, sb](const Tensor& g) -> std::vector<Tensor> {
                   return {reduce_to(g, sa), reduce_to(g, sb)};
                 });
}

inline Tensor sub(const Tensor& a, const Tensor& b);
inline Tensor mul(const Tensor& a, const Tensor& b);
inline Tensor neg(const Tensor& a);

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto k = detail::bcast_kind("mul", a.shape(), b.shape());
  Shape out = detail::bcast_out(k, a, b);
  std::vector<double> v(shape_numel(out));
  detail::bcast_apply(k, a, b, out, [&](std::size_t i, double x, double y) { v[i] = x * y; });
  Shape sa = a.shape(), sb = b.shape();
  return make_op("mul", std::move(out), std::move(v), {a, b},
                 [a, b, sa, sb](const Tensor& g) -> std::vector<Tensor> {
                   return {reduce_to(mul(g, b), sa), reduce_to(mul(g, a), sb)};
                 });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  auto k = detail::bcast_kind("sub", a.shape(), b.shape());
  Shape out = detail::bcast_out(k, a, b);
  std::vector<double> v(shape_numel(out));
  detail::bcast_apply(k, a, b, out, [&](std::size_t i, double x, double y) { v[i] = x - y; });
  Shape sa = a.shape(), sb = b.shape();
  return make_op("sub", std::move(out), std::move(v), {a, b},
                 [sa, sb](const Tensor& g) -> std::vector<Tensor> {
                   return {reduce_to(g, sa), reduce_to(neg(g), sb)};
                 });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  auto k = detail::bcast_kind("div", a.shape(), b.shape());
  Shape out = detail::bcast_out(k, a, b);
  std::vector<double> v(shape_numel(out));
  detail::bcast_apply(k, a, b, out, [&](std::size_t i, double x, double y) { v[i] = x / y; });
  Shape sa = a.shape(), sb = b.shape();
  return make_op("div", std::move(out), std::move(v), {a, b},
                 [a, b, sa, sb](const Tensor& g) -> std::vector<Tensor> {
                   Tensor da = div(g, b);
                   // d/db (a/b) = -a / b^2
                   Tensor db = neg(div(mul(g, a), mul(b, b)));
                   return {reduce_to(da, sa), reduce_to(db, sb)};
                 });
}

// ---- elementwise unary ops --------------------------------------------------

inline Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.data());
  for (double& x : v) x *= c;
  return make_op("mul_scalar", a.shape(), std::move(v), {a},
                 [c](const Tensor& g) -> std::vector<Tensor> { return {mul_scalar(g, c)}; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.data());
  for (double& x : v) x += c;
  return make_op("add_scalar", a.shape(), std::move(v), {a},
                 [](const Tensor& g) -> std::vector<Tensor> { return {g}; });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  std::vector<double> v(a.data());
  for (double& x : v) x = x > 0.0 ? x : 0.0;
  return make_op("relu", a.shape(), std::move(v), {a},
                 [a](const Tensor& g) -> std::vector<Tensor> {
                   // subgradient 0 at the kink
                   std::vector<double> m(a.numel());
                   for (std::size_t i = 0; i < m.size(); ++i) m[i] = a.data()[i] > 0.0 ? 1.0 : 0.0;
                   return {mul(g, Tensor::from_data(a.shape(), std::move(m)))};
                 });
}

// max(x, c) elementwise; gradient 0 on the clamped region.
inline Tensor clamp_min(const Tensor& a, double c) {
  std::vector<double> v(a.data());
  for (double& x : v) x = x > c ? x : c;
  return make_op("clamp_min", a.shape(), std::move(v), {a},
                 [a, c](const Tensor& g) -> std::vector<Tensor> {
                   std::vector<double> m(a.numel());
                   for (std::size_t i = 0; i < m.size(); ++i) m[i] = a.data()[i] > c ? 1.0 : 0.0;
                   return {mul(g, Tensor::from_data(a.shape(), std::move(m)))};
                 });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> v(a.data());
  for (double& x : v) x = std::exp(x);
  Tensor out = make_op("exp", a.shape(), std::move(v), {a}, nullptr);
  if (out.requires_grad()) {
    // The adjoint reuses the output node itself; hold it weakly to avoid a
    // reference cycle (the node owns this closure).
    std::weak_ptr<detail::Node> self = out.node();
    out.node()->backward = [self](const Tensor& g) -> std::vector<Tensor> {
      return {mul(g, Tensor::wrap_node(self.lock()))};
    };
  }
  return out;
}

inline Tensor log(const Tensor& a) {
  std::vector<double> v(a.data());
  for (double& x : v) x = std::log(x);
  return make_op("log", a.shape(), std::move(v), {a},
                 [a](const Tensor& g) -> std::vector<Tensor> { return {div(g, a)}; });
}

inline Tensor sqrt(const Tensor& a) {
  std::vector<double> v(a.data());
  for (double& x : v) x = std::sqrt(x);
  Tensor out = make_op("sqrt", a.shape(), std::move(v), {a}, nullptr);
  if (out.requires_grad()) {
    std::weak_ptr<detail::Node> self = out.node();
    out.node()->backward = [self](const Tensor& g) -> std::vector<Tensor> {
      Tensor y = Tensor::wrap_node(self.lock());
      return {div(g, mul_scalar(y, 2.0))};
    };
  }
  return out;
}

// ---- shape ops ----------------------------------------------------------------

inline Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.numel())
    throw ShapeError("reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(shape));
  Shape orig = t.shape();
  return make_op("reshape", std::move(shape), t.data(), {t},
                 [orig](const Tensor& g) -> std::vector<Tensor> {
                   return {reshape(g, orig)};
                 });
}

inline Tensor transpose(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("transpose: tensor is not 2-d: " + shape_str(t.shape()));
  std::size_t r = t.shape()[0], c = t.shape()[1];
  std::vector<double> v(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = t.data()[i * c + j];
  return make_op("transpose", {c, r}, std::move(v), {t},
                 [](const Tensor& g) -> std::vector<Tensor> { return {transpose(g)}; });
}

namespace detail {
// Writes g into a zero tensor of shape `full` at offset `start` along `dim`.
Tensor embed(const Tensor& g, std::size_t dim, std::size_t start, const Shape& full);
}

inline Tensor narrow(const Tensor& t, std::size_t dim, std::size_t start, std::size_t len) {
  const Shape& s = t.shape();
  if (dim >= s.size())
    throw ShapeError("narrow: dim " + std::to_string(dim) + " out of range for " + shape_str(s));
  if (start + len > s[dim])
    throw ShapeError("narrow: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds " + shape_str(s));
  Shape out = s;
  out[dim] = len;
  std::vector<double> v(shape_numel(out));
  if (s.size() == 1) {
    std::copy_n(t.data().begin() + start, len, v.begin());
  } else {
    std::size_t c = s[1];
    if (dim == 0) {
      std::copy_n(t.data().begin() + start * c, len * c, v.begin());
    } else {
      for (std::size_t i = 0; i < s[0]; ++i)
        std::copy_n(t.data().begin() + i * c + start, len, v.begin() + i * len);
    }
  }
  Shape full = s;
  return make_op("narrow", std::move(out), std::move(v), {t},
                 [dim, start, full](const Tensor& g) -> std::vector<Tensor> {
                   return {detail::embed(g, dim, start, full)};
                 });
}

namespace detail {
inline Tensor embed(const Tensor& g, std::size_t dim, std::size_t start, const Shape& full) {
  std::vector<double> v(shape_numel(full), 0.0);
  const Shape& s = g.shape();
  if (full.size() == 1) {
    std::copy(g.data().begin(), g.data().end(), v.begin() + start);
  } else {
    std::size_t c = full[1];
    if (dim == 0) {
      std::copy(g.data().begin(), g.data().end(), v.begin() + start * c);
    } else {
      std::size_t gc = s[1];
      for (std::size_t i = 0; i < full[0]; ++i)
        std::copy_n(g.data().begin() + i * gc, gc, v.begin() + i * c + start);
    }
  }
  Shape gs = s;
  return make_op("embed", Shape(full), std::move(v), {g},
                 [dim, start, gs](const Tensor& gg) -> std::vector<Tensor> {
                   return {narrow(gg, dim, start, gs[dim])};
                 });
}
}  // namespace detail

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t dim) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (dim >= std::max<std::size_t>(s0.size(), 1))
    throw ShapeError("concat: dim " + std::to_string(dim) + " out of range");
  Shape out = s0;
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const Shape& sp = parts[p].shape();
    if (sp.size() != s0.size())
      throw ShapeError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(sp));
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != dim && sp[d] != s0[d])
        throw ShapeError("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(sp));
    out[dim] += sp[dim];
  }
  std::vector<double> v(shape_numel(out));
  if (s0.size() <= 1 || dim == 0) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data().begin(), p.data().end(), v.begin() + off);
      off += p.numel();
    }
  } else {
    std::size_t rows = out[0], oc = out[1], coff = 0;
    for (const auto& p : parts) {
      std::size_t pc = p.shape()[1];
      for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(p.data().begin() + i * pc, pc, v.begin() + i * oc + coff);
      coff += pc;
    }
  }
  std::vector<std::size_t> extents;
  for (const auto& p : parts) extents.push_back(p.shape().empty() ? 1 : p.shape()[dim]);
  return make_op("concat", std::move(out), std::move(v), parts,
                 [dim, extents](const Tensor& g) -> std::vector<Tensor> {
                   std::vector<Tensor> grads;
                   std::size_t off = 0;
                   for (std::size_t e : extents) {
                     grads.push_back(narrow(g, dim, off, e));
                     off += e;
                   }
                   return grads;
                 });
}

// ---- matmul -------------------------------------------------------------------

// C = op_a(A) * op_b(B) where op transposes when the flag is set. Transposed
// operands are read with swapped strides; nothing is materialized.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: operands must be 2-d: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::size_t am = ta ? a.shape()[1] : a.shape()[0];
  std::size_t ak = ta ? a.shape()[0] : a.shape()[1];
  std::size_t bk = tb ? b.shape()[1] : b.shape()[0];
  std::size_t bn = tb ? b.shape()[0] : b.shape()[1];
  if (ak != bk)
    throw ShapeError("matmul: inner dimensions do not match: " + shape_str(a.shape()) +
                     (ta ? "^T" : "") + " x " + shape_str(b.shape()) + (tb ? "^T" : ""));
  std::vector<double> v(am * bn, 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  if (!ta && !tb) {
    std::size_t K = ak, N = bn;
    for (std::size_t i = 0; i < am; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        double x = av[i * K + k];
        if (x == 0.0) continue;
        const double* brow = bv.data() + k * N;
        double* crow = v.data() + i * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += x * brow[j];
      }
  } else if (!ta && tb) {
    std::size_t K = ak;
    for (std::size_t i = 0; i < am; ++i)
      for (std::size_t j = 0; j < bn; ++j) {
        const double* ar = av.data() + i * K;
        const double* br = bv.data() + j * K;
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) acc += ar[k] * br[k];
        v[i * bn + j] = acc;
      }
  } else if (ta && !tb) {
    std::size_t K = ak, N = bn, M = am;
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t i = 0; i < M; ++i) {
        double x = av[k * M + i];
        if (x == 0.0) continue;
        const double* brow = bv.data() + k * N;
        double* crow = v.data() + i * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += x * brow[j];
      }
  } else {
    std::size_t K = ak, N = bn, M = am;
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) acc += av[k * M + i] * bv[j * K + k];
        v[i * N + j] = acc;
      }
  }
  return make_op("matmul", {am, bn}, std::move(v), {a, b},
                 [a, b, ta, tb](const Tensor& g) -> std::vector<Tensor> {
                   Tensor da = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
                   Tensor db = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
                   return {da, db};
                 });
}

// ---- reductions ----------------------------------------------------------------

inline Tensor sum(const Tensor& t) {
  double s = 0.0;
  for (double x : t.data()) s += x;
  Shape orig = t.shape();
  return make_op("sum", {}, {s}, {t},
                 [orig](const Tensor& g) -> std::vector<Tensor> {
                   // broadcast the scalar adjoint back over the input
                   return {add(Tensor::zeros(orig), reshape(g, {}))};
                 });
}

inline Tensor sum_dim0(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("sum_dim0: tensor is not 2-d: " + shape_str(t.shape()));
  std::size_t r = t.shape()[0], c = t.shape()[1];
  std::vector<double> v(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j] += t.data()[i * c + j];
  Shape orig = t.shape();
  return make_op("sum_dim0", {1, c}, std::move(v), {t},
                 [orig](const Tensor& g) -> std::vector<Tensor> {
                   return {add(Tensor::zeros(orig), g)};
                 });
}

inline Tensor sum_dim1(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("sum_dim1: tensor is not 2-d: " + shape_str(t.shape()));
  std::size_t r = t.shape()[0], c = t.shape()[1];
  std::vector<double> v(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += t.data()[i * c + j];
    v[i] = s;
  }
  Shape orig = t.shape();
  return make_op("sum_dim1", {r, 1}, std::move(v), {t},
                 [orig](const Tensor& g) -> std::vector<Tensor> {
                   return {add(Tensor::zeros(orig), g)};
                 });
}

inline Tensor mean(const Tensor& t) { return mul_scalar(sum(t), 1.0 / double(t.numel())); }

// ---- softmax --------------------------------------------------------------------

// Row-wise softmax with max subtraction. The adjoint uses the output itself:
// dx = y * (g - rowsum(g * y)).
inline Tensor softmax_rows(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("softmax_rows: tensor is not 2-d: " + shape_str(t.shape()));
  std::size_t r = t.shape()[0], c = t.shape()[1];
  std::vector<double> v(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = t.data().data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      v[i * c + j] = std::exp(row[j] - mx);
      z += v[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] /= z;
  }
  Tensor out = make_op("softmax_rows", {r, c}, std::move(v), {t}, nullptr);
  if (out.requires_grad()) {
    std::weak_ptr<detail::Node> self = out.node();
    out.node()->backward = [self](const Tensor& g) -> std::vector<Tensor> {
      Tensor y = Tensor::wrap_node(self.lock());
      Tensor gy = mul(g, y);
      return {mul(y, sub(g, sum_dim1(gy)))};
    };
  }
  return out;
}

inline Tensor softmax(const Tensor& t) {
  if (t.rank() == 2) return softmax_rows(t);
  if (t.rank() != 1) throw ShapeError("softmax: tensor is not 1-d or 2-d: " + shape_str(t.shape()));
  std::size_t n = t.shape()[0];
  return reshape(softmax_rows(reshape(t, {1, n})), {n});
}

// ---- norms (composites) -----------------------------------------------------------

inline Tensor l2_norm(const Tensor& t) { return sqrt(sum(mul(t, t))); }

// Row norms of a 2-d tensor as [r,1]; `floor` keeps sqrt differentiable when a
// row is exactly zero (gradient 0 there instead of NaN).
inline Tensor row_norms(const Tensor& t, double floor = 0.0) {
  Tensor ssq = sum_dim1(mul(t, t));
  if (floor > 0.0) ssq = clamp_min(ssq, floor);
  return sqrt(ssq);
}

// ---- operators ---------------------------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return add_scalar(neg(a), c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return mul_scalar(a, 1.0 / c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- gradient -------------------------------------------------------------------

namespace detail {

inline std::vector<std::shared_ptr<Node>> topo_order(const std::shared_ptr<Node>& root) {
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_map<Node*, int> state;  // 0 unseen, 1 open, 2 done
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  state[root.get()] = 1;
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      auto& p = n->parents[idx++];
      if (p->requires_grad && state[p.get()] == 0) {
        state[p.get()] = 1;
        stack.emplace_back(p, 0);
      }
    } else {
      state[n.get()] = 2;
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace detail

// Gradients of a scalar `output` with respect to each tensor in `wrt`.
// Tensors not connected to `output` get zero gradients. With create_graph the
// returned tensors carry graph history, so they can be differentiated again.
inline std::vector<Tensor> gradient(const Tensor& output, const std::vector<Tensor>& wrt,
                                    bool create_graph = false) {
  if (!output.defined()) throw std::logic_error("gradient: undefined output");
  if (output.numel() != 1)
    throw ShapeError("gradient: output must be scalar, got " + shape_str(output.shape()));
  std::unordered_map<detail::Node*, Tensor> adj;
  if (output.requires_grad()) {
    auto order = detail::topo_order(output.node());
    bool prev = detail::grad_mode();
    detail::grad_mode() = create_graph;
    adj[output.node().get()] = Tensor::ones(output.shape());
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = it->get();
      if (!n->backward) continue;
      auto found = adj.find(n);
      if (found == adj.end()) continue;
      Tensor g = found->second;
      std::vector<Tensor> pg = n->backward(g);
      for (std::size_t i = 0; i < n->parents.size(); ++i) {
        if (i >= pg.size() || !pg[i].defined()) continue;
        if (!n->parents[i]->requires_grad) continue;
        detail::Node* p = n->parents[i].get();
        auto slot = adj.find(p);
        if (slot == adj.end())
          adj.emplace(p, pg[i]);
        else
          slot->second = add(slot->second, pg[i]);
      }
    }
    detail::grad_mode() = prev;
  }
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = adj.find(w.node().get());
    out.push_back(it != adj.end() ? it->second : Tensor::zeros(w.shape()));
  }
  return out;
}

}  // namespace metanb
