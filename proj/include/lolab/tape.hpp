#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "lolab/tensor.hpp"

namespace lolab {

enum class Op {
  leaf,
  constant,
  add,
  sub,
  mul,
  matmul,
  sigmoid,
  tanh,
  relu,
  conv2d,
  maxpool2d,
  softmax_xent,
  mse,
  l2_norm,
  scale,
  concat,
  slice,
  sign,
  log_abs,
  reshape,
  sum,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::relu: return "relu";
    case Op::conv2d: return "conv2d";
    case Op::maxpool2d: return "maxpool2d";
    case Op::softmax_xent: return "softmax_xent";
    case Op::mse: return "mse";
    case Op::l2_norm: return "l2_norm";
    case Op::scale: return "scale";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::sign: return "sign";
    case Op::log_abs: return "log_abs";
    case Op::reshape: return "reshape";
    case Op::sum: return "sum";
  }
  return "?";
}

/// Stabilizer inside log_abs: log(|x| + kLogEps).
inline constexpr double kLogEps = 1e-16;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
};

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> g, std::vector<Shape> shapes)
      : grads_(std::move(g)), shapes_(std::move(shapes)) {}

  /// d root / d v; zeros when v did not influence the root.
  Tensor wrt(Var v) const {
    if (v.id >= grads_.size()) throw Error("gradient requested for unknown node");
    if (grads_[v.id].size() == 0) return Tensor(shapes_[v.id]);
    return grads_[v.id];
  }

 private:
  std::vector<Tensor> grads_;
  std::vector<Shape> shapes_;
};

/// Append-only record of primitive applications. Single-threaded while
/// recording; operands always precede the node that consumes them.
class Tape {
 public:
  struct Node {
    Op op = Op::constant;
    Tensor value;
    std::vector<std::size_t> args;
    bool requires_grad = false;
    double scalar = 0.0;
    std::size_t p0 = 0, p1 = 0;
    std::vector<std::size_t> index;  // class labels, argmax positions
    bool has_bias = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Tensor t) { return push_leaf(Op::leaf, std::move(t), true); }
  Var constant(Tensor t) { return push_leaf(Op::constant, std::move(t), false); }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  bool consumed() const { return consumed_; }

  Var push(Node n) {
    if (!n.value.all_finite())
      throw NonFiniteError(std::string("non-finite output from ") + std::string(op_name(n.op)));
    for (std::size_t a : n.args) {
      if (a >= nodes_.size()) throw Error("operand does not precede node");
      n.requires_grad = n.requires_grad || nodes_[a].requires_grad;
    }
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Gradients backward(Var root);

 private:
  Var push_leaf(Op op, Tensor t, bool grad) {
    Node n;
    n.op = op;
    n.value = std::move(t);
    n.requires_grad = grad;
    return push(std::move(n));
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape->node(id).value; }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape || !a.tape) throw Error("operands recorded on different tapes");
  return *a.tape;
}

inline Tape::Node make(Op op, Tensor v, std::vector<std::size_t> args) {
  Tape::Node n;
  n.op = op;
  n.value = std::move(v);
  n.args = std::move(args);
  return n;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double sgn(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

/// C[m,n] (+)= A[m,k] B[k,n]
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class F>
Var unary(Var a, Op op, F f) {
  Tensor out = a.value();
  for (double& v : out.raw()) v = f(v);
  return a.tape->push(make(op, std::move(out), {a.id}));
}

inline Tensor& accum(std::vector<Tensor>& g, const std::vector<Tape::Node>& nodes, std::size_t i) {
  if (g[i].size() == 0) g[i] = Tensor(nodes[i].value.shape());
  return g[i];
}

struct ConvGeom {
  std::size_t n, c, h, w, k, kh, kw, oh, ow, stride, pad;
};

inline ConvGeom conv_geom(const Shape& xs, const Shape& ws, std::size_t stride, std::size_t pad) {
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
    throw ShapeError("conv2d expects x[N,C,H,W] and w[K,C,kh,kw], got " + shape_str(xs) + " and " +
                     shape_str(ws));
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0, stride, pad};
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) throw ShapeError("conv2d kernel larger than input");
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

}  // namespace detail

// ---- primitives -----------------------------------------------------------

/// Elementwise sum. b may also be a vector matching a's last dimension
/// (broadcast over rows) or a scalar.
inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out = av;
  if (av.shape() == bv.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  } else if (bv.size() == 1) {
    for (double& v : out.raw()) v += bv[0];
  } else if (bv.rank() == 1 && av.rank() >= 1 && av.shape().back() == bv.size()) {
    const std::size_t n = bv.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  } else {
    throw ShapeError("add: cannot broadcast " + shape_str(bv.shape()) + " onto " +
                     shape_str(av.shape()));
  }
  return t.push(detail::make(Op::add, std::move(out), {a.id, b.id}));
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return t.push(detail::make(Op::sub, a.value() - b.value(), {a.id, b.id}));
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.push(detail::make(Op::mul, std::move(out), {a.id, b.id}));
}

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  detail::gemm(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return t.push(detail::make(Op::matmul, std::move(out), {a.id, b.id}));
}

inline Var sigmoid(Var a) { return detail::unary(a, Op::sigmoid, detail::sigmoid); }
inline Var tanh(Var a) { return detail::unary(a, Op::tanh, [](double x) { return std::tanh(x); }); }
inline Var relu(Var a) { return detail::unary(a, Op::relu, [](double x) { return x > 0 ? x : 0.0; }); }
inline Var sign(Var a) { return detail::unary(a, Op::sign, detail::sgn); }
inline Var log_abs(Var a) {
  return detail::unary(a, Op::log_abs, [](double x) { return std::log(std::abs(x) + kLogEps); });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.raw()) v *= s;
  auto n = detail::make(Op::scale, std::move(out), {a.id});
  n.scalar = s;
  return a.tape->push(std::move(n));
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->push(detail::make(Op::sum, Tensor::scalar(s), {a.id}));
}

inline Var reshape(Var a, Shape shape) {
  return a.tape->push(detail::make(Op::reshape, a.value().reshaped(std::move(shape)), {a.id}));
}

/// Columns [begin, end) of the last axis.
inline Var slice(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (av.rank() == 0 || begin >= end || end > av.shape().back())
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     shape_str(av.shape()));
  const std::size_t cols = av.shape().back();
  const std::size_t rows = av.size() / cols;
  const std::size_t w = end - begin;
  Shape s = av.shape();
  s.back() = w;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(av.data().data() + r * cols + begin, w, out.data().data() + r * w);
  auto n = detail::make(Op::slice, std::move(out), {a.id});
  n.p0 = begin;
  n.p1 = end;
  return a.tape->push(std::move(n));
}

/// Concatenation along the last axis; leading dimensions must agree.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Tape& t = *parts[0].tape;
  Shape lead = parts[0].shape();
  if (lead.empty()) throw ShapeError("concat of scalars");
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> args;
  for (Var p : parts) {
    detail::same_tape(parts[0], p);
    Shape s = p.shape();
    if (s.empty()) throw ShapeError("concat of scalars");
    total += s.back();
    s.pop_back();
    if (s != lead) throw ShapeError("concat: leading dimensions differ");
    args.push_back(p.id);
  }
  Shape os = lead;
  os.push_back(total);
  Tensor out(os);
  const std::size_t rows = out.size() / total;
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& v = p.value();
    const std::size_t w = v.shape().back();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data().data() + r * w, w, out.data().data() + r * total + off);
    off += w;
  }
  return t.push(detail::make(Op::concat, std::move(out), std::move(args)));
}

inline Var l2_norm(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  return a.tape->push(detail::make(Op::l2_norm, Tensor::scalar(std::sqrt(s)), {a.id}));
}

/// Mean of squared differences over all elements.
inline Var mse(Var pred, Var target) {
  Tape& t = detail::same_tape(pred, target);
  if (pred.shape() != target.shape())
    throw ShapeError("mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  double s = 0.0;
  const Tensor& p = pred.value();
  const Tensor& y = target.value();
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - y[i]) * (p[i] - y[i]);
  return t.push(detail::make(Op::mse, Tensor::scalar(s / static_cast<double>(p.size())),
                             {pred.id, target.id}));
}

/// Mean softmax cross-entropy of logits[N,C] against integer class labels.
inline Var softmax_xent(Var logits, const std::vector<std::size_t>& labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size())
    throw ShapeError("softmax_xent: logits " + shape_str(z.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t n = z.dim(0), c = z.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw ShapeError("softmax_xent: label out of range");
    const double* row = z.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double se = 0.0;
    for (std::size_t j = 0; j < c; ++j) se += std::exp(row[j] - mx);
    total += mx + std::log(se) - row[labels[i]];
  }
  auto node = detail::make(Op::softmax_xent, Tensor::scalar(total / static_cast<double>(n)),
                           {logits.id});
  node.index = labels;
  return logits.tape->push(std::move(node));
}

/// x[N,C,H,W] * w[K,C,kh,kw] (+ bias[K]) -> [N,K,OH,OW]; cross-correlation.
inline Var conv2d(Var x, Var w, const Var* bias = nullptr, std::size_t stride = 1,
                  std::size_t pad = 0) {
  Tape& t = detail::same_tape(x, w);
  const auto g = detail::conv_geom(x.shape(), w.shape(), stride, pad);
  if (bias) {
    detail::same_tape(x, *bias);
    if (bias->shape() != Shape{g.k}) throw ShapeError("conv2d bias must be [K]");
  }
  const double* xv = x.value().data().data();
  const double* wv = w.value().data().data();
  Tensor out(Shape{g.n, g.k, g.oh, g.ow});
  double* ov = out.data().data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t k = 0; k < g.k; ++k) {
      const double b0 = bias ? bias->value()[k] : 0.0;
      for (std::size_t oy = 0; oy < g.oh; ++oy)
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          double s = b0;
          for (std::size_t c = 0; c < g.c; ++c)
            for (std::size_t i = 0; i < g.kh; ++i) {
              const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
              if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
              for (std::size_t j = 0; j < g.kw; ++j) {
                const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
                if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                s += xv[((n * g.c + c) * g.h + iy) * g.w + ix] *
                     wv[((k * g.c + c) * g.kh + i) * g.kw + j];
              }
            }
          ov[((n * g.k + k) * g.oh + oy) * g.ow + ox] = s;
        }
    }
  std::vector<std::size_t> args{x.id, w.id};
  if (bias) args.push_back(bias->id);
  auto node = detail::make(Op::conv2d, std::move(out), std::move(args));
  node.p0 = stride;
  node.p1 = pad;
  node.has_bias = bias != nullptr;
  return t.push(std::move(node));
}

/// Max pooling over size x size windows with the given stride. Ties go to the
/// lowest flat input index.
inline Var maxpool2d(Var x, std::size_t size = 2, std::size_t stride = 2) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || size == 0 || stride == 0 || xv.dim(2) < size || xv.dim(3) < size)
    throw ShapeError("maxpool2d on " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = (h - size) / stride + 1, ow = (w - size) / stride + 1;
  Tensor out(Shape{n, c, oh, ow});
  std::vector<std::size_t> arg(out.size());
  std::size_t o = 0;
  for (std::size_t b = 0; b < n * c; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = b * h * w + (oy * stride) * w + ox * stride;
        for (std::size_t i = 0; i < size; ++i)
          for (std::size_t j = 0; j < size; ++j) {
            const std::size_t idx = b * h * w + (oy * stride + i) * w + ox * stride + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        out[o] = xv[best];
        arg[o] = best;
      }
  auto node = detail::make(Op::maxpool2d, std::move(out), {x.id});
  node.index = std::move(arg);
  node.p0 = size;
  node.p1 = stride;
  return x.tape->push(std::move(node));
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// ---- reverse sweep --------------------------------------------------------

inline Gradients Tape::backward(Var root) {
  if (root.tape != this) throw Error("backward: root belongs to another tape");
  if (consumed_) throw Error("backward: tape already consumed");
  if (root.value().size() != 1) throw ShapeError("backward: root must be scalar");
  consumed_ = true;

  std::vector<Tensor> g(nodes_.size());
  g[root.id] = Tensor(root.value().shape(), 1.0);

  for (std::size_t idx = root.id + 1; idx-- > 0;) {
    const Node& nd = nodes_[idx];
    if (!nd.requires_grad || g[idx].size() == 0) continue;
    const Tensor& gy = g[idx];
    const Tensor& y = nd.value;
    auto want = [&](std::size_t k) { return nodes_[nd.args[k]].requires_grad; };
    auto acc = [&](std::size_t k) -> Tensor& { return detail::accum(g, nodes_, nd.args[k]); };

    switch (nd.op) {
      case Op::leaf:
      case Op::constant:
        break;
      case Op::add: {
        if (want(0)) axpy(1.0, gy.data(), acc(0).data());
        if (want(1)) {
          Tensor& gb = acc(1);
          const std::size_t n = gb.size();
          if (n == gy.size()) {
            axpy(1.0, gy.data(), gb.data());
          } else {
            for (std::size_t i = 0; i < gy.size(); ++i) gb[i % n] += gy[i];
          }
        }
        break;
      }
      case Op::sub:
        if (want(0)) axpy(1.0, gy.data(), acc(0).data());
        if (want(1)) axpy(-1.0, gy.data(), acc(1).data());
        break;
      case Op::mul: {
        const Tensor& a = nodes_[nd.args[0]].value;
        const Tensor& b = nodes_[nd.args[1]].value;
        if (want(0)) {
          Tensor& ga = acc(0);
          for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * b[i];
        }
        if (want(1)) {
          Tensor& gb = acc(1);
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * a[i];
        }
        break;
      }
      case Op::matmul: {
        const Tensor& a = nodes_[nd.args[0]].value;
        const Tensor& b = nodes_[nd.args[1]].value;
        const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        if (want(0)) {
          // dA[m,k] += dY[m,n] B^T
          Tensor& ga = acc(0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              const double* gyi = gy.data().data() + i * n;
              const double* bp = b.data().data() + p * n;
              for (std::size_t j = 0; j < n; ++j) s += gyi[j] * bp[j];
              ga[i * k + p] += s;
            }
        }
        if (want(1)) {
          // dB[k,n] += A^T dY
          Tensor& gb = acc(1);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double av = a[i * k + p];
              if (av == 0.0) continue;
              const double* gyi = gy.data().data() + i * n;
              double* gbp = gb.data().data() + p * n;
              for (std::size_t j = 0; j < n; ++j) gbp[j] += av * gyi[j];
            }
        }
        break;
      }
      case Op::sigmoid: {
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * y[i] * (1.0 - y[i]);
        break;
      }
      case Op::tanh: {
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * (1.0 - y[i] * y[i]);
        break;
      }
      case Op::relu: {
        const Tensor& a = nodes_[nd.args[0]].value;
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < gy.size(); ++i)
          if (a[i] > 0) ga[i] += gy[i];
        break;
      }
      case Op::sign:
        break;
      case Op::log_abs: {
        const Tensor& a = nodes_[nd.args[0]].value;
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < gy.size(); ++i)
          ga[i] += gy[i] * detail::sgn(a[i]) / (std::abs(a[i]) + kLogEps);
        break;
      }
      case Op::scale:
        axpy(nd.scalar, gy.data(), acc(0).data());
        break;
      case Op::sum: {
        Tensor& ga = acc(0);
        for (double& v : ga.raw()) v += gy[0];
        break;
      }
      case Op::reshape:
        axpy(1.0, gy.data(), acc(0).data());
        break;
      case Op::slice: {
        Tensor& ga = acc(0);
        const std::size_t cols = ga.shape().back();
        const std::size_t w = nd.p1 - nd.p0;
        const std::size_t rows = ga.size() / cols;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < w; ++j) ga[r * cols + nd.p0 + j] += gy[r * w + j];
        break;
      }
      case Op::concat: {
        const std::size_t total = y.shape().back();
        const std::size_t rows = y.size() / total;
        std::size_t off = 0;
        for (std::size_t k = 0; k < nd.args.size(); ++k) {
          const std::size_t w = nodes_[nd.args[k]].value.shape().back();
          if (want(k)) {
            Tensor& ga = acc(k);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < w; ++j) ga[r * w + j] += gy[r * total + off + j];
          }
          off += w;
        }
        break;
      }
      case Op::l2_norm: {
        const double nrm = y[0];
        if (nrm > 0) axpy(gy[0] / nrm, nodes_[nd.args[0]].value.data(), acc(0).data());
        break;
      }
      case Op::mse: {
        const Tensor& p = nodes_[nd.args[0]].value;
        const Tensor& t = nodes_[nd.args[1]].value;
        const double c = 2.0 * gy[0] / static_cast<double>(p.size());
        if (want(0)) {
          Tensor& gp = acc(0);
          for (std::size_t i = 0; i < p.size(); ++i) gp[i] += c * (p[i] - t[i]);
        }
        if (want(1)) {
          Tensor& gt = acc(1);
          for (std::size_t i = 0; i < p.size(); ++i) gt[i] -= c * (p[i] - t[i]);
        }
        break;
      }
      case Op::softmax_xent: {
        const Tensor& z = nodes_[nd.args[0]].value;
        const std::size_t n = z.dim(0), c = z.dim(1);
        Tensor& gz = acc(0);
        const double s = gy[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double* row = z.data().data() + i * c;
          const double mx = *std::max_element(row, row + c);
          double se = 0.0;
          for (std::size_t j = 0; j < c; ++j) se += std::exp(row[j] - mx);
          for (std::size_t j = 0; j < c; ++j) {
            const double p = std::exp(row[j] - mx) / se;
            gz[i * c + j] += s * (p - (j == nd.index[i] ? 1.0 : 0.0));
          }
        }
        break;
      }
      case Op::maxpool2d: {
        Tensor& ga = acc(0);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[nd.index[i]] += gy[i];
        break;
      }
      case Op::conv2d: {
        const Tensor& xv = nodes_[nd.args[0]].value;
        const Tensor& wv = nodes_[nd.args[1]].value;
        const auto geo = detail::conv_geom(xv.shape(), wv.shape(), nd.p0, nd.p1);
        Tensor* gx = want(0) ? &acc(0) : nullptr;
        Tensor* gw = want(1) ? &acc(1) : nullptr;
        Tensor* gb = nd.has_bias && want(2) ? &acc(2) : nullptr;
        for (std::size_t n = 0; n < geo.n; ++n)
          for (std::size_t k = 0; k < geo.k; ++k)
            for (std::size_t oy = 0; oy < geo.oh; ++oy)
              for (std::size_t ox = 0; ox < geo.ow; ++ox) {
                const double go = gy[((n * geo.k + k) * geo.oh + oy) * geo.ow + ox];
                if (gb) (*gb)[k] += go;
                if (go == 0.0) continue;
                for (std::size_t c = 0; c < geo.c; ++c)
                  for (std::size_t i = 0; i < geo.kh; ++i) {
                    const long iy = static_cast<long>(oy * geo.stride + i) - static_cast<long>(geo.pad);
                    if (iy < 0 || iy >= static_cast<long>(geo.h)) continue;
                    for (std::size_t j = 0; j < geo.kw; ++j) {
                      const long ix =
                          static_cast<long>(ox * geo.stride + j) - static_cast<long>(geo.pad);
                      if (ix < 0 || ix >= static_cast<long>(geo.w)) continue;
                      const std::size_t xi = ((n * geo.c + c) * geo.h + iy) * geo.w + ix;
                      const std::size_t wi = ((k * geo.c + c) * geo.kh + i) * geo.kw + j;
                      if (gx) (*gx)[xi] += go * wv[wi];
                      if (gw) (*gw)[wi] += go * xv[xi];
                    }
                  }
              }
        break;
      }
    }
  }

  std::vector<Shape> shapes;
  shapes.reserve(nodes_.size());
  for (const Node& n : nodes_) shapes.push_back(n.value.shape());
  return Gradients(std::move(g), std::move(shapes));
}

}  // namespace lolab
