#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "lolab/data.hpp"
#include "lolab/rng.hpp"
#include "lolab/tape.hpp"

namespace lolab {

enum class Architecture { PolyRegression, MlpSigmoid, MlpRelu, Cnn };
enum class LossKind { MSE, CrossEntropy };

inline const char* arch_name(Architecture a) {
  switch (a) {
    case Architecture::PolyRegression: return "poly";
    case Architecture::MlpSigmoid: return "mlp_sigmoid";
    case Architecture::MlpRelu: return "mlp_relu";
    case Architecture::Cnn: return "cnn";
  }
  return "?";
}

inline Architecture parse_arch(const std::string& s) {
  if (s == "poly") return Architecture::PolyRegression;
  if (s == "mlp_sigmoid" || s == "mlp") return Architecture::MlpSigmoid;
  if (s == "mlp_relu") return Architecture::MlpRelu;
  if (s == "cnn") return Architecture::Cnn;
  throw Error("unknown architecture '" + s + "'");
}

/// Optimizee model description. input_shape excludes the batch axis; image
/// models take [C,H,W], the MLPs flatten whatever they are given.
struct OptimizeeSpec {
  Architecture arch = Architecture::PolyRegression;
  Shape input_shape{4};
  std::size_t num_outputs = 1;
  LossKind loss = LossKind::MSE;

  static constexpr std::size_t kHidden = 20;

  static OptimizeeSpec poly() { return {Architecture::PolyRegression, {4}, 1, LossKind::MSE}; }
  static OptimizeeSpec mlp(Shape in, std::size_t classes, bool relu = false) {
    return {relu ? Architecture::MlpRelu : Architecture::MlpSigmoid, std::move(in), classes,
            LossKind::CrossEntropy};
  }
  static OptimizeeSpec cnn(Shape in, std::size_t classes) {
    return {Architecture::Cnn, std::move(in), classes, LossKind::CrossEntropy};
  }

  std::size_t input_size() const { return shape_size(input_shape); }
};

/// One parameter tensor inside the flat vector theta.
struct ParamBlock {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t fan_in = 0, fan_out = 0;
  bool bias = false;

  std::size_t size() const { return shape_size(shape); }
};

namespace detail {
inline constexpr std::size_t kConv1 = 16, kConv1K = 3, kConv2 = 32, kConv2K = 5, kPool = 2;

inline std::size_t cnn_head_inputs(const Shape& in) {
  if (in.size() != 3) throw ShapeError("cnn input_shape must be [C,H,W]");
  if (in[1] < kConv1K || in[2] < kConv1K) throw ShapeError("cnn input too small");
  const std::size_t h1 = in[1] - kConv1K + 1, w1 = in[2] - kConv1K + 1;
  const std::size_t h2 = h1 / kPool, w2 = w1 / kPool;
  if (h2 < kConv2K || w2 < kConv2K) throw ShapeError("cnn input too small");
  return kConv2 * (h2 - kConv2K + 1) * (w2 - kConv2K + 1);
}
}  // namespace detail

/// Layer order, weights before biases, row-major within each block.
inline std::vector<ParamBlock> param_layout(const OptimizeeSpec& s) {
  if (s.num_outputs == 0 || s.input_shape.empty()) throw ShapeError("optimizee spec incomplete");
  std::vector<ParamBlock> blocks;
  std::size_t off = 0;
  auto add = [&](std::string name, Shape shape, std::size_t fi, std::size_t fo, bool bias) {
    ParamBlock b{std::move(name), std::move(shape), off, fi, fo, bias};
    off += b.size();
    blocks.push_back(std::move(b));
  };
  const std::size_t n_in = s.input_size();
  const std::size_t h = OptimizeeSpec::kHidden;
  switch (s.arch) {
    case Architecture::PolyRegression:
      add("w", {n_in, s.num_outputs}, n_in, s.num_outputs, false);
      break;
    case Architecture::MlpSigmoid:
    case Architecture::MlpRelu:
      add("w1", {n_in, h}, n_in, h, false);
      add("b1", {h}, n_in, h, true);
      add("w2", {h, s.num_outputs}, h, s.num_outputs, false);
      add("b2", {s.num_outputs}, h, s.num_outputs, true);
      break;
    case Architecture::Cnn: {
      using namespace detail;
      const std::size_t c = s.input_shape.at(0);
      const std::size_t head = cnn_head_inputs(s.input_shape);
      add("conv1.w", {kConv1, c, kConv1K, kConv1K}, c * kConv1K * kConv1K, kConv1 * kConv1K * kConv1K, false);
      add("conv1.b", {kConv1}, 0, 0, true);
      add("conv2.w", {kConv2, kConv1, kConv2K, kConv2K}, kConv1 * kConv2K * kConv2K,
          kConv2 * kConv2K * kConv2K, false);
      add("conv2.b", {kConv2}, 0, 0, true);
      add("fc.w", {head, s.num_outputs}, head, s.num_outputs, false);
      add("fc.b", {s.num_outputs}, 0, 0, true);
      break;
    }
  }
  return blocks;
}

inline std::size_t param_count(const OptimizeeSpec& s) {
  const auto b = param_layout(s);
  return b.back().offset + b.back().size();
}

/// Glorot-uniform weights, zero biases.
inline Tensor init_optimizee(const OptimizeeSpec& s, RngStream& rng) {
  const auto blocks = param_layout(s);
  Tensor theta(Shape{param_count(s)});
  for (const auto& b : blocks) {
    if (b.bias) continue;
    const double limit = std::sqrt(6.0 / static_cast<double>(b.fan_in + b.fan_out));
    for (std::size_t i = 0; i < b.size(); ++i) theta[b.offset + i] = rng.uniform(-limit, limit);
  }
  return theta;
}

/// Model output [batch, num_outputs] for theta recorded on the tape.
inline Var optimizee_forward(const OptimizeeSpec& s, Var theta, Var x) {
  const auto blocks = param_layout(s);
  if (theta.value().size() != param_count(s)) throw ShapeError("theta length does not match spec");
  auto block = [&](std::size_t i) {
    const auto& b = blocks[i];
    return reshape(slice(theta, b.offset, b.offset + b.size()), b.shape);
  };
  const std::size_t batch = x.shape().at(0);
  switch (s.arch) {
    case Architecture::PolyRegression: {
      Var xi = reshape(x, {batch, s.input_size()});
      return matmul(xi, block(0));
    }
    case Architecture::MlpSigmoid:
    case Architecture::MlpRelu: {
      Var xi = reshape(x, {batch, s.input_size()});
      Var z = add(matmul(xi, block(0)), block(1));
      Var a = s.arch == Architecture::MlpSigmoid ? sigmoid(z) : relu(z);
      return add(matmul(a, block(2)), block(3));
    }
    case Architecture::Cnn: {
      Shape img{batch};
      img.insert(img.end(), s.input_shape.begin(), s.input_shape.end());
      Var xi = reshape(x, img);
      Var b1 = block(1), b2 = block(3);
      Var a1 = relu(conv2d(xi, block(0), &b1));
      Var p = maxpool2d(a1, detail::kPool, detail::kPool);
      Var a2 = relu(conv2d(p, block(2), &b2));
      Var flat = reshape(a2, {batch, a2.value().size() / batch});
      return add(matmul(flat, block(4)), block(5));
    }
  }
  throw Error("unreachable");
}

/// Mean loss of the optimizee over the given samples.
inline Var optimizee_loss(const OptimizeeSpec& s, Var theta, const Dataset& d) {
  Tape& t = *theta.tape;
  Var out = optimizee_forward(s, theta, t.constant(d.inputs));
  if (s.loss == LossKind::CrossEntropy) {
    if (!d.is_classification()) throw Error("cross-entropy optimizee given regression data");
    return softmax_xent(out, d.class_labels());
  }
  Var target = t.constant(d.labels.reshaped({d.size(), 1}));
  if (out.shape() != target.shape()) throw ShapeError("regression output must be [N,1]");
  return mse(out, target);
}

/// Loss value and gradient at theta on a private tape.
inline double loss_and_grad(const OptimizeeSpec& s, const Tensor& theta, const Dataset& d, Tensor& grad) {
  Tape t;
  Var th = t.variable(theta);
  Var l = optimizee_loss(s, th, d);
  grad = t.backward(l).wrt(th);
  return l.item();
}

inline double loss_value(const OptimizeeSpec& s, const Tensor& theta, const Dataset& d) {
  Tape t;
  return optimizee_loss(s, t.constant(theta), d).item();
}

inline Tensor predict(const OptimizeeSpec& s, const Tensor& theta, const Dataset& d) {
  Tape t;
  return optimizee_forward(s, t.constant(theta), t.constant(d.inputs)).value();
}

struct ClassCounts {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

inline ClassCounts classify(const OptimizeeSpec& s, const Tensor& theta, const Dataset& d) {
  const Tensor out = predict(s, theta, d);
  const std::size_t c = out.dim(1);
  ClassCounts cc;
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (out[i * c + j] > out[i * c + best]) best = j;
    cc.correct += best == static_cast<std::size_t>(d.labels[i]) ? 1 : 0;
    ++cc.total;
  }
  return cc;
}

/// Objective over theta for the probes and the Hessian-vector product.
inline auto make_objective(const OptimizeeSpec& s, const Dataset& d) {
  return [s, &d](const Tensor& theta, Tensor& grad) { return loss_and_grad(s, theta, d, grad); };
}

}  // namespace lolab
