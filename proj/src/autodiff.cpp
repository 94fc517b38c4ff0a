/*
 * Copyright (c) 2026 The idfuse Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "idfuse/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>

#include "idfuse/error.hpp"

namespace idfuse::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
using RowMap = Eigen::Map<const RowMat>;
using ColMap = Eigen::Map<const ColMat>;
using OutMap = Eigen::Map<RowMat>;

constexpr std::array<std::string_view, 15> kOpNames = {
    "add",  "sub",  "mul",    "scalar-mul", "matmul",        "sigmoid", "gelu",  "softmax-lastdim",
    "sum",  "mean", "square", "sqrt-eps",   "concat-lastdim", "reshape", "cosine",
};

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  throw ValidationError(std::string(op_name(kind)) + ": " + detail);
}

std::string shapes_of(std::span<const Tensor> inputs) {
  std::string s;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (i) s += " vs ";
    s += to_string(inputs[i].shape());
  }
  return s;
}

double sigmoid_scalar(double x) {
  double s = 0.0;
  if (x >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    s = e / (1.0 + e);
  }
  // Keep the open interval (0, 1) even where the exact value rounds to 0 or 1.
  return std::clamp(s, std::numeric_limits<double>::min(), 1.0 - 0x1.0p-53);
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

/// Matrix view of a matmul operand: rows x cols of the stored data, plus the
/// effective (post-transpose) extents.
struct Operand {
  const double* data;
  std::size_t rows;
  std::size_t cols;
  bool transposed;
  std::size_t eff_rows() const { return transposed ? cols : rows; }
  std::size_t eff_cols() const { return transposed ? rows : cols; }
};

template <class F>
void with_view(const Operand& op, F&& f) {
  const auto r = static_cast<Eigen::Index>(op.rows);
  const auto c = static_cast<Eigen::Index>(op.cols);
  if (op.transposed) {
    f(ColMap(op.data, c, r));
  } else {
    f(RowMap(op.data, r, c));
  }
}

/// out (m x n, row-major) = op(A) * op(B)
void gemm(const Operand& a, const Operand& b, double* out) {
  OutMap c(out, static_cast<Eigen::Index>(a.eff_rows()), static_cast<Eigen::Index>(b.eff_cols()));
  with_view(a, [&](const auto& av) { with_view(b, [&](const auto& bv) { c.noalias() = av * bv; }); });
}

struct MatmulLayout {
  Operand a;
  Operand b;
  Shape out_shape;
};

MatmulLayout matmul_layout(const Tensor& a, const Tensor& b, const OpAttrs& attrs) {
  const Tensor inputs[] = {a, b};
  MatmulLayout layout{};
  if (a.rank() == 2 && b.rank() == 2) {
    layout.a = {a.data().data(), a.dim(0), a.dim(1), attrs.transpose_a};
    layout.b = {b.data().data(), b.dim(0), b.dim(1), attrs.transpose_b};
    layout.out_shape = {layout.a.eff_rows(), layout.b.eff_cols()};
  } else if (a.rank() == 2 && b.rank() == 1) {
    if (attrs.transpose_b) shape_error(OpKind::matmul, "cannot transpose a rank-1 operand");
    layout.a = {a.data().data(), a.dim(0), a.dim(1), attrs.transpose_a};
    layout.b = {b.data().data(), b.dim(0), 1, false};
    layout.out_shape = {layout.a.eff_rows()};
  } else if (a.rank() == 1 && b.rank() == 2) {
    if (attrs.transpose_a) shape_error(OpKind::matmul, "cannot transpose a rank-1 operand");
    layout.a = {a.data().data(), 1, a.dim(0), false};
    layout.b = {b.data().data(), b.dim(0), b.dim(1), attrs.transpose_b};
    layout.out_shape = {layout.b.eff_cols()};
  } else {
    shape_error(OpKind::matmul, "unsupported ranks " + shapes_of(inputs));
  }
  if (layout.a.eff_cols() != layout.b.eff_rows()) {
    shape_error(OpKind::matmul, "inner dimensions differ " + shapes_of(inputs));
  }
  return layout;
}

void require_arity(OpKind kind, std::span<const Tensor> inputs, std::size_t n) {
  if (inputs.size() != n) {
    shape_error(kind, "expected " + std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
  }
}

void require_same_shape(OpKind kind, std::span<const Tensor> inputs) {
  if (inputs[0].shape() != inputs[1].shape()) shape_error(kind, "shape mismatch " + shapes_of(inputs));
}

template <class F>
Tensor map_unary(const Tensor& a, F&& f) {
  std::vector<double> out(a.numel());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor(a.shape(), std::move(out));
}

std::size_t last_extent(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

Tensor forward(OpKind kind, std::span<const Tensor> in, const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul: {
      require_arity(kind, in, 2);
      require_same_shape(kind, in);
      std::vector<double> out(in[0].numel());
      const auto a = in[0].data();
      const auto b = in[1].data();
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = kind == OpKind::add ? a[i] + b[i] : kind == OpKind::sub ? a[i] - b[i] : a[i] * b[i];
      }
      return Tensor(in[0].shape(), std::move(out));
    }
    case OpKind::scalar_mul: {
      require_arity(kind, in, 1);
      const double s = attrs.scalar;
      return map_unary(in[0], [s](double x) { return x * s; });
    }
    case OpKind::matmul: {
      require_arity(kind, in, 2);
      const auto layout = matmul_layout(in[0], in[1], attrs);
      std::vector<double> out(numel_of(layout.out_shape));
      gemm(layout.a, layout.b, out.data());
      return Tensor(layout.out_shape, std::move(out));
    }
    case OpKind::sigmoid:
      require_arity(kind, in, 1);
      return map_unary(in[0], sigmoid_scalar);
    case OpKind::gelu:
      require_arity(kind, in, 1);
      return map_unary(in[0], gelu_scalar);
    case OpKind::softmax_lastdim: {
      require_arity(kind, in, 1);
      if (in[0].rank() == 0) shape_error(kind, "needs rank >= 1");
      const auto width = last_extent(in[0]);
      const auto x = in[0].data();
      std::vector<double> out(x.size());
      for (std::size_t row = 0; row < x.size() / width; ++row) {
        const double* xr = x.data() + row * width;
        double* yr = out.data() + row * width;
        const double peak = *std::max_element(xr, xr + width);
        double total = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
          yr[j] = std::exp(xr[j] - peak);
          total += yr[j];
        }
        for (std::size_t j = 0; j < width; ++j) yr[j] /= total;
      }
      return Tensor(in[0].shape(), std::move(out));
    }
    case OpKind::sum:
    case OpKind::mean: {
      require_arity(kind, in, 1);
      double total = 0.0;
      for (double v : in[0].data()) total += v;
      if (kind == OpKind::mean) total /= static_cast<double>(in[0].numel());
      return Tensor::scalar(total);
    }
    case OpKind::square:
      require_arity(kind, in, 1);
      return map_unary(in[0], [](double x) { return x * x; });
    case OpKind::sqrt_eps: {
      require_arity(kind, in, 1);
      for (double v : in[0].data()) {
        if (v + kSqrtEps < 0.0) shape_error(kind, "negative input");
      }
      return map_unary(in[0], [](double x) { return std::sqrt(x + kSqrtEps); });
    }
    case OpKind::concat_lastdim: {
      if (in.empty()) shape_error(kind, "needs at least one input");
      Shape lead(in[0].shape().begin(), in[0].shape().end() - (in[0].rank() ? 1 : 0));
      std::size_t total_width = 0;
      for (const auto& t : in) {
        if (t.rank() == 0 || t.rank() != in[0].rank()) shape_error(kind, "rank mismatch " + shapes_of(in));
        if (!std::equal(lead.begin(), lead.end(), t.shape().begin())) {
          shape_error(kind, "leading extents differ " + shapes_of(in));
        }
        total_width += t.shape().back();
      }
      const std::size_t rows = numel_of(lead);
      std::vector<double> out(rows * total_width);
      std::size_t offset = 0;
      for (const auto& t : in) {
        const auto w = t.shape().back();
        const auto d = t.data();
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(d.data() + r * w, w, out.data() + r * total_width + offset);
        }
        offset += w;
      }
      Shape shape = lead;
      shape.push_back(total_width);
      return Tensor(shape, std::move(out));
    }
    case OpKind::reshape: {
      require_arity(kind, in, 1);
      if (numel_of(attrs.shape) != in[0].numel()) {
        shape_error(kind, "cannot reshape " + to_string(in[0].shape()) + " to " + to_string(attrs.shape));
      }
      return Tensor(attrs.shape, in[0].to_vector());
    }
    case OpKind::cosine: {
      require_arity(kind, in, 2);
      if (in[0].rank() != 1 || in[1].rank() != 1 || in[0].numel() != in[1].numel()) {
        shape_error(kind, "needs equal-length vectors, got " + shapes_of(in));
      }
      const auto a = in[0].data();
      const auto b = in[1].data();
      double dot = 0.0, aa = 0.0, bb = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
      }
      const double na = std::max(std::sqrt(aa), kCosineEps);
      const double nb = std::max(std::sqrt(bb), kCosineEps);
      return Tensor::scalar(dot / (na * nb));
    }
  }
  throw ValidationError("unknown op kind " + std::to_string(static_cast<int>(kind)));
}

using Grad = std::vector<double>;

/// Vector-Jacobian products for every input of a node. Entries for inputs that
/// do not need a gradient may be left empty by the caller.
std::vector<Grad> vjp(OpKind kind, const std::vector<Tensor>& in, const Tensor& out, const OpAttrs& attrs,
                      const Grad& g) {
  std::vector<Grad> result(in.size());
  switch (kind) {
    case OpKind::add:
      result[0] = g;
      result[1] = g;
      break;
    case OpKind::sub: {
      result[0] = g;
      result[1].resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) result[1][i] = -g[i];
      break;
    }
    case OpKind::mul: {
      const auto a = in[0].data();
      const auto b = in[1].data();
      result[0].resize(g.size());
      result[1].resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        result[0][i] = g[i] * b[i];
        result[1][i] = g[i] * a[i];
      }
      break;
    }
    case OpKind::scalar_mul: {
      result[0].resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) result[0][i] = g[i] * attrs.scalar;
      break;
    }
    case OpKind::matmul: {
      const auto layout = matmul_layout(in[0], in[1], attrs);
      const Operand& a = layout.a;
      const Operand& b = layout.b;
      const Operand dc{g.data(), a.eff_rows(), b.eff_cols(), false};
      // op(A) = dC op(B)^T ; A = op(A) or its transpose.
      result[0].resize(in[0].numel());
      if (!a.transposed) {
        gemm(dc, {b.data, b.rows, b.cols, !b.transposed}, result[0].data());
      } else {
        gemm(b, {dc.data, dc.rows, dc.cols, true}, result[0].data());
      }
      // op(B) = op(A)^T dC
      result[1].resize(in[1].numel());
      if (!b.transposed) {
        gemm({a.data, a.rows, a.cols, !a.transposed}, dc, result[1].data());
      } else {
        gemm({dc.data, dc.rows, dc.cols, true}, a, result[1].data());
      }
      break;
    }
    case OpKind::sigmoid: {
      const auto y = out.data();
      result[0].resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) result[0][i] = g[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case OpKind::gelu: {
      const auto x = in[0].data();
      result[0].resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) result[0][i] = g[i] * gelu_grad(x[i]);
      break;
    }
    case OpKind::softmax_lastdim: {
      const auto y = out.data();
      const auto width = last_extent(out);
      result[0].resize(g.size());
      for (std::size_t row = 0; row < g.size() / width; ++row) {
        const std::size_t base = row * width;
        double inner = 0.0;
        for (std::size_t j = 0; j < width; ++j) inner += g[base + j] * y[base + j];
        for (std::size_t j = 0; j < width; ++j) result[0][base + j] = y[base + j] * (g[base + j] - inner);
      }
      break;
    }
    case OpKind::sum:
      result[0].assign(in[0].numel(), g[0]);
      break;
    case OpKind::mean:
      result[0].assign(in[0].numel(), g[0] / static_cast<double>(in[0].numel()));
      break;
    case OpKind::square: {
      const auto x = in[0].data();
      result[0].resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) result[0][i] = 2.0 * x[i] * g[i];
      break;
    }
    case OpKind::sqrt_eps: {
      const auto y = out.data();
      result[0].resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) result[0][i] = 0.5 * g[i] / y[i];
      break;
    }
    case OpKind::concat_lastdim: {
      const auto total_width = last_extent(out);
      const auto rows = out.numel() / total_width;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < in.size(); ++k) {
        const auto w = in[k].shape().back();
        result[k].resize(in[k].numel());
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(g.data() + r * total_width + offset, w, result[k].data() + r * w);
        }
        offset += w;
      }
      break;
    }
    case OpKind::reshape:
      result[0] = g;
      break;
    case OpKind::cosine: {
      const auto a = in[0].data();
      const auto b = in[1].data();
      double dot = 0.0, aa = 0.0, bb = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
      }
      const double norm_a = std::sqrt(aa);
      const double norm_b = std::sqrt(bb);
      const double na = std::max(norm_a, kCosineEps);
      const double nb = std::max(norm_b, kCosineEps);
      // Where the norm is clamped it is a constant and contributes no term.
      const double ca = norm_a > kCosineEps ? dot / (na * na * na * nb) : 0.0;
      const double cb = norm_b > kCosineEps ? dot / (na * nb * nb * nb) : 0.0;
      result[0].resize(a.size());
      result[1].resize(b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        result[0][i] = g[0] * (b[i] / (na * nb) - ca * a[i]);
        result[1][i] = g[0] * (a[i] / (na * nb) - cb * b[i]);
      }
      break;
    }
  }
  return result;
}

Tape* find_tape(OpKind kind, std::span<const Tensor> inputs) {
  Tape* tape = nullptr;
  for (const auto& t : inputs) {
    if (!t.tape()) continue;
    if (tape && tape != t.tape()) shape_error(kind, "inputs live on different tapes");
    tape = t.tape();
  }
  return tape;
}

}  // namespace

std::string_view op_name(OpKind kind) {
  const auto index = static_cast<std::size_t>(kind);
  if (index >= kOpNames.size()) throw ValidationError("unknown op kind " + std::to_string(index));
  return kOpNames[index];
}

OpKind op_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  }
  throw ValidationError("unknown op kind '" + std::string(name) + "'");
}

const Tensor& GradientMap::at(const std::string& name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw ValidationError("no gradient for '" + name + "'");
  return it->second;
}

Tensor Tape::leaf(const std::string& name, const Tensor& value) {
  if (leaves_.contains(name)) throw ValidationError("duplicate leaf name '" + name + "'");
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  Node node;
  node.output = value.detach();
  node.name = name;
  nodes_.push_back(std::move(node));
  leaves_.emplace(name, id);
  Tensor out = value.detach();
  out.tape_ = this;
  out.node_ = id;
  return out;
}

Tensor Tape::record(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs, Tensor output) {
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  Node node;
  node.kind = kind;
  node.attrs = attrs;
  node.output = output.detach();
  node.inputs.reserve(inputs.size());
  node.saved.reserve(inputs.size());
  for (const auto& t : inputs) {
    node.inputs.push_back(t.tape() == this ? t.node_ : kConstant);
    node.saved.push_back(t.detach());
  }
  nodes_.push_back(std::move(node));
  output.tape_ = this;
  output.node_ = id;
  return output;
}

GradientMap Tape::backward(const Tensor& loss) const {
  if (loss.numel() != 1) throw ValidationError("backward needs a scalar loss, got " + to_string(loss.shape()));
  GradientMap result;
  if (loss.tape() == this) {
    std::vector<Grad> grads(nodes_.size());
    grads[loss.node_].assign(1, 1.0);
    for (std::int64_t id = loss.node_; id >= 0; --id) {
      const Node& node = nodes_[static_cast<std::size_t>(id)];
      Grad& g = grads[static_cast<std::size_t>(id)];
      if (g.empty() || !node.kind) continue;
      auto parts = vjp(*node.kind, node.saved, node.output, node.attrs, g);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const auto src = node.inputs[k];
        if (src == kConstant) continue;
        Grad& dst = grads[src];
        if (dst.empty()) {
          dst = std::move(parts[k]);
        } else {
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += parts[k][i];
        }
      }
    }
    for (const auto& [name, id] : leaves_) {
      const auto& shape = nodes_[id].output.shape();
      if (grads[id].empty() || id > loss.node_) {
        result.set(name, Tensor::zeros(shape));
      } else {
        result.set(name, Tensor(shape, grads[id]));
      }
    }
  } else {
    for (const auto& [name, id] : leaves_) result.set(name, Tensor::zeros(nodes_[id].output.shape()));
  }
  return result;
}

std::optional<std::string> Tape::first_non_finite() const {
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& node = nodes_[id];
    if (node.output.all_finite()) continue;
    std::string label = node.kind ? std::string(op_name(*node.kind)) : "leaf " + node.name;
    return "node " + std::to_string(id) + " (" + label + ")";
  }
  return std::nullopt;
}

Tensor apply_primitive(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
  if (kind == OpKind::cosine) {
    require_arity(kind, inputs, 2);
    return cosine_similarity(inputs[0], inputs[1]);
  }
  Tape* tape = find_tape(kind, inputs);
  Tensor out = forward(kind, inputs, attrs);
  if (!tape) return out;
  return tape->record(kind, inputs, attrs, std::move(out));
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  const Tensor inputs[] = {a, b};
  Tape* tape = find_tape(OpKind::cosine, inputs);
  Tensor out = forward(OpKind::cosine, inputs, {});
  if (!tape) return out;
  return tape->record(OpKind::cosine, inputs, {}, std::move(out));
}

namespace {
Tensor unary(OpKind kind, const Tensor& a, const OpAttrs& attrs = {}) {
  const Tensor inputs[] = {a};
  return apply_primitive(kind, inputs, attrs);
}
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, const OpAttrs& attrs = {}) {
  const Tensor inputs[] = {a, b};
  return apply_primitive(kind, inputs, attrs);
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(OpKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(OpKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(OpKind::mul, a, b); }
Tensor scale(const Tensor& a, double factor) { return unary(OpKind::scalar_mul, a, {.scalar = factor}); }
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  return binary(OpKind::matmul, a, b, {.transpose_a = transpose_a, .transpose_b = transpose_b});
}
Tensor sigmoid(const Tensor& a) { return unary(OpKind::sigmoid, a); }
Tensor gelu(const Tensor& a) { return unary(OpKind::gelu, a); }
Tensor softmax(const Tensor& a) { return unary(OpKind::softmax_lastdim, a); }
Tensor sum(const Tensor& a) { return unary(OpKind::sum, a); }
Tensor mean(const Tensor& a) { return unary(OpKind::mean, a); }
Tensor square(const Tensor& a) { return unary(OpKind::square, a); }
Tensor sqrt_eps(const Tensor& a) { return unary(OpKind::sqrt_eps, a); }
Tensor concat(const std::vector<Tensor>& parts) { return apply_primitive(OpKind::concat_lastdim, parts); }
Tensor reshape(const Tensor& a, Shape shape) { return unary(OpKind::reshape, a, {.shape = std::move(shape)}); }

}  // namespace idfuse::ad
