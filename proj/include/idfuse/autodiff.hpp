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

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "idfuse/tensor.hpp"

namespace idfuse::ad {

/// The closed set of differentiable primitives. Shapes must conform exactly;
/// there is no broadcasting.
enum class OpKind : std::uint8_t {
  add,
  sub,
  mul,
  scalar_mul,
  matmul,
  sigmoid,
  gelu,
  softmax_lastdim,
  sum,
  mean,
  square,
  sqrt_eps,
  concat_lastdim,
  reshape,
  cosine,
};

std::string_view op_name(OpKind kind);
/// Parses an op name; unknown names are rejected.
OpKind op_from_name(std::string_view name);

/// Per-op attributes. `scalar` is the factor for scalar_mul; the transpose
/// flags apply to matmul operands; `shape` is the target of reshape.
struct OpAttrs {
  double scalar = 0.0;
  bool transpose_a = false;
  bool transpose_b = false;
  Shape shape;
};

inline constexpr double kCosineEps = 1e-8;
inline constexpr double kSqrtEps = 1e-12;

class GradientMap {
 public:
  void set(const std::string& name, Tensor grad) { entries_[name] = std::move(grad); }
  bool contains(const std::string& name) const { return entries_.contains(name); }
  const Tensor& at(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::map<std::string, Tensor> entries_;
};

/// Append-only record of the forward computation. Node inputs always have
/// smaller ids than the node itself. Single-threaded; tensors handed out by a
/// tape must not outlive it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a named differentiable input. Names are unique per tape.
  Tensor leaf(const std::string& name, const Tensor& value);

  /// Gradients of a scalar loss w.r.t. every leaf on the tape. Leaves the loss
  /// does not depend on get zeros. May be called repeatedly.
  GradientMap backward(const Tensor& loss) const;

  std::size_t size() const { return nodes_.size(); }
  /// "node <id> (<op>)" for the first node whose output is not finite.
  std::optional<std::string> first_non_finite() const;

 private:
  friend Tensor apply_primitive(OpKind, std::span<const Tensor>, const OpAttrs&);
  friend Tensor cosine_similarity(const Tensor&, const Tensor&);

  static constexpr std::uint32_t kConstant = UINT32_MAX;

  struct Node {
    std::optional<OpKind> kind;  // empty for leaves
    std::vector<std::uint32_t> inputs;
    std::vector<Tensor> saved;
    Tensor output;
    OpAttrs attrs;
    std::string name;
  };

  Tensor record(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs, Tensor output);

  std::vector<Node> nodes_;
  std::map<std::string, std::uint32_t> leaves_;
};

/// Evaluates a primitive. When any input lives on a tape the result is
/// recorded there with the inputs saved for the exact vector-Jacobian product.
Tensor apply_primitive(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

/// a.b / (max(|a|, eps) * max(|b|, eps)) for rank-1 a, b of equal length.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Matrix product. Rank-2 x rank-2, rank-2 x rank-1 (matrix-vector) and
/// rank-1 x rank-2 (vector-matrix) are supported; transposes apply to rank-2
/// operands only.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softmax(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt_eps(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, Shape shape);

}  // namespace idfuse::ad
