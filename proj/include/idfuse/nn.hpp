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
#include <string>
#include <vector>

#include "idfuse/autodiff.hpp"
#include "idfuse/gradcheck.hpp"
#include "idfuse/rng.hpp"

namespace idfuse::nn {

struct Parameter {
  std::string name;
  ad::Tensor value;
  bool trainable = false;
};

/// Named parameter registry. Iteration is in name order, independent of the
/// order parameters were registered in.
class ParamStore {
 public:
  void add(const std::string& name, ad::Tensor value, bool trainable = false);
  bool contains(const std::string& name) const { return params_.contains(name); }
  const Parameter& get(const std::string& name) const;
  const ad::Tensor& value(const std::string& name) const { return get(name).value; }
  /// Replaces a value; the shape must match.
  void set_value(const std::string& name, ad::Tensor value);
  void set_trainable(const std::string& name, bool trainable);

  std::vector<std::string> names() const;
  std::size_t size() const { return params_.size(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
};

/// Binds parameters to a forward pass. Trainable parameters become tape leaves
/// (once per graph) when a tape is attached; frozen ones enter as constants.
/// Overrides take precedence and are used as given, which is how the
/// finite-difference oracle drives a model.
class Graph {
 public:
  explicit Graph(const ParamStore& store, ad::Tape* tape = nullptr, const ad::ParamValues* overrides = nullptr)
      : store_(store), tape_(tape), overrides_(overrides) {}

  ad::Tensor param(const std::string& name);
  ad::Tape* tape() const { return tape_; }
  const ParamStore& store() const { return store_; }

 private:
  const ParamStore& store_;
  ad::Tape* tape_;
  const ad::ParamValues* overrides_;
  std::map<std::string, ad::Tensor> bound_;
};

/// Deterministic per-parameter stream: depends only on (seed, name).
Rng param_rng(std::uint64_t seed, const std::string& name);
ad::Tensor normal_init(std::uint64_t seed, const std::string& name, ad::Shape shape, double sigma);

enum class Init {
  fan_in,  // N(0, 1/d_in)
  small,   // N(0, 0.02^2)
  zeros,
};

struct LoraDelta {
  std::string name;  // factors live at <name>.down and <name>.up
  std::size_t rank = 0;
  double scale = 1.0;  // alpha / rank
};

struct LinearLayer {
  std::string name;  // <name>.weight (d_out x d_in), <name>.bias (d_out)
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::optional<LoraDelta> lora;
};

/// Registers weight and bias (and LoRA factors when rank > 0). The LoRA down
/// factor is N(0, 0.02^2) and the up factor starts at zero.
LinearLayer make_linear(ParamStore& store, const std::string& name, std::size_t d_in, std::size_t d_out,
                        std::uint64_t seed, Init init = Init::fan_in, std::size_t lora_rank = 0,
                        double lora_alpha = 0.0);

/// W x + b (+ scale * up (down x)) for x of shape [d_in] or [n, d_in].
ad::Tensor linear_forward(Graph& g, const LinearLayer& layer, const ad::Tensor& x, bool use_delta = true);

/// Broadcasts a row vector [d] to [n, d] as ones[n,1] * row[1,d].
ad::Tensor repeat_rows(const ad::Tensor& row, std::size_t n);

/// x + fc2(gelu(fc1(x)))
struct ResidualMlp {
  LinearLayer fc1;
  LinearLayer fc2;
};

ResidualMlp make_residual_mlp(ParamStore& store, const std::string& name, std::size_t dim, std::size_t hidden,
                              std::uint64_t seed, Init out_init, std::size_t lora_rank = 0);
ad::Tensor residual_mlp_forward(Graph& g, const ResidualMlp& mlp, const ad::Tensor& x);

struct CrossAttentionLayer {
  std::string name;
  std::size_t dim = 0;
  std::size_t heads = 1;
  LinearLayer query;
  LinearLayer key;
  LinearLayer value;
  LinearLayer output;
};

CrossAttentionLayer make_cross_attention(ParamStore& store, const std::string& name, std::size_t dim,
                                         std::size_t heads, std::uint64_t seed, std::size_t lora_rank = 0);

/// Scaled dot-product attention of queries [n_q, dim] over context [n_c, dim].
/// When `weights` is given it receives one [n_q, n_c] attention matrix per head.
ad::Tensor cross_attention_forward(Graph& g, const CrossAttentionLayer& layer, const ad::Tensor& queries,
                                   const ad::Tensor& context, std::vector<ad::Tensor>* weights = nullptr);

/// Marks exactly the fine-tuning set trainable (the V* embedding, the IEDM
/// adapter, the FFM, every LoRA factor) and everything else frozen. Returns
/// the trainable parameters in name order.
std::vector<Parameter> select_trainable(ParamStore& store);
bool is_finetune_parameter(const std::string& name);

}  // namespace idfuse::nn
