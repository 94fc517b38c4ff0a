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

#include "idfuse/nn.hpp"

#include <cmath>

#include "idfuse/error.hpp"

namespace idfuse::nn {

using ad::Tensor;

void ParamStore::add(const std::string& name, Tensor value, bool trainable) {
  if (params_.contains(name)) throw ValidationError("duplicate parameter '" + name + "'");
  params_.emplace(name, Parameter{name, value.detach(), trainable});
}

const Parameter& ParamStore::get(const std::string& name) const {
  const auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::set_value(const std::string& name, Tensor value) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
  if (it->second.value.shape() != value.shape()) {
    throw ValidationError("shape mismatch for '" + name + "': " + ad::to_string(it->second.value.shape()) + " vs " +
                          ad::to_string(value.shape()));
  }
  it->second.value = value.detach();
}

void ParamStore::set_trainable(const std::string& name, bool trainable) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
  it->second.trainable = trainable;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, p] : params_) out.push_back(name);
  return out;
}

Tensor Graph::param(const std::string& name) {
  if (overrides_) {
    if (auto it = overrides_->find(name); it != overrides_->end()) return it->second;
  }
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  const Parameter& p = store_.get(name);
  Tensor t = (tape_ && p.trainable) ? tape_->leaf(name, p.value) : p.value;
  bound_.emplace(name, t);
  return t;
}

Rng param_rng(std::uint64_t seed, const std::string& name) { return Rng(mix_seed(seed, hash_name(name))); }

Tensor normal_init(std::uint64_t seed, const std::string& name, ad::Shape shape, double sigma) {
  Rng rng = param_rng(seed, name);
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = sigma * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

LinearLayer make_linear(ParamStore& store, const std::string& name, std::size_t d_in, std::size_t d_out,
                        std::uint64_t seed, Init init, std::size_t lora_rank, double lora_alpha) {
  LinearLayer layer{name, d_in, d_out, std::nullopt};
  const std::string w = name + ".weight";
  switch (init) {
    case Init::fan_in:
      store.add(w, normal_init(seed, w, {d_out, d_in}, 1.0 / std::sqrt(static_cast<double>(d_in))));
      break;
    case Init::small:
      store.add(w, normal_init(seed, w, {d_out, d_in}, 0.02));
      break;
    case Init::zeros:
      store.add(w, Tensor::zeros({d_out, d_in}));
      break;
  }
  store.add(name + ".bias", Tensor::zeros({d_out}));
  if (lora_rank > 0) {
    const std::string base = name + ".lora";
    const double alpha = lora_alpha > 0.0 ? lora_alpha : static_cast<double>(lora_rank);
    store.add(base + ".down", normal_init(seed, base + ".down", {lora_rank, d_in}, 0.02));
    store.add(base + ".up", Tensor::zeros({d_out, lora_rank}));
    layer.lora = LoraDelta{base, lora_rank, alpha / static_cast<double>(lora_rank)};
  }
  return layer;
}

Tensor repeat_rows(const Tensor& row, std::size_t n) {
  const std::size_t d = row.numel();
  return ad::matmul(Tensor::full({n, 1}, 1.0), ad::reshape(row, {1, d}));
}

Tensor linear_forward(Graph& g, const LinearLayer& layer, const Tensor& x, bool use_delta) {
  const bool batched = x.rank() == 2;
  if ((x.rank() != 1 && !batched) || x.shape().back() != layer.d_in) {
    throw ValidationError(layer.name + ": expected input [..., " + std::to_string(layer.d_in) + "], got " +
                          ad::to_string(x.shape()));
  }
  const Tensor w = g.param(layer.name + ".weight");
  const Tensor b = g.param(layer.name + ".bias");
  Tensor y = batched ? ad::matmul(x, w, false, true) : ad::matmul(w, x);
  if (use_delta && layer.lora) {
    const Tensor down = g.param(layer.lora->name + ".down");
    const Tensor up = g.param(layer.lora->name + ".up");
    Tensor delta = batched ? ad::matmul(ad::matmul(x, down, false, true), up, false, true)
                           : ad::matmul(up, ad::matmul(down, x));
    if (layer.lora->scale != 1.0) delta = ad::scale(delta, layer.lora->scale);
    y = ad::add(y, delta);
  }
  return ad::add(y, batched ? repeat_rows(b, x.dim(0)) : b);
}

ResidualMlp make_residual_mlp(ParamStore& store, const std::string& name, std::size_t dim, std::size_t hidden,
                              std::uint64_t seed, Init out_init, std::size_t lora_rank) {
  return ResidualMlp{make_linear(store, name + ".fc1", dim, hidden, seed, Init::fan_in, lora_rank),
                     make_linear(store, name + ".fc2", hidden, dim, seed, out_init, lora_rank)};
}

Tensor residual_mlp_forward(Graph& g, const ResidualMlp& mlp, const Tensor& x) {
  const Tensor hidden = ad::gelu(linear_forward(g, mlp.fc1, x));
  return ad::add(x, linear_forward(g, mlp.fc2, hidden));
}

CrossAttentionLayer make_cross_attention(ParamStore& store, const std::string& name, std::size_t dim,
                                         std::size_t heads, std::uint64_t seed, std::size_t lora_rank) {
  if (heads == 0 || dim % heads != 0) {
    throw ValidationError(name + ": dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                          " heads");
  }
  return CrossAttentionLayer{name,
                             dim,
                             heads,
                             make_linear(store, name + ".q", dim, dim, seed, Init::fan_in, lora_rank),
                             make_linear(store, name + ".k", dim, dim, seed, Init::fan_in, lora_rank),
                             make_linear(store, name + ".v", dim, dim, seed, Init::fan_in, lora_rank),
                             make_linear(store, name + ".o", dim, dim, seed, Init::fan_in, lora_rank)};
}

namespace {
/// [dim, dim/heads] matrix picking the columns of one head.
Tensor head_selector(std::size_t dim, std::size_t heads, std::size_t head) {
  const std::size_t width = dim / heads;
  std::vector<double> s(dim * width, 0.0);
  for (std::size_t j = 0; j < width; ++j) s[(head * width + j) * width + j] = 1.0;
  return Tensor::matrix(dim, width, std::move(s));
}
}  // namespace

Tensor cross_attention_forward(Graph& g, const CrossAttentionLayer& layer, const Tensor& queries,
                               const Tensor& context, std::vector<Tensor>* weights) {
  if (queries.rank() != 2 || context.rank() != 2 || queries.dim(1) != layer.dim || context.dim(1) != layer.dim) {
    throw ValidationError(layer.name + ": expected [n, " + std::to_string(layer.dim) + "] inputs, got " +
                          ad::to_string(queries.shape()) + " and " + ad::to_string(context.shape()));
  }
  const Tensor q = linear_forward(g, layer.query, queries);
  const Tensor k = linear_forward(g, layer.key, context);
  const Tensor v = linear_forward(g, layer.value, context);
  const std::size_t width = layer.dim / layer.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(width));

  std::vector<Tensor> head_outputs;
  head_outputs.reserve(layer.heads);
  if (weights) weights->clear();
  for (std::size_t h = 0; h < layer.heads; ++h) {
    Tensor qh = q, kh = k, vh = v;
    if (layer.heads > 1) {
      const Tensor sel = head_selector(layer.dim, layer.heads, h);
      qh = ad::matmul(q, sel);
      kh = ad::matmul(k, sel);
      vh = ad::matmul(v, sel);
    }
    const Tensor attn = ad::softmax(ad::scale(ad::matmul(qh, kh, false, true), inv_sqrt));
    if (weights) weights->push_back(attn);
    head_outputs.push_back(ad::matmul(attn, vh));
  }
  const Tensor merged = layer.heads > 1 ? ad::concat(head_outputs) : head_outputs.front();
  return linear_forward(g, layer.output, merged);
}

bool is_finetune_parameter(const std::string& name) {
  return name == "text.v_star" || name.starts_with("iedm.adapter.") || name.starts_with("ffm.") ||
         name.find(".lora.") != std::string::npos;
}

std::vector<Parameter> select_trainable(ParamStore& store) {
  std::vector<Parameter> out;
  for (const auto& name : store.names()) {
    const bool trainable = is_finetune_parameter(name);
    store.set_trainable(name, trainable);
    if (trainable) out.push_back(store.get(name));
  }
  return out;
}

}  // namespace idfuse::nn
