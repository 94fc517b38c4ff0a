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

#include "idfuse/iedm.hpp"

#include "idfuse/error.hpp"
#include "idfuse/instrument.hpp"

namespace idfuse::iedm {

using ad::Tensor;

std::string mask_position_name(MaskPosition p) { return p == MaskPosition::pre ? "pre" : "post"; }

MaskPosition mask_position_from_name(const std::string& name) {
  if (name == "pre") return MaskPosition::pre;
  if (name == "post") return MaskPosition::post;
  throw ValidationError("unknown mask position '" + name + "'");
}

std::string cosine_mode_name(CosineMode m) { return m == CosineMode::raw ? "raw" : "squared"; }

CosineMode cosine_mode_from_name(const std::string& name) {
  if (name == "raw") return CosineMode::raw;
  if (name == "squared") return CosineMode::squared;
  throw ValidationError("unknown cosine mode '" + name + "'");
}

Adapter make_adapter(nn::ParamStore& store, std::size_t dim, std::uint64_t seed, MaskPosition position) {
  store.add(kMaskLogits, Tensor::zeros({dim}));
  return Adapter{dim, position,
                 nn::make_residual_mlp(store, "iedm.adapter.block0", dim, dim, seed, nn::Init::zeros),
                 nn::make_residual_mlp(store, "iedm.adapter.block1", dim, dim, seed, nn::Init::zeros)};
}

Tensor adapter_forward(nn::Graph& g, const Adapter& adapter, const Tensor& f_raw) {
  if (f_raw.shape() != ad::Shape{adapter.dim}) {
    throw ValidationError("adapter: expected feature [" + std::to_string(adapter.dim) + "], got " +
                          ad::to_string(f_raw.shape()));
  }
  instrument::count_adapter();
  const Tensor mask = ad::sigmoid(g.param(kMaskLogits));
  auto blocks = [&](const Tensor& x) {
    return nn::residual_mlp_forward(g, adapter.block1, nn::residual_mlp_forward(g, adapter.block0, x));
  };
  if (adapter.position == MaskPosition::pre) return blocks(ad::mul(mask, f_raw));
  return ad::mul(mask, blocks(f_raw));
}

Tensor effective_mask(const nn::ParamStore& store) { return ad::sigmoid(store.value(kMaskLogits)); }

Tensor explicit_branch(const nn::ParamStore& store, const enc::ImageEncoder& encoder,
                       const world::RenderedScene& scene, world::Inpainter inpainter) {
  return enc::encode_image(store, encoder, world::inpaint(scene, inpainter));
}

namespace {

Tensor sum_terms(const std::vector<Tensor>& terms) {
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return total;
}

Tensor cosine_term(const Tensor& a, const Tensor& b, CosineMode mode) {
  const Tensor c = ad::cosine_similarity(a, b);
  return mode == CosineMode::raw ? c : ad::square(c);
}

}  // namespace

Tensor loss_l2(const std::vector<Tensor>& f_i, const Tensor& f_s, CosineMode mode) {
  if (f_i.empty()) throw ValidationError("loss_l2: need at least one feature");
  std::vector<Tensor> terms;
  for (const auto& f : f_i) terms.push_back(cosine_term(f, f_s, mode));
  return sum_terms(terms);
}

Tensor loss_l3(const std::vector<Tensor>& f_i, const std::vector<Tensor>& f_bg) {
  if (f_i.size() != f_bg.size()) {
    throw ValidationError("loss_l3: " + std::to_string(f_i.size()) + " adapter features vs " +
                          std::to_string(f_bg.size()) + " background features");
  }
  if (f_i.empty()) throw ValidationError("loss_l3: need at least one pair");
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < f_i.size(); ++i) terms.push_back(ad::cosine_similarity(f_i[i], f_bg[i]));
  return ad::scale(sum_terms(terms), -1.0);
}

Tensor loss_l4(const Tensor& f_s, const std::vector<Tensor>& f_bg, CosineMode mode) {
  if (f_bg.empty()) throw ValidationError("loss_l4: need at least one feature");
  std::vector<Tensor> terms;
  for (const auto& f : f_bg) terms.push_back(cosine_term(f_s, f, mode));
  return sum_terms(terms);
}

}  // namespace idfuse::iedm
