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

#include "idfuse/ffm.hpp"

#include "idfuse/error.hpp"
#include "idfuse/instrument.hpp"

namespace idfuse::ffm {

using ad::Tensor;

std::string combine_mode_name(CombineMode m) { return m == CombineMode::implicit ? "implicit" : "explicit"; }

CombineMode combine_mode_from_name(const std::string& name) {
  if (name == "implicit") return CombineMode::implicit;
  if (name == "explicit") return CombineMode::explicit_bg;
  throw ValidationError("unknown combine mode '" + name + "'");
}

Ffm make_ffm(nn::ParamStore& store, std::size_t dim, std::size_t experts, std::uint64_t seed, bool gating) {
  if (experts < 1) throw ValidationError("FFM needs at least one expert");
  if (!gating && experts != 1) throw ValidationError("gate-free fusion requires exactly one expert");
  Ffm ffm{dim, experts, gating, {}, {}};
  if (gating) ffm.gate = nn::make_linear(store, "ffm.gate", dim, experts, seed, nn::Init::small);
  for (std::size_t i = 0; i < experts; ++i) {
    ffm.bank.push_back(
        nn::make_residual_mlp(store, "ffm.expert" + std::to_string(i), dim, 2 * dim, seed, nn::Init::small));
  }
  return ffm;
}

Tensor combine(const Tensor& f_s, const Tensor& f_other) {
  if (f_s.shape() != f_other.shape() || f_s.rank() != 1) {
    throw ValidationError("combine: feature shapes differ: " + ad::to_string(f_s.shape()) + " vs " +
                          ad::to_string(f_other.shape()));
  }
  return ad::add(f_s, f_other);
}

Tensor gate(nn::Graph& g, const Ffm& ffm, const Tensor& f_com) {
  if (!ffm.gating) throw ValidationError("gate: this FFM has no gating module");
  return ad::softmax(nn::linear_forward(g, ffm.gate, f_com));
}

Tensor expert_forward(nn::Graph& g, const Ffm& ffm, std::size_t index, const Tensor& f_com) {
  return nn::residual_mlp_forward(g, ffm.bank.at(index), f_com);
}

FusionResult fuse(nn::Graph& g, const Ffm& ffm, const Tensor& f_com) {
  if (f_com.shape() != ad::Shape{ffm.dim}) {
    throw ValidationError("fuse: expected feature [" + std::to_string(ffm.dim) + "], got " +
                          ad::to_string(f_com.shape()));
  }
  instrument::count_ffm();
  if (!ffm.gating) return {f_com, Tensor(), expert_forward(g, ffm, 0, f_com)};

  const Tensor weights = gate(g, ffm, f_com);
  std::vector<Tensor> columns;
  columns.reserve(ffm.experts);
  for (std::size_t i = 0; i < ffm.experts; ++i) {
    columns.push_back(ad::reshape(expert_forward(g, ffm, i, f_com), {ffm.dim, 1}));
  }
  const Tensor stacked = ffm.experts == 1 ? columns.front() : ad::concat(columns);
  return {f_com, weights, ad::matmul(stacked, weights)};
}

}  // namespace idfuse::ffm
