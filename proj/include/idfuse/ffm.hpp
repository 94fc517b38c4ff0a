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

#include <string>
#include <vector>

#include "idfuse/nn.hpp"

namespace idfuse::ffm {

/// Which decoupled feature is added to f_s: the adapter output (implicit) or
/// the encoded inpainted background (explicit).
enum class CombineMode { implicit, explicit_bg };

std::string combine_mode_name(CombineMode m);
CombineMode combine_mode_from_name(const std::string& name);

/// Dense softmax-gated mixture of k residual experts (D -> 2D -> D).
/// With gating off (k = 1 only) the single expert is applied directly.
struct Ffm {
  std::size_t dim = 0;
  std::size_t experts = 0;
  bool gating = true;
  nn::LinearLayer gate;
  std::vector<nn::ResidualMlp> bank;
};

Ffm make_ffm(nn::ParamStore& store, std::size_t dim, std::size_t experts, std::uint64_t seed, bool gating = true);

ad::Tensor combine(const ad::Tensor& f_s, const ad::Tensor& f_other);
ad::Tensor gate(nn::Graph& g, const Ffm& ffm, const ad::Tensor& f_com);
ad::Tensor expert_forward(nn::Graph& g, const Ffm& ffm, std::size_t index, const ad::Tensor& f_com);

struct FusionResult {
  ad::Tensor f_com;
  ad::Tensor gate_weights;  // empty (rank 0) when gating is off
  ad::Tensor f_r;
};

/// f_r = sum_i gate_i * Expert_i(f_com), reduced in expert order.
FusionResult fuse(nn::Graph& g, const Ffm& ffm, const ad::Tensor& f_com);

}  // namespace idfuse::ffm
