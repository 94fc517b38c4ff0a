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

#include "idfuse/encoders.hpp"
#include "idfuse/nn.hpp"
#include "idfuse/synthworld.hpp"

namespace idfuse::iedm {

enum class MaskPosition { pre, post };
enum class CosineMode { raw, squared };

std::string mask_position_name(MaskPosition p);
MaskPosition mask_position_from_name(const std::string& name);
std::string cosine_mode_name(CosineMode m);
CosineMode cosine_mode_from_name(const std::string& name);

inline constexpr const char* kMaskLogits = "iedm.adapter.mask_logits";

/// Learnable sigmoid mask plus two residual MLP blocks of width D whose
/// output layers start at zero.
struct Adapter {
  std::size_t dim = 0;
  MaskPosition position = MaskPosition::pre;
  nn::ResidualMlp block0;
  nn::ResidualMlp block1;
};

Adapter make_adapter(nn::ParamStore& store, std::size_t dim, std::uint64_t seed,
                     MaskPosition position = MaskPosition::pre);
/// pre:  blocks(sigmoid(m) * f_raw)
/// post: sigmoid(m) * blocks(f_raw)
ad::Tensor adapter_forward(nn::Graph& g, const Adapter& adapter, const ad::Tensor& f_raw);
ad::Tensor effective_mask(const nn::ParamStore& store);

/// E_I applied to the inpainted background. Frozen: the result is a constant.
ad::Tensor explicit_branch(const nn::ParamStore& store, const enc::ImageEncoder& encoder,
                           const world::RenderedScene& scene, world::Inpainter inpainter);

/// Sum of cos(f_i, f_s), or of cos^2 in squared mode.
ad::Tensor loss_l2(const std::vector<ad::Tensor>& f_i, const ad::Tensor& f_s, CosineMode mode = CosineMode::raw);
/// Negative sum of cos(f_i, f_bg) over aligned pairs.
ad::Tensor loss_l3(const std::vector<ad::Tensor>& f_i, const std::vector<ad::Tensor>& f_bg);
/// Sum of cos(f_s, f_bg), or of cos^2 in squared mode.
ad::Tensor loss_l4(const ad::Tensor& f_s, const std::vector<ad::Tensor>& f_bg, CosineMode mode = CosineMode::raw);

}  // namespace idfuse::iedm
