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
#include <string>
#include <vector>

#include "idfuse/nn.hpp"
#include "idfuse/rng.hpp"

namespace idfuse::diff {

struct NoiseSchedule {
  std::size_t steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
};

/// Linear betas from beta_start to beta_end over `steps` steps.
NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end);

struct LatentState {
  ad::Tensor z;  // [3, H, W]
  std::size_t t = 0;
  ad::Tensor epsilon;
};

/// Rescales x from [0, 1] to [-1, 1], then z = sqrt(abar_t) x + sqrt(1 - abar_t) eps.
LatentState q_sample(const NoiseSchedule& schedule, const ad::Tensor& x, std::size_t t, const ad::Tensor& epsilon);

/// Sinusoidal embedding of a scalar position.
std::vector<double> sinusoidal(double position, std::size_t dim);

struct DenoiserBlock {
  nn::CrossAttentionLayer attn;
  nn::ResidualMlp mlp;
};

/// Patch tokens plus a positional table and a sinusoidal time embedding,
/// then blocks of {cross-attention over the single conditioning token, MLP},
/// then a zero-initialized projection back to patches. LoRA slots sit on
/// every attention projection.
struct Denoiser {
  std::size_t dim = 0;
  std::size_t canvas = 0;
  std::size_t tokens = 0;
  nn::LinearLayer input;
  std::vector<DenoiserBlock> blocks;
  nn::LinearLayer output;
};

inline constexpr const char* kPosEmbed = "unet.pos_embed";

struct DenoiserShape {
  std::size_t dim = 64;
  std::size_t canvas = 32;
  std::size_t heads = 2;
  std::size_t hidden = 128;
  std::size_t blocks = 2;
  std::size_t lora_rank = 0;
};

Denoiser make_denoiser(nn::ParamStore& store, const DenoiserShape& shape, std::uint64_t seed);

/// Prediction in patch layout [tokens, 48] for a patchified latent.
ad::Tensor denoiser_tokens(nn::Graph& g, const Denoiser& den, const ad::Tensor& z_tokens, std::size_t t,
                           const ad::Tensor& condition);
/// Image-layout prediction [3, H, W] evaluated off the tape.
ad::Tensor denoiser_forward(const nn::ParamStore& store, const Denoiser& den, const ad::Tensor& z, std::size_t t,
                            const ad::Tensor& condition);

/// Mean squared error over all elements.
ad::Tensor loss_l1(const ad::Tensor& epsilon, const ad::Tensor& predicted);

/// Ancestral sampling from z_T ~ N(0, I) using only the denoiser and the
/// given condition; the x0 estimate is clipped to [-1, 1] at each step.
/// Returns an image in [0, 1].
ad::Tensor ddpm_sample(const nn::ParamStore& store, const Denoiser& den, const NoiseSchedule& schedule,
                       const ad::Tensor& condition, std::uint64_t seed);

/// One reverse step given the predicted noise; `noise` is ignored at t = 0.
ad::Tensor reverse_step(const NoiseSchedule& schedule, const ad::Tensor& z, std::size_t t, const ad::Tensor& eps_hat,
                        const ad::Tensor& noise);

ad::Tensor standard_normal(Rng& rng, const ad::Shape& shape);

}  // namespace idfuse::diff
