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

#include "idfuse/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "idfuse/encoders.hpp"
#include "idfuse/error.hpp"

namespace idfuse::diff {

using ad::Tensor;

NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw ValidationError("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
    throw ValidationError("betas must satisfy 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  double abar = 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    abar *= 1.0 - beta;
    s.alpha_bars.push_back(abar);
  }
  return s;
}

LatentState q_sample(const NoiseSchedule& schedule, const Tensor& x, std::size_t t, const Tensor& epsilon) {
  if (t >= schedule.steps) {
    throw ValidationError("timestep " + std::to_string(t) + " out of range [0, " + std::to_string(schedule.steps) + ")");
  }
  if (x.shape() != epsilon.shape()) {
    throw ValidationError("q_sample: image " + ad::to_string(x.shape()) + " vs noise " + ad::to_string(epsilon.shape()));
  }
  const double a = std::sqrt(schedule.alpha_bars[t]);
  const double b = std::sqrt(1.0 - schedule.alpha_bars[t]);
  std::vector<double> z(x.numel());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = a * (2.0 * x[i] - 1.0) + b * epsilon[i];
  return {Tensor(x.shape(), std::move(z)), t, epsilon};
}

std::vector<double> sinusoidal(double position, std::size_t dim) {
  std::vector<double> e(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(half, 1)));
    e[i] = std::sin(position * freq);
    e[half + i] = std::cos(position * freq);
  }
  if (dim % 2) e[dim - 1] = 0.0;
  return e;
}

namespace {

/// Row half from the patch row, column half from the patch column.
Tensor positional_table(std::size_t per_side, std::size_t dim) {
  const std::size_t n = per_side * per_side;
  const std::size_t half = dim / 2;
  std::vector<double> table(n * dim, 0.0);
  for (std::size_t r = 0; r < per_side; ++r) {
    for (std::size_t c = 0; c < per_side; ++c) {
      const auto er = sinusoidal(static_cast<double>(r), half);
      const auto ec = sinusoidal(static_cast<double>(c), dim - half);
      double* row = table.data() + (r * per_side + c) * dim;
      std::copy(er.begin(), er.end(), row);
      std::copy(ec.begin(), ec.end(), row + half);
    }
  }
  return Tensor::matrix(n, dim, std::move(table));
}

}  // namespace

Denoiser make_denoiser(nn::ParamStore& store, const DenoiserShape& shape, std::uint64_t seed) {
  if (shape.canvas % enc::kPatch != 0) throw ValidationError("canvas must be a multiple of the patch size");
  const std::size_t per_side = shape.canvas / enc::kPatch;
  const std::size_t patch_width = 3 * enc::kPatch * enc::kPatch;
  Denoiser den;
  den.dim = shape.dim;
  den.canvas = shape.canvas;
  den.tokens = per_side * per_side;
  den.input = nn::make_linear(store, "unet.input", patch_width, shape.dim, seed);
  store.add(kPosEmbed, positional_table(per_side, shape.dim));
  for (std::size_t b = 0; b < shape.blocks; ++b) {
    const std::string name = "unet.block" + std::to_string(b);
    den.blocks.push_back({nn::make_cross_attention(store, name + ".attn", shape.dim, shape.heads, seed, shape.lora_rank),
                          nn::make_residual_mlp(store, name + ".mlp", shape.dim, shape.hidden, seed, nn::Init::small)});
  }
  den.output = nn::make_linear(store, "unet.output", shape.dim, patch_width, seed, nn::Init::zeros);
  return den;
}

Tensor denoiser_tokens(nn::Graph& g, const Denoiser& den, const Tensor& z_tokens, std::size_t t,
                       const Tensor& condition) {
  if (condition.shape() != ad::Shape{den.dim}) {
    throw ValidationError("denoiser: expected condition [" + std::to_string(den.dim) + "], got " +
                          ad::to_string(condition.shape()));
  }
  if (z_tokens.rank() != 2 || z_tokens.dim(0) != den.tokens) {
    throw ValidationError("denoiser: expected " + std::to_string(den.tokens) + " patch tokens, got " +
                          ad::to_string(z_tokens.shape()));
  }
  const Tensor time = nn::repeat_rows(Tensor::vector(sinusoidal(static_cast<double>(t), den.dim)), den.tokens);
  Tensor h = ad::add(ad::add(nn::linear_forward(g, den.input, z_tokens), g.param(kPosEmbed)), time);
  const Tensor context = ad::reshape(condition, {1, den.dim});
  for (const auto& block : den.blocks) {
    h = ad::add(h, nn::cross_attention_forward(g, block.attn, h, context));
    h = nn::residual_mlp_forward(g, block.mlp, h);
  }
  return nn::linear_forward(g, den.output, h);
}

Tensor denoiser_forward(const nn::ParamStore& store, const Denoiser& den, const Tensor& z, std::size_t t,
                        const Tensor& condition) {
  if (z.shape() != ad::Shape{3, den.canvas, den.canvas}) {
    throw ValidationError("denoiser: expected latent " + ad::to_string({3, den.canvas, den.canvas}) + ", got " +
                          ad::to_string(z.shape()));
  }
  nn::Graph g(store);
  return enc::unpatchify(denoiser_tokens(g, den, enc::patchify(z), t, condition.detach()), den.canvas);
}

Tensor loss_l1(const Tensor& epsilon, const Tensor& predicted) {
  if (epsilon.shape() != predicted.shape()) {
    throw ValidationError("loss_l1: " + ad::to_string(epsilon.shape()) + " vs " + ad::to_string(predicted.shape()));
  }
  return ad::mean(ad::square(ad::sub(epsilon, predicted)));
}

Tensor standard_normal(Rng& rng, const ad::Shape& shape) {
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor(shape, std::move(v));
}

Tensor reverse_step(const NoiseSchedule& schedule, const Tensor& z, std::size_t t, const Tensor& eps_hat,
                    const Tensor& noise) {
  const double abar = schedule.alpha_bars[t];
  const double abar_prev = t == 0 ? 1.0 : schedule.alpha_bars[t - 1];
  const double beta = schedule.betas[t];
  const double coef_x0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
  const double coef_z = std::sqrt(schedule.alphas[t]) * (1.0 - abar_prev) / (1.0 - abar);
  const double sigma = std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar));
  std::vector<double> out(z.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = std::clamp((z[i] - std::sqrt(1.0 - abar) * eps_hat[i]) / std::sqrt(abar), -1.0, 1.0);
    out[i] = coef_x0 * x0 + coef_z * z[i] + (t > 0 ? sigma * noise[i] : 0.0);
  }
  return Tensor(z.shape(), std::move(out));
}

Tensor ddpm_sample(const nn::ParamStore& store, const Denoiser& den, const NoiseSchedule& schedule,
                   const Tensor& condition, std::uint64_t seed) {
  Rng rng(seed);
  const ad::Shape shape{3, den.canvas, den.canvas};
  Tensor z = standard_normal(rng, shape);
  for (std::size_t step = schedule.steps; step-- > 0;) {
    const Tensor eps_hat = denoiser_forward(store, den, z, step, condition);
    const Tensor noise = step > 0 ? standard_normal(rng, shape) : Tensor::zeros(shape);
    z = reverse_step(schedule, z, step, eps_hat, noise);
  }
  std::vector<double> img(z.numel());
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::clamp((z[i] + 1.0) / 2.0, 0.0, 1.0);
  return Tensor(shape, std::move(img));
}

}  // namespace idfuse::diff
