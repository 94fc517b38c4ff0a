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
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "idfuse/adamw.hpp"
#include "idfuse/diffusion.hpp"
#include "idfuse/encoders.hpp"
#include "idfuse/ffm.hpp"
#include "idfuse/iedm.hpp"
#include "idfuse/io.hpp"
#include "idfuse/synthworld.hpp"

namespace idfuse::train {

/// Every knob of a run. Serialized as key=value text; keys match the field
/// names.
struct TrainConfig {
  // objective
  double lambda1 = 1.0;
  double lambda2 = 1e-3;
  double lambda3 = 1e-3;
  double lambda4 = 1e-3;
  bool enable_iedm = true;
  bool enable_ffm = true;
  bool enable_l2 = true;
  bool enable_l3 = true;
  bool enable_l4 = true;
  ffm::CombineMode combine_mode = ffm::CombineMode::implicit;
  iedm::CosineMode cosine_mode = iedm::CosineMode::raw;
  iedm::MaskPosition mask_position = iedm::MaskPosition::pre;
  world::Inpainter inpainter = world::Inpainter::oracle;
  // optimization
  double lr = 5e-4;
  double v_star_lr = 1e-3;
  double weight_decay = 1e-2;
  std::size_t batch_size = 8;
  std::size_t epochs = 250;
  std::uint64_t seed = 0;
  // architecture
  std::size_t dim = 64;
  std::size_t canvas = 32;
  std::size_t lora_rank = 4;
  std::size_t experts = 2;
  bool ffm_gating = true;
  std::size_t heads = 2;
  std::size_t unet_hidden = 128;
  std::size_t unet_blocks = 2;
  std::size_t timesteps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.2;
  std::uint64_t encoder_seed = 1234;
  std::uint64_t base_seed = 4321;
  std::string base_checkpoint;
  /// Also trains the frozen denoiser weights (overfit diagnostics only).
  bool train_unet_base = false;
  // data
  std::string subject_shape = "circle";
  std::string subject_color = "red";
  std::size_t dataset_size = 5;
  std::uint64_t dataset_seed = 7;
  // base pretraining
  std::size_t pretrain_steps = 6000;
  double pretrain_lr = 5e-3;
  /// Min-SNR loss weighting cap for pretraining; 0 disables it.
  double pretrain_snr_gamma = 5.0;
  // evaluation
  std::size_t samples_per_prompt = 4;
  std::string eval_phrases = "all";

  io::KeyValues to_kv() const;
  /// Starts from defaults and applies `kv`; unknown keys are rejected.
  static TrainConfig from_kv(const io::KeyValues& kv);
  static TrainConfig load(const std::filesystem::path& path);
  void apply(const io::KeyValues& kv);
  void validate() const;

  world::SubjectIdentity identity() const;
  diff::DenoiserShape denoiser_shape() const;
  std::vector<std::string> phrases() const;
};

/// Miniature configuration used by the end-to-end gradient check.
TrainConfig miniature_config();

struct LossBreakdown {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
  double l4 = 0.0;
  double total = 0.0;
};

/// All weights, the optimizer and the run's random stream.
struct Model {
  TrainConfig config;
  nn::ParamStore store;
  enc::TextEncoder text;
  enc::ImageEncoder image;
  std::optional<iedm::Adapter> adapter;
  std::optional<ffm::Ffm> fusion;
  diff::Denoiser denoiser;
  diff::NoiseSchedule schedule;
  nn::AdamW optimizer;
  Rng rng;
  std::size_t epoch = 0;
};

/// Registers every module, loads the base checkpoint when configured,
/// initializes V* from the subject's class word and marks the trainable set.
Model build_model(const TrainConfig& config);
/// Names the trainer updates: the fine-tuning set, plus the denoiser base
/// weights when train_unet_base is set.
bool is_trained(const TrainConfig& config, const std::string& name);

/// Per-scene constants of the frozen branches.
struct TrainData {
  world::SubjectDataset dataset;
  std::vector<ad::Tensor> f_raw;
  std::vector<ad::Tensor> f_bg;
  std::vector<ad::Tensor> x_tokens;  // clean image in [-1, 1], patch layout
};

TrainData prepare_data(const Model& model, world::SubjectDataset dataset);
world::SubjectDataset make_config_dataset(const TrainConfig& config);

/// Pre-drawn batch: which scene each item uses, its timestep and its noise
/// in patch layout.
struct NoiseDraw {
  std::vector<std::size_t> items;
  std::vector<std::size_t> steps;
  std::vector<ad::Tensor> noise;
};

NoiseDraw draw_noise(Rng& rng, const Model& model, std::size_t scenes);

struct LossTerms {
  ad::Tensor l1;
  std::optional<ad::Tensor> l2;
  std::optional<ad::Tensor> l3;
  std::optional<ad::Tensor> l4;
  ad::Tensor total;
  LossBreakdown breakdown;
};

/// Throws ValidationError on inconsistent toggles.
void check_toggles(const TrainConfig& config);

/// The weighted objective for one drawn batch. Items are reduced in a
/// canonical order, so permuting the draw leaves every value unchanged.
LossTerms total_loss(nn::Graph& g, const Model& model, const TrainData& data, const NoiseDraw& draw);

/// Forward, backward and one AdamW update. Throws std::runtime_error naming
/// the first non-finite node when the loss is not finite.
LossBreakdown train_step(Model& model, const TrainData& data);

struct EpochRecord {
  std::size_t epoch = 0;
  LossBreakdown loss;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::string to_csv() const;
};

/// Runs epochs until model.epoch reaches config.epochs. One epoch is one
/// batch drawn with replacement from the dataset.
TrainReport train_run(Model& model, const TrainData& data, std::size_t stop_at = SIZE_MAX);

void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);
/// Loads tensors into an existing model, rejecting name or shape mismatches.
void load_weights(Model& model, const std::filesystem::path& dir);

/// Trains the frozen base denoiser on generic scenes captioned
/// "a photo of a <color> <class> <phrase>" and saves it. Only unet.* moves.
struct PretrainReport {
  std::vector<double> losses;
};
PretrainReport pretrain_base(const TrainConfig& config, const std::filesystem::path& out_dir, bool verbose = false);

/// Snapshot of every tensor for trainable-set audits.
std::map<std::string, ad::Tensor> snapshot(const nn::ParamStore& store);

/// Mean cosines between adapter outputs and f_s, and between adapter outputs
/// and f_bg, over the dataset's scenes.
struct DecouplingStats {
  double cos_fi_fs = 0.0;
  double cos_fi_fbg = 0.0;
};
DecouplingStats decoupling_stats(const Model& model, const TrainData& data);

}  // namespace idfuse::train
