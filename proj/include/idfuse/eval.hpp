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
#include <string>
#include <vector>

#include "idfuse/synthworld.hpp"
#include "idfuse/trainer.hpp"

namespace idfuse::eval {

/// Pixels within this RGB distance of a color count as that color.
inline constexpr double kColorTolerance = 0.3;
/// Sharpens template correlation so that the best wrong-shape match of the
/// right color falls below 0.5.
inline constexpr double kIdentityExponent = 8.0;

/// Soft membership map of `color`: max(0, 1 - |rgb - color| / tolerance).
std::vector<double> color_map(const ad::Tensor& image, const world::Rgb& color);

/// Best cosine between the subject-color map and any canonical silhouette
/// (all positions, every template radius), raised to kIdentityExponent.
double identity_score(const ad::Tensor& image, const world::SubjectIdentity& identity,
                      double exponent = kIdentityExponent);

/// Background statistics over pixels that match no subject color: mean RGB,
/// mean absolute horizontal and vertical neighbor differences, and top-half
/// minus bottom-half brightness.
std::vector<double> background_signature(const ad::Tensor& image);

struct BackgroundClass {
  world::BackgroundKind kind;
  std::string background_name;
  double distance = 0.0;
};

/// Nearest of the 36 kind/color reference signatures.
BackgroundClass classify_background(const ad::Tensor& image);

/// 1 when the nearest reference is the target, else 0.5 * d_nearest / d_target.
double text_align_score(const ad::Tensor& image, world::BackgroundKind kind, const std::string& background_name);
/// Target in the kind's canonical color.
double text_align_score(const ad::Tensor& image, world::BackgroundKind kind);

struct PromptRow {
  std::string phrase;
  std::string prompt;
  std::size_t samples = 0;
  double t_score = 0.0;
  double i_score = 0.0;
};

struct MetricReport {
  double t_score = 0.0;
  double i_score = 0.0;
  std::size_t n_generated = 0;
  std::vector<PromptRow> rows;

  double combined() const { return 0.5 * (t_score + i_score); }
  std::string to_csv() const;
};

/// Sampling seed of one generated image.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t prompt_index, std::size_t sample_index);

/// Samples `samples_per_prompt` images per phrase from "a photo of a V*
/// <class> <phrase>" with text-only conditioning and scores them. When
/// `image_dir` is non-empty the samples are written there as PPM files.
MetricReport run_eval(const train::Model& model, const std::vector<std::string>& phrases,
                      std::size_t samples_per_prompt, std::uint64_t seed,
                      const std::filesystem::path& image_dir = {});

/// Named override sets for the ablation grid.
io::KeyValues ablation_preset(const std::string& label);
std::vector<std::string> default_grid();

struct AblationCell {
  std::string label;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double t_score = 0.0;
  double i_score = 0.0;
  double final_loss = 0.0;
  double cos_fi_fs = 0.0;
  double cos_fi_fbg = 0.0;

  double combined() const { return 0.5 * (t_score + i_score); }
};

struct AblationTable {
  std::vector<AblationCell> cells;
  std::string to_csv() const;
  static AblationTable from_csv(const std::string& text);
};

struct OrderingCheck {
  std::string better;
  std::string worse;
  std::size_t wins = 0;
  std::size_t seeds = 0;
  bool pass = false;
};

/// Pairwise orderings on the combined score, counted per seed; a pair passes
/// when `better` >= `worse` in a strict majority of the seeds both completed.
std::vector<OrderingCheck> summarize(const AblationTable& table);
std::string summary_text(const std::vector<OrderingCheck>& checks);

/// Trains and evaluates every (label, seed) cell. Failing cells are recorded
/// and the grid continues.
AblationTable run_ablation(const train::TrainConfig& base, const std::vector<std::string>& labels,
                           const std::vector<std::uint64_t>& seeds, bool verbose = false);

}  // namespace idfuse::eval
