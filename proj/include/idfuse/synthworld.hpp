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

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "idfuse/rng.hpp"
#include "idfuse/tensor.hpp"

namespace idfuse::world {

inline constexpr std::size_t kDefaultCanvas = 32;
inline constexpr int kDefaultMaskfillIterations = 200;
/// Dark tint factor used by the two-tone background patterns.
inline constexpr double kShade = 0.6;

struct Rgb {
  double r = 0.0;
  double g = 0.0;
  double b = 0.0;
  bool operator==(const Rgb&) const = default;
};

struct NamedColor {
  std::string name;
  Rgb rgb;
};

/// Saturated subject colors; disjoint from every background shade.
const std::vector<NamedColor>& subject_palette();
const std::vector<NamedColor>& background_palette();
Rgb subject_color(const std::string& name);
Rgb background_color(const std::string& name);

enum class Shape { circle, square, triangle, cross };
inline constexpr std::array kAllShapes = {Shape::circle, Shape::square, Shape::triangle, Shape::cross};
std::string shape_name(Shape s);
Shape shape_from_name(const std::string& name);
/// Class word standing for each shape in prompts (circle -> "dog", ...).
std::string class_word_for(Shape s);
Shape shape_for_class_word(const std::string& word);

enum class BackgroundKind { stripes_h, stripes_v, checker, gradient, dots, solid };
inline constexpr std::array kAllKinds = {BackgroundKind::stripes_h, BackgroundKind::stripes_v, BackgroundKind::checker,
                                         BackgroundKind::gradient,  BackgroundKind::dots,      BackgroundKind::solid};
std::string kind_name(BackgroundKind k);
BackgroundKind kind_from_name(const std::string& name);

struct SubjectIdentity {
  Shape shape = Shape::circle;
  std::string color_name;
  Rgb color;
  std::string class_word;
  bool operator==(const SubjectIdentity&) const = default;
};

/// Validates the color against the subject palette.
SubjectIdentity make_identity(Shape shape, const std::string& color_name);
/// All 32 shape/color combinations, shape-major.
std::vector<SubjectIdentity> all_identities();

struct SceneSpec {
  BackgroundKind kind = BackgroundKind::solid;
  std::string background_name;
  Rgb background;
  int x = 16;  // subject center, pixel-corner coordinates
  int y = 16;
  int radius = 6;
  std::size_t canvas = kDefaultCanvas;
  bool operator==(const SceneSpec&) const = default;
};

SceneSpec make_spec(BackgroundKind kind, const std::string& background_name, int x, int y, int radius,
                    std::size_t canvas = kDefaultCanvas);
/// Throws ValidationError unless the subject lies fully inside the canvas.
void validate_spec(const SceneSpec& spec);

struct RenderedScene {
  ad::Tensor image;  // [3, H, W] in [0, 1]
  ad::Tensor mask;   // [1, H, W] in {0, 1}
  SceneSpec spec;
  SubjectIdentity identity;
  std::uint64_t seed = 0;
};

/// Subject coverage test at pixel (row, col).
bool covers(Shape shape, const SceneSpec& spec, std::size_t row, std::size_t col);
ad::Tensor render_background(const SceneSpec& spec);
ad::Tensor render_mask(Shape shape, const SceneSpec& spec);
/// The renderer is a pure function of (identity, spec); the seed is carried
/// along so exported datasets record their provenance.
RenderedScene render_scene(const SubjectIdentity& identity, const SceneSpec& spec, std::uint64_t seed);
ad::Tensor oracle_background(const RenderedScene& scene);

/// Fills masked pixels from their unmasked surroundings: an outside-in pass
/// seeds each hole pixel with the mean of its already-known 4-neighbors, then
/// Jacobi sweeps replace every hole pixel by the mean of its in-bounds
/// 4-neighbors until the largest change drops below 1e-12 or the cap is hit.
ad::Tensor maskfill_inpaint(const ad::Tensor& image, const ad::Tensor& mask,
                            int iterations = kDefaultMaskfillIterations);

enum class Inpainter { oracle, maskfill };
std::string inpainter_name(Inpainter i);
Inpainter inpainter_from_name(const std::string& name);
ad::Tensor inpaint(const RenderedScene& scene, Inpainter which);

struct ScenePhrase {
  std::string phrase;
  BackgroundKind kind;
  std::string background_name;
};
/// One phrase per background kind.
const std::vector<ScenePhrase>& scene_phrases();
const ScenePhrase& lookup_phrase(const std::string& phrase);
const ScenePhrase& phrase_for_kind(BackgroundKind kind);

inline constexpr const char* kVStar = "V*";

/// "a photo of a V* <class>" plus an optional scene phrase.
std::vector<std::string> build_prompt(const SubjectIdentity& identity,
                                      const std::optional<std::string>& scene_phrase = std::nullopt);
/// "a photo of a <color> <class>" plus an optional scene phrase; the prompt
/// family the base denoiser is trained on.
std::vector<std::string> build_generic_prompt(const SubjectIdentity& identity,
                                              const std::optional<std::string>& scene_phrase = std::nullopt);
/// "a photo of <phrase>": the subject-free caption of a background.
std::vector<std::string> build_background_prompt(const std::string& scene_phrase);
std::string detokenize(const std::vector<std::string>& tokens);
std::vector<std::string> tokenize(const std::string& text);

/// Subject radii used by the dataset generator and the identity matcher.
std::vector<int> template_radii(std::size_t canvas);
/// Random subject placement near the canvas center.
SceneSpec sample_spec(Rng& rng, BackgroundKind kind, std::size_t canvas = kDefaultCanvas);

struct SubjectDataset {
  SubjectIdentity identity;
  std::vector<RenderedScene> scenes;
  std::vector<std::string> prompt;
  std::uint64_t seed = 0;
};

/// n scenes in n distinct background kinds, each in the kind's canonical
/// color, with randomized placement.
SubjectDataset make_dataset(const SubjectIdentity& identity, int n, std::uint64_t seed,
                            std::size_t canvas = kDefaultCanvas);

void export_dataset(const SubjectDataset& dataset, const std::filesystem::path& dir);
SubjectDataset import_dataset(const std::filesystem::path& dir);

}  // namespace idfuse::world
