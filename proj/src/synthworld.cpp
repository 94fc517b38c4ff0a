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

#include "idfuse/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "idfuse/error.hpp"
#include "idfuse/io.hpp"

namespace idfuse::world {

using ad::Tensor;

const std::vector<NamedColor>& subject_palette() {
  static const std::vector<NamedColor> palette = {
      {"red", {0.90, 0.10, 0.10}},    {"green", {0.10, 0.80, 0.20}},  {"blue", {0.15, 0.30, 0.95}},
      {"yellow", {0.95, 0.90, 0.10}}, {"orange", {1.00, 0.55, 0.00}}, {"purple", {0.55, 0.15, 0.80}},
      {"cyan", {0.10, 0.85, 0.90}},   {"magenta", {0.95, 0.20, 0.75}},
  };
  return palette;
}

const std::vector<NamedColor>& background_palette() {
  static const std::vector<NamedColor> palette = {
      {"white", {0.95, 0.95, 0.95}},     {"gray", {0.50, 0.50, 0.50}}, {"beige", {0.85, 0.78, 0.60}},
      {"darkgreen", {0.10, 0.40, 0.15}}, {"navy", {0.10, 0.12, 0.40}}, {"brown", {0.45, 0.30, 0.15}},
  };
  return palette;
}

namespace {

Rgb find_color(const std::vector<NamedColor>& palette, const std::string& name, const char* what) {
  for (const auto& c : palette) {
    if (c.name == name) return c.rgb;
  }
  throw ValidationError(std::string("unknown ") + what + " color '" + name + "'");
}

}  // namespace

Rgb subject_color(const std::string& name) { return find_color(subject_palette(), name, "subject"); }
Rgb background_color(const std::string& name) { return find_color(background_palette(), name, "background"); }

std::string shape_name(Shape s) {
  switch (s) {
    case Shape::circle: return "circle";
    case Shape::square: return "square";
    case Shape::triangle: return "triangle";
    case Shape::cross: return "cross";
  }
  return "?";
}

Shape shape_from_name(const std::string& name) {
  for (Shape s : kAllShapes) {
    if (shape_name(s) == name) return s;
  }
  throw ValidationError("unknown shape '" + name + "'");
}

std::string class_word_for(Shape s) {
  switch (s) {
    case Shape::circle: return "dog";
    case Shape::square: return "cat";
    case Shape::triangle: return "toy";
    case Shape::cross: return "vase";
  }
  return "?";
}

Shape shape_for_class_word(const std::string& word) {
  for (Shape s : kAllShapes) {
    if (class_word_for(s) == word) return s;
  }
  throw ValidationError("unknown class word '" + word + "'");
}

std::string kind_name(BackgroundKind k) {
  switch (k) {
    case BackgroundKind::stripes_h: return "stripes-h";
    case BackgroundKind::stripes_v: return "stripes-v";
    case BackgroundKind::checker: return "checker";
    case BackgroundKind::gradient: return "gradient";
    case BackgroundKind::dots: return "dots";
    case BackgroundKind::solid: return "solid";
  }
  return "?";
}

BackgroundKind kind_from_name(const std::string& name) {
  for (BackgroundKind k : kAllKinds) {
    if (kind_name(k) == name) return k;
  }
  throw ValidationError("unknown background kind '" + name + "'");
}

SubjectIdentity make_identity(Shape shape, const std::string& color_name) {
  return SubjectIdentity{shape, color_name, subject_color(color_name), class_word_for(shape)};
}

std::vector<SubjectIdentity> all_identities() {
  std::vector<SubjectIdentity> out;
  for (Shape s : kAllShapes) {
    for (const auto& c : subject_palette()) out.push_back(make_identity(s, c.name));
  }
  return out;
}

SceneSpec make_spec(BackgroundKind kind, const std::string& background_name, int x, int y, int radius,
                    std::size_t canvas) {
  SceneSpec spec{kind, background_name, background_color(background_name), x, y, radius, canvas};
  validate_spec(spec);
  return spec;
}

void validate_spec(const SceneSpec& spec) {
  const int c = static_cast<int>(spec.canvas);
  if (spec.canvas < 4) throw ValidationError("canvas must be at least 4 pixels");
  if (spec.radius < 1) throw ValidationError("subject radius must be positive");
  if (spec.x - spec.radius < 0 || spec.y - spec.radius < 0 || spec.x + spec.radius > c || spec.y + spec.radius > c) {
    std::ostringstream msg;
    msg << "subject out of bounds: center (" << spec.x << ", " << spec.y << ") radius " << spec.radius
        << " on a " << c << "x" << c << " canvas";
    throw ValidationError(msg.str());
  }
}

bool covers(Shape shape, const SceneSpec& spec, std::size_t row, std::size_t col) {
  const double u = static_cast<double>(col) + 0.5 - spec.x;
  const double v = static_cast<double>(row) + 0.5 - spec.y;
  const double r = spec.radius;
  switch (shape) {
    case Shape::circle:
      return u * u + v * v <= r * r;
    case Shape::square:
      return std::abs(u) <= r && std::abs(v) <= r;
    case Shape::triangle: {
      if (v < -r || v > r) return false;
      const double half_width = r * (v + r) / (2.0 * r);
      return std::abs(u) <= half_width;
    }
    case Shape::cross: {
      const double arm = r / 3.0;
      return (std::abs(u) <= r && std::abs(v) <= arm) || (std::abs(v) <= r && std::abs(u) <= arm);
    }
  }
  return false;
}

namespace {

/// Fraction of the base color at a background pixel: 1 or kShade for the
/// two-tone patterns, a vertical ramp for the gradient.
double pattern(BackgroundKind kind, std::size_t canvas, std::size_t i, std::size_t j) {
  const std::size_t band = std::max<std::size_t>(1, canvas / 16);
  switch (kind) {
    case BackgroundKind::solid:
      return 1.0;
    case BackgroundKind::stripes_h:
      return (i / band) % 2 == 0 ? 1.0 : kShade;
    case BackgroundKind::stripes_v:
      return (j / band) % 2 == 0 ? 1.0 : kShade;
    case BackgroundKind::checker:
      return (i / band + j / band) % 2 == 0 ? 1.0 : kShade;
    case BackgroundKind::gradient:
      return 1.0 - (1.0 - kShade) * static_cast<double>(i) / static_cast<double>(canvas - 1);
    case BackgroundKind::dots:
      return (i % (2 * band) < band && j % (2 * band) < band) ? 1.0 : kShade;
  }
  return 1.0;
}

}  // namespace

Tensor render_background(const SceneSpec& spec) {
  const std::size_t n = spec.canvas;
  std::vector<double> img(3 * n * n);
  const double rgb[3] = {spec.background.r, spec.background.g, spec.background.b};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double f = pattern(spec.kind, n, i, j);
      for (std::size_t c = 0; c < 3; ++c) img[(c * n + i) * n + j] = rgb[c] * f;
    }
  }
  return Tensor({3, n, n}, std::move(img));
}

Tensor render_mask(Shape shape, const SceneSpec& spec) {
  validate_spec(spec);
  const std::size_t n = spec.canvas;
  std::vector<double> m(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m[i * n + j] = covers(shape, spec, i, j) ? 1.0 : 0.0;
  }
  return Tensor({1, n, n}, std::move(m));
}

RenderedScene render_scene(const SubjectIdentity& identity, const SceneSpec& spec, std::uint64_t seed) {
  const Tensor mask = render_mask(identity.shape, spec);
  const Tensor background = render_background(spec);
  const std::size_t n = spec.canvas;
  const double rgb[3] = {identity.color.r, identity.color.g, identity.color.b};
  std::vector<double> img(3 * n * n);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < n * n; ++p) {
      const double m = mask[p];
      img[c * n * n + p] = m * rgb[c] + (1.0 - m) * background[c * n * n + p];
    }
  }
  return RenderedScene{Tensor({3, n, n}, std::move(img)), mask, spec, identity, seed};
}

Tensor oracle_background(const RenderedScene& scene) { return render_background(scene.spec); }

Tensor maskfill_inpaint(const Tensor& image, const Tensor& mask, int iterations) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ValidationError("maskfill_inpaint: expected image [3, H, W], got " + ad::to_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  if (mask.shape() != ad::Shape{1, h, w}) {
    throw ValidationError("maskfill_inpaint: mask " + ad::to_string(mask.shape()) + " does not match image " +
                          ad::to_string(image.shape()));
  }
  if (iterations < 1) throw ValidationError("maskfill_inpaint: iterations must be >= 1");
  std::vector<int> hole(plane);
  std::size_t holes = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    if (mask[p] != 0.0 && mask[p] != 1.0) throw ValidationError("maskfill_inpaint: mask must be binary");
    hole[p] = mask[p] == 1.0;
    holes += hole[p];
  }
  if (holes == 0) return image;
  if (holes == plane) throw ValidationError("maskfill_inpaint: mask covers the whole image, nothing to fill from");

  std::vector<double> out = image.to_vector();
  const int di[4] = {-1, 1, 0, 0};
  const int dj[4] = {0, 0, -1, 1};
  auto neighbors = [&](std::size_t p, auto&& visit) {
    const int i = static_cast<int>(p / w), j = static_cast<int>(p % w);
    for (int k = 0; k < 4; ++k) {
      const int ni = i + di[k], nj = j + dj[k];
      if (ni >= 0 && nj >= 0 && ni < static_cast<int>(h) && nj < static_cast<int>(w)) {
        visit(static_cast<std::size_t>(ni) * w + static_cast<std::size_t>(nj));
      }
    }
  };

  // Outside-in seeding: each ring takes the mean of its known neighbors.
  std::vector<int> known(plane);
  for (std::size_t p = 0; p < plane; ++p) known[p] = !hole[p];
  std::size_t remaining = holes;
  while (remaining > 0) {
    std::vector<std::size_t> ring;
    for (std::size_t p = 0; p < plane; ++p) {
      if (known[p]) continue;
      bool touches = false;
      neighbors(p, [&](std::size_t q) { touches = touches || known[q]; });
      if (touches) ring.push_back(p);
    }
    for (std::size_t p : ring) {
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        int count = 0;
        neighbors(p, [&](std::size_t q) {
          if (known[q]) {
            acc += out[c * plane + q];
            ++count;
          }
        });
        out[c * plane + p] = acc / count;
      }
    }
    for (std::size_t p : ring) known[p] = 1;
    remaining -= ring.size();
  }

  std::vector<double> next = out;
  for (int it = 0; it < iterations; ++it) {
    double delta = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      if (!hole[p]) continue;
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        int count = 0;
        neighbors(p, [&](std::size_t q) {
          acc += out[c * plane + q];
          ++count;
        });
        const double v = acc / count;
        delta = std::max(delta, std::abs(v - out[c * plane + p]));
        next[c * plane + p] = v;
      }
    }
    out.swap(next);
    if (delta < 1e-12) break;
  }
  return Tensor(image.shape(), std::move(out));
}

std::string inpainter_name(Inpainter i) { return i == Inpainter::oracle ? "oracle" : "maskfill"; }

Inpainter inpainter_from_name(const std::string& name) {
  if (name == "oracle") return Inpainter::oracle;
  if (name == "maskfill") return Inpainter::maskfill;
  throw ValidationError("unknown inpainter '" + name + "'");
}

Tensor inpaint(const RenderedScene& scene, Inpainter which) {
  return which == Inpainter::oracle ? oracle_background(scene) : maskfill_inpaint(scene.image, scene.mask);
}

const std::vector<ScenePhrase>& scene_phrases() {
  static const std::vector<ScenePhrase> phrases = {
      {"in the snow", BackgroundKind::solid, "white"},
      {"in the jungle", BackgroundKind::stripes_v, "darkgreen"},
      {"on a cobblestone street", BackgroundKind::checker, "brown"},
      {"on the beach", BackgroundKind::gradient, "beige"},
      {"in the city", BackgroundKind::stripes_h, "gray"},
      {"at night", BackgroundKind::dots, "navy"},
  };
  return phrases;
}

const ScenePhrase& lookup_phrase(const std::string& phrase) {
  for (const auto& p : scene_phrases()) {
    if (p.phrase == phrase) return p;
  }
  throw ValidationError("unknown scene phrase '" + phrase + "'");
}

const ScenePhrase& phrase_for_kind(BackgroundKind kind) {
  for (const auto& p : scene_phrases()) {
    if (p.kind == kind) return p;
  }
  throw ValidationError("no scene phrase for kind " + kind_name(kind));
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::istringstream in(text);
  for (std::string t; in >> t;) tokens.push_back(t);
  return tokens;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) out += (out.empty() ? "" : " ") + t;
  return out;
}

namespace {

std::vector<std::string> with_phrase(std::vector<std::string> tokens, const std::optional<std::string>& phrase) {
  if (phrase) {
    (void)lookup_phrase(*phrase);
    for (auto& t : tokenize(*phrase)) tokens.push_back(std::move(t));
  }
  return tokens;
}

}  // namespace

std::vector<std::string> build_prompt(const SubjectIdentity& identity, const std::optional<std::string>& scene_phrase) {
  return with_phrase({"a", "photo", "of", "a", kVStar, identity.class_word}, scene_phrase);
}

std::vector<std::string> build_generic_prompt(const SubjectIdentity& identity,
                                              const std::optional<std::string>& scene_phrase) {
  return with_phrase({"a", "photo", "of", "a", identity.color_name, identity.class_word}, scene_phrase);
}

std::vector<std::string> build_background_prompt(const std::string& scene_phrase) {
  return with_phrase({"a", "photo", "of"}, scene_phrase);
}

std::vector<int> template_radii(std::size_t canvas) {
  std::set<int> radii;
  for (int r : {6, 7, 8}) {
    radii.insert(std::max(1, static_cast<int>(std::lround(r * static_cast<double>(canvas) / kDefaultCanvas))));
  }
  return {radii.begin(), radii.end()};
}

SceneSpec sample_spec(Rng& rng, BackgroundKind kind, std::size_t canvas) {
  const auto radii = template_radii(canvas);
  const int radius = radii[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(radii.size()) - 1))];
  const int c = static_cast<int>(canvas);
  const int jitter = std::max(0, c / 16);
  auto place = [&] { return std::clamp(c / 2 + rng.uniform_int(-jitter, jitter), radius, c - radius); };
  const int x = place();
  const int y = place();
  const auto& phrase = phrase_for_kind(kind);
  return make_spec(kind, phrase.background_name, x, y, radius, canvas);
}

SubjectDataset make_dataset(const SubjectIdentity& identity, int n, std::uint64_t seed, std::size_t canvas) {
  if (n < 4 || n > 6) throw ValidationError("dataset size must be in [4, 6], got " + std::to_string(n));
  Rng rng(seed);
  std::vector<BackgroundKind> kinds(kAllKinds.begin(), kAllKinds.end());
  for (std::size_t i = kinds.size() - 1; i > 0; --i) {
    std::swap(kinds[i], kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
  }
  SubjectDataset ds{identity, {}, build_prompt(identity), seed};
  for (int k = 0; k < n; ++k) {
    const SceneSpec spec = sample_spec(rng, kinds[static_cast<std::size_t>(k)], canvas);
    ds.scenes.push_back(render_scene(identity, spec, mix_seed(seed, static_cast<std::uint64_t>(k))));
  }
  return ds;
}

void export_dataset(const SubjectDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::KeyValues kv;
  kv.set("identity.shape", shape_name(dataset.identity.shape));
  kv.set("identity.color", dataset.identity.color_name);
  kv.set("prompt", detokenize(dataset.prompt));
  kv.set("seed", std::to_string(dataset.seed));
  kv.set("scenes", std::to_string(dataset.scenes.size()));
  for (std::size_t k = 0; k < dataset.scenes.size(); ++k) {
    const auto& s = dataset.scenes[k];
    const std::string p = "scene" + std::to_string(k) + ".";
    kv.set(p + "kind", kind_name(s.spec.kind));
    kv.set(p + "background", s.spec.background_name);
    kv.set(p + "x", std::to_string(s.spec.x));
    kv.set(p + "y", std::to_string(s.spec.y));
    kv.set(p + "radius", std::to_string(s.spec.radius));
    kv.set(p + "canvas", std::to_string(s.spec.canvas));
    kv.set(p + "seed", std::to_string(s.seed));
    kv.set(p + "image", "scene" + std::to_string(k) + "_image.bin");
    kv.set(p + "mask", "scene" + std::to_string(k) + "_mask.bin");
    io::write_tensor(dir / kv.get(p + "image"), s.image);
    io::write_tensor(dir / kv.get(p + "mask"), s.mask);
  }
  kv.save(dir / "manifest.txt");
}

SubjectDataset import_dataset(const std::filesystem::path& dir) {
  const auto kv = io::KeyValues::load(dir / "manifest.txt");
  SubjectDataset ds;
  ds.identity = make_identity(shape_from_name(kv.get("identity.shape")), kv.get("identity.color"));
  ds.prompt = tokenize(kv.get("prompt"));
  ds.seed = static_cast<std::uint64_t>(std::stoull(kv.get("seed")));
  const long long n = kv.get_int("scenes");
  if (n < 1) throw ValidationError("dataset manifest lists no scenes");
  for (long long k = 0; k < n; ++k) {
    const std::string p = "scene" + std::to_string(k) + ".";
    const SceneSpec spec = make_spec(kind_from_name(kv.get(p + "kind")), kv.get(p + "background"),
                                     static_cast<int>(kv.get_int(p + "x")), static_cast<int>(kv.get_int(p + "y")),
                                     static_cast<int>(kv.get_int(p + "radius")),
                                     static_cast<std::size_t>(kv.get_int(p + "canvas")));
    const std::size_t c = spec.canvas;
    RenderedScene scene{io::read_tensor(dir / kv.get(p + "image"), {3, c, c}, p + "image"),
                        io::read_tensor(dir / kv.get(p + "mask"), {1, c, c}, p + "mask"), spec, ds.identity,
                        static_cast<std::uint64_t>(std::stoull(kv.get(p + "seed")))};
    ds.scenes.push_back(std::move(scene));
  }
  return ds;
}

}  // namespace idfuse::world
