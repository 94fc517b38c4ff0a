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

#include "idfuse/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "idfuse/error.hpp"

namespace idfuse::eval {

using ad::Tensor;

namespace {

std::size_t canvas_of(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2) || image.dim(1) == 0) {
    throw ValidationError("expected a square [3, H, W] image, got " + ad::to_string(image.shape()));
  }
  return image.dim(1);
}

double distance(const Tensor& image, std::size_t pixel, std::size_t plane, const world::Rgb& c) {
  const double dr = image[pixel] - c.r;
  const double dg = image[plane + pixel] - c.g;
  const double db = image[2 * plane + pixel] - c.b;
  return std::sqrt(dr * dr + dg * dg + db * db);
}

}  // namespace

std::vector<double> color_map(const Tensor& image, const world::Rgb& color) {
  const std::size_t n = canvas_of(image);
  const std::size_t plane = n * n;
  std::vector<double> s(plane);
  for (std::size_t p = 0; p < plane; ++p) s[p] = std::max(0.0, 1.0 - distance(image, p, plane, color) / kColorTolerance);
  return s;
}

double identity_score(const Tensor& image, const world::SubjectIdentity& identity, double exponent) {
  const std::size_t n = canvas_of(image);
  const auto s = color_map(image, identity.color);
  double norm_s = 0.0;
  for (double v : s) norm_s += v * v;
  norm_s = std::sqrt(norm_s);
  if (norm_s == 0.0) return 0.0;

  double best = 0.0;
  const int c = static_cast<int>(n);
  for (int r : world::template_radii(n)) {
    for (int y = r; y <= c - r; ++y) {
      for (int x = r; x <= c - r; ++x) {
        const auto spec = world::make_spec(world::BackgroundKind::solid, "white", x, y, r, n);
        double dot = 0.0;
        double area = 0.0;
        for (int row = y - r; row < y + r; ++row) {
          for (int col = x - r; col < x + r; ++col) {
            const auto rr = static_cast<std::size_t>(row);
            const auto cc = static_cast<std::size_t>(col);
            if (world::covers(identity.shape, spec, rr, cc)) {
              dot += s[rr * n + cc];
              area += 1.0;
            }
          }
        }
        if (area > 0.0) best = std::max(best, dot / (norm_s * std::sqrt(area)));
      }
    }
  }
  return std::pow(std::clamp(best, 0.0, 1.0), exponent);
}

std::vector<double> background_signature(const Tensor& image) {
  const std::size_t n = canvas_of(image);
  const std::size_t plane = n * n;
  std::vector<bool> keep(plane, true);
  for (std::size_t p = 0; p < plane; ++p) {
    for (const auto& c : world::subject_palette()) {
      if (distance(image, p, plane, c.rgb) < kColorTolerance) {
        keep[p] = false;
        break;
      }
    }
  }
  auto brightness = [&](std::size_t p) { return (image[p] + image[plane + p] + image[2 * plane + p]) / 3.0; };

  std::vector<double> mean(3, 0.0);
  double count = 0.0;
  double top = 0.0, top_n = 0.0, bottom = 0.0, bottom_n = 0.0;
  double dh = 0.0, dh_n = 0.0, dv = 0.0, dv_n = 0.0;
  for (std::size_t row = 0; row < n; ++row) {
    for (std::size_t col = 0; col < n; ++col) {
      const std::size_t p = row * n + col;
      if (!keep[p]) continue;
      for (std::size_t ch = 0; ch < 3; ++ch) mean[ch] += image[ch * plane + p];
      count += 1.0;
      (row < n / 2 ? top : bottom) += brightness(p);
      (row < n / 2 ? top_n : bottom_n) += 1.0;
      if (col + 1 < n && keep[p + 1]) {
        dh += std::abs(brightness(p + 1) - brightness(p));
        dh_n += 1.0;
      }
      if (row + 1 < n && keep[p + n]) {
        dv += std::abs(brightness(p + n) - brightness(p));
        dv_n += 1.0;
      }
    }
  }
  auto ratio = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
  return {ratio(mean[0], count), ratio(mean[1], count), ratio(mean[2], count), ratio(dh, dh_n), ratio(dv, dv_n),
          ratio(top, top_n) - ratio(bottom, bottom_n)};
}

namespace {

struct Reference {
  world::BackgroundKind kind;
  std::string name;
  std::vector<double> signature;
};

const std::vector<Reference>& references(std::size_t canvas) {
  static std::map<std::size_t, std::vector<Reference>> cache;
  auto it = cache.find(canvas);
  if (it != cache.end()) return it->second;
  std::vector<Reference> refs;
  const int c = static_cast<int>(canvas);
  for (auto kind : world::kAllKinds) {
    for (const auto& color : world::background_palette()) {
      const auto spec = world::make_spec(kind, color.name, c / 2, c / 2, world::template_radii(canvas).front(), canvas);
      refs.push_back({kind, color.name, background_signature(world::render_background(spec))});
    }
  }
  return cache.emplace(canvas, std::move(refs)).first->second;
}

double signature_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d);
}

}  // namespace

BackgroundClass classify_background(const Tensor& image) {
  const auto sig = background_signature(image);
  const Reference* best = nullptr;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& ref : references(canvas_of(image))) {
    const double d = signature_distance(sig, ref.signature);
    if (d < best_d) {
      best_d = d;
      best = &ref;
    }
  }
  return {best->kind, best->name, best_d};
}

double text_align_score(const Tensor& image, world::BackgroundKind kind, const std::string& background_name) {
  (void)world::background_color(background_name);
  const auto sig = background_signature(image);
  double best = std::numeric_limits<double>::infinity();
  double target = std::numeric_limits<double>::infinity();
  bool target_wins = false;
  for (const auto& ref : references(canvas_of(image))) {
    const double d = signature_distance(sig, ref.signature);
    const bool is_target = ref.kind == kind && ref.name == background_name;
    if (is_target) target = d;
    if (d < best) {
      best = d;
      target_wins = is_target;
    } else if (d == best && is_target) {
      target_wins = true;
    }
  }
  if (target_wins) return 1.0;
  return target > 0.0 ? 0.5 * best / target : 0.0;
}

double text_align_score(const Tensor& image, world::BackgroundKind kind) {
  return text_align_score(image, kind, world::phrase_for_kind(kind).background_name);
}

std::string MetricReport::to_csv() const {
  std::string out = "phrase,prompt,samples,t_score,i_score\n";
  for (const auto& r : rows) {
    out += r.phrase + "," + r.prompt + "," + std::to_string(r.samples) + "," + io::format_double(r.t_score) + "," +
           io::format_double(r.i_score) + "\n";
  }
  out += "all,," + std::to_string(n_generated) + "," + io::format_double(t_score) + "," + io::format_double(i_score) +
         "\n";
  return out;
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t prompt_index, std::size_t sample_index) {
  return mix_seed(mix_seed(seed, hash_name("sample")), prompt_index * 1000003ULL + sample_index);
}

MetricReport run_eval(const train::Model& model, const std::vector<std::string>& phrases,
                      std::size_t samples_per_prompt, std::uint64_t seed, const std::filesystem::path& image_dir) {
  if (phrases.empty()) throw ValidationError("evaluation needs at least one prompt");
  if (samples_per_prompt == 0) throw ValidationError("samples_per_prompt must be >= 1");
  if (!image_dir.empty()) std::filesystem::create_directories(image_dir);
  const auto identity = model.config.identity();
  MetricReport report;
  for (std::size_t p = 0; p < phrases.size(); ++p) {
    const auto& phrase = world::lookup_phrase(phrases[p]);
    const auto prompt = world::build_prompt(identity, phrase.phrase);
    nn::Graph g(model.store);
    const Tensor condition = enc::encode_text(g, model.text, prompt);
    PromptRow row{phrase.phrase, world::detokenize(prompt), samples_per_prompt, 0.0, 0.0};
    for (std::size_t s = 0; s < samples_per_prompt; ++s) {
      const Tensor image = diff::ddpm_sample(model.store, model.denoiser, model.schedule, condition, sample_seed(seed, p, s));
      row.t_score += text_align_score(image, phrase.kind);
      row.i_score += identity_score(image, identity);
      if (!image_dir.empty()) {
        io::write_ppm(image_dir / ("prompt" + std::to_string(p) + "_sample" + std::to_string(s) + ".ppm"), image);
      }
    }
    row.t_score /= static_cast<double>(samples_per_prompt);
    row.i_score /= static_cast<double>(samples_per_prompt);
    report.t_score += row.t_score;
    report.i_score += row.i_score;
    report.n_generated += samples_per_prompt;
    report.rows.push_back(row);
  }
  report.t_score /= static_cast<double>(phrases.size());
  report.i_score /= static_cast<double>(phrases.size());
  return report;
}

io::KeyValues ablation_preset(const std::string& label) {
  io::KeyValues kv;
  auto off = [&](std::initializer_list<const char*> keys) {
    for (const char* k : keys) kv.set(k, "false");
  };
  if (label == "full") {
  } else if (label == "no_iedm") {
    off({"enable_iedm", "enable_l2", "enable_l3", "enable_l4"});
  } else if (label == "no_ffm") {
    off({"enable_ffm"});
  } else if (label == "no_both") {
    off({"enable_iedm", "enable_ffm", "enable_l2", "enable_l3", "enable_l4"});
  } else if (label == "no_l2") {
    off({"enable_l2"});
  } else if (label == "no_l3") {
    off({"enable_l3"});
  } else if (label == "no_l4") {
    off({"enable_l4"});
  } else if (label == "no_l2l3l4") {
    off({"enable_l2", "enable_l3", "enable_l4"});
  } else if (label == "alt_lambda1") {
    kv.set("lambda1", "0.001");
  } else {
    throw ValidationError("unknown ablation label '" + label + "'");
  }
  return kv;
}

std::vector<std::string> default_grid() {
  return {"full", "no_iedm", "no_ffm", "no_both", "no_l2", "no_l3", "no_l4", "no_l2l3l4"};
}

namespace {

// The error message is the last column and may contain commas; only line
// breaks need replacing.
std::string clean(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

// Splits into at most `fields` columns; the last keeps any further commas.
std::vector<std::string> split(const std::string& line, std::size_t fields) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (out.size() + 1 < fields) {
    const auto comma = line.find(',', start);
    if (comma == std::string::npos) break;
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  out.push_back(line.substr(start));
  return out;
}

constexpr const char* kTableHeader = "label,seed,status,t_score,i_score,combined,final_loss,cos_fi_fs,cos_fi_fbg,error";

}  // namespace

std::string AblationTable::to_csv() const {
  std::string out = std::string(kTableHeader) + "\n";
  for (const auto& c : cells) {
    out += c.label + "," + std::to_string(c.seed) + "," + (c.ok ? "ok" : "failed") + "," + io::format_double(c.t_score) +
           "," + io::format_double(c.i_score) + "," + io::format_double(c.combined()) + "," +
           io::format_double(c.final_loss) + "," + io::format_double(c.cos_fi_fs) + "," + io::format_double(c.cos_fi_fbg) +
           "," + clean(c.error) + "\n";
  }
  return out;
}

AblationTable AblationTable::from_csv(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kTableHeader) throw ValidationError("not an ablation table");
  AblationTable table;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, 10);
    if (f.size() != 10) throw ValidationError("malformed ablation row: " + line);
    AblationCell c;
    c.label = f[0];
    c.seed = static_cast<std::uint64_t>(io::parse_int(f[1], "seed"));
    c.ok = f[2] == "ok";
    c.t_score = io::parse_double(f[3], "t_score");
    c.i_score = io::parse_double(f[4], "i_score");
    c.final_loss = io::parse_double(f[6], "final_loss");
    c.cos_fi_fs = io::parse_double(f[7], "cos_fi_fs");
    c.cos_fi_fbg = io::parse_double(f[8], "cos_fi_fbg");
    c.error = f[9];
    table.cells.push_back(c);
  }
  return table;
}

std::vector<OrderingCheck> summarize(const AblationTable& table) {
  std::map<std::string, std::map<std::uint64_t, double>> score;
  std::vector<std::string> labels;
  for (const auto& c : table.cells) {
    if (std::find(labels.begin(), labels.end(), c.label) == labels.end()) labels.push_back(c.label);
    if (c.ok) score[c.label][c.seed] = c.combined();
  }
  auto has = [&](const std::string& l) { return std::find(labels.begin(), labels.end(), l) != labels.end(); };
  std::vector<std::pair<std::string, std::string>> pairs;
  if (has("full")) {
    for (const auto& l : labels) {
      if (l != "full") pairs.emplace_back("full", l);
    }
  }
  if (has("no_l4") && has("no_l2l3l4")) pairs.emplace_back("no_l4", "no_l2l3l4");

  std::vector<OrderingCheck> checks;
  for (const auto& [better, worse] : pairs) {
    OrderingCheck check{better, worse};
    for (const auto& [seed, value] : score[better]) {
      const auto it = score[worse].find(seed);
      if (it == score[worse].end()) continue;
      ++check.seeds;
      if (value >= it->second) ++check.wins;
    }
    check.pass = check.seeds > 0 && 2 * check.wins > check.seeds;
    checks.push_back(check);
  }
  return checks;
}

std::string summary_text(const std::vector<OrderingCheck>& checks) {
  std::string out;
  for (const auto& c : checks) {
    out += (c.pass ? "PASS " : "FAIL ") + c.better + " >= " + c.worse + " in " + std::to_string(c.wins) + "/" +
           std::to_string(c.seeds) + " seeds\n";
  }
  return out;
}

AblationTable run_ablation(const train::TrainConfig& base, const std::vector<std::string>& labels,
                           const std::vector<std::uint64_t>& seeds, bool verbose) {
  std::set<std::string> seen;
  for (const auto& l : labels) {
    if (!seen.insert(l).second) throw ValidationError("duplicate ablation label '" + l + "'");
    (void)ablation_preset(l);
  }
  AblationTable table;
  for (const auto& label : labels) {
    for (std::uint64_t seed : seeds) {
      AblationCell cell{label, seed};
      try {
        train::TrainConfig config = base;
        config.apply(ablation_preset(label));
        config.seed = seed;
        config.validate();
        train::Model model = train::build_model(config);
        const auto data = train::prepare_data(model, train::make_config_dataset(config));
        const auto report = train::train_run(model, data);
        cell.final_loss = report.epochs.empty() ? 0.0 : report.epochs.back().loss.total;
        if (model.adapter) {
          const auto stats = train::decoupling_stats(model, data);
          cell.cos_fi_fs = stats.cos_fi_fs;
          cell.cos_fi_fbg = stats.cos_fi_fbg;
        }
        const auto metrics = run_eval(model, config.phrases(), config.samples_per_prompt, seed);
        cell.t_score = metrics.t_score;
        cell.i_score = metrics.i_score;
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      if (verbose) {
        std::cerr << "ablation " << label << " seed " << seed << ": "
                  << (cell.ok ? "t=" + io::format_double(cell.t_score) + " i=" + io::format_double(cell.i_score)
                              : "failed: " + cell.error)
                  << "\n";
      }
      table.cells.push_back(cell);
    }
  }
  return table;
}

}  // namespace idfuse::eval
