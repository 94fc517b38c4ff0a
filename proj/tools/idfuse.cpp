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

// Command-line front end: dataset export, base pretraining, fine-tuning,
// evaluation, ablations, gradient checks and sampling.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "idfuse/error.hpp"
#include "idfuse/eval.hpp"
#include "idfuse/gradsuite.hpp"
#include "idfuse/io.hpp"
#include "idfuse/synthworld.hpp"
#include "idfuse/trainer.hpp"

namespace fs = std::filesystem;
using namespace idfuse;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out = ".";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value config file (defaults apply to missing keys)");
  cmd->add_option("--seed", c.seed, "run seed")->each([&c](const std::string&) { c.seed_given = true; });
  cmd->add_option("--out", c.out, "output directory; relative paths in the config resolve against it");
  cmd->add_option("--set", c.overrides, "extra key=value override, repeatable");
}

fs::path under(const Common& c, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : fs::path(c.out) / path;
}

train::TrainConfig load_config(const Common& c) {
  train::TrainConfig cfg = c.config.empty() ? train::TrainConfig{} : train::TrainConfig::load(c.config);
  io::KeyValues kv;
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + o + "'");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  cfg.apply(kv);
  if (c.seed_given) cfg.seed = c.seed;
  if (!cfg.base_checkpoint.empty()) {
    cfg.base_checkpoint = under(c, cfg.base_checkpoint).string();
    if (!fs::exists(fs::path(cfg.base_checkpoint) / "manifest.txt")) {
      throw std::runtime_error("base checkpoint '" + cfg.base_checkpoint +
                               "' not found; create it with `idfuse pretrain` using the same config");
    }
  }
  cfg.validate();
  return cfg;
}

int gen_data(const Common& c) {
  const auto cfg = load_config(c);
  const auto dataset = train::make_config_dataset(cfg);
  const auto dir = under(c, "dataset");
  world::export_dataset(dataset, dir);
  std::cout << "wrote " << dataset.scenes.size() << " scenes to " << dir.string() << "\n";
  return 0;
}

int pretrain(Common c, bool verbose, bool reuse) {
  // The base being written cannot be a precondition of its own config.
  const auto target = c.config.empty() ? train::TrainConfig{} : train::TrainConfig::load(c.config);
  const fs::path dir = target.base_checkpoint.empty() ? under(c, "base") : under(c, target.base_checkpoint);
  c.overrides.push_back("base_checkpoint=");
  auto cfg = load_config(c);
  if (reuse && fs::exists(dir / "manifest.txt")) {
    std::cout << "reusing " << dir.string() << "\n";
    return 0;
  }
  const auto report = train::pretrain_base(cfg, dir, verbose);
  std::cout << "pretrained " << report.losses.size() << " steps into " << dir.string() << "\n";
  return 0;
}

int train_cmd(const Common& c, const std::string& resume, std::size_t stop_at) {
  train::Model model = resume.empty() ? train::build_model(load_config(c)) : train::load_checkpoint(under(c, resume));
  const auto data = train::prepare_data(model, train::make_config_dataset(model.config));
  const std::size_t first_epoch = model.epoch + 1;
  const auto report = train::train_run(model, data, stop_at == 0 ? SIZE_MAX : stop_at);
  fs::create_directories(c.out);
  std::string csv = report.to_csv();
  const auto report_path = under(c, "report.csv");
  if (!resume.empty() && fs::exists(report_path)) {
    // Keep the earlier epochs of the interrupted run ahead of the new rows.
    std::stringstream in(io::read_text(report_path));
    std::string kept;
    std::string line;
    std::getline(in, line);
    kept = line + "\n";
    while (std::getline(in, line)) {
      if (!line.empty() && std::stoull(line.substr(0, line.find(','))) < first_epoch) kept += line + "\n";
    }
    csv = kept + csv.substr(csv.find('\n') + 1);
  }
  io::write_text(report_path, csv);
  train::save_checkpoint(model, under(c, "checkpoint"));
  if (model.adapter) {
    const auto s = train::decoupling_stats(model, data);
    std::cout << "cos(f_i,f_s)=" << io::format_double(s.cos_fi_fs) << " cos(f_i,f_bg)=" << io::format_double(s.cos_fi_fbg)
              << "\n";
  }
  std::cout << "trained to epoch " << model.epoch << "; report.csv and checkpoint/ written\n";
  return 0;
}

int eval_cmd(const Common& c, const std::string& checkpoint, bool images) {
  const auto model = train::load_checkpoint(under(c, checkpoint));
  const auto cfg = model.config;
  const std::uint64_t seed = c.seed_given ? c.seed : cfg.seed;
  const auto report = eval::run_eval(model, cfg.phrases(), cfg.samples_per_prompt, seed,
                                     images ? under(c, "images") : fs::path{});
  fs::create_directories(c.out);
  io::write_text(under(c, "metrics.csv"), report.to_csv());
  std::cout << "t_score=" << io::format_double(report.t_score) << " i_score=" << io::format_double(report.i_score)
            << " n_generated=" << report.n_generated << "\n";
  return 0;
}

int ablate(const Common& c, std::string labels, std::size_t seeds, const std::string& from_csv) {
  eval::AblationTable table;
  if (!from_csv.empty()) {
    table = eval::AblationTable::from_csv(io::read_text(from_csv));
  } else {
    const auto cfg = load_config(c);
    std::vector<std::string> grid;
    if (labels.empty()) {
      grid = eval::default_grid();
    } else {
      std::stringstream in(labels);
      for (std::string l; std::getline(in, l, ',');) grid.push_back(l);
    }
    std::vector<std::uint64_t> seed_list;
    for (std::size_t s = 0; s < seeds; ++s) seed_list.push_back(cfg.seed + s);
    table = eval::run_ablation(cfg, grid, seed_list, true);
    fs::create_directories(c.out);
    io::write_text(under(c, "ablation.csv"), table.to_csv());
  }
  const auto summary = eval::summary_text(eval::summarize(table));
  if (from_csv.empty()) io::write_text(under(c, "summary.txt"), summary);
  std::cout << summary;
  return 0;
}

int gradcheck(const Common& c, std::size_t seeds) {
  const auto cfg = load_config(c);
  const auto report = gradsuite::run_suite(cfg, seeds);
  fs::create_directories(c.out);
  io::write_text(under(c, "gradcheck.csv"), report.to_text());
  std::cout << report.to_text() << "runtime " << io::format_double(report.seconds) << " s\n";
  return report.passed() ? 0 : 1;
}

int sample(const Common& c, const std::string& checkpoint, const std::string& prompt, std::size_t count) {
  const auto model = train::load_checkpoint(under(c, checkpoint));
  const auto tokens = world::tokenize(prompt);
  nn::Graph g(model.store);
  const auto cond = enc::encode_text(g, model.text, tokens);
  const std::uint64_t seed = c.seed_given ? c.seed : model.config.seed;
  fs::create_directories(c.out);
  for (std::size_t k = 0; k < count; ++k) {
    const auto image = diff::ddpm_sample(model.store, model.denoiser, model.schedule, cond, eval::sample_seed(seed, 0, k));
    const auto path = under(c, "sample_" + std::to_string(k) + ".ppm");
    io::write_ppm(path, image);
    std::cout << path.string() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"idfuse: subject personalization on a synthetic image world"};
  app.require_subcommand(1);

  Common common;
  auto* gen = app.add_subcommand("gen-data", "export the configured subject dataset");
  auto* pre = app.add_subcommand("pretrain", "train the frozen base denoiser");
  auto* trn = app.add_subcommand("train", "fine-tune on the subject dataset");
  auto* evl = app.add_subcommand("eval", "sample and score a checkpoint");
  auto* abl = app.add_subcommand("ablate", "run the ablation grid");
  auto* grd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  auto* smp = app.add_subcommand("sample", "write PPM samples for a prompt");
  for (auto* cmd : {gen, pre, trn, evl, abl, grd, smp}) add_common(cmd, common);

  bool quiet = false;
  bool reuse = false;
  pre->add_flag("--quiet", quiet, "no progress output");
  pre->add_flag("--reuse", reuse, "keep an existing checkpoint in the target directory");

  std::string resume;
  std::size_t stop_at = 0;
  trn->add_option("--resume", resume, "checkpoint directory to continue from");
  trn->add_option("--stop-at", stop_at, "stop after this epoch (0 = configured epochs)");

  std::string checkpoint = "checkpoint";
  bool images = false;
  evl->add_option("--checkpoint", checkpoint, "checkpoint directory");
  evl->add_flag("--images", images, "also write the samples under images/");

  std::string labels;
  std::size_t seeds = 5;
  std::string from_csv;
  abl->add_option("--labels", labels, "comma-separated cell labels (default grid when empty)");
  abl->add_option("--seeds", seeds, "number of consecutive seeds starting at the config seed");
  abl->add_option("--from-csv", from_csv, "summarize an existing table instead of training");

  std::size_t grad_seeds = 100;
  grd->add_option("--seeds", grad_seeds, "random points per check");

  std::string prompt;
  std::size_t count = 4;
  smp->add_option("--prompt", prompt, "prompt text over the fixed vocabulary")->required();
  smp->add_option("--checkpoint", checkpoint, "checkpoint directory");
  smp->add_option("--count", count, "number of samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return gen_data(common);
    if (*pre) return pretrain(common, !quiet, reuse);
    if (*trn) return train_cmd(common, resume, stop_at);
    if (*evl) return eval_cmd(common, checkpoint, images);
    if (*abl) return ablate(common, labels, seeds, from_csv);
    if (*grd) return gradcheck(common, grad_seeds);
    if (*smp) return sample(common, checkpoint, prompt, count);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
