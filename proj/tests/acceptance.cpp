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

// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// writes the supporting tables under --out.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "idfuse/error.hpp"
#include "idfuse/eval.hpp"
#include "idfuse/ffm.hpp"
#include "idfuse/gradsuite.hpp"
#include "idfuse/iedm.hpp"
#include "idfuse/instrument.hpp"
#include "idfuse/io.hpp"
#include "idfuse/trainer.hpp"

namespace fs = std::filesystem;
using namespace idfuse;
using ad::Tensor;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

Tensor uniform(Rng& rng, const ad::Shape& shape, double lo, double hi) {
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor(shape, std::move(v));
}

train::TrainConfig default_config(const fs::path& base) {
  train::TrainConfig c;
  c.base_checkpoint = base.string();
  c.validate();
  return c;
}

Outcome gradient_suite(std::size_t seeds, const fs::path& out) {
  const auto report = gradsuite::run_suite(train::miniature_config(), seeds);
  io::write_text(out / "gradcheck.csv", report.to_text());
  double worst_primitive = 0.0;
  double end_to_end = 0.0;
  for (const auto& r : report.rows) {
    if (r.name == "end_to_end") {
      end_to_end = r.max_rel_error;
    } else {
      worst_primitive = std::max(worst_primitive, r.max_rel_error);
    }
  }
  const bool fast = report.seconds < 120.0;
  return {report.passed() && fast && seeds >= 100,
          "primitives max " + fmt(worst_primitive) + " (< 1e-5), end-to-end max " + fmt(end_to_end) + " (< 1e-4), " +
              std::to_string(seeds) + " seeds, " + fmt(report.seconds) + " s (< 120 s)"};
}

Outcome invariants() {
  Rng rng(2024);
  std::vector<std::string> failures;

  // Gate simplex.
  {
    nn::ParamStore store;
    const auto f = ffm::make_ffm(store, 64, 2, 5);
    for (const auto& name : store.names()) store.set_value(name, uniform(rng, store.value(name).shape(), -3.0, 3.0));
    nn::Graph g(store);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const auto w = ffm::gate(g, f, uniform(rng, {64}, -10.0, 10.0));
      double total = 0.0;
      for (double v : w.data()) total += v;
      worst = std::max(worst, std::abs(total - 1.0));
    }
    if (worst > 1e-12) failures.push_back("gate sum off by " + fmt(worst));
  }

  // Mask under 10^3 optimizer steps pushing toward either saturation.
  for (double direction : {1.0, -1.0}) {
    nn::ParamStore store;
    store.add(iedm::kMaskLogits, Tensor::zeros({64}), true);
    nn::AdamW opt({.lr = 0.5, .weight_decay = 0.0});
    bool inside = true;
    for (int step = 0; step < 1000; ++step) {
      ad::Tape tape;
      nn::Graph g(store, &tape);
      opt.step(store, tape.backward(ad::scale(ad::sum(ad::sigmoid(g.param(iedm::kMaskLogits))), direction)));
      const Tensor mask = iedm::effective_mask(store);
      for (double m : mask.data()) inside = inside && m > 0.0 && m < 1.0;
    }
    if (!inside) failures.push_back("mask left (0,1)");
  }

  // Zero-initialized LoRA leaves text encoding and sampling bitwise unchanged.
  {
    train::TrainConfig with = train::TrainConfig{};
    with.timesteps = 20;
    train::TrainConfig without = with;
    without.lora_rank = 0;
    auto a = train::build_model(with);
    auto b = train::build_model(without);
    for (const auto& name : a.store.names()) {
      if (!name.ends_with(".lora.up")) a.store.set_value(name, uniform(rng, a.store.value(name).shape(), -0.3, 0.3));
    }
    for (const auto& name : b.store.names()) b.store.set_value(name, a.store.value(name));
    const auto prompt = world::build_prompt(world::make_identity(world::Shape::circle, "red"), "in the snow");
    nn::Graph ga(a.store), gb(b.store);
    const auto ca = enc::encode_text(ga, a.text, prompt);
    const auto cb = enc::encode_text(gb, b.text, prompt);
    const bool same = ca.bitwise_equal(cb) && diff::ddpm_sample(a.store, a.denoiser, a.schedule, ca, 3)
                                                 .bitwise_equal(diff::ddpm_sample(b.store, b.denoiser, b.schedule, cb, 3));
    if (!same) failures.push_back("zero-initialized LoRA changed outputs");
  }

  // k = 1 fusion is the expert itself.
  {
    nn::ParamStore store;
    const auto f = ffm::make_ffm(store, 64, 1, 9);
    for (const auto& name : store.names()) store.set_value(name, uniform(rng, store.value(name).shape(), -0.5, 0.5));
    nn::Graph g(store);
    bool exact = true;
    for (int i = 0; i < 100; ++i) {
      const auto x = uniform(rng, {64}, -2.0, 2.0);
      exact = exact && ffm::fuse(g, f, x).f_r.bitwise_equal(ffm::expert_forward(g, f, 0, x));
    }
    if (!exact) failures.push_back("k=1 fusion differs from its expert");
  }

  std::string detail = "gate simplex over 1000 inputs, mask after 1000 steps each way, LoRA inert, k=1 exact";
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty(), detail};
}

Outcome decoupling(const fs::path& base, std::size_t seeds, const fs::path& out) {
  std::size_t both = 0;
  double slowest = 0.0;
  std::string rows = "seed,cos_fi_fs_init,cos_fi_fs_final,cos_fi_fbg_init,cos_fi_fbg_final,seconds\n";
  std::size_t fs_ok = 0, fbg_ok = 0;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    const auto start = Clock::now();
    auto config = default_config(base);
    config.seed = seed;
    auto model = train::build_model(config);
    const auto data = train::prepare_data(model, train::make_config_dataset(config));
    const auto before = train::decoupling_stats(model, data);
    (void)train::train_run(model, data);
    const auto after = train::decoupling_stats(model, data);
    const double secs = seconds_since(start);
    slowest = std::max(slowest, secs);
    const bool a = after.cos_fi_fs < before.cos_fi_fs;
    const bool b = after.cos_fi_fbg > before.cos_fi_fbg;
    fs_ok += a;
    fbg_ok += b;
    both += a && b;
    rows += std::to_string(seed) + "," + io::format_double(before.cos_fi_fs) + "," + io::format_double(after.cos_fi_fs) +
            "," + io::format_double(before.cos_fi_fbg) + "," + io::format_double(after.cos_fi_fbg) + "," +
            io::format_double(secs) + "\n";
  }
  io::write_text(out / "decoupling.csv", rows);
  const std::size_t need = (4 * seeds + 4) / 5;
  return {both >= need && slowest < 600.0,
          "both directions in " + std::to_string(both) + "/" + std::to_string(seeds) + " seeds (need " +
              std::to_string(need) + "); cos(f_i,f_s) fell in " + std::to_string(fs_ok) + ", cos(f_i,f_bg) rose in " +
              std::to_string(fbg_ok) + "; slowest run " + fmt(slowest) + " s (< 600 s)"};
}

struct Ablation {
  eval::AblationTable table;
  double seconds = 0.0;
};

Ablation ablation(const fs::path& base, std::size_t seeds, const fs::path& out) {
  const auto start = Clock::now();
  std::vector<std::uint64_t> seed_list;
  for (std::uint64_t s = 0; s < seeds; ++s) seed_list.push_back(s);
  Ablation a;
  a.table = eval::run_ablation(default_config(base), {"full", "no_iedm", "no_ffm", "no_both", "no_l4", "no_l2l3l4"},
                               seed_list, true);
  a.seconds = seconds_since(start);
  io::write_text(out / "ablation.csv", a.table.to_csv());
  io::write_text(out / "ablation_summary.txt", eval::summary_text(eval::summarize(a.table)));
  return a;
}

std::map<std::string, std::map<std::uint64_t, double>> combined_scores(const eval::AblationTable& table) {
  std::map<std::string, std::map<std::uint64_t, double>> s;
  for (const auto& c : table.cells) {
    if (c.ok) s[c.label][c.seed] = c.combined();
  }
  return s;
}

Outcome module_ordering(const Ablation& a, std::size_t seeds) {
  const auto checks = eval::summarize(a.table);
  const std::size_t need = seeds / 2 + 1;
  bool pass = a.seconds < 7200.0;
  std::string detail;
  for (const std::string worse : {"no_iedm", "no_ffm", "no_both"}) {
    for (const auto& c : checks) {
      if (c.better != "full" || c.worse != worse) continue;
      pass = pass && c.wins >= need;
      detail += "full>=" + worse + " " + std::to_string(c.wins) + "/" + std::to_string(seeds) + ", ";
    }
  }
  return {pass, detail + "need " + std::to_string(need) + " each; harness " + fmt(a.seconds) + " s (< 7200 s)"};
}

Outcome loss_ordering(const Ablation& a, std::size_t seeds) {
  const auto s = combined_scores(a.table);
  std::size_t chain = 0;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    const auto get = [&](const std::string& label) -> std::optional<double> {
      const auto it = s.find(label);
      if (it == s.end() || !it->second.contains(seed)) return std::nullopt;
      return it->second.at(seed);
    };
    const auto full = get("full"), l4 = get("no_l4"), none = get("no_l2l3l4");
    if (full && l4 && none && *full >= *l4 && *l4 >= *none) ++chain;
  }
  const std::size_t need = seeds / 2 + 1;
  return {chain >= need, "full>=no_l4>=no_l2l3l4 in " + std::to_string(chain) + "/" + std::to_string(seeds) +
                             " seeds (need " + std::to_string(need) + ")"};
}

Outcome inference_purity(const fs::path& base) {
  auto config = default_config(base);
  config.epochs = 5;
  auto model = train::build_model(config);
  const auto data = train::prepare_data(model, train::make_config_dataset(config));
  (void)train::train_run(model, data);
  nn::Graph g(model.store);
  const auto cond = enc::encode_text(g, model.text, world::build_prompt(world::make_identity(world::shape_from_name(config.subject_shape), config.subject_color), "at night"));
  instrument::reset();
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    (void)diff::ddpm_sample(model.store, model.denoiser, model.schedule, cond, seed);
  }
  const auto sampled = instrument::snapshot();
  instrument::reset();
  (void)eval::run_eval(model, {"in the snow", "at night"}, 2, 0);
  const auto evaluated = instrument::snapshot();
  const bool pass = sampled == instrument::Counts{} && evaluated == instrument::Counts{};
  return {pass, "adapter/ffm/image-encoder calls during sampling: " + std::to_string(sampled.adapter) + "/" +
                    std::to_string(sampled.ffm) + "/" + std::to_string(sampled.image_encoder) + ", during eval: " +
                    std::to_string(evaluated.adapter) + "/" + std::to_string(evaluated.ffm) + "/" +
                    std::to_string(evaluated.image_encoder)};
}

Outcome overfit(const fs::path& base, const fs::path& out) {
  const auto start = Clock::now();
  auto config = default_config(base);
  config.dataset_size = 1;
  auto model = train::build_model(config);
  const auto data = train::prepare_data(model, train::make_config_dataset(config));
  const auto report = train::train_run(model, data);
  const double secs = seconds_since(start);
  io::write_text(out / "overfit.csv", report.to_csv());
  // Per-epoch L1 depends on the sampled timesteps, so the criterion uses the
  // mean over the last ten epochs.
  const std::size_t n = report.epochs.size();
  const std::size_t w = std::min<std::size_t>(10, n);
  double tail = 0.0;
  for (std::size_t e = n - w; e < n; ++e) tail += report.epochs[e].loss.l1;
  tail /= static_cast<double>(w);
  return {tail < 0.05 && secs < 180.0 && n == 250,
          "mean L1 over epochs " + std::to_string(n - w + 1) + "-" + std::to_string(n) + " = " + fmt(tail) +
              " (< 0.05), final-epoch L1 " + fmt(report.epochs.back().loss.l1) + ", " + fmt(secs) + " s (< 180 s)"};
}

Outcome determinism(const fs::path& base, const fs::path& out) {
  auto run = [&](std::size_t stop_at, std::optional<train::Model>* keep) {
    auto model = train::build_model(default_config(base));
    const auto data = train::prepare_data(model, train::make_config_dataset(model.config));
    const auto report = train::train_run(model, data, stop_at);
    if (keep) keep->emplace(std::move(model));
    return report;
  };
  const auto a = run(SIZE_MAX, nullptr);
  const auto b = run(SIZE_MAX, nullptr);
  std::optional<train::Model> half;
  const auto first = run(100, &half);
  const auto dir = out / "resume_checkpoint";
  train::save_checkpoint(*half, dir);
  auto resumed = train::load_checkpoint(dir);
  const auto data = train::prepare_data(resumed, train::make_config_dataset(resumed.config));
  const auto second = train::train_run(resumed, data);
  train::TrainReport joined = first;
  joined.epochs.insert(joined.epochs.end(), second.epochs.begin(), second.epochs.end());
  const bool same = a.to_csv() == b.to_csv();
  const bool resume = joined.to_csv() == a.to_csv();
  return {same && resume, std::string("repeat run CSV ") + (same ? "identical" : "differs") +
                              ", resume at epoch 100 " + (resume ? "matches" : "differs from") + " the straight run (" +
                              std::to_string(a.epochs.size()) + " epochs)"};
}

bool in_trainable_set(const std::string& name) {
  return name == "text.v_star" || name.starts_with("iedm.adapter.") || name.starts_with("ffm.") ||
         name.find(".lora.") != std::string::npos;
}

Outcome trainable_audit(const fs::path& base) {
  auto model = train::build_model(default_config(base));
  const auto before = train::snapshot(model.store);
  const auto data = train::prepare_data(model, train::make_config_dataset(model.config));
  (void)train::train_run(model, data);
  const auto after = train::snapshot(model.store);
  std::vector<std::string> unexpected, unchanged;
  std::size_t changed = 0;
  for (const auto& [name, value] : before) {
    const bool moved = !value.bitwise_equal(after.at(name));
    changed += moved;
    if (moved && !in_trainable_set(name)) unexpected.push_back(name);
    if (!moved && in_trainable_set(name)) unchanged.push_back(name);
  }
  // A length-one attention context makes the query/key path constant, so
  // their LoRA up-factors get exactly zero gradient and stay at zero.
  std::vector<std::string> unexplained;
  for (const auto& name : unchanged) {
    const bool qk_up = name.starts_with("unet.") && name.ends_with(".lora.up") &&
                       (name.find(".attn.q.") != std::string::npos || name.find(".attn.k.") != std::string::npos);
    if (!qk_up) unexplained.push_back(name);
  }
  std::string detail = std::to_string(changed) + " tensors changed, " + std::to_string(unexpected.size()) +
                       " outside the trainable set, " + std::to_string(unchanged.size()) +
                       " trainable unchanged (attention q/k LoRA up-factors: " +
                       std::to_string(unchanged.size() - unexplained.size()) + ")";
  for (const auto& n : unexpected) detail += "; moved: " + n;
  for (const auto& n : unexplained) detail += "; stuck: " + n;
  return {unexpected.empty() && unexplained.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"idfuse acceptance run"};
  std::string base;
  std::string out = "acceptance";
  std::size_t seeds = 5;
  std::size_t grad_seeds = 100;
  std::vector<int> only;
  app.add_option("--base", base, "pretrained base checkpoint directory")->required();
  app.add_option("--out", out, "directory for result tables");
  app.add_option("--seeds", seeds, "seeds for the multi-seed criteria");
  app.add_option("--grad-seeds", grad_seeds, "random points for the gradient suite");
  app.add_option("--only", only, "run only these criterion numbers");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(out);
  const fs::path out_dir(out);
  const auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };

  std::vector<std::pair<int, std::string>> names = {
      {1, "gradient suite"},       {2, "simplex/mask/LoRA invariants"}, {3, "decoupling direction"},
      {4, "module ablation order"}, {5, "loss ablation order"},          {6, "inference purity"},
      {7, "overfit sanity"},       {8, "determinism and resume"},       {9, "trainable-set audit"}};

  std::optional<Ablation> grid;
  bool all = true;
  std::string summary;
  for (const auto& [k, name] : names) {
    if (!wanted(k)) continue;
    Outcome o;
    const auto start = Clock::now();
    try {
      switch (k) {
        case 1: o = gradient_suite(grad_seeds, out_dir); break;
        case 2: o = invariants(); break;
        case 3: o = decoupling(base, seeds, out_dir); break;
        case 4:
        case 5:
          if (!grid) grid = ablation(base, seeds, out_dir);
          o = k == 4 ? module_ordering(*grid, seeds) : loss_ordering(*grid, seeds);
          break;
        case 6: o = inference_purity(base); break;
        case 7: o = overfit(base, out_dir); break;
        case 8: o = determinism(base, out_dir); break;
        case 9: o = trainable_audit(base); break;
      }
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    const std::string line = std::string(o.pass ? "PASS" : "FAIL") + " [" + std::to_string(k) + "] " + name + ": " +
                             o.detail + " (" + fmt(seconds_since(start)) + " s)";
    std::cout << line << std::endl;
    summary += line + "\n";
  }
  io::write_text(out_dir / "acceptance.txt", summary);
  return all ? 0 : 1;
}
