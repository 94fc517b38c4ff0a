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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "idfuse/error.hpp"
#include "idfuse/eval.hpp"
#include "idfuse/io.hpp"

using namespace idfuse;

namespace {

train::TrainConfig quick_config() {
  train::TrainConfig c;
  c.dim = 8;
  c.heads = 2;
  c.unet_hidden = 8;
  c.unet_blocks = 1;
  c.lora_rank = 2;
  c.timesteps = 10;
  c.epochs = 2;
  c.dataset_size = 2;
  c.batch_size = 2;
  c.samples_per_prompt = 1;
  c.eval_phrases = "in the snow,at night";
  return c;
}

}  // namespace

TEST_CASE("identity score calibration") {
  Rng rng(5);
  double min_right = 1.0;
  double max_wrong = 0.0;
  for (const auto& id : world::all_identities()) {
    for (auto kind : world::kAllKinds) {
      const auto scene = world::render_scene(id, world::sample_spec(rng, kind), 0);
      const double right = eval::identity_score(scene.image, id);
      min_right = std::min(min_right, right);
      for (const auto& other : world::all_identities()) {
        if (other == id) continue;
        max_wrong = std::max(max_wrong, eval::identity_score(scene.image, other));
      }
    }
  }
  MESSAGE("correct min " << min_right << ", wrong max " << max_wrong);
  CHECK(min_right >= 0.9);
  CHECK(max_wrong < 0.5);

  SUBCASE("subject-free renders score low") {
    for (auto kind : world::kAllKinds) {
      const auto bg = world::render_background(world::sample_spec(rng, kind));
      for (const auto& id : world::all_identities()) CHECK(eval::identity_score(bg, id) <= 0.2);
    }
  }
  SUBCASE("deterministic") {
    const auto id = world::make_identity(world::Shape::cross, "cyan");
    const auto scene = world::render_scene(id, world::sample_spec(rng, world::BackgroundKind::dots), 0);
    CHECK(eval::identity_score(scene.image, id) == eval::identity_score(scene.image, id));
  }
}

TEST_CASE("text alignment calibration") {
  Rng rng(9);
  double max_wrong = 0.0;
  for (const auto& id : world::all_identities()) {
    for (auto kind : world::kAllKinds) {
      const auto spec = world::sample_spec(rng, kind);
      const auto scene = world::render_scene(id, spec, 0);
      CHECK(eval::text_align_score(scene.image, kind, spec.background_name) == 1.0);
      for (auto k2 : world::kAllKinds) {
        for (const auto& c : world::background_palette()) {
          if (k2 == kind && c.name == spec.background_name) continue;
          max_wrong = std::max(max_wrong, eval::text_align_score(scene.image, k2, c.name));
        }
      }
    }
  }
  MESSAGE("wrong-background max " << max_wrong);
  CHECK(max_wrong < 0.5);

  SUBCASE("solid white render against white and navy targets") {
    const auto id = world::make_identity(world::Shape::circle, "red");
    const auto scene = world::render_scene(id, world::make_spec(world::BackgroundKind::solid, "white", 16, 16, 6), 0);
    CHECK(eval::text_align_score(scene.image, world::BackgroundKind::solid, "white") == 1.0);
    CHECK(eval::text_align_score(scene.image, world::BackgroundKind::solid, "navy") < 0.5);
  }
  SUBCASE("invariant to subject position") {
    const auto id = world::make_identity(world::Shape::square, "yellow");
    for (auto kind : world::kAllKinds) {
      const auto name = world::phrase_for_kind(kind).background_name;
      const double ref = eval::text_align_score(
          world::render_scene(id, world::make_spec(kind, name, 16, 16, 6), 0).image, kind, name);
      for (int trial = 0; trial < 20; ++trial) {
        auto spec = world::sample_spec(rng, kind);
        spec.background_name = name;
        spec.background = world::background_color(name);
        CHECK(eval::text_align_score(world::render_scene(id, spec, 0).image, kind, name) == ref);
      }
    }
  }
  SUBCASE("canonical color overload") {
    const auto& p = world::lookup_phrase("at night");
    const auto scene = world::render_scene(world::make_identity(world::Shape::triangle, "green"),
                                           world::make_spec(p.kind, p.background_name, 12, 20, 5), 0);
    CHECK(eval::text_align_score(scene.image, p.kind) == 1.0);
  }
}

TEST_CASE("run_eval") {
  auto c = quick_config();
  c.eval_phrases = "all";
  const auto model = train::build_model(c);
  const auto phrases = std::vector<std::string>{"in the snow", "in the jungle", "on the beach", "in the city", "at night"};
  const auto a = eval::run_eval(model, phrases, 4, 3);
  CHECK(a.n_generated == 20);
  REQUIRE(a.rows.size() == 5);
  double t = 0.0, i = 0.0;
  for (const auto& r : a.rows) {
    CHECK(r.samples == 4);
    t += r.t_score;
    i += r.i_score;
    CHECK(r.t_score >= 0.0);
    CHECK(r.t_score <= 1.0);
    CHECK(r.i_score >= 0.0);
    CHECK(r.i_score <= 1.0);
  }
  CHECK(a.t_score == doctest::Approx(t / 5.0).epsilon(1e-14));
  CHECK(a.i_score == doctest::Approx(i / 5.0).epsilon(1e-14));
  CHECK(a.to_csv() == eval::run_eval(model, phrases, 4, 3).to_csv());

  SUBCASE("images written on request") {
    const auto dir = std::filesystem::temp_directory_path() / "idfuse_eval_images";
    std::filesystem::remove_all(dir);
    (void)eval::run_eval(model, {"in the snow"}, 2, 3, dir);
    std::size_t files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      CHECK(e.path().extension() == ".ppm");
      CHECK(io::read_ppm(e.path()).shape() == ad::Shape{3, 32, 32});
      ++files;
    }
    CHECK(files == 2);
    std::filesystem::remove_all(dir);
  }
  SUBCASE("unknown phrase rejected") {
    CHECK_THROWS_AS(eval::run_eval(model, {"on the moon"}, 1, 0), ValidationError);
  }
}

TEST_CASE("ablation presets") {
  const auto grid = eval::default_grid();
  CHECK(grid == std::vector<std::string>{"full", "no_iedm", "no_ffm", "no_both", "no_l2", "no_l3", "no_l4", "no_l2l3l4"});
  for (const auto& label : grid) {
    train::TrainConfig c;
    c.apply(eval::ablation_preset(label));
    CHECK_NOTHROW(c.validate());
  }
  train::TrainConfig alt;
  alt.apply(eval::ablation_preset("alt_lambda1"));
  CHECK(alt.lambda1 == 0.001);
  CHECK_THROWS_AS(eval::ablation_preset("no_such_cell"), ValidationError);
}

TEST_CASE("ablation table and summary") {
  eval::AblationTable table;
  auto cell = [](std::string label, std::uint64_t seed, double t, double i) {
    eval::AblationCell c{std::move(label), seed};
    c.ok = true;
    c.t_score = t;
    c.i_score = i;
    return c;
  };
  for (std::uint64_t s = 0; s < 5; ++s) {
    table.cells.push_back(cell("full", s, 0.8, 0.5));
    table.cells.push_back(cell("no_both", s, 0.8, s < 3 ? 0.4 : 0.6));
    table.cells.push_back(cell("no_iedm", s, 0.8, s < 2 ? 0.4 : 0.6));
  }
  eval::AblationCell failed{"no_ffm", 0};
  failed.error = "diverged, at step 3";
  table.cells.push_back(failed);

  const auto round_trip = eval::AblationTable::from_csv(table.to_csv());
  CHECK(round_trip.to_csv() == table.to_csv());
  REQUIRE(round_trip.cells.size() == table.cells.size());
  CHECK(round_trip.cells.back().error == "diverged, at step 3");
  CHECK_FALSE(round_trip.cells.back().ok);

  const auto checks = eval::summarize(round_trip);
  auto find = [&](const std::string& worse) {
    for (const auto& c : checks) {
      if (c.better == "full" && c.worse == worse) return c;
    }
    FAIL("missing ordering full >= " << worse);
    return eval::OrderingCheck{};
  };
  CHECK(find("no_both").pass);
  CHECK(find("no_both").wins == 3);
  CHECK_FALSE(find("no_iedm").pass);
  CHECK(find("no_ffm").seeds == 0);
  CHECK_FALSE(find("no_ffm").pass);
  CHECK(eval::summary_text(checks).find("PASS full >= no_both in 3/5 seeds") != std::string::npos);
  CHECK(eval::summary_text(eval::summarize(table)) == eval::summary_text(checks));
}

TEST_CASE("ablation grid with one label") {
  const auto table = eval::run_ablation(quick_config(), {"full"}, {4});
  REQUIRE(table.cells.size() == 1);
  CHECK(table.cells[0].ok);
  CHECK(table.cells[0].label == "full");
  CHECK(table.cells[0].seed == 4);
  CHECK_THROWS_AS(eval::run_ablation(quick_config(), {"full", "full"}, {0}), ValidationError);
}

TEST_CASE("failing cells are recorded and the grid continues") {
  auto c = quick_config();
  c.base_checkpoint = (std::filesystem::temp_directory_path() / "idfuse_no_such_checkpoint").string();
  const auto table = eval::run_ablation(c, {"full", "no_both"}, {0});
  REQUIRE(table.cells.size() == 2);
  for (const auto& cell : table.cells) {
    CHECK_FALSE(cell.ok);
    CHECK_FALSE(cell.error.empty());
  }
}
