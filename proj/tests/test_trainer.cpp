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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "idfuse/error.hpp"
#include "idfuse/gradsuite.hpp"
#include "idfuse/trainer.hpp"
#include "test_util.hpp"

using namespace idfuse;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("idfuse_test_trainer_" + name);
  fs::remove_all(dir);
  return dir;
}

train::TrainConfig small_config() {
  train::TrainConfig c = train::miniature_config();
  c.lambda2 = c.lambda3 = c.lambda4 = 1e-3;
  c.batch_size = 4;
  c.epochs = 12;
  c.pretrain_steps = 40;
  return c;
}

/// A briefly pretrained base so the denoiser output is not identically zero.
const fs::path& tiny_base() {
  static const fs::path dir = [] {
    const fs::path d = scratch("base");
    train::pretrain_base(small_config(), d);
    return d;
  }();
  return dir;
}

train::TrainConfig based_config() {
  auto c = small_config();
  c.base_checkpoint = tiny_base().string();
  return c;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool adapter_gradient_is_zero(const ad::GradientMap& grads) {
  for (const auto& [name, g] : grads) {
    if (!name.starts_with("iedm.adapter.")) continue;
    for (double v : g.data()) {
      if (v != 0.0) return false;
    }
  }
  return true;
}

ad::GradientMap gradients(const train::Model& m, const train::TrainData& data, const train::NoiseDraw& draw,
                          train::LossBreakdown* breakdown = nullptr) {
  ad::Tape tape;
  nn::Graph g(m.store, &tape);
  const auto terms = train::total_loss(g, m, data, draw);
  if (breakdown) *breakdown = terms.breakdown;
  return tape.backward(terms.total);
}

}  // namespace

TEST_CASE("config serialization") {
  auto c = train::TrainConfig{};
  c.lambda2 = 0.125;
  c.combine_mode = ffm::CombineMode::explicit_bg;
  c.cosine_mode = iedm::CosineMode::squared;
  c.eval_phrases = "in the snow, at night";
  const auto kv = c.to_kv();
  const auto back = train::TrainConfig::from_kv(kv);
  CHECK(back.to_kv().format() == kv.format());
  CHECK(back.phrases() == std::vector<std::string>{"in the snow", "at night"});
  CHECK(train::TrainConfig{}.phrases().size() == 6);

  const fs::path dir = scratch("config");
  fs::create_directories(dir);
  io::write_text(dir / "run.cfg", "# comment\nseed = 9\nlr=0.002\n");
  const auto loaded = train::TrainConfig::load(dir / "run.cfg");
  CHECK(loaded.seed == 9);
  CHECK(loaded.lr == 0.002);
  CHECK(loaded.lambda1 == 1.0);

  auto reject = [](const std::string& text) {
    CHECK_THROWS_AS(train::TrainConfig::from_kv(io::KeyValues::parse(text)), ValidationError);
  };
  reject("no_such_key=1");
  reject("experts=0");
  reject("ffm_gating=false");
  reject("lambda3=-1");
  reject("enable_iedm=false");  // L2-L4 still on
  reject("combine_mode=sideways");
  reject("eval_phrases=on the moon");
  reject("subject_color=teal");
  reject("batch_size=0");
  CHECK_NOTHROW(train::TrainConfig::from_kv(io::KeyValues::parse(
      "enable_iedm=false\nenable_l2=false\nenable_l3=false\nenable_l4=false")));
  CHECK_NOTHROW(train::TrainConfig::from_kv(io::KeyValues::parse("ffm_gating=false\nexperts=1")));
}

TEST_CASE("build_model") {
  const auto m = train::build_model(small_config());
  for (const auto& [name, p] : m.store) CHECK_MESSAGE(p.trainable == nn::is_finetune_parameter(name), name);
  CHECK(m.store.value("text.v_star").bitwise_equal([&] {
    const auto& table = m.store.value("text.embedding");
    const std::size_t id = m.text.vocab.id("dog");
    return Tensor::vector(std::vector<double>(table.data().begin() + static_cast<long>(id * 8),
                                              table.data().begin() + static_cast<long>((id + 1) * 8)));
  }()));
  CHECK(m.optimizer.lr_for("text.v_star") == 1e-3);
  CHECK(m.optimizer.lr_for("ffm.gate.weight") == 5e-4);

  auto c = small_config();
  c.enable_iedm = c.enable_l2 = c.enable_l3 = c.enable_l4 = false;
  c.enable_ffm = false;
  const auto bare = train::build_model(c);
  CHECK_FALSE(bare.adapter);
  CHECK_FALSE(bare.fusion);
  for (const auto& name : bare.store.names()) {
    CHECK_FALSE(name.starts_with("iedm."));
    CHECK_FALSE(name.starts_with("ffm."));
  }

  SUBCASE("base checkpoint supplies every frozen tensor") {
    const auto based = train::build_model(based_config());
    const auto fresh = train::build_model(small_config());
    const auto base_kv = io::KeyValues::load(tiny_base() / "manifest.txt");
    bool any_differs = false;
    for (const auto& [name, p] : based.store) {
      if (nn::is_finetune_parameter(name)) {
        if (name != "text.v_star") CHECK(p.value.bitwise_equal(fresh.store.value(name)));
      } else {
        any_differs = any_differs || !p.value.bitwise_equal(fresh.store.value(name));
      }
    }
    CHECK(any_differs);
    auto wrong = based_config();
    wrong.dim = 12;
    wrong.heads = 2;
    CHECK_THROWS_AS(train::build_model(wrong), ValidationError);
  }
}

TEST_CASE("dataset and draws") {
  const auto c = based_config();
  const auto m = train::build_model(c);
  const auto ds = train::make_config_dataset(c);
  CHECK(ds.scenes.size() == c.dataset_size);
  auto one = c;
  one.dataset_size = 1;
  const auto single = train::make_config_dataset(one);
  REQUIRE(single.scenes.size() == 1);
  CHECK(single.scenes[0].image.bitwise_equal(ds.scenes[0].image));

  const auto data = train::prepare_data(m, ds);
  CHECK(data.f_raw.size() == ds.scenes.size());
  CHECK(data.x_tokens[0].shape() == ad::Shape{4, 48});
  Rng a(3), b(3);
  const auto d1 = train::draw_noise(a, m, 4);
  const auto d2 = train::draw_noise(b, m, 4);
  CHECK(d1.items == d2.items);
  CHECK(d1.steps == d2.steps);
  CHECK(d1.items.size() == c.batch_size);
  for (std::size_t t : d1.steps) CHECK(t < c.timesteps);
}

TEST_CASE("total_loss") {
  const auto base = based_config();
  Rng rng(21);

  SUBCASE("breakdown matches independently recomputed terms") {
    const auto m = train::build_model(base);
    const auto data = train::prepare_data(m, train::make_config_dataset(base));
    const auto draw = train::draw_noise(rng, m, data.x_tokens.size());
    nn::Graph g(m.store);
    const auto terms = train::total_loss(g, m, data, draw);
    const auto& b = terms.breakdown;
    CHECK(std::abs(b.total - (base.lambda1 * b.l1 + base.lambda2 * b.l2 + base.lambda3 * b.l3 + base.lambda4 * b.l4)) <
          1e-12);

    nn::Graph h(m.store);
    const Tensor f_s = enc::encode_text(h, m.text, data.dataset.prompt);
    std::vector<Tensor> f_i, f_bg;
    double l1 = 0.0;
    for (std::size_t k = 0; k < draw.items.size(); ++k) {
      const std::size_t item = draw.items[k];
      f_i.push_back(iedm::adapter_forward(h, *m.adapter, data.f_raw[item]));
      f_bg.push_back(data.f_bg[item]);
      const Tensor cond = ffm::fuse(h, *m.fusion, ffm::combine(f_s, f_i.back())).f_r;
      const auto st = diff::q_sample(m.schedule, data.dataset.scenes[item].image, draw.steps[k],
                                     enc::unpatchify(draw.noise[k], base.canvas));
      const Tensor pred = diff::denoiser_tokens(h, m.denoiser, enc::patchify(st.z), draw.steps[k], cond);
      l1 += diff::loss_l1(draw.noise[k], pred).item();
    }
    l1 /= static_cast<double>(draw.items.size());
    CHECK(b.l1 == doctest::Approx(l1).epsilon(1e-12));
    CHECK(b.l2 == doctest::Approx(iedm::loss_l2(f_i, f_s).item()).epsilon(1e-12));
    CHECK(b.l3 == doctest::Approx(iedm::loss_l3(f_i, f_bg).item()).epsilon(1e-12));
    CHECK(b.l4 == doctest::Approx(iedm::loss_l4(f_s, f_bg).item()).epsilon(1e-12));
  }

  SUBCASE("batch order does not change the loss") {
    const auto m = train::build_model(base);
    const auto data = train::prepare_data(m, train::make_config_dataset(base));
    const auto draw = train::draw_noise(rng, m, data.x_tokens.size());
    auto permuted = draw;
    std::reverse(permuted.items.begin(), permuted.items.end());
    std::reverse(permuted.steps.begin(), permuted.steps.end());
    std::reverse(permuted.noise.begin(), permuted.noise.end());
    nn::Graph g(m.store);
    const auto a = train::total_loss(g, m, data, draw).breakdown;
    const auto b = train::total_loss(g, m, data, permuted).breakdown;
    CHECK(a.l1 == b.l1);
    CHECK(a.l2 == b.l2);
    CHECK(a.l3 == b.l3);
    CHECK(a.l4 == b.l4);
    CHECK(a.total == b.total);
  }

  SUBCASE("all weights zero") {
    auto c = base;
    c.lambda1 = c.lambda2 = c.lambda3 = c.lambda4 = 0.0;
    const auto m = train::build_model(c);
    const auto data = train::prepare_data(m, train::make_config_dataset(c));
    train::LossBreakdown b;
    const auto grads = gradients(m, data, train::draw_noise(rng, m, data.x_tokens.size()), &b);
    CHECK(b.total == 0.0);
    for (const auto& [name, g] : grads) {
      for (double v : g.data()) CHECK_MESSAGE(v == 0.0, name);
    }
  }

  SUBCASE("adapter gradient flow") {
    for (auto mode : {ffm::CombineMode::explicit_bg, ffm::CombineMode::implicit}) {
      auto c = base;
      c.combine_mode = mode;
      c.lambda2 = c.lambda3 = c.lambda4 = 0.0;
      const auto m = train::build_model(c);
      const auto data = train::prepare_data(m, train::make_config_dataset(c));
      const auto grads = gradients(m, data, train::draw_noise(rng, m, data.x_tokens.size()));
      CHECK(grads.contains(iedm::kMaskLogits));
      CHECK(adapter_gradient_is_zero(grads) == (mode == ffm::CombineMode::explicit_bg));
    }
    auto c = base;
    c.combine_mode = ffm::CombineMode::explicit_bg;
    c.lambda1 = 0.0;
    const auto m = train::build_model(c);
    const auto data = train::prepare_data(m, train::make_config_dataset(c));
    CHECK_FALSE(adapter_gradient_is_zero(gradients(m, data, train::draw_noise(rng, m, data.x_tokens.size()))));
  }

  SUBCASE("disabled terms contribute nothing") {
    auto c = base;
    c.enable_l2 = c.enable_l4 = false;
    const auto m = train::build_model(c);
    const auto data = train::prepare_data(m, train::make_config_dataset(c));
    nn::Graph g(m.store);
    const auto terms = train::total_loss(g, m, data, train::draw_noise(rng, m, data.x_tokens.size()));
    CHECK_FALSE(terms.l2);
    CHECK(terms.l3);
    CHECK_FALSE(terms.l4);
    CHECK(terms.breakdown.l2 == 0.0);
    CHECK(terms.breakdown.l4 == 0.0);
    CHECK(terms.breakdown.total == c.lambda1 * terms.breakdown.l1 + c.lambda3 * terms.breakdown.l3);

    auto bad = c;
    bad.enable_iedm = false;
    CHECK_THROWS_AS(train::check_toggles(bad), ValidationError);
  }
}

TEST_CASE("train_step") {
  const auto c = based_config();
  auto m = train::build_model(c);
  const auto data = train::prepare_data(m, train::make_config_dataset(c));
  const auto before = train::snapshot(m.store);
  const auto loss = train::train_step(m, data);
  CHECK(std::isfinite(loss.total));
  CHECK(m.epoch == 1);
  CHECK(m.optimizer.step_count() == 1);
  for (const auto& [name, p] : m.store) {
    if (!p.trainable) CHECK_MESSAGE(p.value.bitwise_equal(before.at(name)), name);
  }
  CHECK_FALSE(m.store.value("text.v_star").bitwise_equal(before.at("text.v_star")));

  SUBCASE("non-finite loss names a node") {
    auto broken = train::build_model(c);
    const auto& w = broken.store.value("unet.input.weight");
    std::vector<double> v = w.to_vector();
    v[0] = std::nan("");
    broken.store.set_value("unet.input.weight", Tensor(w.shape(), v));
    try {
      (void)train::train_step(broken, data);
      FAIL("expected an exception");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("node") != std::string::npos);
    }
  }
}

TEST_CASE("train_run") {
  auto c = based_config();
  SUBCASE("zero epochs keeps the initialization") {
    c.epochs = 0;
    auto m = train::build_model(c);
    const auto init = train::snapshot(m.store);
    const auto report = train::train_run(m, train::prepare_data(m, train::make_config_dataset(c)));
    CHECK(report.epochs.empty());
    for (const auto& [name, p] : m.store) CHECK(p.value.bitwise_equal(init.at(name)));
  }
  SUBCASE("same seed, same series") {
    auto run = [&] {
      auto m = train::build_model(c);
      return train::train_run(m, train::prepare_data(m, train::make_config_dataset(c))).to_csv();
    };
    const auto a = run();
    CHECK(a == run());
    CHECK(a.starts_with("epoch,l1,l2,l3,l4,total\n1,"));
    c.seed = 1;
    CHECK(a != run());
  }
  SUBCASE("only the fine-tuning set changes") {
    auto m = train::build_model(c);
    const auto init = train::snapshot(m.store);
    (void)train::train_run(m, train::prepare_data(m, train::make_config_dataset(c)));
    for (const auto& [name, p] : m.store) {
      const bool changed = !p.value.bitwise_equal(init.at(name));
      if (!nn::is_finetune_parameter(name)) CHECK_MESSAGE(!changed, name);
    }
    CHECK_FALSE(m.store.value(iedm::kMaskLogits).bitwise_equal(init.at(iedm::kMaskLogits)));
    CHECK_FALSE(m.store.value("ffm.gate.weight").bitwise_equal(init.at("ffm.gate.weight")));
    CHECK_FALSE(m.store.value("text.mlp1.lora.up").bitwise_equal(init.at("text.mlp1.lora.up")));
    CHECK_FALSE(m.store.value("unet.block0.attn.v.lora.up").bitwise_equal(init.at("unet.block0.attn.v.lora.up")));
  }
  SUBCASE("training the base too") {
    c.train_unet_base = true;
    auto m = train::build_model(c);
    CHECK(m.store.get("unet.input.weight").trainable);
    CHECK(m.store.get(diff::kPosEmbed).trainable);
    CHECK_FALSE(m.store.get("image.patch.weight").trainable);
    const auto init = train::snapshot(m.store);
    (void)train::train_run(m, train::prepare_data(m, train::make_config_dataset(c)), 2);
    CHECK_FALSE(m.store.value("unet.input.weight").bitwise_equal(init.at("unet.input.weight")));
  }
}

TEST_CASE("checkpoints") {
  auto c = based_config();
  auto m = train::build_model(c);
  const auto data = train::prepare_data(m, train::make_config_dataset(c));
  (void)train::train_run(m, data, 3);

  SUBCASE("save, load, save is byte-identical") {
    const auto a = scratch("ckpt_a"), b = scratch("ckpt_b");
    train::save_checkpoint(m, a);
    const auto loaded = train::load_checkpoint(a);
    train::save_checkpoint(loaded, b);
    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(a)) {
      ++files;
      CHECK_MESSAGE(read_file(entry.path()) == read_file(b / entry.path().filename()), entry.path().filename());
    }
    CHECK(files == static_cast<std::size_t>(std::distance(fs::directory_iterator(b), fs::directory_iterator{})));
    CHECK(loaded.epoch == 3);
    CHECK(loaded.rng == m.rng);
    CHECK(loaded.config.base_checkpoint == c.base_checkpoint);
    for (const auto& [name, p] : m.store) {
      CHECK(p.value.bitwise_equal(loaded.store.value(name)));
      CHECK(p.trainable == loaded.store.get(name).trainable);
    }
  }
  SUBCASE("resume matches straight-through training") {
    auto straight = train::build_model(c);
    const auto full = train::train_run(straight, data);
    auto first = train::build_model(c);
    const auto head = train::train_run(first, data, 5);
    const auto dir = scratch("ckpt_resume");
    train::save_checkpoint(first, dir);
    auto resumed = train::load_checkpoint(dir);
    const auto tail = train::train_run(resumed, data);
    auto joined = head;
    joined.epochs.insert(joined.epochs.end(), tail.epochs.begin(), tail.epochs.end());
    CHECK(joined.to_csv() == full.to_csv());
    for (const auto& [name, p] : straight.store) CHECK(p.value.bitwise_equal(resumed.store.value(name)));
  }
  SUBCASE("mismatches are rejected") {
    const auto dir = scratch("ckpt_bad");
    train::save_checkpoint(m, dir);
    auto other = small_config();
    other.dim = 12;
    other.heads = 2;
    auto wide = train::build_model(other);
    try {
      train::load_weights(wide, dir);
      FAIL("expected a shape mismatch");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("shape") != std::string::npos);
    }
    fs::remove(dir / "tensor.ffm.gate.weight.bin");
    CHECK_THROWS_AS(train::load_checkpoint(dir), std::exception);
    io::write_text(dir / "manifest.txt", "format=other\n");
    CHECK_THROWS_AS(train::load_checkpoint(dir), ValidationError);
  }
}

TEST_CASE("decoupling statistics") {
  const auto c = based_config();
  const auto m = train::build_model(c);
  const auto data = train::prepare_data(m, train::make_config_dataset(c));
  const auto s = train::decoupling_stats(m, data);
  // The fresh adapter halves f_raw, which leaves cosines unchanged.
  double fs = 0.0;
  nn::Graph g(m.store);
  const auto f_s = enc::encode_text(g, m.text, data.dataset.prompt);
  for (const auto& f : data.f_raw) fs += ad::cosine_similarity(f, f_s).item();
  CHECK(s.cos_fi_fs == doctest::Approx(fs / static_cast<double>(data.f_raw.size())).epsilon(1e-12));
  CHECK(std::abs(s.cos_fi_fbg) <= 1.0);
}

TEST_CASE("end-to-end gradients on the miniature configuration") {
  const auto row = gradsuite::check_end_to_end(train::miniature_config(), 100);
  CHECK_MESSAGE(row.pass, row.worst);
  MESSAGE("worst end-to-end relative error: " << row.max_rel_error);
}
