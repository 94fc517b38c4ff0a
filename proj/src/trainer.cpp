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

#include "idfuse/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "idfuse/error.hpp"

namespace idfuse::train {

using ad::Tensor;

namespace {

struct Field {
  std::string name;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

template <typename T>
Field number(const std::string& name, T TrainConfig::*member) {
  return {name,
          [member](const TrainConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return io::format_double(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          },
          [member, name](TrainConfig& c, const std::string& v) {
            if constexpr (std::is_floating_point_v<T>) {
              c.*member = io::parse_double(v, name);
            } else {
              const long long x = io::parse_int(v, name);
              if (x < 0) throw ValidationError(name + " must be non-negative");
              c.*member = static_cast<T>(x);
            }
          }};
}

Field flag(const std::string& name, bool TrainConfig::*member) {
  return {name, [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [member, name](TrainConfig& c, const std::string& v) { c.*member = io::parse_bool(v, name); }};
}

Field text(const std::string& name, std::string TrainConfig::*member) {
  return {name, [member](const TrainConfig& c) { return c.*member; },
          [member](TrainConfig& c, const std::string& v) { c.*member = v; }};
}

template <typename E>
Field choice(const std::string& name, E TrainConfig::*member, std::string (*to)(E), E (*from)(const std::string&)) {
  return {name, [member, to](const TrainConfig& c) { return to(c.*member); },
          [member, from](TrainConfig& c, const std::string& v) { c.*member = from(v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      number("lambda1", &TrainConfig::lambda1),
      number("lambda2", &TrainConfig::lambda2),
      number("lambda3", &TrainConfig::lambda3),
      number("lambda4", &TrainConfig::lambda4),
      flag("enable_iedm", &TrainConfig::enable_iedm),
      flag("enable_ffm", &TrainConfig::enable_ffm),
      flag("enable_l2", &TrainConfig::enable_l2),
      flag("enable_l3", &TrainConfig::enable_l3),
      flag("enable_l4", &TrainConfig::enable_l4),
      choice("combine_mode", &TrainConfig::combine_mode, &ffm::combine_mode_name, &ffm::combine_mode_from_name),
      choice("cosine_mode", &TrainConfig::cosine_mode, &iedm::cosine_mode_name, &iedm::cosine_mode_from_name),
      choice("mask_position", &TrainConfig::mask_position, &iedm::mask_position_name, &iedm::mask_position_from_name),
      choice("inpainter", &TrainConfig::inpainter, &world::inpainter_name, &world::inpainter_from_name),
      number("lr", &TrainConfig::lr),
      number("v_star_lr", &TrainConfig::v_star_lr),
      number("weight_decay", &TrainConfig::weight_decay),
      number("batch_size", &TrainConfig::batch_size),
      number("epochs", &TrainConfig::epochs),
      number("seed", &TrainConfig::seed),
      number("dim", &TrainConfig::dim),
      number("canvas", &TrainConfig::canvas),
      number("lora_rank", &TrainConfig::lora_rank),
      number("experts", &TrainConfig::experts),
      flag("ffm_gating", &TrainConfig::ffm_gating),
      number("heads", &TrainConfig::heads),
      number("unet_hidden", &TrainConfig::unet_hidden),
      number("unet_blocks", &TrainConfig::unet_blocks),
      number("timesteps", &TrainConfig::timesteps),
      number("beta_start", &TrainConfig::beta_start),
      number("beta_end", &TrainConfig::beta_end),
      number("encoder_seed", &TrainConfig::encoder_seed),
      number("base_seed", &TrainConfig::base_seed),
      text("base_checkpoint", &TrainConfig::base_checkpoint),
      flag("train_unet_base", &TrainConfig::train_unet_base),
      text("subject_shape", &TrainConfig::subject_shape),
      text("subject_color", &TrainConfig::subject_color),
      number("dataset_size", &TrainConfig::dataset_size),
      number("dataset_seed", &TrainConfig::dataset_seed),
      number("pretrain_steps", &TrainConfig::pretrain_steps),
      number("pretrain_lr", &TrainConfig::pretrain_lr),
      number("pretrain_snr_gamma", &TrainConfig::pretrain_snr_gamma),
      number("samples_per_prompt", &TrainConfig::samples_per_prompt),
      text("eval_phrases", &TrainConfig::eval_phrases),
  };
  return table;
}

}  // namespace

io::KeyValues TrainConfig::to_kv() const {
  io::KeyValues kv;
  for (const auto& f : fields()) kv.set(f.name, f.get(*this));
  return kv;
}

void TrainConfig::apply(const io::KeyValues& kv) {
  for (const auto& [key, value] : kv.entries()) {
    const auto it = std::find_if(fields().begin(), fields().end(), [&](const Field& f) { return f.name == key; });
    if (it == fields().end()) throw ValidationError("unknown config key '" + key + "'");
    it->set(*this, value);
  }
}

TrainConfig TrainConfig::from_kv(const io::KeyValues& kv) {
  TrainConfig c;
  c.apply(kv);
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) { return from_kv(io::KeyValues::load(path)); }

void TrainConfig::validate() const {
  for (double l : {lambda1, lambda2, lambda3, lambda4}) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ValidationError("loss weights must be finite and >= 0");
  }
  if (experts < 1) throw ValidationError("experts must be >= 1");
  if (!ffm_gating && experts != 1) throw ValidationError("ffm_gating=false requires experts=1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (dim < 2 || dim % 2 != 0) throw ValidationError("dim must be even and >= 2");
  if (heads < 1 || dim % heads != 0) throw ValidationError("dim must be divisible by heads");
  if (canvas < 8 || canvas % enc::kPatch != 0) throw ValidationError("canvas must be a multiple of 4 and >= 8");
  if (timesteps < 1) throw ValidationError("timesteps must be >= 1");
  if (!(lr > 0.0) || !(v_star_lr > 0.0) || !(pretrain_lr > 0.0)) throw ValidationError("learning rates must be > 0");
  if (weight_decay < 0.0) throw ValidationError("weight_decay must be >= 0");
  if (dataset_size < 1 || dataset_size > 6) throw ValidationError("dataset_size must be in [1, 6]");
  (void)diff::make_schedule(timesteps, beta_start, beta_end);
  (void)identity();
  (void)phrases();
  check_toggles(*this);
}

world::SubjectIdentity TrainConfig::identity() const {
  return world::make_identity(world::shape_from_name(subject_shape), subject_color);
}

diff::DenoiserShape TrainConfig::denoiser_shape() const {
  return {dim, canvas, heads, unet_hidden, unet_blocks, lora_rank};
}

std::vector<std::string> TrainConfig::phrases() const {
  std::vector<std::string> out;
  if (eval_phrases == "all") {
    for (const auto& p : world::scene_phrases()) out.push_back(p.phrase);
    return out;
  }
  std::stringstream in(eval_phrases);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto first = item.find_first_not_of(' ');
    const auto last = item.find_last_not_of(' ');
    if (first == std::string::npos) continue;
    item = item.substr(first, last - first + 1);
    (void)world::lookup_phrase(item);
    out.push_back(item);
  }
  if (out.empty()) throw ValidationError("eval_phrases lists no phrase");
  return out;
}

TrainConfig miniature_config() {
  TrainConfig c;
  c.lambda2 = c.lambda3 = c.lambda4 = 1.0;
  c.dim = 8;
  c.canvas = 8;
  c.heads = 2;
  c.unet_hidden = 8;
  c.unet_blocks = 1;
  c.lora_rank = 2;
  c.experts = 2;
  c.batch_size = 2;
  c.timesteps = 10;
  c.dataset_size = 4;
  c.epochs = 1;
  return c;
}

void check_toggles(const TrainConfig& config) {
  if (!config.enable_iedm && (config.enable_l2 || config.enable_l3 || config.enable_l4)) {
    throw ValidationError("enable_l2, enable_l3 and enable_l4 require enable_iedm");
  }
}

bool is_trained(const TrainConfig& config, const std::string& name) {
  return nn::is_finetune_parameter(name) || (config.train_unet_base && name.starts_with("unet."));
}

namespace {

/// "<file> <shape>" manifest entry.
std::pair<std::string, ad::Shape> split_entry(const std::string& entry, const std::string& what) {
  const auto space = entry.find(' ');
  if (space == std::string::npos) throw ValidationError("malformed manifest entry for " + what);
  return {entry.substr(0, space), io::parse_shape(entry.substr(space + 1))};
}

std::string entry(const std::string& file, const ad::Shape& shape) { return file + " " + ad::to_string(shape); }

/// Every frozen tensor comes from the base checkpoint; fine-tuning slots keep
/// their fresh initialization.
void load_base(nn::ParamStore& store, const std::filesystem::path& dir) {
  const auto kv = io::KeyValues::load(dir / "manifest.txt");
  for (const auto& name : store.names()) {
    if (nn::is_finetune_parameter(name)) continue;
    if (!kv.contains("tensor." + name)) throw ValidationError("base checkpoint is missing tensor '" + name + "'");
    const auto [file, shape] = split_entry(kv.get("tensor." + name), name);
    if (shape != store.value(name).shape()) {
      throw ValidationError("base checkpoint tensor '" + name + "' has shape " + ad::to_string(shape) + ", expected " +
                            ad::to_string(store.value(name).shape()));
    }
    store.set_value(name, io::read_tensor(dir / file, shape, name));
  }
}

}  // namespace

Model build_model(const TrainConfig& config) {
  config.validate();
  Model m;
  m.config = config;
  m.text = enc::make_text_encoder(m.store, config.dim, config.encoder_seed, config.lora_rank);
  m.image = enc::make_image_encoder(m.store, config.dim, config.canvas, config.encoder_seed + 1);
  if (config.enable_iedm) {
    m.adapter = iedm::make_adapter(m.store, config.dim, mix_seed(config.seed, 1), config.mask_position);
  }
  if (config.enable_ffm) {
    m.fusion = ffm::make_ffm(m.store, config.dim, config.experts, mix_seed(config.seed, 2), config.ffm_gating);
  }
  m.denoiser = diff::make_denoiser(m.store, config.denoiser_shape(), config.base_seed);
  if (!config.base_checkpoint.empty()) load_base(m.store, config.base_checkpoint);
  m.schedule = diff::make_schedule(config.timesteps, config.beta_start, config.beta_end);

  enc::init_v_star(m.store, m.text, config.identity().class_word);
  nn::select_trainable(m.store);
  if (config.train_unet_base) {
    for (const auto& name : m.store.names()) {
      if (is_trained(config, name)) m.store.set_trainable(name, true);
    }
  }
  m.optimizer = nn::AdamW({.lr = config.lr, .weight_decay = config.weight_decay});
  m.optimizer.set_group_lr("text.v_star", config.v_star_lr);
  m.rng = Rng(mix_seed(config.seed, hash_name("batches")));
  return m;
}

world::SubjectDataset make_config_dataset(const TrainConfig& config) {
  // Smaller sets are prefixes of the 4-scene draw.
  const int n = static_cast<int>(config.dataset_size);
  auto ds = world::make_dataset(config.identity(), std::max(n, 4), config.dataset_seed, config.canvas);
  ds.scenes.resize(config.dataset_size);
  return ds;
}

TrainData prepare_data(const Model& model, world::SubjectDataset dataset) {
  if (dataset.scenes.empty()) throw ValidationError("dataset has no scenes");
  TrainData d;
  for (const auto& scene : dataset.scenes) {
    if (scene.identity != dataset.identity) throw ValidationError("dataset scenes must share one subject");
    if (scene.image.shape() != ad::Shape{3, model.config.canvas, model.config.canvas}) {
      throw ValidationError("scene image " + ad::to_string(scene.image.shape()) + " does not match canvas " +
                            std::to_string(model.config.canvas));
    }
    d.x_tokens.push_back(ad::scale(enc::patchify(scene.image, 0.5), 2.0));
    if (model.adapter) {
      d.f_raw.push_back(enc::encode_image(model.store, model.image, scene.image));
      d.f_bg.push_back(iedm::explicit_branch(model.store, model.image, scene, model.config.inpainter));
    }
  }
  d.dataset = std::move(dataset);
  return d;
}

NoiseDraw draw_noise(Rng& rng, const Model& model, std::size_t scenes) {
  if (scenes == 0) throw ValidationError("cannot draw a batch from an empty dataset");
  NoiseDraw draw;
  const ad::Shape shape{model.denoiser.tokens, 3 * enc::kPatch * enc::kPatch};
  for (std::size_t b = 0; b < model.config.batch_size; ++b) {
    draw.items.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(scenes) - 1)));
    draw.steps.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(model.schedule.steps) - 1)));
    draw.noise.push_back(diff::standard_normal(rng, shape));
  }
  return draw;
}

LossTerms total_loss(nn::Graph& g, const Model& model, const TrainData& data, const NoiseDraw& draw) {
  const auto& cfg = model.config;
  check_toggles(cfg);
  const std::size_t n = draw.items.size();
  if (n == 0 || draw.steps.size() != n || draw.noise.size() != n) throw ValidationError("malformed batch draw");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (draw.items[a] != draw.items[b]) return draw.items[a] < draw.items[b];
    if (draw.steps[a] != draw.steps[b]) return draw.steps[a] < draw.steps[b];
    const auto x = draw.noise[a].data();
    const auto y = draw.noise[b].data();
    return std::lexicographical_compare(x.begin(), x.end(), y.begin(), y.end());
  });

  const Tensor f_s = enc::encode_text(g, model.text, data.dataset.prompt);

  // Adapter output and conditioning feature per distinct scene.
  std::map<std::size_t, Tensor> f_i;
  std::map<std::size_t, Tensor> condition;
  for (std::size_t k : order) {
    const std::size_t item = draw.items[k];
    if (item >= data.x_tokens.size()) throw ValidationError("batch item out of range");
    if (condition.contains(item)) continue;
    Tensor f_com = f_s;
    if (model.adapter) {
      f_i.emplace(item, iedm::adapter_forward(g, *model.adapter, data.f_raw[item]));
      const Tensor& other = cfg.combine_mode == ffm::CombineMode::implicit ? f_i.at(item) : data.f_bg[item];
      f_com = ffm::combine(f_s, other);
    }
    condition.emplace(item, model.fusion ? ffm::fuse(g, *model.fusion, f_com).f_r : f_com);
  }

  LossTerms out;
  std::optional<Tensor> l1_sum;
  for (std::size_t k : order) {
    const std::size_t item = draw.items[k];
    const std::size_t t = draw.steps[k];
    if (t >= model.schedule.steps) throw ValidationError("timestep out of range");
    const double a = std::sqrt(model.schedule.alpha_bars[t]);
    const double b = std::sqrt(1.0 - model.schedule.alpha_bars[t]);
    const Tensor& x = data.x_tokens[item];
    const Tensor& eps = draw.noise[k];
    std::vector<double> z(x.numel());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = a * x[i] + b * eps[i];
    const Tensor pred = diff::denoiser_tokens(g, model.denoiser, Tensor(x.shape(), std::move(z)), t, condition.at(item));
    const Tensor term = diff::loss_l1(eps, pred);
    l1_sum = l1_sum ? ad::add(*l1_sum, term) : term;
  }
  out.l1 = ad::scale(*l1_sum, 1.0 / static_cast<double>(n));

  std::vector<Tensor> fi_items;
  std::vector<Tensor> fbg_items;
  if (model.adapter) {
    for (std::size_t k : order) {
      fi_items.push_back(f_i.at(draw.items[k]));
      fbg_items.push_back(data.f_bg[draw.items[k]]);
    }
  }
  if (cfg.enable_l2) out.l2 = iedm::loss_l2(fi_items, f_s, cfg.cosine_mode);
  if (cfg.enable_l3) out.l3 = iedm::loss_l3(fi_items, fbg_items);
  if (cfg.enable_l4) out.l4 = iedm::loss_l4(f_s, fbg_items, cfg.cosine_mode);

  Tensor total = ad::scale(out.l1, cfg.lambda1);
  if (out.l2) total = ad::add(total, ad::scale(*out.l2, cfg.lambda2));
  if (out.l3) total = ad::add(total, ad::scale(*out.l3, cfg.lambda3));
  if (out.l4) total = ad::add(total, ad::scale(*out.l4, cfg.lambda4));
  out.total = total;

  out.breakdown.l1 = out.l1.item();
  out.breakdown.l2 = out.l2 ? out.l2->item() : 0.0;
  out.breakdown.l3 = out.l3 ? out.l3->item() : 0.0;
  out.breakdown.l4 = out.l4 ? out.l4->item() : 0.0;
  out.breakdown.total = total.item();
  return out;
}

namespace {

void fill_missing(const nn::ParamStore& store, ad::GradientMap& grads) {
  for (const auto& [name, p] : store) {
    if (p.trainable && !grads.contains(name)) grads.set(name, Tensor::zeros(p.value.shape()));
  }
}

}  // namespace

LossBreakdown train_step(Model& model, const TrainData& data) {
  const NoiseDraw draw = draw_noise(model.rng, model, data.x_tokens.size());
  ad::Tape tape;
  nn::Graph g(model.store, &tape);
  const LossTerms terms = total_loss(g, model, data, draw);
  if (!std::isfinite(terms.breakdown.total)) {
    const auto where = tape.first_non_finite();
    throw std::runtime_error("non-finite loss at epoch " + std::to_string(model.epoch) + ": first non-finite value at " +
                             where.value_or("the loss node"));
  }
  ad::GradientMap grads;
  if (terms.total.requires_grad()) grads = tape.backward(terms.total);
  fill_missing(model.store, grads);
  model.optimizer.step(model.store, grads);
  ++model.epoch;
  return terms.breakdown;
}

std::string TrainReport::to_csv() const {
  std::string out = "epoch,l1,l2,l3,l4,total\n";
  for (const auto& r : epochs) {
    out += std::to_string(r.epoch) + "," + io::format_double(r.loss.l1) + "," + io::format_double(r.loss.l2) + "," +
           io::format_double(r.loss.l3) + "," + io::format_double(r.loss.l4) + "," + io::format_double(r.loss.total) +
           "\n";
  }
  return out;
}

TrainReport train_run(Model& model, const TrainData& data, std::size_t stop_at) {
  TrainReport report;
  const std::size_t end = std::min(model.config.epochs, stop_at);
  while (model.epoch < end) {
    const LossBreakdown loss = train_step(model, data);
    report.epochs.push_back({model.epoch, loss});
  }
  return report;
}

namespace {

constexpr const char* kFormat = "idfuse-checkpoint-1";

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::KeyValues kv;
  kv.set("format", kFormat);
  kv.set("epoch", std::to_string(model.epoch));
  kv.set("optimizer.step", std::to_string(model.optimizer.step_count()));
  kv.set("rng", model.rng.state());
  const io::KeyValues config_kv = model.config.to_kv();
  for (const auto& [key, value] : config_kv.entries()) kv.set("config." + key, value);
  for (const auto& [name, p] : model.store) {
    const std::string file = "tensor." + name + ".bin";
    io::write_tensor(dir / file, p.value);
    kv.set("tensor." + name, entry(file, p.value.shape()));
  }
  for (const auto& [name, m] : model.optimizer.moments()) {
    const std::string first = "moment1." + name + ".bin";
    const std::string second = "moment2." + name + ".bin";
    io::write_tensor(dir / first, m.first);
    io::write_tensor(dir / second, m.second);
    kv.set("moment1." + name, entry(first, m.first.shape()));
    kv.set("moment2." + name, entry(second, m.second.shape()));
  }
  kv.save(dir / "manifest.txt");
}

void load_weights(Model& model, const std::filesystem::path& dir) {
  const auto kv = io::KeyValues::load(dir / "manifest.txt");
  if (kv.get_or("format", "") != kFormat) throw ValidationError(dir.string() + " is not a checkpoint");
  for (const auto& [key, value] : kv.entries()) {
    if (key.starts_with("tensor.") && !model.store.contains(key.substr(7))) {
      throw ValidationError("checkpoint tensor '" + key.substr(7) + "' does not exist in this model");
    }
  }
  for (const auto& name : model.store.names()) {
    if (!kv.contains("tensor." + name)) throw ValidationError("checkpoint is missing tensor '" + name + "'");
    const auto [file, shape] = split_entry(kv.get("tensor." + name), name);
    const auto& expected = model.store.value(name).shape();
    if (shape != expected) {
      throw ValidationError("checkpoint tensor '" + name + "' has shape " + ad::to_string(shape) + ", model expects " +
                            ad::to_string(expected));
    }
    model.store.set_value(name, io::read_tensor(dir / file, shape, name));
  }
}

Model load_checkpoint(const std::filesystem::path& dir) {
  const auto kv = io::KeyValues::load(dir / "manifest.txt");
  if (kv.get_or("format", "") != kFormat) throw ValidationError(dir.string() + " is not a checkpoint");
  io::KeyValues config_kv;
  for (const auto& [key, value] : kv.entries()) {
    if (key.starts_with("config.")) config_kv.set(key.substr(7), value);
  }
  TrainConfig config = TrainConfig::from_kv(config_kv);
  const std::string base = config.base_checkpoint;
  config.base_checkpoint.clear();
  Model model = build_model(config);
  model.config.base_checkpoint = base;
  load_weights(model, dir);

  std::map<std::string, nn::AdamW::Moments> moments;
  for (const auto& [key, value] : kv.entries()) {
    if (!key.starts_with("moment1.")) continue;
    const std::string name = key.substr(8);
    if (!model.store.contains(name)) throw ValidationError("optimizer state for unknown tensor '" + name + "'");
    const auto [f1, s1] = split_entry(value, name);
    const auto [f2, s2] = split_entry(kv.get("moment2." + name), name);
    const auto& expected = model.store.value(name).shape();
    if (s1 != expected || s2 != expected) throw ValidationError("optimizer state shape mismatch for '" + name + "'");
    moments[name] = {io::read_tensor(dir / f1, s1, name + " (moment 1)"), io::read_tensor(dir / f2, s2, name + " (moment 2)")};
  }
  model.optimizer.restore(static_cast<std::uint64_t>(kv.get_int("optimizer.step")), std::move(moments));
  model.epoch = static_cast<std::size_t>(kv.get_int("epoch"));
  model.rng.set_state(kv.get("rng"));
  return model;
}

PretrainReport pretrain_base(const TrainConfig& config, const std::filesystem::path& out_dir, bool verbose) {
  TrainConfig cfg = config;
  cfg.lora_rank = 0;
  cfg.enable_iedm = cfg.enable_ffm = false;
  cfg.enable_l2 = cfg.enable_l3 = cfg.enable_l4 = false;
  cfg.base_checkpoint.clear();
  cfg.train_unet_base = false;
  Model m = build_model(cfg);
  for (const auto& name : m.store.names()) {
    m.store.set_trainable(name, name.starts_with("unet."));
  }
  m.optimizer = nn::AdamW({.lr = cfg.pretrain_lr, .weight_decay = 0.0});

  // The text encoder is frozen, so every caption is encoded once.
  const auto identities = world::all_identities();
  const auto& phrases = world::scene_phrases();
  std::vector<Tensor> conditions;
  {
    nn::Graph g(m.store);
    for (const auto& id : identities) {
      for (const auto& p : phrases) conditions.push_back(enc::encode_text(g, m.text, world::build_generic_prompt(id, p.phrase)));
    }
  }

  Rng rng(mix_seed(cfg.base_seed, hash_name("pretrain")));
  const ad::Shape noise_shape{m.denoiser.tokens, 3 * enc::kPatch * enc::kPatch};
  PretrainReport report;
  const double pi = std::acos(-1.0);
  for (std::size_t step = 0; step < cfg.pretrain_steps; ++step) {
    const double progress = static_cast<double>(step) / static_cast<double>(cfg.pretrain_steps);
    m.optimizer.set_lr_scale(0.05 + 0.95 * 0.5 * (1.0 + std::cos(pi * progress)));
    ad::Tape tape;
    nn::Graph g(m.store, &tape);
    std::optional<Tensor> denoise;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto id_index = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(identities.size()) - 1));
      const auto ph_index = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(phrases.size()) - 1));
      const auto spec = world::sample_spec(rng, phrases[ph_index].kind, cfg.canvas);
      const auto scene = world::render_scene(identities[id_index], spec, 0);
      const std::size_t t = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(m.schedule.steps) - 1));
      const Tensor eps = diff::standard_normal(rng, noise_shape);
      const Tensor x = enc::patchify(scene.image, 0.5);
      const double a = std::sqrt(m.schedule.alpha_bars[t]);
      const double s = std::sqrt(1.0 - m.schedule.alpha_bars[t]);
      std::vector<double> z(x.numel());
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = a * 2.0 * x[i] + s * eps[i];
      const Tensor& caption = conditions[id_index * phrases.size() + ph_index];
      const Tensor pred = diff::denoiser_tokens(g, m.denoiser, Tensor(x.shape(), std::move(z)), t, caption);
      // min(SNR, gamma) / SNR: damps the near-clean steps whose noise is
      // unpredictable at this scale.
      const double snr = m.schedule.alpha_bars[t] / (1.0 - m.schedule.alpha_bars[t]);
      const double weight = cfg.pretrain_snr_gamma > 0.0 ? std::min(snr, cfg.pretrain_snr_gamma) / snr : 1.0;
      const Tensor term = ad::scale(diff::loss_l1(eps, pred), weight);
      denoise = denoise ? ad::add(*denoise, term) : term;
    }
    const Tensor loss = ad::scale(*denoise, 1.0 / static_cast<double>(cfg.batch_size));
    if (!std::isfinite(loss.item())) throw std::runtime_error("pretraining diverged at step " + std::to_string(step));
    ad::GradientMap grads = tape.backward(loss);
    fill_missing(m.store, grads);
    m.optimizer.step(m.store, grads);
    report.losses.push_back(loss.item());
    if (verbose && (step + 1) % 100 == 0) {
      double recent = 0.0;
      const std::size_t w = std::min<std::size_t>(100, report.losses.size());
      for (std::size_t i = report.losses.size() - w; i < report.losses.size(); ++i) recent += report.losses[i];
      std::cerr << "pretrain step " << step + 1 << " loss " << recent / static_cast<double>(w) << "\n";
    }
  }
  m.epoch = cfg.pretrain_steps;
  save_checkpoint(m, out_dir);
  return report;
}

std::map<std::string, Tensor> snapshot(const nn::ParamStore& store) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, p] : store) out.emplace(name, p.value);
  return out;
}

DecouplingStats decoupling_stats(const Model& model, const TrainData& data) {
  if (!model.adapter) throw ValidationError("decoupling statistics need the IEDM adapter");
  nn::Graph g(model.store);
  const Tensor f_s = enc::encode_text(g, model.text, data.dataset.prompt);
  DecouplingStats s;
  const std::size_t n = data.f_raw.size();
  for (std::size_t k = 0; k < n; ++k) {
    const Tensor f_i = iedm::adapter_forward(g, *model.adapter, data.f_raw[k]);
    s.cos_fi_fs += ad::cosine_similarity(f_i, f_s).item();
    s.cos_fi_fbg += ad::cosine_similarity(f_i, data.f_bg[k]).item();
  }
  s.cos_fi_fs /= static_cast<double>(n);
  s.cos_fi_fbg /= static_cast<double>(n);
  return s;
}

}  // namespace idfuse::train
