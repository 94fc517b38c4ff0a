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

#include "idfuse/encoders.hpp"

#include "idfuse/error.hpp"
#include "idfuse/instrument.hpp"
#include "idfuse/synthworld.hpp"

namespace idfuse::enc {

using ad::Tensor;

Vocab::Vocab() {
  tokens_ = {"a", "photo", "of", world::kVStar};
  for (auto s : world::kAllShapes) tokens_.push_back(world::class_word_for(s));
  for (const auto& c : world::subject_palette()) tokens_.push_back(c.name);
  for (const auto& p : world::scene_phrases()) {
    for (const auto& t : world::tokenize(p.phrase)) {
      if (std::find(tokens_.begin(), tokens_.end(), t) == tokens_.end()) tokens_.push_back(t);
    }
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], i);
}

std::size_t Vocab::id(const std::string& token) const {
  const auto it = ids_.find(token);
  if (it == ids_.end()) throw ValidationError("unknown token '" + token + "'");
  return it->second;
}

std::size_t Vocab::v_star_id() const { return id(world::kVStar); }

std::vector<std::size_t> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<std::size_t> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

TextEncoder make_text_encoder(nn::ParamStore& store, std::size_t dim, std::uint64_t seed, std::size_t lora_rank) {
  TextEncoder enc;
  enc.dim = dim;
  store.add("text.embedding", nn::normal_init(seed, "text.embedding", {enc.vocab.size(), dim}, kEmbeddingScale));
  store.add("text.v_star", Tensor::zeros({dim}));
  enc.mlp1 = nn::make_linear(store, "text.mlp1", dim, dim, seed, nn::Init::fan_in, lora_rank);
  enc.mlp2 = nn::make_linear(store, "text.mlp2", dim, dim, seed, nn::Init::fan_in, lora_rank);
  return enc;
}

Tensor mean_rows(const Tensor& x) {
  const std::size_t n = x.dim(0);
  return ad::matmul(Tensor::full({n}, 1.0 / static_cast<double>(n)), x);
}

Tensor encode_text(nn::Graph& g, const TextEncoder& enc, const std::vector<std::string>& tokens) {
  if (tokens.empty()) throw ValidationError("encode_text: empty token sequence");
  const auto ids = enc.vocab.encode(tokens);
  const std::size_t n = ids.size(), d = enc.dim, v_star = enc.vocab.v_star_id();
  const Tensor& table = g.store().value("text.embedding");

  std::vector<double> rows(n * d, 0.0);
  std::vector<double> v_star_slots(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] == v_star) {
      v_star_slots[i] = 1.0;
      continue;
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                rows.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Tensor x = Tensor::matrix(n, d, std::move(rows));
  if (std::find(ids.begin(), ids.end(), v_star) != ids.end()) {
    const Tensor slot = ad::reshape(g.param("text.v_star"), {1, d});
    x = ad::add(x, ad::matmul(Tensor::matrix(n, 1, std::move(v_star_slots)), slot));
  }
  const Tensor h = ad::add(x, nn::linear_forward(g, enc.mlp2, ad::gelu(nn::linear_forward(g, enc.mlp1, x))));
  return mean_rows(h);
}

void init_v_star(nn::ParamStore& store, const TextEncoder& enc, const std::string& class_word) {
  const std::size_t id = enc.vocab.id(class_word);
  if (id == enc.vocab.v_star_id()) throw ValidationError("init_v_star: V* cannot initialize itself");
  const Tensor& table = store.value("text.embedding");
  const auto begin = table.data().begin() + static_cast<std::ptrdiff_t>(id * enc.dim);
  store.set_value("text.v_star", Tensor::vector(std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(enc.dim))));
}

Tensor patchify(const Tensor& image, double offset) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2) || image.dim(1) % kPatch != 0) {
    throw ValidationError("expected a square [3, H, W] image with H divisible by 4, got " +
                          ad::to_string(image.shape()));
  }
  const std::size_t c = image.dim(1), per_side = c / kPatch, width = 3 * kPatch * kPatch;
  std::vector<double> out(per_side * per_side * width);
  for (std::size_t pi = 0; pi < per_side; ++pi) {
    for (std::size_t pj = 0; pj < per_side; ++pj) {
      double* row = out.data() + (pi * per_side + pj) * width;
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t a = 0; a < kPatch; ++a)
          for (std::size_t b = 0; b < kPatch; ++b)
            *row++ = image[(ch * c + pi * kPatch + a) * c + pj * kPatch + b] - offset;
    }
  }
  return Tensor::matrix(per_side * per_side, width, std::move(out));
}

Tensor unpatchify(const Tensor& tokens, std::size_t canvas) {
  const std::size_t per_side = canvas / kPatch, width = 3 * kPatch * kPatch;
  if (tokens.shape() != ad::Shape{per_side * per_side, width}) {
    throw ValidationError("unpatchify: expected " + ad::to_string({per_side * per_side, width}) + ", got " +
                          ad::to_string(tokens.shape()));
  }
  std::vector<double> img(3 * canvas * canvas);
  for (std::size_t pi = 0; pi < per_side; ++pi) {
    for (std::size_t pj = 0; pj < per_side; ++pj) {
      std::size_t k = (pi * per_side + pj) * width;
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t a = 0; a < kPatch; ++a)
          for (std::size_t b = 0; b < kPatch; ++b) img[(ch * canvas + pi * kPatch + a) * canvas + pj * kPatch + b] = tokens[k++];
    }
  }
  return Tensor({3, canvas, canvas}, std::move(img));
}

ImageEncoder make_image_encoder(nn::ParamStore& store, std::size_t dim, std::size_t canvas, std::uint64_t seed) {
  ImageEncoder enc;
  enc.dim = dim;
  enc.canvas = canvas;
  enc.patch = nn::make_linear(store, "image.patch", 3 * kPatch * kPatch, dim, seed);
  enc.fc1 = nn::make_linear(store, "image.mlp.fc1", dim, dim, seed);
  enc.fc2 = nn::make_linear(store, "image.mlp.fc2", dim, dim, seed);
  return enc;
}

Tensor encode_image(nn::Graph& g, const ImageEncoder& enc, const Tensor& image) {
  if (image.shape() != ad::Shape{3, enc.canvas, enc.canvas}) {
    throw ValidationError("encode_image: expected " + ad::to_string({3, enc.canvas, enc.canvas}) + ", got " +
                          ad::to_string(image.shape()));
  }
  instrument::count_image_encoder();
  const Tensor h = nn::linear_forward(g, enc.patch, patchify(image, 0.5));
  return mean_rows(ad::add(h, nn::linear_forward(g, enc.fc2, ad::gelu(nn::linear_forward(g, enc.fc1, h)))));
}

Tensor encode_image(const nn::ParamStore& store, const ImageEncoder& enc, const Tensor& image) {
  nn::Graph g(store);
  return encode_image(g, enc, image.detach());
}

}  // namespace idfuse::enc
