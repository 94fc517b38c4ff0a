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
#include <map>
#include <string>
#include <vector>

#include "idfuse/nn.hpp"

namespace idfuse::enc {

inline constexpr std::size_t kPatch = 4;
/// Standard deviation of the token table. Small enough that the V* row can
/// travel between token embeddings within a fine-tuning run.
inline constexpr double kEmbeddingScale = 0.1;

/// Fixed whitespace vocabulary: articles, class words, subject colors, the
/// scene-phrase words and the reserved V* token.
class Vocab {
 public:
  Vocab();
  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return ids_.contains(token); }
  /// Throws ValidationError for tokens outside the vocabulary.
  std::size_t id(const std::string& token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::size_t v_star_id() const;
  std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> ids_;
};

/// Token embeddings -> residual two-layer MLP (LoRA slots) -> mean pool.
/// The V* row lives in its own parameter so it can train while the table
/// stays frozen.
struct TextEncoder {
  Vocab vocab;
  std::size_t dim = 0;
  nn::LinearLayer mlp1;
  nn::LinearLayer mlp2;
};

TextEncoder make_text_encoder(nn::ParamStore& store, std::size_t dim, std::uint64_t seed, std::size_t lora_rank);
ad::Tensor encode_text(nn::Graph& g, const TextEncoder& enc, const std::vector<std::string>& tokens);
/// Copies the class word's embedding row into the V* slot.
void init_v_star(nn::ParamStore& store, const TextEncoder& enc, const std::string& class_word);

/// Frozen 4x4 patch projection, one residual MLP, mean pool over patches.
/// Inputs are centered at 0.5 and carry no biases, so a uniform mid-gray
/// image encodes to the zero vector.
struct ImageEncoder {
  std::size_t dim = 0;
  std::size_t canvas = 0;
  nn::LinearLayer patch;
  nn::LinearLayer fc1;
  nn::LinearLayer fc2;
};

ImageEncoder make_image_encoder(nn::ParamStore& store, std::size_t dim, std::size_t canvas, std::uint64_t seed);
ad::Tensor encode_image(nn::Graph& g, const ImageEncoder& enc, const ad::Tensor& image);
/// Convenience wrapper evaluating off the tape.
ad::Tensor encode_image(const nn::ParamStore& store, const ImageEncoder& enc, const ad::Tensor& image);

/// [3, H, W] -> [(H/4)*(W/4), 48] with each row a channel-major 4x4 patch.
ad::Tensor patchify(const ad::Tensor& image, double offset = 0.0);
/// Inverse of patchify for a [(H/4)*(W/4), 48] value tensor.
ad::Tensor unpatchify(const ad::Tensor& tokens, std::size_t canvas);

/// Mean over the rows of an [n, d] tensor.
ad::Tensor mean_rows(const ad::Tensor& x);

}  // namespace idfuse::enc
