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

#include "idfuse/autodiff.hpp"
#include "idfuse/nn.hpp"

namespace idfuse::nn {

struct AdamWOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// AdamW with decoupled weight decay. Parameters can be assigned to a group
/// with its own learning rate; everything else uses `options.lr`.
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  void set_group_lr(const std::string& name, double lr) { group_lr_[name] = lr; }
  /// Rescales the base rate and every group rate by `factor` relative to the
  /// rates given at construction (for schedules).
  void set_lr_scale(double factor) { lr_scale_ = factor; }
  double lr_for(const std::string& name) const;

  /// Updates every trainable parameter of `store`; frozen ones are untouched.
  /// Throws if a trainable parameter has no gradient.
  void step(ParamStore& store, const ad::GradientMap& grads);

  std::uint64_t step_count() const { return step_; }
  const AdamWOptions& options() const { return options_; }

  struct Moments {
    ad::Tensor first;
    ad::Tensor second;
  };
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(std::uint64_t step, std::map<std::string, Moments> moments);

 private:
  AdamWOptions options_;
  std::map<std::string, double> group_lr_;
  std::map<std::string, Moments> moments_;
  std::uint64_t step_ = 0;
  double lr_scale_ = 1.0;
};

}  // namespace idfuse::nn
