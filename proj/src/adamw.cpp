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

#include "idfuse/adamw.hpp"

#include <cmath>

#include "idfuse/error.hpp"

namespace idfuse::nn {

double AdamW::lr_for(const std::string& name) const {
  const auto it = group_lr_.find(name);
  return lr_scale_ * (it == group_lr_.end() ? options_.lr : it->second);
}

void AdamW::step(ParamStore& store, const ad::GradientMap& grads) {
  for (const auto& [name, p] : store) {
    if (!p.trainable) continue;
    if (!grads.contains(name)) throw ValidationError("adamw: missing gradient for trainable parameter '" + name + "'");
    if (grads.at(name).shape() != p.value.shape()) {
      throw ValidationError("adamw: gradient shape mismatch for '" + name + "'");
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double bias1 = 1.0 - std::pow(options_.beta1, t);
  const double bias2 = 1.0 - std::pow(options_.beta2, t);

  for (const auto& name : store.names()) {
    const Parameter& p = store.get(name);
    if (!p.trainable) continue;
    const auto g = grads.at(name).data();
    auto [it, inserted] = moments_.try_emplace(name, Moments{ad::Tensor::zeros(p.value.shape()),
                                                             ad::Tensor::zeros(p.value.shape())});
    std::vector<double> m = it->second.first.to_vector();
    std::vector<double> v = it->second.second.to_vector();
    std::vector<double> w = p.value.to_vector();
    const double lr = lr_for(name);
    const double decay = 1.0 - lr * options_.weight_decay;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      w[i] = w[i] * decay - lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
    const auto shape = p.value.shape();
    it->second.first = ad::Tensor(shape, std::move(m));
    it->second.second = ad::Tensor(shape, std::move(v));
    store.set_value(name, ad::Tensor(shape, std::move(w)));
  }
}

void AdamW::restore(std::uint64_t step, std::map<std::string, Moments> moments) {
  step_ = step;
  moments_ = std::move(moments);
}

}  // namespace idfuse::nn
