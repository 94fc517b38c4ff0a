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

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "idfuse/autodiff.hpp"

namespace idfuse::ad {

using ParamValues = std::map<std::string, Tensor>;

/// A scalar function of named inputs. It is called with tape leaves for the
/// analytic pass and with plain tensors for the perturbed evaluations, so it
/// must only combine its inputs through the primitives.
using ScalarFunction = std::function<Tensor(const ParamValues&)>;

struct FdEntry {
  double max_rel_error = 0.0;
  std::size_t worst_slot = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::vector<std::size_t> non_finite_slots;
};

struct FdReport {
  std::map<std::string, FdEntry> entries;

  double max_rel_error() const;
  bool passed(double tolerance) const;
  std::string summary() const;
};

/// Central differences (f(p+h) - f(p-h)) / 2h against reverse-mode gradients,
/// per scalar slot, with relative error |a - n| / max(|a|, |n|, 1e-8).
FdReport finite_difference_check(const ScalarFunction& f, const ParamValues& params, double h = 1e-5);

}  // namespace idfuse::ad
