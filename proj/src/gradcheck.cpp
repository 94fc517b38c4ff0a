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

#include "idfuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace idfuse::ad {

double FdReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& [name, entry] : entries) {
    if (!entry.non_finite_slots.empty()) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, entry.max_rel_error);
  }
  return worst;
}

bool FdReport::passed(double tolerance) const { return max_rel_error() < tolerance; }

std::string FdReport::summary() const {
  std::ostringstream out;
  out.precision(3);
  for (const auto& [name, entry] : entries) {
    out << name << ": max_rel_err=" << std::scientific << entry.max_rel_error << " (slot " << entry.worst_slot
        << ", analytic " << entry.analytic_at_worst << ", numeric " << entry.numeric_at_worst << ")";
    if (!entry.non_finite_slots.empty()) out << " non-finite slots=" << entry.non_finite_slots.size();
    out << '\n';
  }
  return out.str();
}

FdReport finite_difference_check(const ScalarFunction& f, const ParamValues& params, double h) {
  Tape tape;
  ParamValues leaves;
  for (const auto& [name, value] : params) leaves.emplace(name, tape.leaf(name, value));
  const Tensor loss = f(leaves);
  const GradientMap analytic = tape.backward(loss);

  FdReport report;
  for (const auto& [name, value] : params) {
    FdEntry entry;
    const auto grad = analytic.at(name).data();
    ParamValues probe = params;
    std::vector<double> slots = value.to_vector();
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const double original = slots[i];
      slots[i] = original + h;
      probe[name] = Tensor(value.shape(), slots);
      const double up = f(probe).item();
      slots[i] = original - h;
      probe[name] = Tensor(value.shape(), slots);
      const double down = f(probe).item();
      slots[i] = original;

      if (!std::isfinite(up) || !std::isfinite(down)) {
        entry.non_finite_slots.push_back(i);
        continue;
      }
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(grad[i]), std::abs(numeric), 1e-8});
      const double rel = std::abs(grad[i] - numeric) / denom;
      if (i == 0 || rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_slot = i;
        entry.analytic_at_worst = grad[i];
        entry.numeric_at_worst = numeric;
      }
    }
    report.entries.emplace(name, std::move(entry));
  }
  return report;
}

}  // namespace idfuse::ad
