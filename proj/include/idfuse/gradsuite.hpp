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

#include <cstddef>
#include <string>
#include <vector>

#include "idfuse/trainer.hpp"

namespace idfuse::gradsuite {

struct SuiteRow {
  std::string name;
  std::size_t seeds = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string worst;  // diagnostic for the worst seed
};

struct SuiteReport {
  std::vector<SuiteRow> rows;
  double seconds = 0.0;
  bool passed() const;
  std::string to_text() const;
};

/// Every primitive (and each matmul layout) against central differences.
std::vector<SuiteRow> check_primitives(std::size_t seeds, double tolerance = 1e-5);

/// The weighted objective of `config` with all weights randomized, checked
/// with respect to every trainable parameter. The default step balances
/// truncation against roundoff in the long loss sum.
SuiteRow check_end_to_end(const train::TrainConfig& config, std::size_t seeds, double tolerance = 1e-4,
                          double step = 1e-4);

SuiteReport run_suite(const train::TrainConfig& config, std::size_t seeds);

}  // namespace idfuse::gradsuite
