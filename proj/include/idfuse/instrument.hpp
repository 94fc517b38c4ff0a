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

#include <atomic>
#include <cstdint>

namespace idfuse::instrument {

/// Process-wide call counters for the training-only branches. Sampling must
/// leave all three untouched.
struct Counts {
  std::uint64_t image_encoder = 0;
  std::uint64_t adapter = 0;
  std::uint64_t ffm = 0;
  bool operator==(const Counts&) const = default;
};

void count_image_encoder();
void count_adapter();
void count_ffm();

Counts snapshot();
void reset();

}  // namespace idfuse::instrument
