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

#include "idfuse/instrument.hpp"

namespace idfuse::instrument {

namespace {
std::atomic<std::uint64_t> g_image_encoder{0};
std::atomic<std::uint64_t> g_adapter{0};
std::atomic<std::uint64_t> g_ffm{0};
}  // namespace

void count_image_encoder() { g_image_encoder.fetch_add(1, std::memory_order_relaxed); }
void count_adapter() { g_adapter.fetch_add(1, std::memory_order_relaxed); }
void count_ffm() { g_ffm.fetch_add(1, std::memory_order_relaxed); }

Counts snapshot() {
  return {g_image_encoder.load(std::memory_order_relaxed), g_adapter.load(std::memory_order_relaxed),
          g_ffm.load(std::memory_order_relaxed)};
}

void reset() {
  g_image_encoder.store(0);
  g_adapter.store(0);
  g_ffm.store(0);
}

}  // namespace idfuse::instrument
