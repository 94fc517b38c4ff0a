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

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "idfuse/tensor.hpp"

namespace idfuse::io {

/// Ordered `key=value` text. Blank lines and lines starting with '#' are
/// skipped on parse; whitespace around keys and values is trimmed.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "<text>");
  static KeyValues load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  bool contains(const std::string& key) const { return entries_.contains(key); }
  /// Throws ValidationError naming the key when absent.
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;

  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  std::string format() const;
  void save(const std::filesystem::path& path) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
  std::string origin_;
};

/// Shortest text that parses back to the identical double.
std::string format_double(double value);
double parse_double(const std::string& text, const std::string& what);
long long parse_int(const std::string& text, const std::string& what);
bool parse_bool(const std::string& text, const std::string& what);

/// Raw little-endian 64-bit floats.
void write_blob(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_blob(const std::filesystem::path& path);

void write_tensor(const std::filesystem::path& path, const ad::Tensor& t);
/// Reads a blob and checks it against `shape`; the error names `what`.
ad::Tensor read_tensor(const std::filesystem::path& path, const ad::Shape& shape, const std::string& what);

ad::Shape parse_shape(const std::string& text);

/// Plain-text P3 pixmap of a [3, H, W] image in [0, 1].
void write_ppm(const std::filesystem::path& path, const ad::Tensor& image);
ad::Tensor read_ppm(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace idfuse::io
