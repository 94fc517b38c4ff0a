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

#include "idfuse/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "idfuse/error.hpp"

namespace idfuse::io {

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& origin) {
  KeyValues kv;
  kv.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ValidationError(origin + ":" + std::to_string(lineno) + ": empty key");
    kv.entries_[key] = trim(t.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) { return parse(read_text(path), path.string()); }

const std::string& KeyValues::get(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ValidationError((origin_.empty() ? "" : origin_ + ": ") + "missing key '" + key + "'");
  return it->second;
}

std::string KeyValues::get_or(const std::string& key, const std::string& fallback) const {
  const auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

double KeyValues::get_double(const std::string& key) const { return parse_double(get(key), key); }
long long KeyValues::get_int(const std::string& key) const { return parse_int(get(key), key); }
bool KeyValues::get_bool(const std::string& key) const { return parse_bool(get(key), key); }

std::string KeyValues::format() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
  return out;
}

void KeyValues::save(const std::filesystem::path& path) const { write_text(path, format()); }

std::string format_double(double value) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc{}) throw std::runtime_error("format_double failed");
  return std::string(buf, end);
}

double parse_double(const std::string& text, const std::string& what) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last) throw ValidationError(what + ": not a number: '" + text + "'");
  return value;
}

long long parse_int(const std::string& text, const std::string& what) {
  long long value = 0;
  const char* last = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), last, value);
  if (ec != std::errc{} || ptr != last) throw ValidationError(what + ": not an integer: '" + text + "'");
  return value;
}

bool parse_bool(const std::string& text, const std::string& what) {
  if (text == "1" || text == "true" || text == "yes" || text == "on") return true;
  if (text == "0" || text == "false" || text == "no" || text == "off") return false;
  throw ValidationError(what + ": not a boolean: '" + text + "'");
}

void write_blob(const std::filesystem::path& path, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

std::vector<double> read_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % sizeof(double) != 0) throw ValidationError(path.string() + ": size is not a multiple of 8");
  std::vector<double> values(bytes.size() / sizeof(double));
  std::memcpy(values.data(), bytes.data(), bytes.size());
  return values;
}

void write_tensor(const std::filesystem::path& path, const ad::Tensor& t) { write_blob(path, t.data()); }

ad::Tensor read_tensor(const std::filesystem::path& path, const ad::Shape& shape, const std::string& what) {
  auto values = read_blob(path);
  if (values.size() != ad::numel_of(shape)) {
    throw ValidationError(what + ": expected " + std::to_string(ad::numel_of(shape)) + " values for shape " +
                          ad::to_string(shape) + ", blob has " + std::to_string(values.size()));
  }
  return ad::Tensor(shape, std::move(values));
}

ad::Shape parse_shape(const std::string& text) {
  if (text.size() < 2 || text.front() != '[' || text.back() != ']') throw ValidationError("bad shape '" + text + "'");
  ad::Shape shape;
  std::stringstream in(text.substr(1, text.size() - 2));
  std::string part;
  while (std::getline(in, part, ',')) {
    const long long d = parse_int(trim(part), "shape extent");
    if (d <= 0) throw ValidationError("bad shape '" + text + "'");
    shape.push_back(static_cast<std::size_t>(d));
  }
  return shape;
}

void write_ppm(const std::filesystem::path& path, const ad::Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ValidationError("write_ppm: expected [3, H, W], got " + ad::to_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::ostringstream out;
  out << "P3\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image[(c * h + i) * w + j], 0.0, 1.0);
        out << static_cast<int>(std::lround(v * 255.0)) << (c == 2 ? (j + 1 == w ? "\n" : "  ") : " ");
      }
    }
  }
  write_text(path, out.str());
}

ad::Tensor read_ppm(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string magic;
  std::size_t w = 0, h = 0;
  int maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P3" || w == 0 || h == 0 || maxval <= 0) throw ValidationError(path.string() + ": not a P3 pixmap");
  std::vector<double> data(3 * h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        int v = -1;
        in >> v;
        if (!in || v < 0 || v > maxval) throw ValidationError(path.string() + ": truncated or out-of-range pixel data");
        data[(c * h + i) * w + j] = static_cast<double>(v) / maxval;
      }
    }
  }
  return ad::Tensor({3, h, w}, std::move(data));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace idfuse::io
