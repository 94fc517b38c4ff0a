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

#include "idfuse/gradsuite.hpp"

#include <chrono>
#include <functional>

#include "idfuse/gradcheck.hpp"

namespace idfuse::gradsuite {

using namespace ad;

namespace {

/// Weighted readout so every output slot contributes a generic amount.
Tensor readout(const Tensor& y, Rng& rng) {
  std::vector<double> w(y.numel());
  for (auto& x : w) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.5 + rng.uniform());
  return sum(mul(y, Tensor(y.shape(), w)));
}

Tensor random_tensor(Rng& rng, const Shape& shape, double lo, double hi) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor(shape, std::move(v));
}

struct Case {
  const char* name;
  std::function<Tensor(const ParamValues&, Rng&)> build;
  std::vector<Shape> shapes;
  double lo = -2.0;
  double hi = 2.0;
};

const std::vector<Case>& cases() {
  static const std::vector<Case> all = {
      {"add", [](const ParamValues& v, Rng& r) { return readout(add(v.at("p0"), v.at("p1")), r); }, {{3, 4}, {3, 4}}},
      {"sub", [](const ParamValues& v, Rng& r) { return readout(sub(v.at("p0"), v.at("p1")), r); }, {{5}, {5}}},
      {"mul", [](const ParamValues& v, Rng& r) { return readout(mul(v.at("p0"), v.at("p1")), r); }, {{2, 3}, {2, 3}}},
      {"scalar_mul", [](const ParamValues& v, Rng& r) { return readout(scale(v.at("p0"), -1.7), r); }, {{4}}},
      {"matmul", [](const ParamValues& v, Rng& r) { return readout(matmul(v.at("p0"), v.at("p1")), r); },
       {{3, 4}, {4, 2}}},
      {"matmul_ta", [](const ParamValues& v, Rng& r) { return readout(matmul(v.at("p0"), v.at("p1"), true), r); },
       {{4, 3}, {4, 2}}},
      {"matmul_tb",
       [](const ParamValues& v, Rng& r) { return readout(matmul(v.at("p0"), v.at("p1"), false, true), r); },
       {{3, 4}, {2, 4}}},
      {"matmul_tatb",
       [](const ParamValues& v, Rng& r) { return readout(matmul(v.at("p0"), v.at("p1"), true, true), r); },
       {{4, 3}, {2, 4}}},
      {"matvec", [](const ParamValues& v, Rng& r) { return readout(matmul(v.at("p0"), v.at("p1")), r); },
       {{3, 4}, {4}}},
      {"vecmat", [](const ParamValues& v, Rng& r) { return readout(matmul(v.at("p0"), v.at("p1")), r); },
       {{3}, {3, 5}}},
      {"sigmoid", [](const ParamValues& v, Rng& r) { return readout(sigmoid(v.at("p0")), r); }, {{6}}},
      {"gelu", [](const ParamValues& v, Rng& r) { return readout(gelu(v.at("p0")), r); }, {{6}}},
      {"softmax", [](const ParamValues& v, Rng& r) { return readout(softmax(v.at("p0")), r); }, {{3, 4}}},
      {"sum", [](const ParamValues& v, Rng&) { return scale(sum(v.at("p0")), 0.3); }, {{2, 2}}},
      {"mean", [](const ParamValues& v, Rng&) { return mean(square(v.at("p0"))); }, {{5}}},
      {"square", [](const ParamValues& v, Rng& r) { return readout(square(v.at("p0")), r); }, {{4}}},
      {"sqrt_eps", [](const ParamValues& v, Rng& r) { return readout(sqrt_eps(v.at("p0")), r); }, {{4}}, 0.2, 3.0},
      {"concat",
       [](const ParamValues& v, Rng& r) { return readout(concat({v.at("p0"), v.at("p1")}), r); },
       {{2, 3}, {2, 2}}},
      {"reshape", [](const ParamValues& v, Rng& r) { return readout(reshape(v.at("p0"), {3, 2}), r); }, {{6}}},
      {"cosine", [](const ParamValues& v, Rng&) { return cosine_similarity(v.at("p0"), v.at("p1")); }, {{5}, {5}}},
  };
  return all;
}

void record(SuiteRow& row, const FdReport& report, std::uint64_t seed) {
  const double err = report.max_rel_error();
  if (err >= row.max_rel_error) {
    row.max_rel_error = err;
    row.worst = "seed " + std::to_string(seed) + ": " + report.summary();
  }
  row.pass = row.pass && report.passed(row.tolerance);
  ++row.seeds;
}

}  // namespace

std::vector<SuiteRow> check_primitives(std::size_t seeds, double tolerance) {
  std::vector<SuiteRow> rows;
  for (const auto& c : cases()) {
    SuiteRow row{c.name, 0, 0.0, tolerance, true, ""};
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      Rng rng(mix_seed(seed, hash_name(c.name)));
      ParamValues params;
      for (std::size_t k = 0; k < c.shapes.size(); ++k) {
        params["p" + std::to_string(k)] = random_tensor(rng, c.shapes[k], c.lo, c.hi);
      }
      const std::uint64_t readout_seed = rng.next_u64();
      auto f = [&](const ParamValues& v) {
        Rng local(readout_seed);
        return c.build(v, local);
      };
      record(row, finite_difference_check(f, params), seed);
    }
    rows.push_back(row);
  }
  return rows;
}

SuiteRow check_end_to_end(const train::TrainConfig& config, std::size_t seeds, double tolerance, double step) {
  SuiteRow row{"end_to_end", 0, 0.0, tolerance, true, ""};
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    train::TrainConfig c = config;
    c.seed = seed;
    c.base_checkpoint.clear();
    train::Model model = train::build_model(c);
    Rng rng(mix_seed(seed, hash_name("gradsuite")));
    for (const auto& name : model.store.names()) {
      model.store.set_value(name, random_tensor(rng, model.store.value(name).shape(), -0.5, 0.5));
    }
    const auto data = train::prepare_data(model, train::make_config_dataset(c));
    const auto draw = train::draw_noise(rng, model, data.x_tokens.size());
    ParamValues params;
    for (const auto& [name, p] : model.store) {
      if (p.trainable) params.emplace(name, p.value);
    }
    auto f = [&](const ParamValues& v) {
      nn::Graph g(model.store, nullptr, &v);
      return train::total_loss(g, model, data, draw).total;
    };
    record(row, finite_difference_check(f, params, step), seed);
  }
  return row;
}

bool SuiteReport::passed() const {
  for (const auto& r : rows) {
    if (!r.pass) return false;
  }
  return !rows.empty();
}

std::string SuiteReport::to_text() const {
  std::string out = "check,seeds,max_rel_error,tolerance,status\n";
  for (const auto& r : rows) {
    out += r.name + "," + std::to_string(r.seeds) + "," + io::format_double(r.max_rel_error) + "," +
           io::format_double(r.tolerance) + "," + (r.pass ? "pass" : "FAIL") + "\n";
  }
  for (const auto& r : rows) {
    if (!r.pass) out += "# " + r.name + " worst " + r.worst + "\n";
  }
  return out;
}

SuiteReport run_suite(const train::TrainConfig& config, std::size_t seeds) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report;
  report.rows = check_primitives(seeds);
  report.rows.push_back(check_end_to_end(config, seeds));
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace idfuse::gradsuite
