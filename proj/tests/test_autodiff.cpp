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

#include <doctest.h>

#include <cmath>
#include <functional>

#include "idfuse/autodiff.hpp"
#include "idfuse/error.hpp"
#include "idfuse/gradcheck.hpp"
#include "idfuse/gradsuite.hpp"
#include "test_util.hpp"

using namespace idfuse;
using namespace idfuse::ad;
using idfuse::testing::clamp_norm;
using idfuse::testing::random_tensor;

TEST_CASE("primitive examples") {
  const auto a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  const auto eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  CHECK(matmul(a, eye).bitwise_equal(a));

  const auto s = softmax(Tensor::vector({0, 0}));
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 0.5);
  CHECK(sigmoid(Tensor::vector({0}))[0] == 0.5);
}

TEST_CASE("matmul layouts") {
  const auto a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const auto v = Tensor::vector({1, 0, -1});
  const auto mv = matmul(a, v);
  CHECK(mv.shape() == Shape{2});
  CHECK(mv[0] == -2);
  CHECK(mv[1] == -2);

  const auto w = Tensor::vector({1, 1});
  const auto vm = matmul(w, a);
  CHECK(vm.shape() == Shape{3});
  CHECK(vm[2] == 9);

  const auto ata = matmul(a, a, true, false);
  CHECK(ata.shape() == Shape{3, 3});
  CHECK(ata[0] == 17);
  const auto aat = matmul(a, a, false, true);
  CHECK(aat.shape() == Shape{2, 2});
  CHECK(aat[1] == 32);
}

TEST_CASE("shape errors name the offending shapes") {
  const auto a = Tensor::matrix(2, 3, std::vector<double>(6, 1.0));
  const auto b = Tensor::matrix(2, 3, std::vector<double>(6, 1.0));
  try {
    (void)matmul(a, b);
    FAIL("expected rejection");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("[2,3] vs [2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS((void)add(a, Tensor::vector({1, 2})), ValidationError);
  CHECK_THROWS_AS((void)op_from_name("convolve"), ValidationError);
  const Tensor inputs[] = {a};
  CHECK_THROWS_AS((void)apply_primitive(static_cast<OpKind>(99), inputs), ValidationError);
  CHECK_THROWS_AS((void)cosine_similarity(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), ValidationError);
}

TEST_CASE("cosine similarity examples") {
  CHECK(cosine_similarity(Tensor::vector({1, 0}), Tensor::vector({0, 1})).item() == 0.0);
  CHECK(cosine_similarity(Tensor::vector({2, 4}), Tensor::vector({1, 2})).item() == doctest::Approx(1.0).epsilon(1e-15));
  // 32 / sqrt(14 * 77), evaluated independently.
  CHECK(cosine_similarity(Tensor::vector({1, 2, 3}), Tensor::vector({4, 5, 6})).item() ==
        doctest::Approx(0.9746318461970762).epsilon(1e-14));
  // Zero vectors are stabilized rather than dividing by zero.
  const auto z = cosine_similarity(Tensor::vector({0, 0}), Tensor::vector({1, 1}));
  CHECK(z.item() == 0.0);
}

TEST_CASE("backward examples") {
  {
    Tape tape;
    auto x = tape.leaf("x", Tensor::vector({3, -1, 2}));
    const auto g = tape.backward(sum(x)).at("x");
    CHECK(g.to_vector() == std::vector<double>{1, 1, 1});
  }
  {
    Tape tape;
    auto x = tape.leaf("x", Tensor::vector({1, 2}));
    const auto g = tape.backward(sum(square(x))).at("x");
    CHECK(g.to_vector() == std::vector<double>{2, 4});
  }
  {
    ParamValues p{{"a", Tensor::vector({1, 2, 3})}, {"b", Tensor::vector({4, 5, 6})}};
    auto report = finite_difference_check([](const ParamValues& v) { return cosine_similarity(v.at("a"), v.at("b")); },
                                          p);
    CHECK(report.max_rel_error() < 1e-6);
  }
  {
    Tape tape;
    auto x = tape.leaf("x", Tensor::vector({1, 2}));
    CHECK_THROWS_AS((void)tape.backward(square(x)), ValidationError);
  }
}

TEST_CASE("unreached leaves get zero gradients") {
  Tape tape;
  auto x = tape.leaf("x", Tensor::vector({1, 2}));
  auto unused = tape.leaf("unused", Tensor::matrix(2, 2, {1, 2, 3, 4}));
  const auto grads = tape.backward(sum(x));
  CHECK(grads.at("unused").bitwise_equal(Tensor::zeros({2, 2})));
  (void)unused;
}

TEST_CASE("finite difference check examples") {
  Rng rng(11);
  const ParamValues p{{"x", random_tensor(rng, {7})}};
  auto linear = finite_difference_check([](const ParamValues& v) { return sum(v.at("x")); }, p);
  CHECK(linear.max_rel_error() < 1e-10);

  // Unused parameter: analytic exactly zero, numeric exactly unchanged.
  const ParamValues q{{"x", random_tensor(rng, {3})}, {"w", random_tensor(rng, {4})}};
  auto unused = finite_difference_check([](const ParamValues& v) { return sum(square(v.at("x"))); }, q);
  CHECK(unused.entries.at("w").max_rel_error == 0.0);
  CHECK(std::abs(unused.entries.at("w").numeric_at_worst) < 1e-9);

  // Non-finite evaluations are reported and fail the check.
  const ParamValues r{{"x", Tensor::vector({1e308, 1.0})}};
  auto blown = finite_difference_check([](const ParamValues& v) { return sum(square(v.at("x"))); }, r);
  CHECK_FALSE(blown.passed(1e-5));
}

TEST_CASE("primitive gradients match finite differences over 100 seeds") {
  double worst = 0.0;
  for (const auto& row : gradsuite::check_primitives(100)) {
    CHECK_MESSAGE(row.pass, row.name << " " << row.worst);
    CHECK(row.seeds == 100);
    worst = std::max(worst, row.max_rel_error);
  }
  MESSAGE("worst primitive relative error: " << worst);
}

TEST_CASE("softmax rows are a simplex and sigmoid stays in the open interval") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto x = random_tensor(rng, {4, 7}, -30.0, 30.0);
    const auto y = softmax(x);
    for (std::size_t row = 0; row < 4; ++row) {
      double total = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(y[row * 7 + j] >= 0.0);
        total += y[row * 7 + j];
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
    const auto s = sigmoid(random_tensor(rng, {16}, -800.0, 800.0));
    for (double v : s.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("backward is deterministic and replayable") {
  Rng rng(5);
  const auto a0 = random_tensor(rng, {6, 5});
  const auto b0 = random_tensor(rng, {5, 4});
  auto run = [&](Tape& tape) {
    auto a = tape.leaf("a", a0);
    auto b = tape.leaf("b", b0);
    auto y = softmax(gelu(matmul(a, b)));
    return sum(square(y));
  };
  Tape t1;
  const auto l1 = run(t1);
  const auto g1 = t1.backward(l1);
  const auto g1_again = t1.backward(l1);
  Tape t2;
  const auto l2 = run(t2);
  const auto g2 = t2.backward(l2);
  for (const char* name : {"a", "b"}) {
    CHECK(g1.at(name).bitwise_equal(g1_again.at(name)));
    CHECK(g1.at(name).bitwise_equal(g2.at(name)));
  }
}

TEST_CASE("tape is topological and reports non-finite nodes") {
  Tape tape;
  auto x = tape.leaf("x", Tensor::vector({1.0, -1.0}));
  auto y = sqrt_eps(square(x));
  CHECK(tape.size() == 3);
  CHECK(y.node_id().value() == 2);
  CHECK_FALSE(tape.first_non_finite().has_value());
  auto z = scale(y, 1e308);
  auto w = scale(z, 10.0);
  (void)w;
  const auto bad = tape.first_non_finite();
  REQUIRE(bad.has_value());
  CHECK(bad->find("node 4") != std::string::npos);
}

TEST_CASE("mixing tapes is rejected") {
  Tape t1, t2;
  auto a = t1.leaf("a", Tensor::vector({1}));
  auto b = t2.leaf("b", Tensor::vector({1}));
  CHECK_THROWS_AS((void)add(a, b), ValidationError);
}
