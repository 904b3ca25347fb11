// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "kdfs/gradcheck.hpp"
#include "kdfs/ops.hpp"
#include "kdfs/random.hpp"
#include "oracles.hpp"
#include "random_tensors.hpp"

using namespace kdfs;

using fixture::random_tensor;
using fixture::weighted_sum;

TEST_CASE("tensor construction and item") {
  Tensor<float> t({2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK_THROWS_AS(t.item(), ContractError);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  CHECK(Tensor<float>::scalar(4.0f).item() == 4.0f);
  const Tensor<double> d = t.cast<double>();
  CHECK(d.data[5] == 1.5);
}

TEST_CASE("backward examples") {
  SUBCASE("sum is linear") {
    Tensor<double> w({3}, std::vector<double>{0.5, -1, 2});
    Tape<double> tape;
    tape.backward(sum(tape.param(w)));
    CHECK(w.grad == std::vector<double>{1, 1, 1});
  }
  SUBCASE("sum of squares") {
    Tensor<double> w({2}, std::vector<double>{1, 2});
    Tape<double> tape;
    Var<double> v = tape.param(w);
    tape.backward(sum(mul(v, v)));
    CHECK(w.grad == std::vector<double>{2, 4});
  }
  SUBCASE("a tensor used on two paths receives the sum of both") {
    Tensor<double> w({2}, std::vector<double>{3, -1});
    Tape<double> tape;
    Var<double> a = tape.param(w);
    Var<double> b = tape.param(w);
    tape.backward(add(sum(scale(a, 2.0)), sum(mul(b, b))));
    // Reference: d/dw (2w + w^2) = 2 + 2w.
    CHECK(w.grad == std::vector<double>{8, 0});
  }
  SUBCASE("constants never receive gradients") {
    Tensor<double> w({2}, 1.0), c({2}, 2.0);
    Tape<double> tape;
    tape.backward(sum(mul(tape.param(w), tape.constant_ref(c))));
    CHECK_FALSE(c.has_grad());
    CHECK(w.grad == std::vector<double>{2, 2});
  }
}

TEST_CASE("backward contract errors") {
  Tensor<double> w({2}, 1.0);
  Tape<double> tape;
  Var<double> v = tape.param(w);
  CHECK_THROWS_AS(tape.backward(v), ContractError);
  Var<double> loss = sum(v);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
  Tape<double> other;
  CHECK_THROWS_AS(other.backward(sum(other.constant(Tensor<double>({2}, 1.0)))), ContractError);
}

TEST_CASE("elementwise examples") {
  Tape<double> tape;
  auto c = [&](std::vector<double> v) {
    const std::size_t n = v.size();
    return tape.constant(Tensor<double>({n}, std::move(v)));
  };
  CHECK(relu(c({-1, 0, 2})).value().data == std::vector<double>{0, 0, 2});
  CHECK(abs(c({-1.5, 2})).value().data == std::vector<double>{1.5, 2});
  const Var<double> sm = softmax(tape.constant(Tensor<double>({1, 2}, 0.0)));
  CHECK(sm.value().data == std::vector<double>{0.5, 0.5});
  CHECK(frobenius_norm(tape.constant(Tensor<double>({2, 2}, 1.0))).item() == doctest::Approx(2.0));
  CHECK(mean(c({1, 2, 3, 6})).item() == doctest::Approx(3.0));
  CHECK(add_scalar(c({1}), 2.5).item() == 3.5);
  CHECK(mul(c({2, 3}), c({4})).value().data == std::vector<double>{8, 12});
}

TEST_CASE("softmax and log_softmax against a long-double oracle") {
  Rng rng(7);
  Tape<double> tape;
  Tensor<double> z = random_tensor({4, 5}, rng, 3.0);
  const Tensor<double> p = softmax(tape.constant_ref(z)).value();
  const Tensor<double> lp = log_softmax(tape.constant_ref(z)).value();
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<long double> row(z.data.begin() + r * 5, z.data.begin() + r * 5 + 5);
    const auto ref = oracle::softmax(row);
    double total = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(p[r * 5 + c] == doctest::Approx(static_cast<double>(ref[c])).epsilon(1e-12));
      CHECK(lp[r * 5 + c] == doctest::Approx(static_cast<double>(std::log(ref[c]))).epsilon(1e-12));
      total += p[r * 5 + c];
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("shape mismatches raise DimensionError naming the axes") {
  Tape<double> tape;
  Var<double> a = tape.constant(Tensor<double>({2, 3}, 1.0));
  Var<double> b = tape.constant(Tensor<double>({3, 2}, 1.0));
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
  Var<double> x = tape.constant(Tensor<double>({1, 3, 4, 4}, 1.0));
  Var<double> w = tape.constant(Tensor<double>({2, 2, 3, 3}, 1.0));
  try {
    conv2d(x, w, 1, 0);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("channel") != std::string::npos);
  }
}

TEST_CASE("conv2d examples") {
  Tape<float> tape;
  SUBCASE("all ones") {
    Var<float> y = conv2d(tape.constant(Tensor<float>({1, 1, 3, 3}, 1.0f)),
                          tape.constant(Tensor<float>({1, 1, 3, 3}, 1.0f)), 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 9.0f);
  }
  SUBCASE("identity kernel") {
    Rng rng(3);
    Tensor<float> x({2, 1, 5, 6});
    for (float& v : x.data) v = static_cast<float>(rng.normal());
    Tensor<float> k({1, 1, 3, 3}, 0.0f);
    k[4] = 1.0f;
    CHECK(conv2d(tape.constant_ref(x), tape.constant(k), 1, 1).value().data == x.data);
  }
}

TEST_CASE("conv2d matches the naive loop oracle") {
  struct Case {
    std::size_t n, c, h, w, o, k;
    int stride, pad;
  };
  const Case cases[] = {{2, 4, 8, 8, 6, 3, 1, 0}, {2, 4, 8, 8, 6, 3, 1, 1}, {1, 3, 9, 7, 5, 3, 2, 1},
                        {3, 5, 6, 6, 4, 1, 1, 0}, {2, 3, 8, 8, 4, 1, 2, 0}, {1, 2, 7, 7, 3, 5, 2, 2}};
  Rng rng(11);
  for (const Case& cs : cases) {
    Tensor<double> x = random_tensor({cs.n, cs.c, cs.h, cs.w}, rng);
    Tensor<double> k = random_tensor({cs.o, cs.c, cs.k, cs.k}, rng);
    std::size_t oh = 0, ow = 0;
    const auto ref = oracle::conv2d(x.data, cs.n, cs.c, cs.h, cs.w, k.data, cs.o, cs.k, cs.stride, cs.pad, &oh, &ow);
    Tape<double> tape;
    const Var<double> y = conv2d(tape.constant_ref(x), tape.constant_ref(k), cs.stride, cs.pad);
    REQUIRE(y.shape() == Shape{cs.n, cs.o, oh, ow});
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.value()[i] == doctest::Approx(ref[i]).epsilon(1e-10));

    Tape<float> tf;
    const Tensor<float> xf = x.cast<float>(), kf = k.cast<float>();
    const Var<float> yf = conv2d(tf.constant_ref(xf), tf.constant_ref(kf), cs.stride, cs.pad);
    double worst = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      worst = std::max(worst, std::abs(yf.value()[i] - ref[i]) / std::max(1.0, std::abs(ref[i])));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("finite_diff_check examples") {
  Rng rng(5);
  const Tensor<double> x = random_tensor({3, 4}, rng);
  CHECK(finite_diff_check([](Tape<double>&, const Var<double>& v) { return sum(mul(v, v)); }, x) < 1e-6);
  CHECK(finite_diff_check([](Tape<double>& t, const Var<double>&) { return t.constant(Tensor<double>::scalar(3.0)); },
                          x) == 0.0);
  const Tensor<double> img = random_tensor({2, 2, 5, 5}, rng);
  const Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
  CHECK(finite_diff_check(
            [&](Tape<double>& t, const Var<double>& v) { return sum(relu(conv2d(v, t.constant_ref(w), 1, 1))); },
            img) < 1e-3);
}

TEST_CASE("every differentiable primitive passes finite differences") {
  Rng rng(2024);
  const auto check = [](const char* name, const ScalarFn& f, const Tensor<double>& x) {
    INFO(name);
    CHECK(finite_diff_check(f, x) < 1e-3);
  };
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t n = 2 + rng.below(2), c = 2 + rng.below(3), h = 4 + rng.below(3);
    const Tensor<double> a = random_tensor({n, c}, rng), b = random_tensor({n, c}, rng);
    const Tensor<double> img = random_tensor({n, c, h, h}, rng);
    const Tensor<double> w = random_tensor({3, c, 3, 3}, rng), m = random_tensor({c}, rng);
    const Tensor<double> rhs = random_tensor({c, 3}, rng);
    const auto s = static_cast<std::uint64_t>(trial);

    check("add", [&](Tape<double>& t, const Var<double>& v) { return weighted_sum(add(v, t.constant_ref(b)), s); }, a);
    check("sub", [&](Tape<double>& t, const Var<double>& v) { return weighted_sum(sub(t.constant_ref(b), v), s); }, a);
    check("mul", [&](Tape<double>& t, const Var<double>& v) { return weighted_sum(mul(v, t.constant_ref(b)), s); }, a);
    check("scale", [&](Tape<double>&, const Var<double>& v) { return weighted_sum(scale(v, -1.7), s); }, a);
    check("relu", [&](Tape<double>&, const Var<double>& v) { return weighted_sum(relu(v), s); }, a);
    check("abs", [&](Tape<double>&, const Var<double>& v) { return weighted_sum(abs(v), s); }, a);
    check("mean", [&](Tape<double>&, const Var<double>& v) { return mean(mul(v, v)); }, a);
    check("frobenius", [&](Tape<double>&, const Var<double>& v) { return frobenius_norm(v); }, a);
    check("matmul", [&](Tape<double>& t, const Var<double>& v) { return weighted_sum(matmul(v, t.constant_ref(rhs)), s); },
          a);
    check("softmax", [&](Tape<double>&, const Var<double>& v) { return weighted_sum(softmax(v), s); }, a);
    check("log_softmax", [&](Tape<double>&, const Var<double>& v) { return weighted_sum(log_softmax(v), s); }, a);
    check("conv2d input", [&](Tape<double>& t, const Var<double>& v) {
      return weighted_sum(conv2d(v, t.constant_ref(w), 2, 1), s);
    }, img);
    check("conv2d weight", [&](Tape<double>& t, const Var<double>& v) {
      return weighted_sum(conv2d(t.constant_ref(img), v, 1, 1), s);
    }, w);
    check("max_pool2d", [&](Tape<double>&, const Var<double>& v) { return weighted_sum(max_pool2d(v, 2, 2), s); }, img);
    check("global_avg_pool", [&](Tape<double>&, const Var<double>& v) { return weighted_sum(global_avg_pool(v), s); },
          img);
    check("batch_norm", [&](Tape<double>& t, const Var<double>& v) {
      const Tensor<double> g({c}, 1.3), be({c}, 0.2);
      return weighted_sum(batch_norm(v, t.constant(g), t.constant(be), RunningStats<double>{}, true), s);
    }, img);
    check("channel_mask", [&](Tape<double>& t, const Var<double>& v) {
      return weighted_sum(channel_mask(t.constant_ref(img), v), s);
    }, m);
  }
}

TEST_CASE("batch norm statistics and running buffers") {
  Rng rng(4);
  Tensor<double> x = random_tensor({4, 2, 3, 3}, rng, 2.0);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] += 5.0;
  Tensor<double> mean_buf({2}, 0.0), var_buf({2}, 1.0);
  Tape<double> tape;
  const Var<double> y = batch_norm(tape.constant_ref(x), tape.constant(Tensor<double>({2}, 1.0)),
                                   tape.constant(Tensor<double>({2}, 0.0)),
                                   RunningStats<double>{&mean_buf, &var_buf, 0.1}, true);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, sq = 0, xs = 0, xsq = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t p = 0; p < 9; ++p) {
        const double v = y.value()[(n * 2 + c) * 9 + p], xv = x[(n * 2 + c) * 9 + p];
        s += v;
        sq += v * v;
        xs += xv;
        xsq += xv * xv;
      }
    CHECK(s / 36 == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(sq / 36 == doctest::Approx(1.0).epsilon(1e-3));
    const double bm = xs / 36, unbiased = (xsq - 36 * bm * bm) / 35;
    CHECK(mean_buf[c] == doctest::Approx(0.1 * bm));
    CHECK(var_buf[c] == doctest::Approx(0.9 + 0.1 * unbiased));
  }
  CHECK_THROWS_AS(batch_norm(tape.constant_ref(x), tape.constant(Tensor<double>({2}, 1.0)),
                             tape.constant(Tensor<double>({2}, 0.0)), RunningStats<double>{}, false),
                  ContractError);
}

TEST_CASE("zero_pad_scatter and channel_gather") {
  Tape<float> tape;
  Tensor<float> x({1, 2, 1, 1}, std::vector<float>{7, 9});
  const std::vector<int> kept{0, 2};
  const Var<float> y = zero_pad_scatter(tape.constant_ref(x), std::span<const int>(kept), 4);
  CHECK(y.value().data == std::vector<float>{7, 0, 9, 0});
  CHECK(channel_gather(y, std::span<const int>(kept)).value().data == x.data);
  const std::vector<int> bad{2, 1};
  CHECK_THROWS(zero_pad_scatter(tape.constant_ref(x), std::span<const int>(bad), 4));
}

TEST_CASE("forward values are bitwise deterministic") {
  auto run = [] {
    Rng rng(99);
    Tensor<float> x({2, 3, 8, 8}), w({4, 3, 3, 3});
    for (float& v : x.data) v = static_cast<float>(rng.normal());
    for (float& v : w.data) v = static_cast<float>(rng.normal());
    Tape<float> tape;
    return softmax(reshape(conv2d(tape.constant_ref(x), tape.constant_ref(w), 1, 1), {2, 256})).value().data;
  };
  CHECK(run() == run());
}

TEST_CASE("rng state round trip") {
  Rng a(42);
  a.uniform();
  Rng b(0);
  b.set_state(a.state());
  CHECK(a == b);
  CHECK(a.uniform() == b.uniform());
  CHECK_THROWS_AS(b.set_state("not a state"), FormatError);
}
