#include <doctest.h>

#include <cmath>

#include "tbdetect/gradcheck.hpp"
#include "tbdetect/ops.hpp"
#include "tbdetect/optimizer.hpp"
#include "tbdetect/rng.hpp"

using namespace tb;

namespace {

Tensor<float> random_tensor(Shape shape, SplitMix64& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor<float> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<float>(rng.uniform(lo, hi));
  }
  return t;
}

}  // namespace

TEST_CASE("tensor shape contract") {
  CHECK_THROWS_AS(Tensor<float>({2, 0, 3}), ContractViolation);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, {1.0f, 2.0f, 3.0f}), ContractViolation);
  Tensor<float> t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.shape() == Shape{2, 3});
}

TEST_CASE("conv2d shapes and zero kernel") {
  Tape<float> t;
  auto x = t.leaf(Tensor<float>::full({1, 3, 8, 8}, 0.5f));
  auto w = t.leaf(Tensor<float>({4, 3, 3, 3}));
  auto b = t.leaf(Tensor<float>({4}));
  auto y = ops::conv2d(x, w, b, 1, Padding::Same);
  CHECK(y.value().shape() == Shape{1, 4, 8, 8});
  for (std::size_t i = 0; i < y.value().size(); ++i) CHECK(y.value()[i] == 0.0f);

  auto yv = ops::conv2d(x, w, b, 1, Padding::Valid);
  CHECK(yv.value().shape() == Shape{1, 4, 6, 6});
}

TEST_CASE("conv2d same padding preserves spatial shape for odd kernels") {
  SplitMix64 rng(99);
  for (std::size_t k : {1, 3, 5, 7}) {
    const std::size_t H = 7 + rng.next_below(6), W = 7 + rng.next_below(6);
    Tape<float> t;
    auto x = t.leaf(random_tensor({2, 2, H, W}, rng));
    auto w = t.leaf(random_tensor({3, 2, k, k}, rng));
    auto b = t.leaf(random_tensor({3}, rng));
    auto y = ops::conv2d(x, w, b, 1, Padding::Same);
    CHECK(y.value().shape() == Shape{2, 3, H, W});
  }
}

TEST_CASE("conv2d contract violations name the offending dimension") {
  Tape<float> t;
  auto x = t.leaf(Tensor<float>({1, 3, 8, 8}));
  auto w_bad_c = t.leaf(Tensor<float>({4, 2, 3, 3}));
  auto b = t.leaf(Tensor<float>({4}));
  CHECK_THROWS_WITH_AS(ops::conv2d(x, w_bad_c, b, 1, Padding::Same),
                       doctest::Contains("channel mismatch"), ContractViolation);
  auto w_even = t.leaf(Tensor<float>({4, 3, 2, 2}));
  auto b4 = t.leaf(Tensor<float>({4}));
  CHECK_THROWS_AS(ops::conv2d(x, w_even, b4, 1, Padding::Same), ContractViolation);
  auto w_ok = t.leaf(Tensor<float>({4, 3, 3, 3}));
  CHECK_THROWS_AS(ops::conv2d(x, w_ok, b4, 0, Padding::Same), ContractViolation);
  auto b_bad = t.leaf(Tensor<float>({5}));
  CHECK_THROWS_AS(ops::conv2d(x, w_ok, b_bad, 1, Padding::Same), ContractViolation);
}

TEST_CASE("conv_transpose2d doubles spatial extents") {
  Tape<float> t;
  auto x = t.leaf(Tensor<float>({1, 8, 4, 4}));
  auto w = t.leaf(Tensor<float>({8, 4, 2, 2}));
  auto y = ops::conv_transpose2d(x, w);
  CHECK(y.value().shape() == Shape{1, 4, 8, 8});
}

TEST_CASE("conv_transpose2d with an all-ones kernel is nearest-neighbour upsampling") {
  SplitMix64 rng(5);
  Tape<float> t;
  Tensor<float> xv = random_tensor({1, 1, 3, 3}, rng);
  auto x = t.leaf(xv);
  auto w = t.leaf(Tensor<float>::full({1, 1, 2, 2}, 1.0f));
  auto y = ops::conv_transpose2d(x, w);
  const Tensor<float>& out = y.value();
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(out[i * 6 + j] == xv[(i / 2) * 3 + j / 2]);
    }
  }
}

TEST_CASE("maxpool2d forward and tie routing") {
  Tape<float> t;
  auto x = t.leaf(Tensor<float>({1, 1, 2, 2}, {1, 2, 3, 4}), true);
  auto y = ops::maxpool2d(x);
  CHECK(y.value().size() == 1);
  CHECK(y.value()[0] == 4.0f);

  // constant input: output constant, gradient lands on the first window slot
  Tape<float> t2;
  auto xc = t2.leaf(Tensor<float>::full({1, 1, 2, 2}, 7.0f), true);
  auto yc = ops::maxpool2d(xc);
  CHECK(yc.value()[0] == 7.0f);
  t2.backward(ops::sum_all(yc));
  const Tensor<float>& g = t2.grad(xc);
  CHECK(g[0] == 1.0f);
  CHECK(g[1] == 0.0f);
  CHECK(g[2] == 0.0f);
  CHECK(g[3] == 0.0f);

  Tape<float> t3;
  auto odd = t3.leaf(Tensor<float>({1, 1, 3, 4}));
  CHECK_THROWS_AS(ops::maxpool2d(odd), ContractViolation);
}

TEST_CASE("maxpool2d backward touches exactly one slot per window") {
  SplitMix64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Tape<float> t;
    Tensor<float> xv({1, 1, 6, 6});
    for (std::size_t i = 0; i < xv.size(); ++i) {
      // coarse levels force frequent ties
      xv[i] = static_cast<float>(rng.next_below(4));
    }
    auto x = t.leaf(xv, true);
    t.backward(ops::sum_all(ops::maxpool2d(x)));
    const Tensor<float>& g = t.grad(x);
    for (std::size_t wy = 0; wy < 3; ++wy) {
      for (std::size_t wx = 0; wx < 3; ++wx) {
        int nonzero = 0;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            nonzero += g[(2 * wy + dy) * 6 + 2 * wx + dx] != 0.0f;
          }
        }
        CHECK(nonzero == 1);
      }
    }
  }
}

TEST_CASE("batchnorm2d standardizes per channel in train mode") {
  SplitMix64 rng(3);
  Tape<float> t;
  auto x = t.leaf(random_tensor({4, 3, 5, 5}, rng, -2.0f, 5.0f));
  auto gamma = t.leaf(Tensor<float>::full({3}, 1.0f));
  auto beta = t.leaf(Tensor<float>({3}));
  auto y = ops::batchnorm2d<float>(x, gamma, beta, nullptr, nullptr, Mode::Train, 0.9f, 1e-5f);
  const Tensor<float>& out = y.value();
  const std::size_t plane = 25, N = 4, C = 3;
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0, var = 0;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t i = 0; i < plane; ++i) mean += out[(n * C + c) * plane + i];
    }
    mean /= static_cast<double>(N * plane);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = out[(n * C + c) * plane + i] - mean;
        var += d * d;
      }
    }
    var /= static_cast<double>(N * plane);
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-2);  // epsilon shifts variance slightly below 1
  }
}

TEST_CASE("batchnorm2d affine parameters shift and scale") {
  SplitMix64 rng(4);
  Tape<float> t;
  auto x = t.leaf(random_tensor({8, 2, 4, 4}, rng, -1.0f, 1.0f));
  auto gamma = t.leaf(Tensor<float>::full({2}, 2.0f));
  auto beta = t.leaf(Tensor<float>::full({2}, 3.0f));
  auto y = ops::batchnorm2d<float>(x, gamma, beta, nullptr, nullptr, Mode::Train, 0.9f, 1e-5f);
  const Tensor<float>& out = y.value();
  double mean = 0;
  for (std::size_t i = 0; i < out.size(); ++i) mean += out[i];
  mean /= static_cast<double>(out.size());
  double var = 0;
  for (std::size_t i = 0; i < out.size(); ++i) var += (out[i] - mean) * (out[i] - mean);
  var /= static_cast<double>(out.size());
  CHECK(std::abs(mean - 3.0) < 1e-4);
  CHECK(std::abs(std::sqrt(var) - 2.0) < 1e-2);
}

TEST_CASE("batchnorm2d rejects a zero batch at tensor construction") {
  CHECK_THROWS_AS(Tensor<float>({0, 3, 4, 4}), ContractViolation);
}

TEST_CASE("activation spot values") {
  Tape<float> t;
  auto x = t.leaf(Tensor<float>({3}, {0.0f, -1.0f, 2.0f}));
  CHECK(ops::sigmoid(x).value()[0] == 0.5f);
  CHECK(ops::relu(x).value()[1] == 0.0f);
  CHECK(ops::relu(x).value()[2] == 2.0f);
  CHECK(ops::gelu(x).value()[0] == 0.0f);

  auto z = t.leaf(Tensor<float>({1, 3}));
  const Tensor<float>& sm = ops::softmax(z, 1).value();
  for (std::size_t i = 0; i < 3; ++i) CHECK(sm[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("softmax slices sum to one and sigmoid stays in (0,1)") {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<float> t;
    auto x = t.leaf(random_tensor({3, 5, 2}, rng, -4.0f, 4.0f));
    const std::size_t axis = rng.next_below(3);
    const Tensor<float>& y = ops::softmax(x, axis).value();
    const std::size_t outer = detail::axis_outer(y.shape(), axis);
    const std::size_t n = y.shape()[axis];
    const std::size_t inner = detail::axis_inner(y.shape(), axis);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t r = 0; r < inner; ++r) {
        double sum = 0;
        for (std::size_t i = 0; i < n; ++i) sum += y[o * n * inner + i * inner + r];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
    const Tensor<float>& s = ops::sigmoid(x).value();
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(s[i] > 0.0f);
      CHECK(s[i] < 1.0f);
    }
  }
}

TEST_CASE("dense affine map") {
  Tape<float> t;
  auto x = t.leaf(Tensor<float>({2, 2}, {1, 2, 3, 4}));
  auto eye = t.leaf(Tensor<float>({2, 2}, {1, 0, 0, 1}));
  auto zero_b = t.leaf(Tensor<float>({2}));
  const Tensor<float>& same = ops::dense(x, eye, zero_b).value();
  CHECK(same == t.value(x));

  auto x1 = t.leaf(Tensor<float>({1, 2}, {1, 2}));
  auto b1 = t.leaf(Tensor<float>({2}, {1, 1}));
  const Tensor<float>& y = ops::dense(x1, eye, b1).value();
  CHECK(y[0] == 2.0f);
  CHECK(y[1] == 3.0f);

  auto w_bad = t.leaf(Tensor<float>({3, 2}));
  CHECK_THROWS_WITH_AS(ops::dense(x1, w_bad, b1), doctest::Contains("inner dimension"),
                       ContractViolation);
}

TEST_CASE("dropout modes and determinism") {
  SplitMix64 rng(21);
  Tensor<float> xv = random_tensor({4, 8}, rng);
  Tape<float> t;
  auto x = t.leaf(xv);
  CHECK(ops::dropout(x, 0.0, Mode::Train, &rng).value() == xv);
  CHECK(ops::dropout(x, 0.5, Mode::Infer, nullptr).value() == xv);
  CHECK_THROWS_AS(ops::dropout(x, 1.0, Mode::Train, &rng), ContractViolation);
  CHECK_THROWS_AS(ops::dropout(x, -0.1, Mode::Train, &rng), ContractViolation);

  SplitMix64 r1(77), r2(77);
  Tape<float> t1, t2;
  auto a = ops::dropout(t1.leaf(xv), 0.4, Mode::Train, &r1);
  auto b = ops::dropout(t2.leaf(xv), 0.4, Mode::Train, &r2);
  CHECK(a.value() == b.value());
  bool any_zeroed = false;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    any_zeroed = any_zeroed || (a.value()[i] == 0.0f && xv[i] != 0.0f);
  }
  CHECK(any_zeroed);
}

TEST_CASE("backward populates leaf gradients") {
  Tape<float> t;
  auto x = t.leaf(Tensor<float>({3}, {5, -2, 9}), true);
  t.backward(ops::sum_all(x));
  const Tensor<float>& g = t.grad(x);
  CHECK(g[0] == 1.0f);
  CHECK(g[1] == 1.0f);
  CHECK(g[2] == 1.0f);

  Tape<float> t2;
  auto x2 = t2.leaf(Tensor<float>({2}, {1, 2}), true);
  t2.backward(ops::sum_all(ops::mul(x2, x2)));
  const Tensor<float>& g2 = t2.grad(x2);
  CHECK(g2[0] == 2.0f);
  CHECK(g2[1] == 4.0f);

  Tape<float> t3;
  auto x3 = t3.leaf(Tensor<float>({2, 2}), true);
  CHECK_THROWS_AS(t3.backward(ops::relu(x3)), ContractViolation);
}

TEST_CASE("composite conv-bn-relu-pool-dense chain passes the finite-difference oracle") {
  ScalarFn f = [](const std::vector<Tensor<double>>& point,
                  std::vector<Tensor<double>>* grads) -> double {
    Tape<double> tape;
    tape.set_grad_enabled(grads != nullptr);
    std::vector<Var<double>> in;
    for (const auto& p : point) in.push_back(tape.leaf(p, grads != nullptr));
    auto h = ops::conv2d(in[0], in[1], in[2], 1, Padding::Same);
    h = ops::batchnorm2d<double>(h, in[3], in[4], nullptr, nullptr, Mode::Train, 0.9, 1e-5);
    h = ops::relu(h);
    h = ops::maxpool2d(h);
    h = ops::reshape(h, {1, h.value().size()});
    h = ops::dense(h, in[5], in[6]);
    auto loss = ops::mean_all(ops::sigmoid(h));
    const double val = tape.value(loss)[0];
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (auto v : in) {
        const Tensor<double>* g = tape.grad_ptr(v);
        grads->push_back(g ? *g : Tensor<double>(tape.value(v).shape()));
      }
    }
    return val;
  };
  SplitMix64 rng(1234);
  auto rnd = [&](Shape s, double lo, double hi) {
    Tensor<double> t(std::move(s));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
  };
  std::vector<Tensor<double>> point{rnd({1, 2, 6, 6}, 0.0, 1.0),  rnd({2, 2, 3, 3}, -1.0, 1.0),
                                    rnd({2}, -0.2, 0.2),          rnd({2}, 0.5, 1.5),
                                    rnd({2}, -0.2, 0.2),          rnd({18, 3}, -1.0, 1.0),
                                    rnd({3}, -0.2, 0.2)};
  const GradCheckResult r = grad_check(f, point, 1e-5, 1e-4);
  CHECK(r.passed);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("grad_check is exact for a linear sum at a dyadic step") {
  ScalarFn f = [](const std::vector<Tensor<double>>& point,
                  std::vector<Tensor<double>>* grads) -> double {
    double acc = 0;
    for (double v : point[0].data()) acc += v;
    if (grads) {
      grads->clear();
      grads->push_back(Tensor<double>::full(point[0].shape(), 1.0));
    }
    return acc;
  };
  Tensor<double> point({4}, {1.0, 2.0, 3.0, 4.0});
  const GradCheckResult r = grad_check(f, {point}, 0x1.0p-17, 1e-4);
  CHECK(r.max_rel_err == 0.0);
  CHECK(r.passed);
}

TEST_CASE("grad_check flags a corrupted backward rule") {
  ScalarFn broken = [](const std::vector<Tensor<double>>& point,
                       std::vector<Tensor<double>>* grads) -> double {
    double acc = 0;
    for (double v : point[0].data()) acc += v * v;
    if (grads) {
      grads->clear();
      Tensor<double> g(point[0].shape());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = -2.0 * point[0][i];  // wrong sign
      grads->push_back(g);
    }
    return acc;
  };
  Tensor<double> point({3}, {0.7, -1.3, 2.1});
  const GradCheckResult r = grad_check(broken, {point}, 1e-5, 1e-4);
  CHECK_FALSE(r.passed);
  CHECK(r.max_rel_err > 1.0);
}

TEST_CASE("gradient suite passes for every primitive and both models") {
  const auto cases = run_gradcheck_suite(3, 1e-4);
  CHECK(all_passed(cases));
  CHECK(cases.size() >= 25);
}

TEST_CASE("optimizer leaves parameters alone under zero gradients") {
  ParamStore<float> store;
  store.add("w", Tensor<float>({3}, {1.0f, -2.0f, 0.5f}));
  Tape<float> tape;
  auto bound = store.bind(tape, true);
  auto loss = ops::sum_all(ops::scale(bound[0], 0.0f));
  tape.backward(loss);
  AdamOptimizer<float> adam(0.1);
  adam.step(store, tape, bound);
  CHECK(store[0].value == Tensor<float>({3}, {1.0f, -2.0f, 0.5f}));
  CHECK(adam.step_count() == 1);
}

TEST_CASE("optimizer descends on a scalar square") {
  ParamStore<float> store;
  store.add("w", Tensor<float>({1}, {1.0f}));
  AdamOptimizer<float> adam(0.1);
  Tape<float> tape;
  auto bound = store.bind(tape, true);
  tape.backward(ops::sum_all(ops::mul(bound[0], bound[0])));
  adam.step(store, tape, bound);
  CHECK(store[0].value[0] < 1.0f);
  CHECK(store[0].value[0] > 0.0f);
}

TEST_CASE("optimizer reaches the minimum of a convex quadratic") {
  // f(w) = w0^2 + 2 w1^2, minimum 0 at the origin
  ParamStore<float> store;
  store.add("w", Tensor<float>({2}, {1.0f, -1.5f}));
  AdamOptimizer<float> adam(0.1);
  double loss = 0;
  for (int step = 0; step < 200; ++step) {
    Tape<float> tape;
    auto bound = store.bind(tape, true);
    auto w2 = ops::mul(bound[0], bound[0]);
    auto scaled = ops::mul(w2, tape.leaf(Tensor<float>({2}, {1.0f, 2.0f})));
    auto l = ops::sum_all(scaled);
    loss = tape.value(l)[0];
    tape.backward(l);
    adam.step(store, tape, bound);
  }
  CHECK(loss < 1e-3);
}

TEST_CASE("optimizer demands gradients for every trainable parameter") {
  ParamStore<float> store;
  store.add("used", Tensor<float>({2}, {1.0f, 2.0f}));
  store.add("unused", Tensor<float>({2}, {3.0f, 4.0f}));
  Tape<float> tape;
  auto bound = store.bind(tape, true);
  tape.backward(ops::sum_all(bound[0]));
  AdamOptimizer<float> adam;
  CHECK_THROWS_WITH_AS(adam.step(store, tape, bound), doctest::Contains("unused"),
                       ContractViolation);
}

TEST_CASE("forward passes are bitwise deterministic") {
  SplitMix64 rng(31);
  Tensor<float> xv = random_tensor({2, 3, 8, 8}, rng);
  Tensor<float> wv = random_tensor({4, 3, 3, 3}, rng);
  Tensor<float> bv = random_tensor({4}, rng);
  auto run = [&]() {
    Tape<float> t;
    auto y = ops::conv2d(t.leaf(xv), t.leaf(wv), t.leaf(bv), 1, Padding::Same);
    auto s = ops::sigmoid(y);
    return s.value();
  };
  CHECK(run() == run());
}
