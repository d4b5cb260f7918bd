#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "codedvtr/error.hpp"
#include "codedvtr/finite_diff.hpp"
#include "codedvtr/matrix.hpp"
#include "codedvtr/numerics.hpp"
#include "codedvtr/optimizer.hpp"
#include "codedvtr/parallel.hpp"
#include "codedvtr/param_store.hpp"
#include "support.hpp"

using namespace cvtr;
using Catch::Approx;

TEST_CASE("softmax hand values", "[numerics]") {
  const std::vector<double> zeros{0, 0, 0};
  for (double p : softmax(zeros)) CHECK(p == Approx(1.0 / 3.0));
  const std::vector<double> v{1, 0};
  const auto p = softmax(v);
  // e / (e + 1)
  CHECK(p[0] == Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).margin(1e-12));
  CHECK(p[0] == Approx(0.7311).margin(1e-4));
  CHECK(p[1] == Approx(0.2689).margin(1e-4));
}

TEST_CASE("softmax at high temperature tends to uniform", "[numerics]") {
  const std::vector<double> v{3.0, -1.0, 0.5, 10.0};
  for (double p : softmax(v, 1e9)) CHECK(p == Approx(0.25).margin(1e-8));
}

TEST_CASE("softmax sums to one under large shifts", "[numerics]") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> v(1 + rng() % 30);
    for (double& x : v) x = 1e6 + 50.0 * rnd::normal(rng);
    const auto p = softmax(v, 0.1 + rnd::uniform01(rng));
    CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) <= 1e-12);
  }
}

TEST_CASE("softmax validates its inputs", "[numerics]") {
  const std::vector<double> v{1.0, 2.0};
  CHECK_THROWS_AS(softmax(v, 0.0), ValidationError);
  CHECK_THROWS_AS(softmax(v, -1.0), ValidationError);
  const std::vector<double> bad{1.0, NAN};
  CHECK_THROWS_AS(softmax(bad), NumericalError);
}

TEST_CASE("entropy hand values", "[numerics]") {
  const std::vector<double> uniform(24, 1.0 / 24.0);
  CHECK(entropy(uniform) == Approx(std::log(24.0)));
  CHECK(entropy(uniform) == Approx(3.1781).margin(1e-4));
  const std::vector<double> hot{0, 1, 0};
  CHECK(entropy(hot) == 0.0);
  const std::vector<double> half{0.5, 0.5, 0, 0};
  CHECK(entropy(half) == Approx(std::log(2.0)));
  const std::vector<double> bad{0.5, 0.6};
  CHECK_THROWS_AS(entropy(bad), ValidationError);
}

TEST_CASE("entropy is bounded by ln n and peaks at uniform", "[numerics]") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(2 + rng() % 10);
    for (double& x : p) x = rnd::uniform01(rng);
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& x : p) x /= s;
    const double h = entropy(p);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(static_cast<double>(p.size())) + 1e-12);
  }
}

namespace {

ParamStore scalar_store(double x0) {
  ParamStore s;
  s.add("x", {1});
  s.freeze();
  s.all_values()[0] = x0;
  return s;
}

}  // namespace

TEST_CASE("adam minimises a quadratic bowl", "[numerics]") {
  ParamStore s = scalar_store(1.0);
  AdamConfig cfg;
  cfg.lr = 0.1;
  auto state = make_optimizer(s, cfg);
  for (int i = 0; i < 200; ++i) {
    s.all_grads()[0] = 2.0 * s.all_values()[0];
    adam_step(s, state);
  }
  CHECK(std::abs(s.all_values()[0]) < 1e-2);
}

TEST_CASE("adam with a constant gradient keeps decreasing", "[numerics]") {
  ParamStore s = scalar_store(0.0);
  auto state = make_optimizer(s, AdamConfig{});
  double prev = s.all_values()[0];
  for (int i = 0; i < 50; ++i) {
    s.all_grads()[0] = 1.0;
    adam_step(s, state);
    CHECK(s.all_values()[0] < prev);
    prev = s.all_values()[0];
  }
}

TEST_CASE("adam with zero gradients only applies weight decay", "[numerics]") {
  ParamStore s = scalar_store(2.0);
  auto state = make_optimizer(s, AdamConfig{});
  for (int i = 0; i < 10; ++i) adam_step(s, state);
  CHECK(s.all_values()[0] == 2.0);

  AdamConfig decay;
  decay.lr = 0.1;
  decay.weight_decay = 0.5;
  ParamStore d = scalar_store(2.0);
  auto dstate = make_optimizer(d, decay);
  adam_step(d, dstate);
  CHECK(d.all_values()[0] == Approx(2.0 * (1.0 - 0.05)));
}

TEST_CASE("adam skips frozen slices and rejects non-finite gradients", "[numerics]") {
  ParamStore s;
  s.add("w", {2});
  s.add("t", {1}, false);
  s.freeze();
  s.all_values()[2] = 3.0;
  auto state = make_optimizer(s, AdamConfig{});
  for (double& g : s.all_grads()) g = 1.0;
  adam_step(s, state);
  CHECK(s.all_values()[2] == 3.0);
  s.all_grads()[0] = NAN;
  CHECK_THROWS_AS(adam_step(s, state), NumericalError);
}

TEST_CASE("finite differences on a sum of squares", "[numerics]") {
  ParamStore s;
  s.add("x", {2});
  s.add("unused", {3});
  s.freeze();
  s.all_values()[0] = 1.0;
  s.all_values()[1] = 2.0;
  const LossFn loss = [](ParamStore& st, bool g) {
    const auto x = st.values(0);
    if (g) {
      st.grads(0)[0] = 2.0 * x[0];
      st.grads(0)[1] = 2.0 * x[1];
    }
    return x[0] * x[0] + x[1] * x[1];
  };
  const auto r = finite_diff_check(loss, s, 1e-5);
  CHECK(s.grads(0)[0] == 2.0);
  CHECK(s.grads(0)[1] == 4.0);
  CHECK(r.slices[0].max_rel_error < 1e-9);
  CHECK(r.slices[1].max_rel_error == 0.0);
  CHECK(r.checked == 5);

  const auto sampled = finite_diff_check(loss, s, 1e-5, 2, 9);
  CHECK(sampled.checked == 2);
}

TEST_CASE("finite differences catch a wrong gradient", "[numerics]") {
  ParamStore s = scalar_store(1.5);
  const LossFn wrong = [](ParamStore& st, bool g) {
    const double x = st.all_values()[0];
    if (g) st.all_grads()[0] = 3.0 * x;
    return x * x;
  };
  CHECK(finite_diff_check(wrong, s).max_rel_error > 0.3);
}

TEST_CASE("parameter store layout and lookup", "[numerics]") {
  ParamStore s;
  const auto a = s.add("a", {2, 3});
  const auto b = s.add("b", {4}, false);
  s.freeze();
  CHECK(s.size() == 10);
  CHECK(s.trainable_size() == 6);
  CHECK(s.slice(b).offset == 6);
  CHECK(s.find("b") == b);
  CHECK(s.values(a).size() == 6);
  CHECK_THROWS(s.find("zzz"));
  CHECK_THROWS(s.add("c", {1}));
}

TEST_CASE("matmul and its backward match direct loops", "[numerics]") {
  std::mt19937_64 rng(4);
  const Matrix x = testing::random_matrix(130, 5, rng);
  std::vector<double> w(5 * 3), bias(3);
  testing::randomize(w, rng, 1.0);
  testing::randomize(bias, rng, 1.0);
  const Matrix y = linalg::matmul(x, w, 3, bias);
  const Matrix dy = testing::random_matrix(130, 3, rng);
  std::vector<double> dw(15, 0.0), db(3, 0.0);
  const Matrix dx = linalg::matmul_backward(x, dy, w, dw, db);
  for (std::size_t r = 0; r < 130; ++r)
    for (std::size_t o = 0; o < 3; ++o) {
      double s = bias[o];
      for (std::size_t k = 0; k < 5; ++k) s += x(r, k) * w[k * 3 + o];
      CHECK(y(r, o) == Approx(s).margin(1e-12));
    }
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t o = 0; o < 3; ++o) {
      double s = 0.0;
      for (std::size_t r = 0; r < 130; ++r) s += x(r, k) * dy(r, o);
      CHECK(dw[k * 3 + o] == Approx(s).margin(1e-10));
    }
  for (std::size_t r = 0; r < 130; ++r)
    for (std::size_t k = 0; k < 5; ++k) {
      double s = 0.0;
      for (std::size_t o = 0; o < 3; ++o) s += dy(r, o) * w[k * 3 + o];
      CHECK(dx(r, k) == Approx(s).margin(1e-12));
    }
}

TEST_CASE("chunked reduction is identical for any thread count", "[numerics]") {
  std::mt19937_64 rng(5);
  std::vector<double> data(10007);
  for (double& v : data) v = rnd::normal(rng) * std::pow(10.0, static_cast<double>(rng() % 12) - 6.0);
  auto run = [&](int threads) {
    par::set_threads(threads);
    std::vector<double> out(2, 0.0);
    par::chunked_accumulate(data.size(), out, [&](std::size_t, std::size_t b, std::size_t e, std::span<double> p) {
      for (std::size_t i = b; i < e; ++i) {
        p[0] += data[i];
        p[1] += data[i] * data[i];
      }
    });
    return out;
  };
  const int before = par::threads();
  const auto one = run(1);
  const auto four = run(4);
  const auto seven = run(7);
  par::set_threads(before);
  CHECK(one == four);
  CHECK(one == seven);
}
