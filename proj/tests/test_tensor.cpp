#include <doctest.h>

#include <cmath>

#include "cunet/tensor.hpp"
#include "oracle_support.hpp"

using namespace cunet;
using oracle::random_bank;
using oracle::random_tensor;

namespace {
FilterBank delta_bank(int k, int s, int c_in) {
  FilterBank b(k, s, c_in);
  const int a = b.anchor();
  for (int kk = 0; kk < k; ++kk) b.at(kk, a, a, kk % c_in) = 1.0;
  return b;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}
}  // namespace

TEST_CASE("conv_same with a centered delta is the identity") {
  SeededRng rng(1);
  Tensor t = random_tensor(6, 7, 1, rng);
  Tensor out = conv_same(delta_bank(1, 3, 1), t);
  CHECK(max_abs_diff(out, t) == 0.0);
}

TEST_CASE("conv_same all-ones 3x3 on a constant image counts taps") {
  FilterBank ones(1, 3, 1);
  for (double& v : ones.data()) v = 1.0;
  Tensor t(5, 5, 1, 2.0);
  Tensor out = conv_same(ones, t);
  CHECK(out.at(2, 2, 0) == doctest::Approx(18.0));  // 9 taps * 2
  CHECK(out.at(0, 0, 0) == doctest::Approx(8.0));   // 4 taps * 2
  CHECK(out.at(0, 2, 0) == doctest::Approx(12.0));  // 6 taps * 2
}

TEST_CASE("conv_same matches the four-nested-loop reference") {
  SeededRng rng(2);
  for (int s : {1, 2, 3, 4, 5}) {
    FilterBank b = random_bank(2, s, 1, rng);
    Tensor t = random_tensor(5, 5, 1, rng);
    CHECK(max_abs_diff(conv_same(b, t), oracle::conv_reference(b, t)) <= 1e-12);
  }
  FilterBank b = random_bank(3, 3, 2, rng);
  Tensor t = random_tensor(6, 4, 2, rng);
  CHECK(max_abs_diff(conv_same(b, t), oracle::conv_reference(b, t)) <= 1e-12);
}

TEST_CASE("conv ops reject channel mismatch") {
  FilterBank b(2, 3, 2);
  Tensor t(4, 4, 1);
  CHECK_THROWS_AS(conv_same(b, t), contract_error);
  CHECK_THROWS_AS(adjoint_conv(b, t), contract_error);
}

TEST_CASE("conv_same is linear") {
  SeededRng rng(3);
  FilterBank b = random_bank(2, 3, 1, rng);
  Tensor u = random_tensor(6, 6, 1, rng);
  Tensor v = random_tensor(6, 6, 1, rng);
  Tensor lhs = conv_same(b, add(scale(u, 2.5), scale(v, -1.25)));
  Tensor rhs = add(scale(conv_same(b, u), 2.5), scale(conv_same(b, v), -1.25));
  CHECK(max_abs_diff(lhs, rhs) <= 1e-12);
}

TEST_CASE("adjoint_conv of a centered delta is the identity") {
  SeededRng rng(4);
  Tensor r = random_tensor(5, 6, 1, rng);
  CHECK(max_abs_diff(adjoint_conv(delta_bank(1, 3, 1), r), r) == 0.0);
}

TEST_CASE("adjoint_conv of zero is zero") {
  SeededRng rng(5);
  FilterBank b = random_bank(3, 4, 2, rng);
  Tensor r(7, 7, 3);
  CHECK(sq_l2_norm(adjoint_conv(b, r)) == 0.0);
}

TEST_CASE("adjoint identity over 100 seeded trials") {
  for (int trial = 0; trial < 100; ++trial) {
    SeededRng rng(1000 + trial);
    const int k = 1 + rng.uniform_int(4);
    const int s = 1 + rng.uniform_int(5);
    const int c = 1 + rng.uniform_int(3);
    const int h = 4 + rng.uniform_int(8);
    const int w = 4 + rng.uniform_int(8);
    FilterBank b = random_bank(k, s, c, rng);
    Tensor u = random_tensor(h, w, c, rng);
    Tensor r = random_tensor(h, w, k, rng);
    const double lhs = dot(conv_same(b, u), r);
    const double rhs = dot(u, adjoint_conv(b, r));
    CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("soft_threshold definition values") {
  Tensor t(1, 3, 1);
  t.at(0, 0, 0) = 1.5;
  t.at(0, 1, 0) = -1.5;
  t.at(0, 2, 0) = 0.3;
  Tensor out = soft_threshold(t, 1.0);
  CHECK(out.at(0, 0, 0) == doctest::Approx(0.5));
  CHECK(out.at(0, 1, 0) == doctest::Approx(-0.5));
  CHECK(out.at(0, 2, 0) == 0.0);
}

TEST_CASE("soft_threshold with zero threshold is the identity") {
  SeededRng rng(6);
  Tensor t = random_tensor(4, 4, 2, rng);
  CHECK(max_abs_diff(soft_threshold(t, 0.0), t) == 0.0);
}

TEST_CASE("soft_threshold rejects negative thresholds") {
  Tensor t(2, 2, 1);
  CHECK_THROWS_AS(soft_threshold(t, -0.1), contract_error);
}

TEST_CASE("soft_threshold applies per-channel thresholds") {
  Tensor t(1, 1, 2);
  t.at(0, 0, 0) = 1.0;
  t.at(0, 0, 1) = 1.0;
  std::vector<double> theta{0.25, 0.75};
  Tensor out = soft_threshold(t, theta);
  CHECK(out.at(0, 0, 0) == doctest::Approx(0.75));
  CHECK(out.at(0, 0, 1) == doctest::Approx(0.25));
}

TEST_CASE("soft_threshold is the proximal map of theta * |.|") {
  // argmin_u 1/2 (u-v)^2 + theta |u| located by dense grid search on [-3,3].
  for (double v : {-2.0, -0.4, 0.0, 0.7, 2.4}) {
    for (double theta : {0.0, 0.3, 1.0}) {
      double best_u = -3.0, best_obj = 1e300;
      for (double u = -3.0; u <= 3.0; u += 1e-4) {
        const double obj = 0.5 * (u - v) * (u - v) + theta * std::abs(u);
        if (obj < best_obj) {
          best_obj = obj;
          best_u = u;
        }
      }
      Tensor t(1, 1, 1);
      t.at(0, 0, 0) = v;
      CHECK(std::abs(soft_threshold(t, theta).at(0, 0, 0) - best_u) <= 1e-3);
    }
  }
}

TEST_CASE("soft_threshold is 1-Lipschitz, sign-preserving, non-expansive") {
  SeededRng rng(7);
  Tensor a = random_tensor(6, 6, 1, rng, -2.0, 2.0);
  Tensor b = random_tensor(6, 6, 1, rng, -2.0, 2.0);
  const double theta = 0.4;
  Tensor sa = soft_threshold(a, theta);
  Tensor sb = soft_threshold(b, theta);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::abs(sa.data()[i] - sb.data()[i]) <= std::abs(a.data()[i] - b.data()[i]) + 1e-15);
    CHECK(sa.data()[i] * a.data()[i] >= 0.0);
    CHECK(std::abs(sa.data()[i]) <= std::abs(a.data()[i]) + 1e-15);
  }
}

TEST_CASE("elementwise ops and norms") {
  Tensor z(2, 2, 1);
  CHECK(l1_norm(z) == 0.0);
  Tensor half(2, 2, 1, 0.5);
  CHECK(sq_l2_norm(half) == doctest::Approx(1.0));

  SeededRng rng(8);
  Tensor a = random_tensor(3, 3, 2, rng);
  Tensor b = random_tensor(3, 3, 2, rng);
  Tensor back = sub(add(a, b), b);
  CHECK(max_abs_diff(back, a) <= 1e-15);

  Tensor wrong(3, 3, 1);
  CHECK_THROWS_AS(add(a, wrong), contract_error);
  CHECK_THROWS_AS(sub(a, wrong), contract_error);
  CHECK_THROWS_AS(dot(a, wrong), contract_error);
}

TEST_CASE("concat and slice round-trip") {
  SeededRng rng(9);
  Tensor a = random_tensor(4, 5, 2, rng);
  Tensor b = random_tensor(4, 5, 1, rng);
  Tensor cat = concat_channels(a, b);
  CHECK(cat.channels() == 3);
  CHECK(max_abs_diff(slice_channels(cat, 0, 2), a) == 0.0);
  CHECK(max_abs_diff(slice_channels(cat, 2, 1), b) == 0.0);
}

TEST_CASE("f32 precision mode rounds produced samples") {
  set_precision(Precision::f32);
  Tensor t(1, 1, 1);
  t.at(0, 0, 0) = 1.0;
  Tensor out = scale(t, 1.0 / 3.0);
  CHECK(out.at(0, 0, 0) == static_cast<double>(static_cast<float>(1.0 / 3.0)));
  set_precision(Precision::f64);
  Tensor out64 = scale(t, 1.0 / 3.0);
  CHECK(out64.at(0, 0, 0) == 1.0 / 3.0);
}
