#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "pwh/lti.hpp"
#include "test_util.hpp"

using namespace pwh;

namespace {

// Naive difference equation a0 y(k) = sum b_i u(k-i) - sum_{i>0} a_i y(k-i).
Vec direct_recursion(const Vec& b, const Vec& a, const Vec& u) {
  Vec y = Vec::Zero(u.size());
  for (Eigen::Index k = 0; k < u.size(); ++k) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < b.size(); ++i)
      if (k - i >= 0) acc += b(i) * u(k - i);
    for (Eigen::Index i = 1; i < a.size(); ++i)
      if (k - i >= 0) acc -= a(i) * y(k - i);
    y(k) = acc / a(0);
  }
  return y;
}

// Plain O(N^2) DFT, bin k.
cplx dft_bin(const Vec& x, int k) {
  cplx acc = 0.0;
  const auto N = x.size();
  for (Eigen::Index n = 0; n < N; ++n)
    acc += x(n) * std::polar(1.0, -2.0 * std::numbers::pi * k * n / N);
  return acc;
}

}  // namespace

TEST_CASE("filter: pass-through and geometric impulse response") {
  Vec u = testutil::gaussian(64, 1);
  CHECK(max_abs(filter(RationalTF(), u) - u) == 0.0);

  RationalTF tf(Vec::Ones(1), (Vec(2) << 1.0, -0.5).finished());
  Vec imp = Vec::Zero(20);
  imp(0) = 1.0;
  const Vec y = filter(tf, imp);
  for (int k = 0; k < 20; ++k) CHECK(y(k) == doctest::Approx(std::pow(0.5, k)).epsilon(1e-15));
}

TEST_CASE("filter: matches direct recursion for random order-6 systems") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    RationalTF tf = testutil::random_stable_tf(6, 6, rng);
    Vec u = testutil::gaussian(256, 100 + trial);
    const Vec ref = direct_recursion(tf.num(), tf.den(), u);
    CHECK(max_abs(filter(tf, u) - ref) < 1e-12);
  }
}

TEST_CASE("filter: steady periodic response is periodic") {
  std::mt19937_64 rng(3);
  RationalTF tf = testutil::random_stable_tf(4, 6, rng);
  Vec u = testutil::gaussian(128, 5);
  const Vec y = filter(tf, u, InitialState::steady_periodic);
  // Long zero-state run over many periods converges to the same thing.
  Vec tiled(128 * 40);
  for (int p = 0; p < 40; ++p) tiled.segment(128 * p, 128) = u;
  const Vec long_run = filter(tf, tiled);
  CHECK(max_abs(long_run.tail(128) - y) < 1e-12 * (1.0 + y.cwiseAbs().maxCoeff()));

  // FIR with a period shorter than its memory.
  RationalTF fir((Vec(6) << 1, 0.5, -0.2, 0.3, 0.1, -0.4).finished(), Vec::Ones(1));
  Vec shortu = testutil::gaussian(3, 9);
  Vec tiled_short(3 * 10);
  for (int p = 0; p < 10; ++p) tiled_short.segment(3 * p, 3) = shortu;
  CHECK(max_abs(filter(fir, tiled_short).tail(3) -
                filter(fir, shortu, InitialState::steady_periodic)) < 1e-14);
}

TEST_CASE("filter: linearity and commuting cascades") {
  std::mt19937_64 rng(11);
  RationalTF t1 = testutil::random_stable_tf(3, 4, rng);
  RationalTF t2 = testutil::random_stable_tf(2, 5, rng);
  Vec u1 = testutil::gaussian(300, 1), u2 = testutil::gaussian(300, 2);
  const double alpha = 0.7, beta = -2.3;
  CHECK(max_abs(filter(t1, alpha * u1 + beta * u2) -
                (alpha * filter(t1, u1) + beta * filter(t1, u2))) < 1e-10);
  CHECK(max_abs(filter(t1, filter(t2, u1)) - filter(t2, filter(t1, u1))) < 1e-9);
}

TEST_CASE("freq_response: unit, delay, and impulse-response DFT oracle") {
  std::vector<int> bins{1, 5, 17, 100, 511};
  const CVec ones = RationalTF().freq_response(bins, 1024);
  for (Eigen::Index i = 0; i < ones.size(); ++i) CHECK(std::abs(ones(i) - 1.0) == 0.0);

  RationalTF delay((Vec(2) << 0.0, 1.0).finished(), Vec::Ones(1));
  const CVec d = delay.freq_response(bins, 1024);
  for (std::size_t i = 0; i < bins.size(); ++i)
    CHECK(std::abs(d(i) - std::polar(1.0, -2.0 * std::numbers::pi * bins[i] / 1024)) < 1e-15);

  std::mt19937_64 rng(5);
  RationalTF tf = testutil::random_stable_tf(6, 6, rng, 0.8);
  Vec imp = Vec::Zero(1024);
  imp(0) = 1.0;
  // Periodic impulse response: its DFT equals the frequency response exactly.
  const Vec h = filter(tf, imp, InitialState::steady_periodic);
  const CVec G = tf.freq_response(bins, 1024);
  for (std::size_t i = 0; i < bins.size(); ++i)
    CHECK(std::abs(dft_bin(h, bins[i]) - G(i)) < 1e-9);

  CHECK_THROWS_AS(tf.freq_response(std::vector<int>{0}, 1024), std::out_of_range);
  CHECK_THROWS_AS(tf.freq_response(std::vector<int>{512}, 1024), std::out_of_range);
}

TEST_CASE("freq_response of a product is the product of responses") {
  std::mt19937_64 rng(8);
  RationalTF t1 = testutil::random_stable_tf(3, 3, rng);
  RationalTF t2 = testutil::random_stable_tf(2, 4, rng);
  std::vector<int> bins;
  for (int k = 1; k < 64; k += 3) bins.push_back(k);
  const CVec lhs = (t1 * t2).freq_response(bins, 128);
  const CVec rhs = t1.freq_response(bins, 128).cwiseProduct(t2.freq_response(bins, 128));
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("RationalTF construction rules") {
  RationalTF scaled((Vec(1) << 4.0).finished(), (Vec(2) << 2.0, -1.0).finished());
  CHECK(scaled.den()(0) == 1.0);
  CHECK(scaled.num()(0) == 2.0);
  CHECK_THROWS_AS(RationalTF(Vec::Ones(1), Vec()), std::invalid_argument);
  CHECK_THROWS_AS(RationalTF(Vec::Ones(1), (Vec(2) << 0.0, 1.0).finished()),
                  std::invalid_argument);
  CHECK_THROWS_AS(RationalTF(Vec::Ones(1), (Vec(2) << 1.0, -1.5).finished()),
                  std::invalid_argument);
  const auto j = scaled.to_json();
  CHECK(j.dump() == R"({"den":[1.0,-0.5],"num":[2.0]})");
  const RationalTF back = RationalTF::from_json(j);
  CHECK(back.num() == scaled.num());
  CHECK(back.den() == scaled.den());
}

TEST_CASE("roots_of: linear factors and conjugate grouping") {
  RationalTF tf((Vec(2) << 1.0, -1.0).finished(), (Vec(2) << 1.0, -0.25).finished());
  const auto zp = roots_of(tf);
  REQUIRE(zp.zeros.groups().size() == 1);
  CHECK(zp.zeros.groups()[0].root.real() == doctest::Approx(1.0));
  CHECK(zp.poles.groups()[0].root.real() == doctest::Approx(0.25));

  // 1 - w + 0.5 w^2 -> z^2 - z + 0.5 = 0 -> z = 0.5 +- 0.5j
  RationalTF q((Vec(3) << 1.0, -1.0, 0.5).finished(), Vec::Ones(1));
  const auto zq = roots_of(q);
  REQUIRE(zq.zeros.groups().size() == 1);
  CHECK(zq.zeros.groups()[0].pair);
  CHECK(std::abs(zq.zeros.groups()[0].root - cplx(0.5, 0.5)) < 1e-14);
}

TEST_CASE("roots_of / from_roots round trip") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    RationalTF tf = testutil::random_stable_tf(8, 8, rng);
    const auto zp = roots_of(tf);
    const RationalTF back = from_roots(zp.zeros, zp.poles);
    CHECK(max_abs(back.num() - tf.num()) < 1e-8 * tf.num().cwiseAbs().maxCoeff());
    CHECK(max_abs(back.den() - tf.den()) < 1e-8 * tf.den().cwiseAbs().maxCoeff());
    // And roots of the rebuilt TF match the originals.
    const auto zp2 = roots_of(back);
    auto r1 = zp.poles.roots(), r2 = zp2.poles.roots();
    CHECK(testutil::hausdorff(r1, r2) < 1e-8);
  }
}

TEST_CASE("from_roots: trivial cases and unpaired roots") {
  const RationalTF unit = from_roots(RootSet(), RootSet());
  CHECK(unit.num().size() == 1);
  CHECK(unit.num()(0) == 1.0);
  CHECK(unit.den()(0) == 1.0);

  const RationalTF p = from_roots(RootSet(), RootSet({{cplx(0.5, 0.0), false}}));
  CHECK(p.den().size() == 2);
  CHECK(p.den()(1) == doctest::Approx(-0.5));

  std::vector<cplx> bad{cplx(0.3, 0.4)};
  CHECK_THROWS_AS(RootSet::from_roots(bad), std::invalid_argument);
  CHECK_THROWS_AS(RootSet({{cplx(0.3, 0.4), false}}), std::invalid_argument);
}

TEST_CASE("factor: delays and trimmed degree") {
  std::vector<std::string> warnings;
  const Vec c = (Vec(4) << 0.0, 2.0, -1.0, 0.0).finished();
  const RootSet rs = factor(c, &warnings);
  CHECK(rs.delay() == 1);
  CHECK(rs.gain() == 2.0);
  CHECK(rs.degree() == 1);
  CHECK(warnings.size() == 1);
  const Vec back = rs.polynomial();
  CHECK(max_abs(back - c.head(3)) < 1e-15);
}

TEST_CASE("reflect_unstable_roots keeps stable roots and mirrors the rest") {
  // (1 - 2w)(1 - 0.5w) = 1 - 2.5w + w^2
  const Vec den = (Vec(3) << 1.0, -2.5, 1.0).finished();
  int n = 0;
  const Vec r = reflect_unstable_roots(den, &n);
  CHECK(n == 1);
  CHECK(is_stable_polynomial(r));
  // Both roots become 0.5: (1 - 0.5w)^2.
  CHECK(r(1) == doctest::Approx(-1.0));
  CHECK(r(2) == doctest::Approx(0.25));
}

TEST_CASE("circular_delay wraps around") {
  const Vec x = (Vec(4) << 1, 2, 3, 4).finished();
  CHECK(circular_delay(x, 1) == (Vec(4) << 4, 1, 2, 3).finished());
  CHECK(circular_delay(x, -1) == (Vec(4) << 2, 3, 4, 1).finished());
}
