#include <chrono>
#include <cmath>
#include <random>

#include "doctest.h"
#include "pwh/structure.hpp"
#include "test_util.hpp"

using namespace pwh;

namespace {

BranchDecomposition true_decomposition(const TrueSystem& sys) {
  BranchDecomposition d;
  d.n_br = sys.n_br();
  d.shared_den = true_common_denominator(sys);
  d.branch_numerators = true_effective_numerators(sys);
  return d;
}

bool near_any(cplx r, const std::vector<cplx>& set, double tol = 1e-6) {
  for (const auto& s : set)
    if (std::abs(r - s) < tol) return true;
  return false;
}

// Masks of the exact model: a root goes front when it is a root of the
// corresponding front polynomial of from_true_system.
PartitionMasks true_masks(const PartitionSpace& s, const TrueSystem& sys) {
  const auto m = ParallelWHModel::from_true_system(sys);
  PartitionMasks out;
  const auto front_poles = poly_roots(m.fronts[0].den());
  for (std::size_t g = 0; g < s.poles.groups().size(); ++g)
    if (near_any(s.poles.groups()[g].root, front_poles)) out.poles |= std::uint64_t{1} << g;
  for (int i = 0; i < s.n_br(); ++i) {
    const auto front_zeros = m.fronts[i].num().size() > 1 ? poly_roots(m.fronts[i].num()) : std::vector<cplx>{};
    std::uint64_t z = 0;
    for (std::size_t g = 0; g < s.zeros[i].groups().size(); ++g)
      if (near_any(s.zeros[i].groups()[g].root, front_zeros)) z |= std::uint64_t{1} << g;
    out.zeros.push_back(z);
  }
  return out;
}

Dataset records(const TrueSystem& sys, int N, std::vector<double> amps, std::uint64_t seed) {
  Dataset d;
  for (std::size_t r = 0; r < amps.size(); ++r) {
    MultisineSpec s;
    s.N = N;
    s.excited_bins = bin_range(1, N / 2 - 1);
    s.amplitude = amps[r];
    s.seed = seed + r;
    d.u.push_back(multisine_period(s, 0));
    d.y.push_back(simulate_signal(sys, d.u.back(), InitialState::steady_periodic));
  }
  return d;
}

BasisDescriptor poly(int degree) {
  BasisDescriptor b;
  b.degree = degree;
  return b;
}

// Independent count: every mask combination checked against the rules.
std::uint64_t brute_count(const PartitionSpace& s) {
  auto deg = [](const RootSet& rs, std::uint64_t m) {
    int d = 0;
    for (std::size_t g = 0; g < rs.groups().size(); ++g)
      if (m >> g & 1U) d += rs.groups()[g].degree();
    return d;
  };
  const int P = s.poles.degree();
  std::uint64_t n = 0;
  for (std::uint64_t pm = 0; pm < (std::uint64_t{1} << s.n_pole_units()); ++pm) {
    const int pf = deg(s.poles, pm);
    if (s.max_front_order >= 0 && pf > s.max_front_order) continue;
    if (s.max_back_order >= 0 && P - pf > s.max_back_order) continue;
    std::uint64_t prod = 1;
    for (int i = 0; i < s.n_br(); ++i) {
      const RootSet& z = s.zeros[i];
      int Z = 0;
      for (const auto& g : z.groups()) Z += g.degree();
      std::uint64_t ok = 0;
      for (std::uint64_t zm = 0; zm < (std::uint64_t{1} << s.n_zero_units(i)); ++zm) {
        const int zf = deg(z, zm);
        if (!s.proper || (zf <= pf && Z - zf <= P - pf)) ++ok;
      }
      prod *= ok;
    }
    n += prod;
  }
  return n;
}

RootSet random_roots(std::mt19937_64& rng, int n_real, int n_pairs, int delay) {
  std::uniform_real_distribution<double> mag(0.1, 0.9), ang(0.3, 2.8);
  std::vector<RootGroup> g;
  for (int k = 0; k < n_real; ++k) g.push_back({cplx(mag(rng) * (k % 2 ? -1.0 : 1.0), 0.0), false});
  for (int k = 0; k < n_pairs; ++k) g.push_back({std::polar(mag(rng), ang(rng)), true});
  return RootSet(std::move(g), 1.0, delay);
}

}  // namespace

TEST_CASE("count_partitions: published scan sizes for order 10 and two branches") {
  const auto t0 = std::chrono::steady_clock::now();
  CHECK(count_partitions(10, 10, 2, RootStructure::all_real, false) == (std::uint64_t{1} << 30));
  CHECK(count_partitions(10, 10, 2, RootStructure::all_conjugate, false) == 32768);
  CHECK(count_partitions(10, 10, 2, RootStructure::all_real, true) == 184756);
  CHECK(count_partitions(10, 10, 2, RootStructure::all_conjugate, true) == 252);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 1.0);
}

TEST_CASE("count_partitions: order 12 proper bounds bracket the measured scan of 140817") {
  const auto lo = count_partitions(12, 12, 2, RootStructure::all_conjugate, true);
  const auto hi = count_partitions(12, 12, 2, RootStructure::all_real, true);
  CHECK(lo == 924);
  CHECK(hi == 2704156);
  CHECK(lo <= 140817);
  CHECK(140817 <= hi);
}

TEST_CASE("count_partitions: errors") {
  CHECK_THROWS_AS(count_partitions(-1, 2, 1, RootStructure::all_real, false), std::invalid_argument);
  CHECK_THROWS_AS(count_partitions(3, 2, 1, RootStructure::all_conjugate, false), std::invalid_argument);
}

TEST_CASE("enumerate_partitions: one pole, one zero, one branch") {
  PartitionSpace s;
  s.poles = RootSet({{cplx(0.5, 0.0), false}});
  s.zeros = {RootSet({{cplx(-0.3, 0.0), false}}, 2.0)};
  s.proper = false;
  const auto all = enumerate_partitions(s);
  REQUIRE(all.size() == 4);
  // Lexicographic: poles most significant.
  CHECK(all[0].poles == 0);
  CHECK(all[0].zeros[0] == 0);
  CHECK(all[1].zeros[0] == 1);
  CHECK(all[2].poles == 1);
  CHECK(all[3].zeros[0] == 1);

  // Proper: the zero has to follow the pole (zf <= pf and 1 - zf <= 1 - pf).
  s.proper = true;
  const auto proper = enumerate_partitions(s);
  REQUIRE(proper.size() == 2);
  CHECK(proper[0].poles == 0);
  CHECK(proper[0].zeros[0] == 0);
  CHECK(proper[1].poles == 1);
  CHECK(proper[1].zeros[0] == 1);
}

TEST_CASE("enumerate_partitions: stream length matches the counts on random structures") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> small(0, 3), br(1, 3), coin(0, 1), cap(-1, 6);
  for (int trial = 0; trial < 100; ++trial) {
    PartitionSpace s;
    s.poles = random_roots(rng, small(rng), small(rng), 0);
    const int nb = br(rng);
    for (int i = 0; i < nb; ++i) s.zeros.push_back(random_roots(rng, small(rng) % 3, small(rng) % 2, small(rng) % 2));
    s.proper = coin(rng) == 1;
    s.max_front_order = cap(rng);
    s.max_back_order = cap(rng);
    std::uint64_t n = 0;
    PartitionMasks prev;
    bool ordered = true;
    enumerate_partitions(s, [&](const PartitionMasks& m) {
      if (n > 0 && !(prev < m)) ordered = false;
      prev = m;
      ++n;
    });
    CHECK(n == count_admissible(s));
    CHECK(n == brute_count(s));
    CHECK(ordered);
  }
}

TEST_CASE("count_admissible equals the closed form on homogeneous unconstrained spaces") {
  std::mt19937_64 rng(5);
  for (int n = 0; n <= 4; n += 2) {
    PartitionSpace real, conj;
    real.proper = conj.proper = false;
    real.poles = random_roots(rng, n, 0, 0);
    conj.poles = random_roots(rng, 0, n / 2, 0);
    for (int i = 0; i < 2; ++i) {
      real.zeros.push_back(random_roots(rng, n, 0, 0));
      conj.zeros.push_back(random_roots(rng, 0, n / 2, 0));
    }
    CHECK(count_admissible(real) == count_partitions(n, n, 2, RootStructure::all_real, false));
    CHECK(count_admissible(conj) == count_partitions(n, n, 2, RootStructure::all_conjugate, false));
  }
}

TEST_CASE("enumerate_partitions: cap exceeded") {
  std::mt19937_64 rng(1);
  PartitionSpace s;
  s.proper = false;
  s.poles = random_roots(rng, 6, 0, 0);
  s.zeros = {random_roots(rng, 6, 0, 0)};
  CHECK_THROWS_AS(enumerate_partitions(s, 100), std::length_error);
  CHECK(enumerate_partitions(s, 4096).size() == 4096);
}

TEST_CASE("split_branch: front times back reproduces the branch response") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto d = true_decomposition(sys);
  const auto s = PartitionSpace::from_decomposition(d);
  const auto all = enumerate_partitions(s);
  const auto bins = bin_range(1, 127);
  const int N = 256;
  double worst = 0.0;
  for (std::size_t k = 0; k < all.size(); k += 17) {
    for (int i = 0; i < 2; ++i) {
      const auto [f, b] = split_branch(s, all[k], i);
      const CVec g = d.branch_tf(i).freq_response(bins, N);
      const CVec p = (f * b).freq_response(bins, N);
      worst = std::max(worst, (p - g).cwiseAbs().maxCoeff() / g.cwiseAbs().maxCoeff());
      if (s.proper) {
        CHECK(f.num_order() <= f.den_order());
        CHECK(b.num_order() - s.zeros[i].delay() <= b.den_order());
      }
    }
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("fit_partition: linear system is fitted exactly") {
  const TrueSystem sys = load_reference_system("linear");
  const auto s = PartitionSpace::from_decomposition(true_decomposition(sys));
  const auto data = records(sys, 512, {0.5, 1.0}, 11);
  const double ry = rms(data.stacked_y());
  for (const auto& m : enumerate_partitions(s)) {
    const auto c = fit_partition(s, m, poly(1), data);
    REQUIRE_FALSE(c.degenerate);
    CHECK(c.rms_error < 1e-9 * ry);
  }
}

TEST_CASE("fit_partition: duplicate branches are degenerate") {
  const TrueSystem sys = load_reference_system("linear");
  auto d = true_decomposition(sys);
  d.n_br = 2;
  d.branch_numerators.push_back(d.branch_numerators[0]);
  const auto s = PartitionSpace::from_decomposition(d);
  const auto data = records(sys, 256, {1.0}, 3);
  const auto c = fit_partition(s, enumerate_partitions(s).front(), poly(2), data);
  CHECK(c.degenerate);
  CHECK(std::isinf(c.rms_error));
}

TEST_CASE("fit_partition: true partition of the two-branch system is exact") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto s = PartitionSpace::from_decomposition(true_decomposition(sys));
  const auto data = records(sys, 512, {0.25, 1.0}, 21);
  const auto truth = true_masks(s, sys);
  const double ry = rms(data.stacked_y());

  const auto c = fit_partition(s, truth, poly(3), data);
  REQUIRE_FALSE(c.degenerate);
  CHECK(c.rms_error < 1e-8 * ry);

  // Recorded scales are the rms of the front outputs.
  for (int i = 0; i < 2; ++i) {
    Vec x(0);
    for (const auto& u : data.u) {
      const Vec xi = filter(c.model.fronts[i], u, data.init);
      Vec cat(x.size() + xi.size());
      cat << x, xi;
      x = cat;
    }
    CHECK(std::abs(c.model.nl.basis.scales(i) - rms(x)) < 1e-12 * rms(x));
  }
  // The fitted model reproduces the data.
  CHECK(rms(simulate_dataset(c.model, data) - data.stacked_y()) < 1e-8 * ry);

  SUBCASE("column normalization changes conditioning only") {
    FitOptions raw;
    raw.normalize_columns = false;
    const auto c2 = fit_partition(s, truth, poly(3), data, raw);
    REQUIRE_FALSE(c2.degenerate);
    const Mat& w1 = c.model.nl.W;
    const Mat& w2 = c2.model.nl.W;
    CHECK((w1 - w2).norm() < 1e-8 * w1.norm());
  }
}

TEST_CASE("scan_partitions: true partition ranks first, wrong poles are far worse") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto s = PartitionSpace::from_decomposition(true_decomposition(sys));
  const auto data = records(sys, 256, {0.25, 1.0}, 31);
  const auto truth = true_masks(s, sys);
  const auto scan = scan_partitions(s, poly(3), data, 3);
  REQUIRE(scan.all.size() == count_admissible(s));
  REQUIRE(scan.top.size() == 3);
  CHECK(scan.top[0].masks == truth);
  const double best = scan.top[0].rms_error;
  CHECK(best < 1e-8 * rms(data.stacked_y()));
  double wrong = INFINITY;
  for (const auto& e : scan.all)
    if (e.masks.poles != truth.poles) wrong = std::min(wrong, e.rms_error);
  CHECK(wrong >= 10.0 * best);
  CHECK(wrong > 1e-4 * rms(data.stacked_y()));

  SUBCASE("ranking does not depend on the worker count") {
    const auto one = scan_partitions(s, poly(3), data, 3, 5'000'000, 1);
    const auto three = scan_partitions(s, poly(3), data, 3, 5'000'000, 3);
    REQUIRE(one.all.size() == three.all.size());
    bool same = true;
    for (std::size_t k = 0; k < one.all.size(); ++k)
      same = same && one.all[k].masks == three.all[k].masks && one.all[k].rms_error == three.all[k].rms_error;
    CHECK(same);
  }
}

TEST_CASE("scan_partitions: a single admissible partition is returned") {
  PartitionSpace s;
  s.poles = RootSet({{cplx(0.5, 0.0), false}});
  s.zeros = {RootSet({}, 1.0)};
  s.max_front_order = 0;
  const TrueSystem sys = load_reference_system("linear");
  const auto data = records(sys, 128, {1.0}, 1);
  const auto scan = scan_partitions(s, poly(1), data, 5);
  REQUIRE(scan.top.size() == 1);
  CHECK(scan.top[0].masks.poles == 0);
  CHECK(scan.top[0].rms_error > 0.0);
}

TEST_CASE("sample_partitions: distinct admissible draws, deterministic") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto s = PartitionSpace::from_decomposition(true_decomposition(sys));
  auto a = sample_partitions(s, 20, 7), b = sample_partitions(s, 20, 7);
  CHECK(a == b);
  std::sort(a.begin(), a.end());
  CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
  CHECK(sample_partitions(s, 1'000'000, 1).size() == count_admissible(s));
}

TEST_CASE("simulate_model: zero weights, true system, gain exchange") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  auto m = ParallelWHModel::from_true_system(sys);
  m.check();
  MultisineSpec spec;
  spec.N = 1024;
  spec.excited_bins = bin_range(1, 511);
  spec.seed = 9;
  const auto u = gen_multisine(spec, 2, 1);
  const auto y0 = simulate(sys, u).y0;
  const auto yh = simulate_model(m, u);
  CHECK(max_abs(yh.data() - y0.data()) < 1e-9 * max_abs(y0.data()));

  // Non-periodic record from rest.
  const Vec ur = testutil::gaussian(800, 4, 0.5);
  const Vec y_rest = simulate_signal(sys, ur, InitialState::zero);
  CHECK(max_abs(simulate_record(m, ur, InitialState::zero).y - y_rest) < 1e-9 * max_abs(y_rest));

  auto z = m;
  z.nl.W.setZero();
  CHECK(max_abs(simulate_model(z, u).data()) == 0.0);

  // Front gain c with the input scale multiplied by c leaves the output unchanged.
  auto g = m;
  g.nl.basis.scales = Vec::Ones(2);
  g.nl.basis.scales(1) = 3.7;
  g.fronts[1] = RationalTF(3.7 * g.fronts[1].num(), g.fronts[1].den());
  CHECK(max_abs(simulate_model(g, u).data() - yh.data()) < 1e-9 * max_abs(yh.data()));
}

TEST_CASE("simulate_model: non-finite intermediate throws") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  auto m = ParallelWHModel::from_true_system(sys);
  Vec u = Vec::Ones(64);
  u(5) = INFINITY;
  CHECK_THROWS_AS(simulate_record(m, u, InitialState::zero), std::runtime_error);
}

TEST_CASE("ParallelWHModel: JSON round trip and parameter vector") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto m = ParallelWHModel::from_true_system(sys);
  const auto back = ParallelWHModel::from_json(m.to_json());
  CHECK((back.flatten() - m.flatten()).norm() == 0.0);
  auto c = m;
  REQUIRE(c.unflatten(m.flatten()));
  CHECK((c.flatten() - m.flatten()).norm() == 0.0);
  CHECK(c.n_params() == m.flatten().size());
  // Unstable denominators are refused.
  Vec theta = m.flatten();
  theta(0) = 50.0;
  CHECK_FALSE(c.unflatten(theta));
  CHECK((c.flatten() - m.flatten()).norm() == 0.0);
}
