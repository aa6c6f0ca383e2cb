#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pwh/refine.hpp"
#include "pwh/structure.hpp"
#include "test_util.hpp"

using namespace pwh;

namespace {

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

double rel_error(const ParallelWHModel& m, const Dataset& d) {
  const Vec y = d.stacked_y();
  return rms(simulate_dataset(m, d) - y) / rms(y);
}

bool accepted_costs_monotone(const LMResult& r) {
  double last = r.initial_cost;
  for (const auto& row : r.trace) {
    if (!row.accepted) continue;
    if (row.cost > last) return false;
    last = row.cost;
  }
  return true;
}

// Relative perturbation of every coefficient; denominators are perturbed
// through their roots so that they stay stable.
ParallelWHModel perturbed(const ParallelWHModel& m, double rel, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, rel);
  auto den = [&](const Vec& a) {
    std::vector<cplx> out;
    for (const auto& z : poly_roots(a)) {
      const double k = std::min(std::abs(z) * (1.0 + n(rng)), 0.99);
      if (std::abs(z.imag()) <= pairing_tolerance(z)) {
        out.emplace_back(z.real() < 0.0 ? -k : k, 0.0);
      } else if (z.imag() > 0.0) {
        out.push_back(std::polar(k, std::arg(z) * (1.0 + n(rng))));
        out.push_back(std::conj(out.back()));
      }
    }
    return poly_from_roots(out);
  };
  auto coef = [&](Vec v) {
    for (auto& x : v) x *= 1.0 + n(rng);
    return v;
  };
  ParallelWHModel p = m;
  const Vec af = den(m.fronts[0].den()), as = den(m.backs[0].den());
  for (int i = 0; i < m.n_br(); ++i) {
    p.fronts[i] = RationalTF(coef(m.fronts[i].num()), af);
    p.backs[i] = RationalTF(coef(m.backs[i].num()), as);
  }
  for (auto& w : p.nl.W.reshaped()) w *= 1.0 + n(rng);
  return p;
}

Vec singular_values(const Mat& J) { return Eigen::JacobiSVD<Mat>(J).singularValues(); }

int count_below(const Vec& sv, double rel) {
  int n = 0;
  for (Eigen::Index k = 0; k < sv.size(); ++k)
    if (sv(k) < rel * sv(0)) ++n;
  return n;
}

}  // namespace

TEST_CASE("levenberg_marquardt: exponential fit recovers the generating parameters") {
  const int n = 40;
  Vec t(n), y(n);
  for (int k = 0; k < n; ++k) {
    t(k) = 0.1 * k;
    y(k) = 2.5 * std::exp(-1.3 * t(k)) + 0.4;
  }
  auto residual = [&](const Vec& p) -> std::optional<Vec> {
    return ((p(0) * (-p(1) * t.array()).exp() + p(2)) - y.array()).matrix();
  };
  auto jac = [&](const Vec& p) {
    Mat J(n, 3);
    J.col(0) = (-p(1) * t.array()).exp().matrix();
    J.col(1) = (-p(0) * t.array() * (-p(1) * t.array()).exp()).matrix();
    J.col(2).setOnes();
    return J;
  };
  const auto r = levenberg_marquardt(residual, jac, (Vec(3) << 1.0, 0.5, 0.0).finished(), LMOptions{});
  CHECK(std::abs(r.theta(0) - 2.5) < 1e-8);
  CHECK(std::abs(r.theta(1) - 1.3) < 1e-8);
  CHECK(std::abs(r.theta(2) - 0.4) < 1e-8);
  CHECK(accepted_costs_monotone(r));
}

TEST_CASE("levenberg_marquardt: infeasible trial points are rejected") {
  // Minimum at p = 2 lies outside the feasible set p < 1.5.
  auto residual = [](const Vec& p) -> std::optional<Vec> {
    if (p(0) >= 1.5) return std::nullopt;
    return Vec::Constant(1, p(0) - 2.0);
  };
  auto jac = [](const Vec&) { return Mat::Ones(1, 1); };
  LMOptions o;
  o.max_iter = 200;
  const auto r = levenberg_marquardt(residual, jac, Vec::Zero(1), o);
  CHECK(r.theta(0) < 1.5);
  bool saw_reject = false;
  for (const auto& row : r.trace)
    if (!row.accepted && std::isinf(row.cost)) saw_reject = true;
  CHECK(saw_reject);
  CHECK(accepted_costs_monotone(r));
  CHECK_THROWS_AS(levenberg_marquardt(residual, jac, Vec::Constant(1, 3.0), o), std::runtime_error);
}

TEST_CASE("LMOptions: validation") {
  LMOptions o;
  o.max_iter = 0;
  CHECK_THROWS_AS(o.validate(), std::invalid_argument);
  o = LMOptions{};
  o.lambda_up = 1.0;
  CHECK_THROWS_AS(o.validate(), std::invalid_argument);
}

TEST_CASE("optimize: true start stops at once, perturbed start converges") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto truth = ParallelWHModel::from_true_system(sys);
  const auto data = records(sys, 512, {0.25, 1.0}, 5);

  const auto at_truth = optimize(truth, data);
  CHECK(at_truth.lm.trace.size() <= 2);
  CHECK(rel_error(at_truth.model, data) < 1e-12);

  for (unsigned seed : {1U, 2U, 3U}) {
    const auto start = perturbed(truth, 0.01, seed);
    CHECK(rel_error(start, data) > 1e-3);
    const auto res = optimize(start, data);
    CHECK(rel_error(res.model, data) < 1e-6);
    CHECK(accepted_costs_monotone(res.lm));
    CHECK(res.lm.cost <= res.lm.initial_cost);
  }
}

TEST_CASE("optimize: Jacobian modes reach the same optimum") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto truth = ParallelWHModel::from_true_system(sys);
  const auto data = records(sys, 256, {0.5, 1.0}, 8);
  const auto start = perturbed(truth, 0.01, 4);
  for (auto mode : {JacobianMode::finite_difference, JacobianMode::analytic_weights}) {
    LMOptions o;
    o.jacobian = mode;
    CHECK(rel_error(optimize(start, data, o).model, data) < 1e-6);
  }
}

TEST_CASE("jacobian: analytic columns against finite differences") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto m = perturbed(ParallelWHModel::from_true_system(sys), 0.02, 7);
  const auto data = records(sys, 256, {0.5, 1.0}, 12);
  const Mat fd = jacobian(m, data, JacobianMode::finite_difference);
  const Mat aw = jacobian(m, data, JacobianMode::analytic_weights);
  const Mat an = jacobian(m, data, JacobianMode::analytic);
  const int w0 = m.weight_offset(), nw = m.nl.n_free_weights();
  const double wscale = fd.middleCols(w0, nw).norm();
  // Weight columns are linear in the parameter: FD is exact up to rounding.
  CHECK((aw.middleCols(w0, nw) - fd.middleCols(w0, nw)).norm() < 1e-6 * wscale);
  CHECK((an.middleCols(w0, nw) - fd.middleCols(w0, nw)).norm() < 1e-6 * wscale);
  CHECK((aw.leftCols(w0) - fd.leftCols(w0)).norm() == 0.0);
  // LTI columns carry the truncation error of the central differences.
  for (Eigen::Index k = 0; k < w0; ++k)
    CHECK((an.col(k) - fd.col(k)).norm() < 1e-4 * fd.col(k).norm());
}

TEST_CASE("jacobian: finite-difference step sizes agree") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto m = ParallelWHModel::from_true_system(sys);
  const auto data = records(sys, 256, {1.0}, 2);
  const Mat a = jacobian(m, data, JacobianMode::finite_difference, 0, 1e-5, 1e-7);
  const Mat b = jacobian(m, data, JacobianMode::finite_difference, 0, 1e-6, 1e-8);
  for (Eigen::Index k = 0; k < a.cols(); ++k) CHECK((a.col(k) - b.col(k)).norm() <= 1e-3 * b.col(k).norm());
}

TEST_CASE("jacobian: two scaling transforms leave 2 n_br^2 null directions") {
  for (const char* name : {"two_branch_cubic", "duplicate_branch"}) {
    CAPTURE(name);
    const TrueSystem sys = load_reference_system(name);
    const auto m = ParallelWHModel::from_true_system(sys);
    const auto data = records(sys, 512, {0.5, 1.0}, 3);
    const int nb = m.n_br();
    const Vec sv = singular_values(jacobian(m, data, JacobianMode::analytic));
    CHECK(count_below(sv, 1e-6) >= 2 * nb * nb);
    const Vec sv_fd = singular_values(jacobian(m, data, JacobianMode::finite_difference));
    CHECK(count_below(sv_fd, 1e-6) >= 2 * nb * nb);
  }
}

TEST_CASE("jacobian: gain exchange is a null direction") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto m = ParallelWHModel::from_true_system(sys);
  const auto data = records(sys, 512, {0.5, 1.0}, 6);
  const auto exps = monomial_exponents(2, m.nl.basis.degree);
  // theta(c): front 0 gain times c, weights of x_0^k divided by c^k.
  auto theta = [&](double c) {
    ParallelWHModel g = m;
    g.fronts[0] = RationalTF(c * m.fronts[0].num(), m.fronts[0].den());
    for (std::size_t f = 0; f < exps.size(); ++f) g.nl.W.row(static_cast<Eigen::Index>(f)) /= std::pow(c, exps[f][0]);
    return g.flatten();
  };
  const double h = 1e-6;
  const Vec v = (theta(1.0 + h) - theta(1.0 - h)) / (2.0 * h);
  const Mat J = jacobian(m, data, JacobianMode::analytic);
  const Vec yh = simulate_dataset(m, data);
  CHECK((J * v).norm() < 1e-6 * yh.norm() * v.norm());
  // A generic direction is not null.
  const Vec r = testutil::gaussian(v.size(), 1);
  CHECK((J * r).norm() > 1e-3 * yh.norm());
}

TEST_CASE("refit_nonlinearity: same basis does not increase the error") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto m = perturbed(ParallelWHModel::from_true_system(sys), 0.005, 11);
  const auto data = records(sys, 512, {0.5, 1.0}, 9);
  std::vector<std::string> warnings;
  LMOptions o;
  o.max_iter = 50;
  const auto r = refit_nonlinearity(m, data, m.nl.basis, 1, &warnings, o);
  CHECK(rel_error(r, data) <= rel_error(m, data));
}

TEST_CASE("refit_nonlinearity: tanh network on a saturating branch") {
  const TrueSystem sys = load_reference_system("tanh_branch");
  const auto data = records(sys, 1024, {0.5, 1.5}, 14);
  // Polynomial start from the true partition.
  BranchDecomposition d;
  d.n_br = 1;
  d.shared_den = true_common_denominator(sys);
  d.branch_numerators = true_effective_numerators(sys);
  const auto s = PartitionSpace::from_decomposition(d);
  PartitionMasks masks;
  const auto fp = poly_roots(sys.branches[0].front.den());
  for (std::size_t g = 0; g < s.poles.groups().size(); ++g)
    for (const auto& p : fp)
      if (std::abs(p - s.poles.groups()[g].root) < 1e-6) masks.poles |= std::uint64_t{1} << g;
  masks.zeros = {0};
  BasisDescriptor cubic;
  cubic.degree = 3;
  const auto start = fit_partition(s, masks, cubic, data);
  REQUIRE_FALSE(start.degenerate);

  BasisDescriptor net;
  net.kind = BasisDescriptor::Kind::tanh_network;
  net.neurons = 6;
  LMOptions o;
  o.max_iter = 300;
  std::vector<std::string> warnings;
  const auto r = refit_nonlinearity(start.model, data, net, 3, &warnings, o);
  const double before = rel_error(start.model, data), after = rel_error(r, data);
  CHECK(r.nl.basis.kind == BasisDescriptor::Kind::tanh_network);
  CHECK(after * 10.0 <= before);
}

TEST_CASE("refit_nonlinearity: linear system stays at the floor") {
  const TrueSystem sys = load_reference_system("linear");
  const auto data = records(sys, 512, {0.5, 1.0}, 4);
  BranchDecomposition d;
  d.n_br = 1;
  d.shared_den = true_common_denominator(sys);
  d.branch_numerators = true_effective_numerators(sys);
  const auto s = PartitionSpace::from_decomposition(d);
  BasisDescriptor lin;
  lin.degree = 1;
  const auto start = fit_partition(s, enumerate_partitions(s).front(), lin, data);
  REQUIRE(rel_error(start.model, data) < 1e-10);
  BasisDescriptor cubic;
  cubic.degree = 3;
  const auto r = refit_nonlinearity(start.model, data, cubic);
  CHECK(rel_error(r, data) < 1e-10);
}

TEST_CASE("write_trace_csv") {
  const auto dir = std::filesystem::temp_directory_path() / "pwh_test_trace";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "trace.csv").string();
  write_trace_csv(path, {{1, 2.0, 0.1, 0.5, true}, {2, INFINITY, 1.0, 0.2, false}});
  std::ifstream f(path);
  std::string header, line;
  std::getline(f, header);
  int rows = 0;
  while (std::getline(f, line)) ++rows;
  CHECK(header.find("cost") != std::string::npos);
  CHECK(rows == 2);
  std::filesystem::remove_all(dir);
}
