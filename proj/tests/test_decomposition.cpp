#include <cmath>

#include "doctest.h"
#include "pwh/decomposition.hpp"
#include "test_util.hpp"

using namespace pwh;

namespace {

CommonDenModel model_from_rows(const Mat& D, double var = 1e-20) {
  CommonDenModel m;
  m.n_c = 2;
  m.n_d = static_cast<int>(D.cols()) - 1;
  m.den = (Vec(3) << 1.0, -0.5, 0.06).finished();
  for (Eigen::Index r = 0; r < D.rows(); ++r) m.nums.push_back(D.row(r).transpose());
  m.num_cov = var * Mat::Identity(D.size(), D.size());
  return m;
}

// Cosines of the principal angles between the column spans of A and B.
Vec principal_cosines(const Mat& A, const Mat& B) {
  const Mat Qa = Eigen::HouseholderQR<Mat>(A).householderQ() * Mat::Identity(A.rows(), A.cols());
  const Mat Qb = Eigen::HouseholderQR<Mat>(B).householderQ() * Mat::Identity(B.rows(), B.cols());
  return Eigen::JacobiSVD<Mat>(Qa.transpose() * Qb).singularValues();
}

Mat columns(const std::vector<Vec>& v) {
  Mat M(v.front().size(), static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) M.col(static_cast<Eigen::Index>(i)) = v[i];
  return M;
}

}  // namespace

TEST_CASE("build_D: single setpoint is a single row") {
  const Mat D = (Mat(1, 4) << 0.5, -1.0, 0.25, 2.0).finished();
  const auto m = model_from_rows(D);
  const auto nm = build_D(m);
  CHECK(nm.D.rows() == 1);
  CHECK((nm.D - D).norm() == 0.0);
  CHECK((nm.cov - m.num_cov).norm() == 0.0);
}

TEST_CASE("build_D: outer product has numerical rank 1") {
  const Vec a = (Vec(4) << 1.0, 2.0, -0.5, 3.0).finished();
  const Vec b = (Vec(5) << 0.3, -1.0, 0.7, 0.2, -0.4).finished();
  const auto nm = build_D(model_from_rows(a * b.transpose()));
  const Vec sv = Eigen::JacobiSVD<Mat>(nm.D).singularValues();
  CHECK(sv(1) < 1e-14 * sv(0));
}

TEST_CASE("decompose: rank-1 D gives the row direction and keeps the denominator") {
  const Vec a = (Vec(3) << 1.0, 2.0, -0.5).finished();
  const Vec b = (Vec(4) << 0.3, -1.0, 0.7, 0.2).finished();
  const auto m = model_from_rows(a * b.transpose());
  const auto d = decompose(build_D(m), m, 1);
  REQUIRE(d.n_br == 1);
  CHECK(std::abs(std::abs(d.branch_numerators[0].dot(b.normalized())) - 1.0) < 1e-12);
  CHECK((d.shared_den - m.den).norm() == 0.0);
}

TEST_CASE("decompose: branch numerators are orthonormal") {
  const Mat D = testutil::gaussian(4 * 7, 11).reshaped(4, 7);
  const auto m = model_from_rows(D, 1e-6);
  const auto d = decompose(build_D(m), m, 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(d.branch_numerators[i].norm() - 1.0) < 1e-12);
    for (int j = 0; j < i; ++j) CHECK(std::abs(d.branch_numerators[i].dot(d.branch_numerators[j])) < 1e-12);
  }
}

TEST_CASE("estimate_rank: exact rank 2 with tiny covariance") {
  const Mat A = (Mat(4, 2) << 1.0, 0.2, 0.8, 0.5, 0.6, 0.9, 0.4, 1.4).finished();
  const Mat B = (Mat(2, 7) << 1, -0.5, 0.3, 0.1, 0, 0.2, -0.1, 0.2, 1.0, -0.4, 0.3, 0.6, 0, 0.1).finished();
  const auto m = model_from_rows(A * B, 1e-16);
  const auto est = estimate_rank(build_D(m));
  CHECK(est.n_br == 2);
  CHECK(est.whitened_singular_values(1) > 1e3);
  CHECK(est.whitened_singular_values(2) < 1.0);
}

TEST_CASE("estimate_rank: pure noise rarely produces branches") {
  // Rows drawn from a non-diagonal covariance; the null distribution of the
  // whitened count should stay below one false branch on average.
  const int R = 4, n = 7;
  const Mat L = testutil::gaussian(n * n, 3).reshaped(n, n) * 0.3 + Mat::Identity(n, n);
  const Mat C = L * L.transpose() * 1e-4;
  Mat cov = Mat::Zero(R * n, R * n);
  for (int r = 0; r < R; ++r) cov.block(r * n, r * n, n, n) = C;
  const Mat Lc = C.llt().matrixL();
  double total = 0.0;
  for (unsigned seed = 0; seed < 100; ++seed) {
    NumeratorMatrix nm;
    nm.D.resize(R, n);
    for (int r = 0; r < R; ++r) nm.D.row(r) = (Lc * testutil::gaussian(n, 1000 + seed * R + r)).transpose();
    nm.cov = cov;
    try {
      total += estimate_rank(nm).n_br;
    } catch (const std::runtime_error&) {
      // no significant dynamics: zero false branches
    }
  }
  CHECK(total / 100.0 <= 1.0);
}

TEST_CASE("estimate_rank: invariant to consistent rescaling") {
  const Mat D = testutil::gaussian(4 * 7, 5).reshaped(4, 7);
  Mat cov = Mat::Identity(28, 28) * 1e-3;
  cov(0, 1) = cov(1, 0) = 4e-4;
  NumeratorMatrix a{D, cov}, b{37.5 * D, 37.5 * 37.5 * cov};
  const Vec sa = estimate_rank(a).whitened_singular_values, sb = estimate_rank(b).whitened_singular_values;
  CHECK(((sa - sb).cwiseAbs().array() / sa.array()).maxCoeff() < 1e-12);
}

TEST_CASE("decompose: errors") {
  const Mat D = testutil::gaussian(2 * 4, 5).reshaped(2, 4);
  const auto m = model_from_rows(D, 1e-6);
  CHECK_THROWS_AS(decompose(build_D(m), m, 3), std::invalid_argument);
  // Whitened values all below 1: no significant dynamics.
  const auto quiet = model_from_rows(1e-6 * D, 1.0);
  CHECK_THROWS_AS(decompose(build_D(quiet), quiet), std::runtime_error);
}

TEST_CASE("decompose: 2-branch synthetic recovers the span of the true numerators at 60 dB") {
  // The second direction is carried by the small change of the BLA across
  // setpoints, so the angle is limited by the nonlinear distortion of the
  // BLA estimate, not by the 60 dB noise. M = 4 leaves it near 0.03 rad;
  // 4096 realizations of 16384 samples bring it to about 3e-4. The BLA is
  // averaged over chunks of realizations to bound memory.
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const int N = 16384, chunks = 8, per_chunk = 512;
  std::vector<NonparametricBla> blas;
  for (int r = 0; r < 4; ++r) {
    NonparametricBla acc;
    for (int c = 0; c < chunks; ++c) {
      MultisineSpec s;
      s.N = N;
      s.excited_bins = bin_range(1, N / 2 - 1);
      s.amplitude = 0.075 * (r + 1);
      s.seed = 40 + r + 1000 * static_cast<std::uint64_t>(c);
      const auto u = gen_multisine(s, per_chunk, 1);
      const auto y0 = simulate(sys, u).y0;
      const double sd = std::sqrt((y0.data().array() - y0.data().mean()).square().mean());
      const auto b = estimate_bla(u, add_output_noise(y0, RationalTF(), sd * 1e-3, 70 + r + 1000 * c));
      if (c == 0) {
        acc = b;
      } else {
        acc.G += b.G;
        acc.var_total += b.var_total;
        acc.var_noise += b.var_noise;
      }
    }
    acc.G /= chunks;
    acc.var_total /= chunks * chunks;
    acc.var_noise /= chunks * chunks;
    acc.M = chunks * per_chunk;
    blas.push_back(acc);
  }
  const auto cd = fit_common_den(blas, 12, 6);
  const auto d = decompose(build_D(cd), cd);
  REQUIRE(d.n_br == 2);
  const Vec cosines = principal_cosines(columns(d.branch_numerators), columns(true_effective_numerators(sys)));
  for (Eigen::Index i = 0; i < cosines.size(); ++i) CHECK(std::acos(std::min(1.0, cosines(i))) < 1e-3);
}

TEST_CASE("align_branches: recovers the individual numerators from a mixed basis") {
  const TrueSystem sys = load_reference_system("two_branch_cubic");
  const auto truth = true_effective_numerators(sys);
  const Mat B = columns(truth).transpose();
  const Mat T = (Mat(4, 2) << 1.0, 0.7, 0.4, -1.2, 0.8, 0.3, -0.2, 1.1).finished();
  Eigen::JacobiSVD<Mat> svd(T * B, Eigen::ComputeFullV);
  BranchDecomposition d;
  d.n_br = 2;
  d.shared_den = true_common_denominator(sys);
  d.branch_numerators = {svd.matrixV().col(0), svd.matrixV().col(1)};
  d.singular_values = svd.singularValues();

  AlignmentReport rep;
  const auto aligned = align_branches(d, &rep);
  REQUIRE(rep.applied);
  CHECK(rep.pole_cluster.size() == 8);
  for (const auto& delta : aligned.branch_numerators) {
    double best = 0.0;
    for (const auto& t : truth) best = std::max(best, std::abs(delta.dot(t.normalized())) / delta.norm());
    CHECK(best > 1.0 - 1e-9);
  }
  // Each true numerator is matched by exactly one aligned vector.
  const double c00 = std::abs(aligned.branch_numerators[0].dot(truth[0].normalized()));
  const double c10 = std::abs(aligned.branch_numerators[1].dot(truth[0].normalized()));
  CHECK(std::abs(c00 - c10) > 0.5);
}

TEST_CASE("align_branches: single branch is returned unchanged") {
  BranchDecomposition d;
  d.n_br = 1;
  d.shared_den = (Vec(2) << 1.0, -0.5).finished();
  d.branch_numerators = {(Vec(2) << 0.6, 0.8).finished()};
  AlignmentReport rep;
  const auto out = align_branches(d, &rep);
  CHECK_FALSE(rep.applied);
  CHECK((out.branch_numerators[0] - d.branch_numerators[0]).norm() == 0.0);
}

TEST_CASE("BranchDecomposition: JSON round trip") {
  const Mat D = testutil::gaussian(3 * 4, 2).reshaped(3, 4);
  const auto m = model_from_rows(D, 1e-6);
  const auto d = decompose(build_D(m), m, 2);
  const auto back = BranchDecomposition::from_json(d.to_json());
  CHECK(back.n_br == 2);
  CHECK((back.branch_numerators[1] - d.branch_numerators[1]).norm() == 0.0);
  CHECK((back.shared_den - d.shared_den).norm() == 0.0);
}
