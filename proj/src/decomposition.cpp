#include "pwh/decomposition.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

namespace pwh {

NumeratorMatrix build_D(const CommonDenModel& model) {
  const int R = model.R();
  if (R < 1) throw std::invalid_argument("build_D: empty model");
  NumeratorMatrix nm;
  nm.D.resize(R, model.n_d + 1);
  for (int r = 0; r < R; ++r) nm.D.row(r) = model.nums[r].transpose();
  nm.cov = model.num_cov;
  return nm;
}

Mat column_covariance(const NumeratorMatrix& nm, const RankOptions& opts) {
  const auto R = nm.D.rows(), n = nm.D.cols();
  if (nm.cov.rows() != R * n || nm.cov.cols() != R * n)
    throw std::invalid_argument("column_covariance: covariance has the wrong size");
  Mat C = Mat::Zero(n, n);
  for (Eigen::Index r = 0; r < R; ++r) C += nm.cov.block(r * n, r * n, n, n);
  C /= static_cast<double>(R);
  C = 0.5 * (C + C.transpose()).eval();
  if (opts.noise_edge_scaling) {
    const double edge = std::sqrt(static_cast<double>(R)) + std::sqrt(static_cast<double>(n));
    C *= edge * edge;
  }
  return C;
}

namespace {

Mat inverse_sqrt(const Mat& C) {
  Eigen::SelfAdjointEigenSolver<Mat> es(C);
  const Vec ev = es.eigenvalues();
  const double cut = 1e-12 * std::max(ev.maxCoeff(), 0.0);
  Vec inv = Vec::Zero(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (ev(i) > cut && ev(i) > 0.0) inv(i) = 1.0 / std::sqrt(ev(i));
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

Vec to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

RankEstimate estimate_rank(const NumeratorMatrix& nm, const RankOptions& opts) {
  const Mat W = nm.D * inverse_sqrt(column_covariance(nm, opts));
  RankEstimate out;
  out.whitened_singular_values = Eigen::JacobiSVD<Mat>(W).singularValues();
  for (Eigen::Index i = 0; i < out.whitened_singular_values.size(); ++i)
    if (out.whitened_singular_values(i) > opts.threshold) ++out.n_br;
  if (out.n_br == 0)
    throw std::runtime_error("estimate_rank: no significant dynamics (all whitened singular values <= " +
                             std::to_string(opts.threshold) + ")");
  return out;
}

BranchDecomposition decompose(const NumeratorMatrix& nm, const CommonDenModel& model, int n_br,
                              const RankOptions& opts) {
  const auto max_br = std::min(nm.D.rows(), nm.D.cols());
  if (n_br > max_br)
    throw std::invalid_argument("decompose: n_br = " + std::to_string(n_br) + " exceeds min(R, n_d+1) = " +
                                std::to_string(max_br));
  BranchDecomposition out;
  Eigen::JacobiSVD<Mat> svd(nm.D, Eigen::ComputeFullV);
  out.singular_values = svd.singularValues();
  try {
    const RankEstimate est = estimate_rank(nm, opts);
    out.whitened_singular_values = est.whitened_singular_values;
    out.n_br = n_br > 0 ? n_br : est.n_br;
  } catch (const std::runtime_error&) {
    if (n_br <= 0) throw;
    out.n_br = n_br;
  }
  out.shared_den = model.den;
  for (int i = 0; i < out.n_br; ++i) {
    Vec v = svd.matrixV().col(i);
    // Deterministic sign: largest-magnitude entry positive.
    Eigen::Index imax = 0;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0.0) v = -v;
    out.branch_numerators.push_back(v);
  }
  return out;
}

namespace {

Vec principal_direction(const Mat& S) {
  Eigen::JacobiSVD<Mat> svd(S, Eigen::ComputeFullV);
  return svd.matrixV().col(0);
}

}  // namespace

BranchDecomposition align_branches(const BranchDecomposition& d, AlignmentReport* report, double max_condition) {
  AlignmentReport local;
  AlignmentReport& rep = report ? *report : local;
  rep = {};
  const int nb = d.n_br;
  if (nb < 2) {
    rep.note = "single branch, nothing to align";
    return d;
  }
  const RootSet poles = factor(d.shared_den);
  const auto& groups = poles.groups();
  const int G = static_cast<int>(groups.size());
  if (G < nb) {
    rep.note = "fewer pole groups than branches";
    return d;
  }

  // Real direction of [v_1(p) .. v_nbr(p)] per pole group, up to sign.
  std::vector<Vec> dir(G);
  Vec weight(G);
  for (int g = 0; g < G; ++g) {
    const cplx w = 1.0 / groups[g].root;
    Mat S(2, nb);
    for (int i = 0; i < nb; ++i) {
      const cplx v = poly_eval(d.branch_numerators[i], w);
      S(0, i) = v.real();
      S(1, i) = v.imag();
    }
    dir[g] = principal_direction(S);
    weight(g) = groups[g].degree();
  }

  // k-lines clustering with farthest-point seeding from group 0.
  std::vector<Vec> centers{dir[0]};
  while (static_cast<int>(centers.size()) < nb) {
    int best = 0;
    double best_gap = -1.0;
    for (int g = 0; g < G; ++g) {
      double gap = 1.0;
      for (const auto& c : centers) gap = std::min(gap, 1.0 - std::pow(dir[g].dot(c), 2));
      if (gap > best_gap) {
        best_gap = gap;
        best = g;
      }
    }
    centers.push_back(dir[best]);
  }
  std::vector<int> label(G, -1);
  for (int it = 0; it < 100; ++it) {
    bool changed = false;
    for (int g = 0; g < G; ++g) {
      int arg = 0;
      double best = -1.0;
      for (int j = 0; j < nb; ++j) {
        const double a = std::abs(dir[g].dot(centers[j]));
        if (a > best) {
          best = a;
          arg = j;
        }
      }
      changed = changed || arg != label[g];
      label[g] = arg;
    }
    for (int j = 0; j < nb; ++j) {
      Mat S = Mat::Zero(nb, nb);
      for (int g = 0; g < G; ++g)
        if (label[g] == j) S += weight(g) * dir[g] * dir[g].transpose();
      if (S.isZero(0.0)) {
        rep.note = "pole directions form fewer than n_br clusters";
        return d;
      }
      Eigen::SelfAdjointEigenSolver<Mat> es(S);
      centers[j] = es.eigenvectors().col(nb - 1);
    }
    if (!changed) break;
  }

  // t_i is orthogonal to the directions of all other clusters.
  Mat T(nb, nb);
  for (int i = 0; i < nb; ++i) {
    Mat C(nb - 1, nb);
    int r = 0;
    for (int j = 0; j < nb; ++j)
      if (j != i) C.row(r++) = centers[j].transpose();
    Eigen::JacobiSVD<Mat> svd(C, Eigen::ComputeFullV);
    T.row(i) = svd.matrixV().col(nb - 1).transpose();
  }
  const Vec sv = Eigen::JacobiSVD<Mat>(T).singularValues();
  rep.condition = sv(0) / sv(nb - 1);
  rep.pole_cluster = label;
  if (!(rep.condition < max_condition)) {
    rep.note = "mixing matrix is ill-conditioned";
    return d;
  }

  BranchDecomposition out = d;
  for (int i = 0; i < nb; ++i) {
    Vec v = Vec::Zero(d.branch_numerators[0].size());
    for (int l = 0; l < nb; ++l) v += T(i, l) * d.branch_numerators[l];
    v.normalize();
    Eigen::Index imax = 0;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0.0) v = -v;
    out.branch_numerators[i] = v;
  }
  rep.applied = true;
  return out;
}

nlohmann::json BranchDecomposition::to_json() const {
  nlohmann::json nums = nlohmann::json::array();
  for (const auto& v : branch_numerators) nums.push_back(to_std(v));
  return {{"n_br", n_br},
          {"singular_values", to_std(singular_values)},
          {"whitened_singular_values", to_std(whitened_singular_values)},
          {"branch_numerators", nums},
          {"shared_den", to_std(shared_den)}};
}

BranchDecomposition BranchDecomposition::from_json(const nlohmann::json& j) {
  BranchDecomposition d;
  d.n_br = j.at("n_br");
  d.singular_values = to_vec(j.at("singular_values").get<std::vector<double>>());
  d.whitened_singular_values = to_vec(j.at("whitened_singular_values").get<std::vector<double>>());
  for (const auto& v : j.at("branch_numerators"))
    d.branch_numerators.push_back(to_vec(v.get<std::vector<double>>()));
  d.shared_den = to_vec(j.at("shared_den").get<std::vector<double>>());
  return d;
}

}  // namespace pwh
