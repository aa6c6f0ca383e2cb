#pragma once

#include <string>
#include <vector>

#include "pwh/bla.hpp"

namespace pwh {

/// R x (n_d+1) stack of the fitted BLA numerators with the covariance of
/// their row-major vectorization.
struct NumeratorMatrix {
  Mat D;
  Mat cov;
};

NumeratorMatrix build_D(const CommonDenModel& model);

struct RankOptions {
  double threshold = 1.0;  // count whitened singular values above this
  /// Scales the averaged column covariance by (sqrt(R) + sqrt(n_d+1))^2, the
  /// edge of the singular value spectrum of an R x (n_d+1) matrix with unit
  /// variance entries, so that pure noise stays below the threshold.
  bool noise_edge_scaling = true;
};

/// Column covariance C_D: the R diagonal blocks of cov averaged, symmetrized,
/// and scaled as configured in `opts`.
Mat column_covariance(const NumeratorMatrix& nm, const RankOptions& opts = {});

struct RankEstimate {
  int n_br = 0;
  Vec whitened_singular_values;
};

/// n_br = #{sigma_i(D C_D^{-1/2}) > threshold}. Throws std::runtime_error
/// when no singular value exceeds the threshold.
RankEstimate estimate_rank(const NumeratorMatrix& nm, const RankOptions& opts = {});

struct BranchDecomposition {
  int n_br = 0;
  std::vector<Vec> branch_numerators;  // first n_br right singular vectors of D
  Vec shared_den;
  Vec singular_values;
  Vec whitened_singular_values;

  RationalTF branch_tf(int i) const { return RationalTF(branch_numerators.at(i), shared_den); }

  nlohmann::json to_json() const;
  static BranchDecomposition from_json(const nlohmann::json& j);
};

/// n_br <= 0 selects the branch count with estimate_rank.
BranchDecomposition decompose(const NumeratorMatrix& nm, const CommonDenModel& model,
                              int n_br = 0, const RankOptions& opts = {});

struct AlignmentReport {
  bool applied = false;
  double condition = 0.0;          // of the recovered mixing matrix
  std::vector<int> pole_cluster;   // branch label per pole group of shared_den
  std::string note;
};

/// Rotates the SVD basis towards the individual branch numerators. The true
/// numerator of branch i vanishes on the poles of every other branch, so at
/// a pole p of branch j the vector [v_1(p) .. v_nbr(p)] is orthogonal to all
/// combinations t_i with i != j. Pole directions are clustered into n_br
/// lines and each t_i is taken orthogonal to the other clusters. Returns the
/// input unchanged (applied = false) when the clusters are degenerate or the
/// mixing matrix is ill-conditioned.
BranchDecomposition align_branches(const BranchDecomposition& d, AlignmentReport* report = nullptr,
                                   double max_condition = 1e8);

}  // namespace pwh
