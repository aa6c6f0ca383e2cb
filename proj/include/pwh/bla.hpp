#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "pwh/lti.hpp"
#include "pwh/signals.hpp"
#include "pwh/simulator.hpp"

namespace pwh {

/// Robust nonparametric BLA of one setpoint on its excited bins.
struct NonparametricBla {
  std::string setpoint_id;
  std::vector<int> bins;
  int N = 0;
  double fs = 1.0;
  int M = 0, P = 0;
  CVec G;
  Vec var_noise;  // noise variance of G
  Vec var_total;  // noise plus nonlinear distortion variance of G

  void write_csv(const std::string& path) const;
  static NonparametricBla read_csv(const std::string& path);
};

/// Per realization the spectra are averaged over periods and G_m = Y_m / U_m;
/// G is the mean over realizations. var_total is the sample variance of G_m
/// divided by M; var_noise propagates the period-to-period output variance
/// through the division. Requires M >= 2; var_noise is zero when P == 1.
NonparametricBla estimate_bla(const SignalEnsemble& u, const SignalEnsemble& y);

/// cov(f(x), x) / var(x) with x = front(q) u, u drawn from the multisine
/// class of `spec` (independent phases, seed offset from spec.seed).
double bussgang_gain_oracle(const Branch& branch, const MultisineSpec& spec,
                            int samples = 1 << 20, std::uint64_t seed = 0x5eed);

struct BussgangEstimate {
  double alpha = 0.0;
  double std_error = 0.0;  // from the spread of per-realization gains
};

/// Same estimate as bussgang_gain_oracle plus a batch standard error.
BussgangEstimate bussgang_gain_oracle_se(const Branch& branch, const MultisineSpec& spec,
                                         int samples = 1 << 20, std::uint64_t seed = 0x5eed);

/// Same ratio for given samples of x and f(x).
double bussgang_gain(const Vec& x, const Vec& fx);

enum class BlaWeighting { total, noise };

struct CommonDenOptions {
  int max_iter = 20;            // Sanathanan-Koerner iterations
  double tol = 1e-10;           // relative parameter change
  int polish_iter = 100;        // LM iterations on the weighted output error
  BlaWeighting weighting = BlaWeighting::total;
  bool stabilize = true;
};

struct CommonDenModel {
  int n_c = 0, n_d = 0;
  Vec den;                // c_0 = 1
  std::vector<Vec> nums;  // one per setpoint
  Mat num_cov;            // covariance of the stacked numerators, R (n_d+1) square
  std::vector<std::string> setpoint_ids;
  std::vector<double> cost_history;  // weighted cost of accepted iterates
  double cost = 0.0;
  int n_reflected = 0;
  std::vector<std::string> warnings;

  int R() const { return static_cast<int>(nums.size()); }
  RationalTF tf(int r) const;

  nlohmann::json to_json() const;
  static CommonDenModel from_json(const nlohmann::json& j);
};

/// Raised when the linearized normal equations are rank deficient; carries a
/// basis of the deficient parameter directions (columns).
class RankDeficientError : public std::runtime_error {
 public:
  RankDeficientError(const std::string& what, Mat directions)
      : std::runtime_error(what), directions_(std::move(directions)) {}
  const Mat& directions() const { return directions_; }

 private:
  Mat directions_;
};

/// Simultaneous rational fit of R FRFs sharing one denominator of order n_c;
/// numerators of order n_d. Weights are 1/var (var_total by default).
CommonDenModel fit_common_den(const std::vector<NonparametricBla>& blas, int n_c, int n_d,
                              const CommonDenOptions& opts = {});

/// Sum over setpoints and bins of w |G - D/C|^2.
double weighted_cost(const std::vector<NonparametricBla>& blas, const CommonDenModel& model,
                     BlaWeighting weighting = BlaWeighting::total);

struct OrderScanRow {
  int n_c = 0, n_d = 0;
  double cost = 0.0;
  bool ok = true;
  std::string error;
};

/// Fits every (n_c, n_d) in the given ranges and reports the weighted cost.
std::vector<OrderScanRow> order_scan(const std::vector<NonparametricBla>& blas, int n_c_min,
                                     int n_c_max, int n_d_min, int n_d_max,
                                     const CommonDenOptions& opts = {});

}  // namespace pwh
