#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pwh/model.hpp"

namespace pwh {

/// analytic_weights: exact weight columns, finite differences elsewhere.
/// analytic: every column from the sensitivity filters of the model.
enum class JacobianMode { finite_difference, analytic_weights, analytic };

struct LMOptions {
  int max_iter = 500;  // trial steps
  double lambda_init = 1e-3;  // times mean diag of the column-scaled J^T J
  double lambda_up = 10.0;
  double lambda_down = 3.0;
  double cost_tol = 1e-12;  // relative cost change of an accepted step
  double step_tol = 1e-10;  // step norm relative to |theta|
  JacobianMode jacobian = JacobianMode::analytic;
  int workers = 0;

  void validate() const;
};

struct LMTraceRow {
  int iter = 0;
  double cost = 0.0;  // cost at the trial point (inf when rejected as unstable)
  double lambda = 0.0;
  double step_norm = 0.0;
  bool accepted = false;
};

struct LMResult {
  Vec theta;
  double cost = 0.0;
  double initial_cost = 0.0;
  std::vector<LMTraceRow> trace;
  std::string stop_reason;
};

/// Residual is empty when theta is infeasible (treated as a failed step).
using ResidualFn = std::function<std::optional<Vec>(const Vec&)>;
using JacobianFn = std::function<Mat(const Vec&)>;

/// Damped Gauss-Newton on 0.5 |e|^2 in column-scaled coordinates: steps
/// solve (Js^T Js + lambda I) ds = -Js^T e. Throws std::runtime_error when
/// the starting residual is infeasible or non-finite.
LMResult levenberg_marquardt(const ResidualFn& residual, const JacobianFn& jacobian, const Vec& theta0,
                             const LMOptions& opts);

/// d yhat / d theta stacked over the records. Finite differences are central
/// with step 1e-6 |theta_k| floored at 1e-8; analytic_weights fills the
/// weight columns with the back-filtered basis signals.
Mat jacobian(const ParallelWHModel& model, const Dataset& data, JacobianMode mode = JacobianMode::finite_difference,
             int workers = 0, double rel_step = 1e-6, double abs_step = 1e-8);

struct OptimizeResult {
  ParallelWHModel model;
  LMResult lm;
};

/// Minimizes sum (y - yhat)^2 over all parameters.
OptimizeResult optimize(const ParallelWHModel& model, const Dataset& data, const LMOptions& opts = {});

/// Replaces the nonlinearity. The new weights start from linear LS on the
/// old model's static map r(x) and are then tuned on the output error with
/// the LTI blocks fixed. Returns the original model and a warning when the
/// refit does not reduce the output error.
ParallelWHModel refit_nonlinearity(const ParallelWHModel& model, const Dataset& data, const BasisDescriptor& basis,
                                   std::uint64_t seed = 1, std::vector<std::string>* warnings = nullptr,
                                   const LMOptions& opts = {});

void write_trace_csv(const std::string& path, const std::vector<LMTraceRow>& trace);

}  // namespace pwh
