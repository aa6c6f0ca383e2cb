#pragma once

#include <string>
#include <vector>

#include "pwh/nonlinearity.hpp"
#include "pwh/signals.hpp"
#include "pwh/simulator.hpp"

namespace pwh {

/// Input/output records used for fitting and scoring. Periodic records hold
/// one period each and are simulated in steady state.
struct Dataset {
  std::vector<Vec> u;
  std::vector<Vec> y;
  InitialState init = InitialState::steady_periodic;

  std::size_t size() const { return u.size(); }
  Eigen::Index samples() const;
  Vec stacked_y() const;
};

/// One record per (setpoint, realization): the first input period and the
/// period-averaged output. `realizations` limits m to the first entries
/// (all when negative).
Dataset periodic_records(const std::vector<SignalEnsemble>& u, const std::vector<SignalEnsemble>& y,
                         const std::vector<int>& setpoints, int realizations = -1);

/// All branch fronts share one denominator and all backs share another, the
/// common-denominator structure carried from the BLA fit.
struct ParallelWHModel {
  std::vector<RationalTF> fronts;
  std::vector<RationalTF> backs;
  MimoNonlinearity nl;

  int n_br() const { return static_cast<int>(fronts.size()); }

  /// Throws std::invalid_argument on size mismatches or untied denominators.
  void check() const;

  /// Parameter vector: front den (without the leading 1), back den, front
  /// numerators, back numerators, free weights (column-major), then the tanh
  /// network V (row-major) and c.
  Vec flatten() const;
  int n_params() const;
  /// Returns false, leaving *this untouched, when a denominator in theta is
  /// unstable.
  bool unflatten(const Vec& theta);
  /// Index of the first free weight in theta; weights follow contiguously.
  int weight_offset() const;

  nlohmann::json to_json() const;
  static ParallelWHModel from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static ParallelWHModel load(const std::string& path);

  /// Exact model of a system with polynomial branch nonlinearities. Fronts
  /// and backs are brought to the shared denominators by multiplying in the
  /// other branches' poles.
  static ParallelWHModel from_true_system(const TrueSystem& sys);
};

struct ModelResponse {
  Vec y;
  Mat x;  // L x n_br
  Mat r;  // L x n_br
};

/// Throws std::runtime_error on a non-finite intermediate.
ModelResponse simulate_record(const ParallelWHModel& model, const Vec& u,
                              InitialState init = InitialState::steady_periodic);

/// Output ensemble; periodic ensembles are simulated per realization in
/// steady state and copied to every period.
SignalEnsemble simulate_model(const ParallelWHModel& model, const SignalEnsemble& u,
                              InitialState init = InitialState::steady_periodic);

/// Stacked model output over the records of `data`.
Vec simulate_dataset(const ParallelWHModel& model, const Dataset& data);

double rms(const Vec& v);

}  // namespace pwh
