#pragma once

#include <string>
#include <vector>

#include "pwh/lti.hpp"
#include "pwh/signals.hpp"

namespace pwh {

/// Static SISO nonlinearity of one true branch.
struct ScalarNonlinearity {
  enum class Kind { polynomial, tanh, dead_zone };

  Kind kind = Kind::polynomial;
  Vec coeffs = (Vec(2) << 0.0, 1.0).finished();  // polynomial, ascending powers
  double a = 1.0, b = 1.0;                      // tanh: a * tanh(b x)
  double width = 0.0, slope = 1.0;              // dead zone: slope * (x -+ width) outside [-width, width]

  static ScalarNonlinearity polynomial(Vec c);
  static ScalarNonlinearity saturation(double a, double b);
  static ScalarNonlinearity dead_zone(double width, double slope = 1.0);

  double operator()(double x) const;
  Vec apply(const Vec& x) const;

  /// Scales the output by c.
  ScalarNonlinearity scaled(double c) const;

  nlohmann::json to_json() const;
  static ScalarNonlinearity from_json(const nlohmann::json& j);
};

struct Branch {
  RationalTF front;
  ScalarNonlinearity nl;
  RationalTF back;
};

struct TrueSystem {
  std::string name;
  std::vector<Branch> branches;

  int n_br() const { return static_cast<int>(branches.size()); }

  nlohmann::json to_json() const;
  static TrueSystem from_json(const nlohmann::json& j);
  static TrueSystem load(const std::string& path);
  void save(const std::string& path) const;
};

/// Loads a shipped reference system by name (data/systems/<name>.json) or a
/// JSON path.
TrueSystem load_reference_system(const std::string& name_or_path);

struct Simulation {
  SignalEnsemble y0;
  std::vector<SignalEnsemble> x;  // per branch, front outputs
  std::vector<SignalEnsemble> r;  // per branch, nonlinearity outputs
};

/// Response to one record; x and r (L x n_br) are filled when requested.
Vec simulate_signal(const TrueSystem& sys, const Vec& u, InitialState init, Mat* x = nullptr, Mat* r = nullptr);

/// Steady-state periodic response of every period of u.
Simulation simulate(const TrueSystem& sys, const SignalEnsemble& u);

struct AssumptionCheck {
  int id = 0;
  std::string name;
  bool pass = true;
  std::string detail;
};

struct AssumptionReport {
  std::vector<AssumptionCheck> checks;

  bool all_pass() const;
  const AssumptionCheck& get(int id) const;
  nlohmann::json to_json() const;
};

/// Coefficient vectors B_hs^[i] prod_{j != i} A_hs^[j] of the true BLA in
/// common-denominator form, zero padded to one length.
std::vector<Vec> true_effective_numerators(const TrueSystem& sys);

/// Common denominator prod_i A_hs^[i].
Vec true_common_denominator(const TrueSystem& sys);

/// Checks stability, non-zero Bussgang gains, absence of in-branch pole-zero
/// cancellation, rank of the numerator matrix over the setpoints and absence
/// of front/back poles shared between different branches.
AssumptionReport check_assumptions(const TrueSystem& sys,
                                   const std::vector<MultisineSpec>& setpoints,
                                   int mc_samples = 1 << 20);

}  // namespace pwh
