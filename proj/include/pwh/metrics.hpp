#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pwh/lti.hpp"

namespace pwh {

/// rms(e), |mean(e)| and the sample standard deviation (N - 1 normalization).
struct ErrorMetrics {
  double rms = 0.0;
  double mu = 0.0;
  double sigma = 0.0;
  Eigen::Index n = 0;

  /// Relative mismatch of rms^2 against mu^2 + sigma^2 (N - 1) / N.
  double identity_residual() const;
};

ErrorMetrics error_metrics(const Vec& e);

struct MetricsRow {
  std::string model;    // "model", "bla", ...
  std::string segment;  // level label or quarter
  double input_rms = 0.0;
  double output_rms = 0.0;
  ErrorMetrics e;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::vector<std::pair<std::string, double>> timings;  // stage, seconds

  const MetricsRow* find(const std::string& model, const std::string& segment) const;
  /// Largest identity_residual over the rows.
  double worst_identity_residual() const;
  void write_csv(const std::string& path) const;
  nlohmann::json to_json() const;
};

}  // namespace pwh
