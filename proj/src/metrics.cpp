#include "pwh/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace pwh {

double ErrorMetrics::identity_residual() const {
  const double lhs = rms * rms;
  const double rhs = mu * mu + (n > 0 ? sigma * sigma * static_cast<double>(n - 1) / static_cast<double>(n) : 0.0);
  const double scale = std::max(lhs, rhs);
  return scale > 0.0 ? std::abs(lhs - rhs) / scale : 0.0;
}

ErrorMetrics error_metrics(const Vec& e) {
  ErrorMetrics m;
  m.n = e.size();
  if (m.n == 0) return m;
  const double mean = e.mean();
  m.rms = std::sqrt(e.squaredNorm() / static_cast<double>(m.n));
  m.mu = std::abs(mean);
  m.sigma = m.n > 1 ? std::sqrt((e.array() - mean).square().sum() / static_cast<double>(m.n - 1)) : 0.0;
  return m;
}

const MetricsRow* MetricsReport::find(const std::string& model, const std::string& segment) const {
  for (const auto& r : rows)
    if (r.model == model && r.segment == segment) return &r;
  return nullptr;
}

double MetricsReport::worst_identity_residual() const {
  double worst = 0.0;
  for (const auto& r : rows) worst = std::max(worst, r.e.identity_residual());
  return worst;
}

void MetricsReport::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << std::setprecision(17);
  out << "model,segment,input_rms,output_rms,rms_e,mu_e,sigma_e,n\n";
  for (const auto& r : rows)
    out << r.model << ',' << r.segment << ',' << r.input_rms << ',' << r.output_rms << ',' << r.e.rms << ','
        << r.e.mu << ',' << r.e.sigma << ',' << r.e.n << '\n';
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json rj = nlohmann::json::array();
  for (const auto& r : rows)
    rj.push_back({{"model", r.model},
                  {"segment", r.segment},
                  {"input_rms", r.input_rms},
                  {"output_rms", r.output_rms},
                  {"rms_e", r.e.rms},
                  {"mu_e", r.e.mu},
                  {"sigma_e", r.e.sigma},
                  {"n", r.e.n}});
  nlohmann::json tj = nlohmann::json::object();
  for (const auto& [stage, s] : timings) tj[stage] = s;
  return {{"rows", rj}, {"timings", tj}};
}

}  // namespace pwh
