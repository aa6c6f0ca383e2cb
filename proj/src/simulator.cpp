#include "pwh/simulator.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <Eigen/SVD>

#include "pwh/bla.hpp"
#include "pwh/parallel.hpp"

#ifndef PWH_DATA_DIR
#define PWH_DATA_DIR "data"
#endif

namespace pwh {

ScalarNonlinearity ScalarNonlinearity::polynomial(Vec c) {
  ScalarNonlinearity f;
  f.kind = Kind::polynomial;
  f.coeffs = std::move(c);
  return f;
}

ScalarNonlinearity ScalarNonlinearity::saturation(double a, double b) {
  ScalarNonlinearity f;
  f.kind = Kind::tanh;
  f.a = a;
  f.b = b;
  return f;
}

ScalarNonlinearity ScalarNonlinearity::dead_zone(double width, double slope) {
  if (width < 0.0) throw std::invalid_argument("dead_zone: negative width");
  ScalarNonlinearity f;
  f.kind = Kind::dead_zone;
  f.width = width;
  f.slope = slope;
  return f;
}

double ScalarNonlinearity::operator()(double x) const {
  switch (kind) {
    case Kind::polynomial: {
      double acc = 0.0;
      for (Eigen::Index i = coeffs.size() - 1; i >= 0; --i) acc = acc * x + coeffs(i);
      return acc;
    }
    case Kind::tanh:
      return a * std::tanh(b * x);
    case Kind::dead_zone:
      if (x > width) return slope * (x - width);
      if (x < -width) return slope * (x + width);
      return 0.0;
  }
  return 0.0;
}

Vec ScalarNonlinearity::apply(const Vec& x) const {
  Vec out(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) out(k) = (*this)(x(k));
  return out;
}

ScalarNonlinearity ScalarNonlinearity::scaled(double c) const {
  ScalarNonlinearity f = *this;
  f.coeffs *= c;
  f.a *= c;
  f.slope *= c;
  return f;
}

nlohmann::json ScalarNonlinearity::to_json() const {
  switch (kind) {
    case Kind::polynomial:
      return {{"kind", "polynomial"},
              {"coeffs", std::vector<double>(coeffs.data(), coeffs.data() + coeffs.size())}};
    case Kind::tanh:
      return {{"kind", "tanh"}, {"a", a}, {"b", b}};
    case Kind::dead_zone:
      return {{"kind", "dead_zone"}, {"width", width}, {"slope", slope}};
  }
  return {};
}

ScalarNonlinearity ScalarNonlinearity::from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind");
  if (kind == "polynomial") {
    const auto c = j.at("coeffs").get<std::vector<double>>();
    return polynomial(Eigen::Map<const Vec>(c.data(), static_cast<Eigen::Index>(c.size())));
  }
  if (kind == "tanh") return saturation(j.at("a"), j.at("b"));
  if (kind == "dead_zone") return dead_zone(j.at("width"), j.value("slope", 1.0));
  throw std::invalid_argument("unknown nonlinearity kind '" + kind + "'");
}

nlohmann::json TrueSystem::to_json() const {
  nlohmann::json br = nlohmann::json::array();
  for (const auto& b : branches)
    br.push_back({{"front", b.front.to_json()}, {"nl", b.nl.to_json()}, {"back", b.back.to_json()}});
  return {{"name", name}, {"branches", br}};
}

TrueSystem TrueSystem::from_json(const nlohmann::json& j) {
  TrueSystem s;
  s.name = j.value("name", "");
  for (const auto& b : j.at("branches"))
    s.branches.push_back({RationalTF::from_json(b.at("front")),
                          ScalarNonlinearity::from_json(b.at("nl")),
                          RationalTF::from_json(b.at("back"))});
  if (s.branches.empty()) throw std::invalid_argument("TrueSystem: no branches");
  return s;
}

TrueSystem TrueSystem::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return from_json(nlohmann::json::parse(is));
}

void TrueSystem::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << to_json().dump(2) << "\n";
}

TrueSystem load_reference_system(const std::string& name_or_path) {
  if (std::filesystem::exists(name_or_path)) return TrueSystem::load(name_or_path);
  const auto shipped = std::filesystem::path(PWH_DATA_DIR) / "systems" / (name_or_path + ".json");
  if (std::filesystem::exists(shipped)) return TrueSystem::load(shipped.string());
  throw std::invalid_argument("unknown system '" + name_or_path + "'");
}

Vec simulate_signal(const TrueSystem& sys, const Vec& u, InitialState init, Mat* x_out, Mat* r_out) {
  const int nb = sys.n_br();
  Vec y = Vec::Zero(u.size());
  if (x_out) x_out->resize(u.size(), nb);
  if (r_out) r_out->resize(u.size(), nb);
  for (int i = 0; i < nb; ++i) {
    const Branch& b = sys.branches[i];
    const Vec x = filter(b.front, u, init);
    const Vec r = b.nl.apply(x);
    if (!r.allFinite())
      throw std::runtime_error("simulate: non-finite nonlinearity output in branch " + std::to_string(i));
    if (x_out) x_out->col(i) = x;
    if (r_out) r_out->col(i) = r;
    y += filter(b.back, r, init);
  }
  return y;
}

Simulation simulate(const TrueSystem& sys, const SignalEnsemble& u) {
  const int nb = sys.n_br();
  Simulation out;
  out.y0 = SignalEnsemble(u.M(), u.P(), u.N(), u.fs(), u.excited_bins(), u.setpoint_id());
  out.x.assign(nb, out.y0);
  out.r.assign(nb, out.y0);
  parallel_for(u.M(), [&](int m) {
    for (int p = 0; p < u.P(); ++p) {
      if (p > 0 && u.period(m, p) == u.period(m, p - 1)) {
        out.y0.period(m, p) = out.y0.period(m, p - 1);
        for (int i = 0; i < nb; ++i) {
          out.x[i].period(m, p) = out.x[i].period(m, p - 1);
          out.r[i].period(m, p) = out.r[i].period(m, p - 1);
        }
        continue;
      }
      Mat x, r;
      out.y0.period(m, p) = simulate_signal(sys, u.period(m, p), InitialState::steady_periodic, &x, &r);
      for (int i = 0; i < nb; ++i) {
        out.x[i].period(m, p) = x.col(i);
        out.r[i].period(m, p) = r.col(i);
      }
    }
  });
  return out;
}

bool AssumptionReport::all_pass() const {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return true;
}

const AssumptionCheck& AssumptionReport::get(int id) const {
  for (const auto& c : checks)
    if (c.id == id) return c;
  throw std::out_of_range("no check for assumption " + std::to_string(id));
}

nlohmann::json AssumptionReport::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : checks)
    j.push_back({{"assumption", c.id}, {"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
  return j;
}

namespace {

Vec branch_num(const Branch& b) { return poly_mul(b.front.num(), b.back.num()); }
Vec branch_den(const Branch& b) { return poly_mul(b.front.den(), b.back.den()); }

// Smallest distance between any root of a and any root of b.
double min_root_distance(const std::vector<cplx>& a, const std::vector<cplx>& b) {
  double d = INFINITY;
  for (const auto& x : a)
    for (const auto& y : b) d = std::min(d, std::abs(x - y) / (1.0 + std::abs(y)));
  return d;
}

std::vector<cplx> roots_or_empty(const Vec& c) {
  std::vector<std::string> ignored;
  return factor(c, &ignored).roots();
}

}  // namespace

std::vector<Vec> true_effective_numerators(const TrueSystem& sys) {
  std::vector<Vec> nums;
  Eigen::Index len = 0;
  for (int i = 0; i < sys.n_br(); ++i) {
    Vec n = branch_num(sys.branches[i]);
    for (int j = 0; j < sys.n_br(); ++j)
      if (j != i) n = poly_mul(n, branch_den(sys.branches[j]));
    len = std::max(len, n.size());
    nums.push_back(std::move(n));
  }
  for (auto& n : nums) n.conservativeResizeLike(Vec::Zero(len));
  return nums;
}

Vec true_common_denominator(const TrueSystem& sys) {
  Vec c = Vec::Ones(1);
  for (const auto& b : sys.branches) c = poly_mul(c, branch_den(b));
  return c;
}

AssumptionReport check_assumptions(const TrueSystem& sys,
                                   const std::vector<MultisineSpec>& setpoints,
                                   int mc_samples) {
  constexpr double kRootTol = 1e-6;
  AssumptionReport rep;
  const int nb = sys.n_br();

  {
    double worst = 0.0;
    for (const auto& b : sys.branches)
      for (const auto* tf : {&b.front, &b.back})
        for (const auto& p : roots_or_empty(tf->den())) worst = std::max(worst, std::abs(p));
    std::ostringstream os;
    os << "max pole modulus " << worst;
    rep.checks.push_back({3, "stable LTI blocks", worst < 1.0, os.str()});
  }

  // Bussgang gains per setpoint and branch; also feed the rank check below.
  Mat alpha(setpoints.size(), nb);
  {
    bool pass = true;
    std::ostringstream os;
    for (std::size_t r = 0; r < setpoints.size(); ++r) {
      for (int i = 0; i < nb; ++i) {
        const Branch& b = sys.branches[i];
        const BussgangEstimate est = bussgang_gain_oracle_se(b, setpoints[r], mc_samples);
        alpha(r, i) = est.alpha;
        // Compare the linear part against the spread of f(x): a correlation
        // coefficient below 1e-2, or a gain within 4 standard errors of
        // zero, is treated as vanishing.
        MultisineSpec probe = setpoints[r];
        probe.seed += 0x77;
        const Vec x = filter(b.front, multisine_period(probe, 0), InitialState::steady_periodic);
        const Vec fx = b.nl.apply(x);
        const double sx = std::sqrt((x.array() - x.mean()).square().mean());
        const double sf = std::sqrt((fx.array() - fx.mean()).square().mean());
        const bool ok = sf > 0.0 && std::abs(est.alpha) * sx > 1e-2 * sf &&
                        std::abs(est.alpha) > 4.0 * est.std_error;
        if (!ok) {
          pass = false;
          os << "branch " << i << " setpoint " << r << ": alpha = " << alpha(r, i) << "; ";
        }
      }
    }
    if (pass) os << "all gains non-zero";
    rep.checks.push_back({4, "non-zero BLA gain", pass, os.str()});
  }

  {
    bool pass = true;
    std::ostringstream os;
    for (int i = 0; i < nb; ++i) {
      const double d = min_root_distance(roots_or_empty(branch_num(sys.branches[i])),
                                         roots_or_empty(branch_den(sys.branches[i])));
      if (d < kRootTol) {
        pass = false;
        os << "branch " << i << ": zero within " << d << " of a pole; ";
      }
    }
    if (pass) os << "no cancellation";
    rep.checks.push_back({5, "no pole-zero cancellation", pass, os.str()});
  }

  {
    const auto nums = true_effective_numerators(sys);
    Mat B(nb, nums.front().size());
    for (int i = 0; i < nb; ++i) B.row(i) = nums[i].transpose();
    const Mat D = alpha * B;
    Eigen::JacobiSVD<Mat> svd(D);
    const Vec s = svd.singularValues();
    int rank = 0;
    for (Eigen::Index k = 0; k < s.size(); ++k)
      if (s(k) > 1e-6 * s(0)) ++rank;
    std::ostringstream os;
    os << "rank " << rank << " of " << nb << " (singular values";
    for (Eigen::Index k = 0; k < s.size(); ++k) os << " " << s(k);
    os << ")";
    rep.checks.push_back({6, "numerator matrix rank equals branch count",
                          !setpoints.empty() && rank == nb, os.str()});
  }

  {
    bool pass = true;
    std::ostringstream os;
    for (int i = 0; i < nb; ++i)
      for (int j = 0; j < nb; ++j) {
        if (i == j) continue;
        const double d = min_root_distance(roots_or_empty(sys.branches[i].front.den()),
                                           roots_or_empty(sys.branches[j].back.den()));
        if (d < kRootTol) {
          pass = false;
          os << "front " << i << " and back " << j << " share a pole; ";
        }
      }
    if (pass) os << "no shared front/back poles";
    rep.checks.push_back({7, "no cross-branch front/back common poles", pass, os.str()});
  }
  return rep;
}

}  // namespace pwh
