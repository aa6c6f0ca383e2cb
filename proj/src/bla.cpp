#include "pwh/bla.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <Eigen/QR>
#include <Eigen/SVD>

namespace pwh {

void NonparametricBla::write_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << std::setprecision(17);
  os << "# setpoint_id=" << setpoint_id << ",N=" << N << ",f_s=" << fs << ",M=" << M
     << ",P=" << P << "\n";
  os << "bin,re_G,im_G,var_noise,var_total\n";
  for (std::size_t i = 0; i < bins.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    os << bins[i] << "," << G(k).real() << "," << G(k).imag() << "," << var_noise(k) << ","
       << var_total(k) << "\n";
  }
}

NonparametricBla NonparametricBla::read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  NonparametricBla b;
  std::string line, item;
  std::getline(is, line);
  if (line.rfind("# ", 0) != 0) throw std::runtime_error(path + ": missing '#' header row");
  std::stringstream hs(line.substr(2));
  while (std::getline(hs, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
    if (key == "setpoint_id") b.setpoint_id = val;
    else if (key == "N") b.N = std::stoi(val);
    else if (key == "f_s") b.fs = std::stod(val);
    else if (key == "M") b.M = std::stoi(val);
    else if (key == "P") b.P = std::stoi(val);
  }
  std::getline(is, line);
  std::vector<std::array<double, 5>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::array<double, 5> row{};
    for (auto& v : row) {
      if (!std::getline(ls, item, ',')) throw std::runtime_error(path + ": short row");
      v = std::stod(item);
    }
    rows.push_back(row);
  }
  const auto K = static_cast<Eigen::Index>(rows.size());
  b.G.resize(K);
  b.var_noise.resize(K);
  b.var_total.resize(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    b.bins.push_back(static_cast<int>(rows[k][0]));
    b.G(k) = cplx(rows[k][1], rows[k][2]);
    b.var_noise(k) = rows[k][3];
    b.var_total(k) = rows[k][4];
  }
  return b;
}

NonparametricBla estimate_bla(const SignalEnsemble& u, const SignalEnsemble& y) {
  if (u.M() != y.M() || u.P() != y.P() || u.N() != y.N())
    throw std::invalid_argument("estimate_bla: u and y shapes differ");
  if (u.M() < 2) throw std::invalid_argument("estimate_bla: need M >= 2 realizations");
  const auto& bins = u.excited_bins();
  if (bins.empty()) throw std::invalid_argument("estimate_bla: no excited bins");
  const int M = u.M(), P = u.P();
  const auto K = static_cast<Eigen::Index>(bins.size());

  NonparametricBla out;
  out.setpoint_id = u.setpoint_id();
  out.bins = bins;
  out.N = u.N();
  out.fs = u.fs();
  out.M = M;
  out.P = P;
  out.var_noise = Vec::Zero(K);
  std::vector<CVec> Gm;
  for (int m = 0; m < M; ++m) {
    const CVec U = dft_bins(u.period_mean(m), bins);
    for (Eigen::Index k = 0; k < K; ++k)
      if (std::abs(U(k)) < 1e-12)
        throw std::runtime_error("estimate_bla: excitation hole at bin " +
                                 std::to_string(bins[k]) + " in realization " +
                                 std::to_string(m));
    const CVec Y = dft_bins(y.period_mean(m), bins);
    Gm.push_back(Y.cwiseQuotient(U));
    if (P > 1) {
      Vec varY = Vec::Zero(K);
      for (int p = 0; p < P; ++p)
        varY += (dft_bins(y.period(m, p), bins) - Y).cwiseAbs2();
      varY /= (P - 1);
      out.var_noise += varY.cwiseQuotient(P * U.cwiseAbs2());
    }
  }
  out.var_noise /= static_cast<double>(M) * M;
  out.G = CVec::Zero(K);
  for (const auto& g : Gm) out.G += g;
  out.G /= M;
  out.var_total = Vec::Zero(K);
  for (const auto& g : Gm) out.var_total += (g - out.G).cwiseAbs2();
  out.var_total /= static_cast<double>(M - 1) * M;
  return out;
}

double bussgang_gain(const Vec& x, const Vec& fx) {
  const Eigen::ArrayXd xc = x.array() - x.mean();
  const Eigen::ArrayXd fc = fx.array() - fx.mean();
  const double var = xc.square().mean();
  if (!(var > 0.0)) throw std::invalid_argument("bussgang_gain: var(x) = 0");
  return (xc * fc).mean() / var;
}

BussgangEstimate bussgang_gain_oracle_se(const Branch& branch, const MultisineSpec& spec,
                                         int samples, std::uint64_t seed) {
  MultisineSpec s = spec;
  s.seed = spec.seed + seed;
  const int periods = std::max(1, (samples + spec.N - 1) / spec.N);
  Vec x(static_cast<Eigen::Index>(periods) * spec.N);
  for (int m = 0; m < periods; ++m)
    x.segment(static_cast<Eigen::Index>(m) * spec.N, spec.N) =
        filter(branch.front, multisine_period(s, m), InitialState::steady_periodic);
  const Vec fx = branch.nl.apply(x);
  BussgangEstimate out;
  out.alpha = bussgang_gain(x, fx);
  if (periods > 1) {
    Vec per(periods);
    for (int m = 0; m < periods; ++m) {
      const auto off = static_cast<Eigen::Index>(m) * spec.N;
      per(m) = bussgang_gain(x.segment(off, spec.N), fx.segment(off, spec.N));
    }
    const double var = (per.array() - per.mean()).square().sum() / (periods - 1);
    out.std_error = std::sqrt(var / periods);
  }
  return out;
}

double bussgang_gain_oracle(const Branch& branch, const MultisineSpec& spec, int samples,
                            std::uint64_t seed) {
  return bussgang_gain_oracle_se(branch, spec, samples, seed).alpha;
}

RationalTF CommonDenModel::tf(int r) const { return RationalTF(nums.at(r), den); }

namespace {

Vec to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}
std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

nlohmann::json CommonDenModel::to_json() const {
  nlohmann::json jn = nlohmann::json::array();
  for (const auto& n : nums) jn.push_back(to_std(n));
  nlohmann::json jc = nlohmann::json::array();
  for (Eigen::Index i = 0; i < num_cov.rows(); ++i) jc.push_back(to_std(num_cov.row(i)));
  return {{"n_c", n_c},
          {"n_d", n_d},
          {"den", to_std(den)},
          {"nums", jn},
          {"num_cov", jc},
          {"setpoint_ids", setpoint_ids},
          {"cost", cost},
          {"cost_history", cost_history},
          {"n_reflected", n_reflected},
          {"warnings", warnings}};
}

CommonDenModel CommonDenModel::from_json(const nlohmann::json& j) {
  CommonDenModel m;
  m.n_c = j.at("n_c");
  m.n_d = j.at("n_d");
  m.den = to_vec(j.at("den").get<std::vector<double>>());
  for (const auto& n : j.at("nums")) m.nums.push_back(to_vec(n.get<std::vector<double>>()));
  const auto& jc = j.at("num_cov");
  m.num_cov.resize(static_cast<Eigen::Index>(jc.size()), static_cast<Eigen::Index>(jc.size()));
  for (std::size_t i = 0; i < jc.size(); ++i)
    m.num_cov.row(static_cast<Eigen::Index>(i)) = to_vec(jc[i].get<std::vector<double>>());
  m.setpoint_ids = j.value("setpoint_ids", std::vector<std::string>{});
  m.cost = j.value("cost", 0.0);
  m.cost_history = j.value("cost_history", std::vector<double>{});
  m.n_reflected = j.value("n_reflected", 0);
  m.warnings = j.value("warnings", std::vector<std::string>{});
  return m;
}

namespace {

// Frequency data of all setpoints flattened, with the powers of z^{-1}.
struct FitData {
  int R = 0, n_c = 0, n_d = 0;
  std::vector<Eigen::Index> offset;  // first row of setpoint r
  Eigen::Index K = 0;                // total bins
  CVec G;
  Vec sqrt_w;
  Eigen::MatrixXcd Z;  // K x (max(n_c, n_d) + 1), Z(k, i) = z_k^{-i}
  std::vector<int> owner;

  int n_params() const { return n_c + R * (n_d + 1); }
};

FitData assemble(const std::vector<NonparametricBla>& blas, int n_c, int n_d,
                 BlaWeighting weighting) {
  FitData d;
  d.R = static_cast<int>(blas.size());
  d.n_c = n_c;
  d.n_d = n_d;
  for (const auto& b : blas) {
    d.offset.push_back(d.K);
    d.K += static_cast<Eigen::Index>(b.bins.size());
  }
  d.G.resize(d.K);
  d.sqrt_w.resize(d.K);
  const int n_pow = std::max(n_c, n_d) + 1;
  d.Z.resize(d.K, n_pow);
  double mean_g2 = 0.0;
  for (const auto& b : blas) mean_g2 += b.G.cwiseAbs2().sum();
  mean_g2 /= static_cast<double>(d.K);
  const double floor = 1e-20 * std::max(mean_g2, 1e-300);
  for (int r = 0; r < d.R; ++r) {
    const auto& b = blas[r];
    const Vec& var = weighting == BlaWeighting::total ? b.var_total : b.var_noise;
    for (std::size_t i = 0; i < b.bins.size(); ++i) {
      const Eigen::Index k = d.offset[r] + static_cast<Eigen::Index>(i);
      const auto ki = static_cast<Eigen::Index>(i);
      d.G(k) = b.G(ki);
      d.sqrt_w(k) = 1.0 / std::sqrt(std::max(var(ki), floor));
      const cplx zi = std::polar(1.0, -2.0 * std::numbers::pi * b.bins[i] / b.N);
      cplx p = 1.0;
      for (int j = 0; j < n_pow; ++j) {
        d.Z(k, j) = p;
        p *= zi;
      }
      d.owner.push_back(r);
    }
  }
  return d;
}

CVec eval_poly(const FitData& d, const Vec& c) {
  return d.Z.leftCols(c.size()) * c.cast<cplx>();
}

Vec full_den(const Vec& theta, int n_c) {
  Vec c(n_c + 1);
  c(0) = 1.0;
  c.tail(n_c) = theta.head(n_c);
  return c;
}

Vec num_of(const Vec& theta, const FitData& d, int r) {
  return theta.segment(d.n_c + r * (d.n_d + 1), d.n_d + 1);
}

// Weighted complex residual sqrt(w) (G - D/C).
CVec residual(const FitData& d, const Vec& theta) {
  const CVec C = eval_poly(d, full_den(theta, d.n_c));
  CVec e(d.K);
  std::vector<CVec> D;
  for (int r = 0; r < d.R; ++r) D.push_back(eval_poly(d, num_of(theta, d, r)));
  for (Eigen::Index k = 0; k < d.K; ++k) {
    e(k) = d.sqrt_w(k) * (d.G(k) - D[d.owner[k]](k) / C(k));
  }
  return e;
}

double cost_of(const FitData& d, const Vec& theta) { return residual(d, theta).squaredNorm(); }

// Real Jacobian of the stacked (Re, Im) residual.
Mat jacobian(const FitData& d, const Vec& theta) {
  const CVec C = eval_poly(d, full_den(theta, d.n_c));
  std::vector<CVec> D;
  for (int r = 0; r < d.R; ++r) D.push_back(eval_poly(d, num_of(theta, d, r)));
  Mat J = Mat::Zero(2 * d.K, d.n_params());
  for (Eigen::Index k = 0; k < d.K; ++k) {
    const int r = d.owner[k];
    const cplx inv_c = 1.0 / C(k);
    const cplx dc = d.sqrt_w(k) * D[r](k) * inv_c * inv_c;
    for (int i = 1; i <= d.n_c; ++i) {
      const cplx v = dc * d.Z(k, i);
      J(2 * k, i - 1) = v.real();
      J(2 * k + 1, i - 1) = v.imag();
    }
    const int base = d.n_c + r * (d.n_d + 1);
    for (int j = 0; j <= d.n_d; ++j) {
      const cplx v = -d.sqrt_w(k) * d.Z(k, j) * inv_c;
      J(2 * k, base + j) = v.real();
      J(2 * k + 1, base + j) = v.imag();
    }
  }
  return J;
}

Vec stack(const CVec& e) {
  Vec out(2 * e.size());
  for (Eigen::Index k = 0; k < e.size(); ++k) {
    out(2 * k) = e(k).real();
    out(2 * k + 1) = e(k).imag();
  }
  return out;
}

// Least squares with unit-norm column scaling; throws on rank deficiency.
Vec scaled_lstsq(const Mat& A, const Vec& b, double rank_tol) {
  Vec scale = A.colwise().norm().transpose();
  for (auto& s : scale) s = s > 0.0 ? 1.0 / s : 1.0;
  const Mat As = A * scale.asDiagonal();
  Eigen::ColPivHouseholderQR<Mat> qr(As);
  qr.setThreshold(rank_tol);
  if (qr.rank() < As.cols()) {
    Eigen::JacobiSVD<Mat> svd(As, Eigen::ComputeThinV);
    const Vec s = svd.singularValues();
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < s.size(); ++i)
      if (s(i) <= rank_tol * s(0)) idx.push_back(i);
    Mat dirs(As.cols(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const Vec v = scale.asDiagonal() * svd.matrixV().col(idx[i]);
      dirs.col(static_cast<Eigen::Index>(i)) = v.normalized();
    }
    std::ostringstream os;
    os << "rank-deficient normal equations: " << As.cols() - qr.rank()
       << " deficient direction(s) out of " << As.cols()
       << " parameters; the model orders are too high for the data";
    throw RankDeficientError(os.str(), dirs);
  }
  return scale.asDiagonal() * qr.solve(b);
}

// One Sanathanan-Koerner step: linearized fit weighted by 1/|C_prev|.
Vec sk_step(const FitData& d, const Vec& c_prev) {
  const CVec Cp = eval_poly(d, c_prev);
  Mat A = Mat::Zero(2 * d.K, d.n_params());
  Vec b(2 * d.K);
  for (Eigen::Index k = 0; k < d.K; ++k) {
    const int r = d.owner[k];
    const double s = d.sqrt_w(k) / std::abs(Cp(k));
    for (int i = 1; i <= d.n_c; ++i) {
      const cplx v = s * d.G(k) * d.Z(k, i);
      A(2 * k, i - 1) = v.real();
      A(2 * k + 1, i - 1) = v.imag();
    }
    const int base = d.n_c + r * (d.n_d + 1);
    for (int j = 0; j <= d.n_d; ++j) {
      const cplx v = -s * d.Z(k, j);
      A(2 * k, base + j) = v.real();
      A(2 * k + 1, base + j) = v.imag();
    }
    const cplx rhs = -s * d.G(k);
    b(2 * k) = rhs.real();
    b(2 * k + 1) = rhs.imag();
  }
  return scaled_lstsq(A, b, 1e-10);
}

// Numerators for a fixed denominator (linear weighted LS per setpoint).
Vec refit_numerators(const FitData& d, const Vec& theta) {
  Vec out = theta;
  const CVec C = eval_poly(d, full_den(theta, d.n_c));
  for (int r = 0; r < d.R; ++r) {
    const Eigen::Index k0 = d.offset[r];
    const Eigen::Index kn = (r + 1 < d.R ? d.offset[r + 1] : d.K) - k0;
    Mat A(2 * kn, d.n_d + 1);
    Vec b(2 * kn);
    for (Eigen::Index i = 0; i < kn; ++i) {
      const Eigen::Index k = k0 + i;
      for (int j = 0; j <= d.n_d; ++j) {
        const cplx v = d.sqrt_w(k) * d.Z(k, j) / C(k);
        A(2 * i, j) = v.real();
        A(2 * i + 1, j) = v.imag();
      }
      const cplx rhs = d.sqrt_w(k) * d.G(k);
      b(2 * i) = rhs.real();
      b(2 * i + 1) = rhs.imag();
    }
    out.segment(d.n_c + r * (d.n_d + 1), d.n_d + 1) = scaled_lstsq(A, b, 1e-12);
  }
  return out;
}

// Monotone LM on the weighted output-error cost.
Vec polish(const FitData& d, Vec theta, int max_iter, std::vector<double>& history) {
  double cost = cost_of(d, theta);
  const bool start_stable = is_stable_polynomial(full_den(theta, d.n_c));
  double lambda = -1.0;
  for (int it = 0; it < max_iter; ++it) {
    const Mat J = jacobian(d, theta);
    const Vec e = stack(residual(d, theta));
    const Mat JtJ = J.transpose() * J;
    const Vec g = J.transpose() * e;
    if (lambda < 0.0) lambda = 1e-3;
    bool accepted = false;
    for (int tries = 0; tries < 30 && !accepted; ++tries) {
      Mat A = JtJ;
      A.diagonal() += lambda * JtJ.diagonal().cwiseMax(1e-300);
      const Vec step = A.ldlt().solve(-g);
      const Vec cand = theta + step;
      if (start_stable && !is_stable_polynomial(full_den(cand, d.n_c))) {
        lambda *= 10.0;
        continue;
      }
      const double c_new = cost_of(d, cand);
      if (std::isfinite(c_new) && c_new <= cost) {
        const double rel = (cost - c_new) / std::max(cost, 1e-300);
        theta = cand;
        cost = c_new;
        history.push_back(cost);
        lambda = std::max(lambda / 3.0, 1e-15);
        accepted = true;
        if (rel < 1e-12) return theta;
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) break;
  }
  return theta;
}

// 0.5 (J^T J)^{-1}: each of Re/Im of the whitened residual has variance 1/2.
Mat parameter_covariance(const Mat& J) {
  Vec scale = J.colwise().norm().transpose();
  for (auto& s : scale) s = s > 0.0 ? 1.0 / s : 1.0;
  const Mat Js = J * scale.asDiagonal();
  const Mat JtJ = Js.transpose() * Js;
  Eigen::CompleteOrthogonalDecomposition<Mat> cod(JtJ);
  return 0.5 * scale.asDiagonal() * cod.pseudoInverse() * scale.asDiagonal();
}

}  // namespace

double weighted_cost(const std::vector<NonparametricBla>& blas, const CommonDenModel& model,
                     BlaWeighting weighting) {
  const FitData d = assemble(blas, model.n_c, model.n_d, weighting);
  Vec theta(d.n_params());
  theta.head(d.n_c) = model.den.tail(d.n_c);
  for (int r = 0; r < d.R; ++r) theta.segment(d.n_c + r * (d.n_d + 1), d.n_d + 1) = model.nums[r];
  return cost_of(d, theta);
}

CommonDenModel fit_common_den(const std::vector<NonparametricBla>& blas, int n_c, int n_d,
                              const CommonDenOptions& opts) {
  if (blas.empty()) throw std::invalid_argument("fit_common_den: no setpoints");
  if (n_c < 0 || n_d < 0) throw std::invalid_argument("fit_common_den: negative order");
  const int R = static_cast<int>(blas.size());
  std::size_t bins = 0;
  for (const auto& b : blas) bins += b.bins.size();
  if (static_cast<std::size_t>(R * (n_d + 1) + n_c) > 2 * bins)
    throw std::invalid_argument("fit_common_den: too few excited bins for the requested orders");

  const FitData d = assemble(blas, n_c, n_d, opts.weighting);
  CommonDenModel out;
  out.n_c = n_c;
  out.n_d = n_d;
  for (const auto& b : blas) out.setpoint_ids.push_back(b.setpoint_id);

  Vec c_prev = Vec::Ones(1);
  Vec best;
  double best_cost = INFINITY;
  for (int it = 0; it < opts.max_iter; ++it) {
    const Vec theta = sk_step(d, c_prev);
    const double c = cost_of(d, theta);
    if (std::isfinite(c) && c < best_cost) {
      best = theta;
      best_cost = c;
      out.cost_history.push_back(c);
    }
    const Vec c_new = full_den(theta, n_c);
    const double change = c_prev.size() == c_new.size()
                              ? (c_new - c_prev).norm() / std::max(c_new.norm(), 1e-300)
                              : INFINITY;
    c_prev = c_new;
    if (change < opts.tol) break;
  }
  if (best.size() == 0) throw std::runtime_error("fit_common_den: no finite iterate");
  Vec theta = polish(d, best, opts.polish_iter, out.cost_history);

  Vec den = full_den(theta, n_c);
  bool fixed_den = false;
  if (!is_stable_polynomial(den)) {
    if (!opts.stabilize) throw std::runtime_error("fit_common_den: unstable common denominator");
    den = reflect_unstable_roots(den, &out.n_reflected);
    theta.head(n_c) = den.tail(n_c);
    theta = refit_numerators(d, theta);
    fixed_den = true;
    out.warnings.push_back("reflected " + std::to_string(out.n_reflected) +
                           " unstable denominator root(s) into the unit circle");
  }
  out.den = den;
  for (int r = 0; r < R; ++r) out.nums.push_back(num_of(theta, d, r));
  out.cost = cost_of(d, theta);

  Mat J = jacobian(d, theta);
  if (fixed_den) J = J.rightCols(R * (n_d + 1)).eval();
  const Mat cov = parameter_covariance(J);
  out.num_cov = cov.bottomRightCorner(R * (n_d + 1), R * (n_d + 1));
  return out;
}

std::vector<OrderScanRow> order_scan(const std::vector<NonparametricBla>& blas, int n_c_min,
                                     int n_c_max, int n_d_min, int n_d_max,
                                     const CommonDenOptions& opts) {
  std::vector<OrderScanRow> rows;
  for (int nc = n_c_min; nc <= n_c_max; ++nc)
    for (int nd = n_d_min; nd <= n_d_max; ++nd) {
      OrderScanRow row{nc, nd, INFINITY, true, ""};
      try {
        row.cost = fit_common_den(blas, nc, nd, opts).cost;
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
      rows.push_back(row);
    }
  return rows;
}

}  // namespace pwh
