#include "pwh/signals.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include <unsupported/Eigen/FFT>

namespace pwh {

namespace {

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

SignalEnsemble::SignalEnsemble(int M, int P, int N, double fs,
                               std::vector<int> excited_bins, std::string setpoint_id)
    : M_(M), P_(P), N_(N), fs_(fs), bins_(std::move(excited_bins)),
      setpoint_id_(std::move(setpoint_id)),
      data_(Vec::Zero(static_cast<Eigen::Index>(M) * P * N)) {
  if (M < 1 || P < 1 || N < 2)
    throw std::invalid_argument("SignalEnsemble: need M >= 1, P >= 1, N >= 2");
}

Eigen::Map<Vec> SignalEnsemble::period(int m, int p) {
  return Eigen::Map<Vec>(data_.data() + (static_cast<Eigen::Index>(m) * P_ + p) * N_, N_);
}

Eigen::Map<const Vec> SignalEnsemble::period(int m, int p) const {
  return Eigen::Map<const Vec>(data_.data() + (static_cast<Eigen::Index>(m) * P_ + p) * N_,
                               N_);
}

Vec SignalEnsemble::period_mean(int m) const {
  Vec acc = Vec::Zero(N_);
  for (int p = 0; p < P_; ++p) acc += period(m, p);
  return acc / P_;
}

void SignalEnsemble::set_realization(int m, const Vec& one_period) {
  if (one_period.size() != N_) throw std::invalid_argument("set_realization: wrong length");
  for (int p = 0; p < P_; ++p) period(m, p) = one_period;
}

void MultisineSpec::validate() const {
  if (N < 4) throw std::invalid_argument("multisine: N too small");
  if (!(amplitude > 0.0)) throw std::invalid_argument("multisine: amplitude must be > 0");
  if (excited_bins.empty()) throw std::invalid_argument("multisine: no excited bins");
  for (int k : excited_bins)
    if (k < 1 || 2 * k >= N)
      throw std::invalid_argument("multisine: excited bin outside [1, N/2-1]");
}

std::vector<int> bin_range(int first, int last) {
  std::vector<int> out;
  for (int k = first; k <= last; ++k) out.push_back(k);
  return out;
}

Vec multisine_period(const MultisineSpec& spec, int m, double* rescale) {
  spec.validate();
  auto rng = make_rng(spec.seed, static_cast<std::uint64_t>(m));
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

  std::vector<cplx> X(spec.N, cplx(0.0, 0.0));
  CVec color;
  if (spec.coloring) color = spec.coloring->freq_response(spec.excited_bins, spec.N);
  for (std::size_t i = 0; i < spec.excited_bins.size(); ++i) {
    const int k = spec.excited_bins[i];
    const double a = spec.coloring ? std::abs(color(static_cast<Eigen::Index>(i))) : 1.0;
    const cplx c = std::polar(a, phase(rng));
    X[k] = c;
    X[spec.N - k] = std::conj(c);
  }
  Eigen::FFT<double> fft;
  std::vector<double> x;
  fft.inv(x, X);
  Vec u = Eigen::Map<Vec>(x.data(), spec.N);
  const double r = std::sqrt(u.squaredNorm() / spec.N);
  const double factor = spec.amplitude / r;
  if (rescale) *rescale = factor;
  u *= factor;
  u.array() += spec.dc_offset;
  return u;
}

SignalEnsemble gen_multisine(const MultisineSpec& spec, int M, int P,
                             const std::string& setpoint_id) {
  spec.validate();
  SignalEnsemble e(M, P, spec.N, spec.fs, spec.excited_bins, setpoint_id);
  e.rescale_factors.resize(M);
  for (int m = 0; m < M; ++m) e.set_realization(m, multisine_period(spec, m, &e.rescale_factors[m]));
  return e;
}

RationalTF chebyshev1_lowpass(int order, double ripple_db, double cutoff_hz, double fs) {
  if (order < 1) throw std::invalid_argument("chebyshev1_lowpass: order < 1");
  if (!(cutoff_hz > 0.0 && cutoff_hz < fs / 2))
    throw std::invalid_argument("chebyshev1_lowpass: cutoff must lie in (0, fs/2)");
  const double eps = std::sqrt(std::pow(10.0, ripple_db / 10.0) - 1.0);
  const double mu = std::asinh(1.0 / eps) / order;
  const double warped = 2.0 * fs * std::tan(std::numbers::pi * cutoff_hz / fs);

  std::vector<cplx> zpoles;
  cplx dc = 1.0;
  for (int k = 1; k <= order; ++k) {
    const double theta = std::numbers::pi * (2.0 * k - 1.0) / (2.0 * order);
    const cplx s = warped * cplx(-std::sinh(mu) * std::sin(theta), std::cosh(mu) * std::cos(theta));
    const cplx z = (2.0 * fs + s) / (2.0 * fs - s);
    zpoles.push_back(z);
    dc *= (1.0 - z) / 2.0;
  }
  // Digital DC gain matches the analog prototype: 1 for odd orders,
  // 1/sqrt(1+eps^2) for even ones.
  const double target = order % 2 ? 1.0 : 1.0 / std::sqrt(1.0 + eps * eps);
  const double k = target * dc.real();

  Vec num = Vec::Ones(1);
  const Vec one_plus_w = (Vec(2) << 1.0, 1.0).finished();
  for (int i = 0; i < order; ++i) num = poly_mul(num, one_plus_w);
  return RationalTF(k * num, poly_from_roots(zpoles));
}

Vec gen_growing_envelope(int N, double fs, double cutoff, std::uint64_t seed) {
  if (N < 2) throw std::invalid_argument("gen_growing_envelope: N < 2");
  const RationalTF H = chebyshev1_lowpass(6, 0.5, cutoff, fs);
  auto rng = make_rng(seed, 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec r(N);
  for (auto& v : r) v = gauss(rng);
  Vec u = filter(H, r);
  for (int k = 0; k < N; ++k) u(k) *= 2.0 * k / N;
  return u;
}

SignalEnsemble add_output_noise(const SignalEnsemble& y, const RationalTF& noise_tf,
                                double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("add_output_noise: sigma < 0");
  SignalEnsemble out = y;
  if (sigma == 0.0) return out;
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Eigen::Index len = static_cast<Eigen::Index>(y.P()) * y.N();
  const Eigen::Index warm = std::max<Eigen::Index>(y.N(), 4096);
  for (int m = 0; m < y.M(); ++m) {
    auto rng = make_rng(seed, 0x5bd1e995ULL + static_cast<std::uint64_t>(m));
    Vec e(warm + len);
    for (auto& v : e) v = gauss(rng);
    const Vec v = sigma * filter(noise_tf, e).tail(len);
    for (int p = 0; p < y.P(); ++p) out.period(m, p) += v.segment(static_cast<Eigen::Index>(p) * y.N(), y.N());
  }
  return out;
}

CVec dft_bins(const Vec& x, std::span<const int> bins) {
  Eigen::FFT<double> fft;
  std::vector<double> in(x.data(), x.data() + x.size());
  std::vector<cplx> X;
  fft.fwd(X, in);
  CVec out(static_cast<Eigen::Index>(bins.size()));
  for (std::size_t i = 0; i < bins.size(); ++i) out(static_cast<Eigen::Index>(i)) = X[bins[i]];
  return out;
}

void write_ensemble_csv(const std::string& path, const SignalEnsemble& e) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << std::setprecision(17);
  os << "# f_s=" << e.fs() << ",setpoint_id=" << e.setpoint_id() << ",M=" << e.M()
     << ",P=" << e.P() << ",N=" << e.N() << "\n";
  for (int m = 0; m < e.M(); ++m)
    for (int p = 0; p < e.P(); ++p) os << (m || p ? "," : "") << "m" << m << "p" << p;
  os << "\n";
  for (int n = 0; n < e.N(); ++n) {
    for (int m = 0; m < e.M(); ++m)
      for (int p = 0; p < e.P(); ++p) os << (m || p ? "," : "") << e.period(m, p)(n);
    os << "\n";
  }
}

SignalEnsemble read_ensemble_csv(const std::string& path, const std::vector<int>& excited_bins) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::string header;
  std::getline(is, header);
  if (header.rfind("# ", 0) != 0) throw std::runtime_error(path + ": missing '#' header row");
  double fs = 1.0;
  int M = 0, P = 0, N = 0;
  std::string id;
  std::stringstream hs(header.substr(2));
  std::string item;
  while (std::getline(hs, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
    if (key == "f_s") fs = std::stod(val);
    else if (key == "setpoint_id") id = val;
    else if (key == "M") M = std::stoi(val);
    else if (key == "P") P = std::stoi(val);
    else if (key == "N") N = std::stoi(val);
  }
  std::string names;
  std::getline(is, names);
  const int cols = static_cast<int>(std::count(names.begin(), names.end(), ',')) + 1;
  if (M == 0 || P == 0) {
    M = cols;
    P = 1;
  }
  if (M * P != cols) throw std::runtime_error(path + ": column count does not match M*P");
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ls(line);
    while (std::getline(ls, item, ',')) row.push_back(std::stod(item));
    if (static_cast<int>(row.size()) != cols) throw std::runtime_error(path + ": ragged row");
    rows.push_back(std::move(row));
  }
  if (N == 0) N = static_cast<int>(rows.size());
  if (static_cast<int>(rows.size()) != N) throw std::runtime_error(path + ": row count != N");
  SignalEnsemble e(M, P, N, fs, excited_bins, id);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < cols; ++c) e.period(c / P, c % P)(n) = rows[n][c];
  return e;
}

}  // namespace pwh
