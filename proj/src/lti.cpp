#include "pwh/lti.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <unsupported/Eigen/Polynomials>

namespace pwh {

Vec poly_mul(const Vec& a, const Vec& b) {
  if (a.size() == 0 || b.size() == 0) return Vec();
  Vec c = Vec::Zero(a.size() + b.size() - 1);
  for (Eigen::Index i = 0; i < a.size(); ++i)
    for (Eigen::Index j = 0; j < b.size(); ++j) c(i + j) += a(i) * b(j);
  return c;
}

cplx poly_eval(const Vec& c, cplx w) {
  cplx acc = 0.0;
  for (Eigen::Index i = c.size() - 1; i >= 0; --i) acc = acc * w + c(i);
  return acc;
}

namespace {

// Horner on the z-polynomial c(0) z^n + ... + c(n), with derivative.
void zpoly_eval(const Vec& c, cplx z, cplx& p, cplx& dp) {
  p = 0.0;
  dp = 0.0;
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    dp = dp * z + p;
    p = p * z + c(i);
  }
}

}  // namespace

std::vector<cplx> poly_roots(const Vec& c) {
  const Eigen::Index n = c.size() - 1;
  if (n < 1) return {};
  if (c(0) == 0.0 || c(n) == 0.0)
    throw std::invalid_argument("poly_roots: untrimmed zero coefficient");

  std::vector<cplx> roots;
  if (n == 1) {
    roots.push_back(-c(1) / c(0));
    return roots;
  }
  // Eigen's solver wants ascending powers of z.
  Vec asc = c.reverse();
  Eigen::PolynomialSolver<double, Eigen::Dynamic> solver;
  solver.compute(asc);
  const auto& r = solver.roots();
  roots.assign(r.data(), r.data() + r.size());

  // One Newton step per root.
  for (auto& z : roots) {
    cplx p, dp;
    zpoly_eval(c, z, p, dp);
    if (std::abs(dp) > 0.0) {
      const cplx step = p / dp;
      if (std::abs(step) < 1e-3 * (1.0 + std::abs(z))) z -= step;
    }
  }
  return roots;
}

Vec poly_from_roots(std::span<const cplx> roots) {
  Eigen::VectorXcd c = Eigen::VectorXcd::Ones(1);
  for (const auto& r : roots) {
    Eigen::VectorXcd next = Eigen::VectorXcd::Zero(c.size() + 1);
    next.head(c.size()) = c;
    next.tail(c.size()) -= r * c;
    c = next;
  }
  return c.real();
}

double pairing_tolerance(cplx r) { return 1e-9 * (1.0 + std::abs(r)); }

RootSet::RootSet(std::vector<RootGroup> groups, double gain, int delay)
    : groups_(std::move(groups)), gain_(gain), delay_(delay) {
  if (delay_ < 0) throw std::invalid_argument("RootSet: negative delay");
  for (auto& g : groups_) {
    if (g.pair) {
      if (std::abs(g.root.imag()) <= pairing_tolerance(g.root))
        throw std::invalid_argument("RootSet: conjugate pair with real root");
      if (g.root.imag() < 0) g.root = std::conj(g.root);
    } else {
      if (std::abs(g.root.imag()) > pairing_tolerance(g.root))
        throw std::invalid_argument("RootSet: unpaired complex root");
      g.root = cplx(g.root.real(), 0.0);
    }
  }
}

RootSet RootSet::from_roots(std::span<const cplx> roots, double gain,
                            int delay) {
  std::vector<RootGroup> groups;
  std::vector<cplx> upper, lower;
  for (const auto& r : roots) {
    if (std::abs(r.imag()) <= pairing_tolerance(r))
      groups.push_back({cplx(r.real(), 0.0), false});
    else if (r.imag() > 0)
      upper.push_back(r);
    else
      lower.push_back(r);
  }
  if (upper.size() != lower.size())
    throw std::invalid_argument("RootSet: unpaired complex root");

  // Greedy matching by conjugate distance.
  std::vector<bool> used(lower.size(), false);
  for (const auto& r : upper) {
    std::size_t best = lower.size();
    double best_d = 0.0;
    for (std::size_t j = 0; j < lower.size(); ++j) {
      if (used[j]) continue;
      const double d = std::abs(r - std::conj(lower[j]));
      if (best == lower.size() || d < best_d) {
        best = j;
        best_d = d;
      }
    }
    if (best_d > 1e-6 * (1.0 + std::abs(r)))
      throw std::invalid_argument("RootSet: unpaired complex root");
    used[best] = true;
    const cplx m = 0.5 * (r + std::conj(lower[best]));
    groups.push_back({m, true});
  }
  return RootSet(std::move(groups), gain, delay);
}

std::vector<cplx> RootSet::roots() const {
  std::vector<cplx> out;
  for (const auto& g : groups_) {
    out.push_back(g.root);
    if (g.pair) out.push_back(std::conj(g.root));
  }
  return out;
}

int RootSet::degree() const {
  int d = 0;
  for (const auto& g : groups_) d += g.degree();
  return d;
}

Vec RootSet::polynomial() const {
  const auto r = roots();
  Vec p = gain_ * poly_from_roots(r);
  if (delay_ == 0) return p;
  Vec out = Vec::Zero(p.size() + delay_);
  out.tail(p.size()) = p;
  return out;
}

RootSet factor(const Vec& c, std::vector<std::string>* warnings) {
  if (c.size() == 0) throw std::invalid_argument("factor: empty polynomial");
  const double scale = c.cwiseAbs().maxCoeff();
  if (scale == 0.0) throw std::invalid_argument("factor: zero polynomial");

  Eigen::Index first = 0;
  while (c(first) == 0.0) ++first;
  Eigen::Index last = c.size() - 1;
  while (last > first && std::abs(c(last)) <= 1e-14 * scale) --last;
  if (last < c.size() - 1 && warnings)
    warnings->push_back("degree reduced from " + std::to_string(c.size() - 1) +
                        " to " + std::to_string(last) +
                        " (negligible trailing coefficients)");

  const Vec core = c.segment(first, last - first + 1);
  const auto roots = poly_roots(core);
  return RootSet::from_roots(roots, core(0), static_cast<int>(first));
}

bool is_stable_polynomial(const Vec& den) {
  if (den.size() <= 1) return true;
  Eigen::Index last = den.size() - 1;
  while (last > 0 && den(last) == 0.0) --last;
  if (last == 0) return true;
  for (const auto& r : poly_roots(den.head(last + 1)))
    if (!(std::abs(r) < 1.0)) return false;
  return true;
}

Vec reflect_unstable_roots(const Vec& den, int* n_reflected) {
  int count = 0;
  Eigen::Index last = den.size() - 1;
  while (last > 0 && den(last) == 0.0) --last;
  std::vector<cplx> roots = last > 0 ? poly_roots(den.head(last + 1) / den(0))
                                     : std::vector<cplx>{};
  for (auto& r : roots) {
    if (std::abs(r) >= 1.0) {
      r = 1.0 / std::conj(r);
      ++count;
    }
  }
  if (n_reflected) *n_reflected = count;
  Vec out = Vec::Zero(den.size());
  const Vec p = poly_from_roots(roots);
  out.head(p.size()) = p;
  return out;
}

RationalTF::RationalTF() : num_(Vec::Ones(1)), den_(Vec::Ones(1)) {}

RationalTF::RationalTF(Vec num, Vec den) : num_(std::move(num)), den_(std::move(den)) {
  if (den_.size() == 0) throw std::invalid_argument("RationalTF: empty denominator");
  if (num_.size() == 0) throw std::invalid_argument("RationalTF: empty numerator");
  if (den_(0) == 0.0) throw std::invalid_argument("RationalTF: a0 must be nonzero");
  if (!num_.allFinite() || !den_.allFinite())
    throw std::invalid_argument("RationalTF: non-finite coefficient");
  const double a0 = den_(0);
  num_ /= a0;
  den_ /= a0;
  if (!is_stable_polynomial(den_))
    throw std::invalid_argument("RationalTF: unstable denominator");
}

cplx RationalTF::eval(cplx z) const {
  const cplx w = 1.0 / z;
  return poly_eval(num_, w) / poly_eval(den_, w);
}

CVec RationalTF::freq_response(std::span<const int> bins, int N) const {
  CVec out(static_cast<Eigen::Index>(bins.size()));
  for (std::size_t i = 0; i < bins.size(); ++i) {
    const int k = bins[i];
    if (k <= 0 || 2 * k >= N)
      throw std::out_of_range("freq_response: bin " + std::to_string(k) +
                              " outside (0, N/2)");
    const double theta = 2.0 * std::numbers::pi * k / N;
    const cplx w = std::polar(1.0, -theta);
    out(static_cast<Eigen::Index>(i)) = poly_eval(num_, w) / poly_eval(den_, w);
  }
  return out;
}

RationalTF RationalTF::operator*(const RationalTF& other) const {
  return RationalTF(poly_mul(num_, other.num_), poly_mul(den_, other.den_));
}

nlohmann::json RationalTF::to_json() const {
  return {{"num", std::vector<double>(num_.data(), num_.data() + num_.size())},
          {"den", std::vector<double>(den_.data(), den_.data() + den_.size())}};
}

RationalTF RationalTF::from_json(const nlohmann::json& j) {
  const auto num = j.at("num").get<std::vector<double>>();
  const auto den = j.at("den").get<std::vector<double>>();
  return RationalTF(Eigen::Map<const Vec>(num.data(), num.size()),
                    Eigen::Map<const Vec>(den.data(), den.size()));
}

namespace {

// Direct form II transposed over one block. `state` has size n and is
// updated in place.
void df2t(const Vec& b, const Vec& a, const double* u, double* y,
          Eigen::Index len, Vec& state) {
  const Eigen::Index n = state.size();
  const double b0 = b(0);
  if (n == 0) {
    for (Eigen::Index k = 0; k < len; ++k) y[k] = b0 * u[k];
    return;
  }
  double* z = state.data();
  const double* bp = b.data();
  const double* ap = a.data();
  for (Eigen::Index k = 0; k < len; ++k) {
    const double uk = u[k];
    const double yk = b0 * uk + z[0];
    for (Eigen::Index i = 0; i + 1 < n; ++i)
      z[i] = bp[i + 1] * uk + z[i + 1] - ap[i + 1] * yk;
    z[n - 1] = bp[n] * uk - ap[n] * yk;
    y[k] = yk;
  }
}

}  // namespace

Vec filter(const RationalTF& tf, const Vec& u, InitialState init) {
  const Eigen::Index n = std::max(tf.num().size(), tf.den().size()) - 1;
  Vec b = Vec::Zero(n + 1), a = Vec::Zero(n + 1);
  b.head(tf.num().size()) = tf.num();
  a.head(tf.den().size()) = tf.den();

  Vec y(u.size());
  Vec state = Vec::Zero(n);
  df2t(b, a, u.data(), y.data(), u.size(), state);
  if (init == InitialState::zero || n == 0 || u.size() == 0) return y;

  // Periodic steady state. After one period from rest the state is s1; the
  // periodic state s* satisfies s* = Phi^N s* + s1. The correction to the
  // zero-state response is the free response from s*.
  const Eigen::Index N = u.size();
  if (tf.den_order() == 0) {
    // FIR: the state only remembers the last n inputs, so cycling enough
    // whole periods reaches the steady state exactly.
    const Eigen::Index passes = n / N + 1;
    for (Eigen::Index p = 0; p < passes; ++p)
      df2t(b, a, u.data(), y.data(), N, state);
    return y;
  }

  Mat phi = Mat::Zero(n, n);
  phi.col(0) = -a.tail(n);
  for (Eigen::Index i = 0; i + 1 < n; ++i) phi(i, i + 1) = 1.0;

  Mat pw = Mat::Identity(n, n), base = phi;
  for (Eigen::Index e = N; e > 0; e >>= 1) {
    if (e & 1) pw = pw * base;
    if (e > 1) base = base * base;
  }
  const Vec s_star = (Mat::Identity(n, n) - pw).partialPivLu().solve(state);
  if (!s_star.allFinite())
    throw std::runtime_error("filter: periodic state not found");

  // Free response, truncated once it is negligible.
  const double ymax = std::max(y.cwiseAbs().maxCoeff(), s_star.cwiseAbs().maxCoeff());
  const double floor = 1e-18 * (ymax > 0.0 ? ymax : 1.0);
  Vec z = s_star;
  for (Eigen::Index k = 0; k < N; ++k) {
    const double yk = z(0);
    y(k) += yk;
    for (Eigen::Index i = 0; i + 1 < n; ++i) z(i) = z(i + 1) - a(i + 1) * yk;
    z(n - 1) = -a(n) * yk;
    if ((k & 31) == 31 && z.cwiseAbs().maxCoeff() < floor) break;
  }
  return y;
}

ZerosPoles roots_of(const RationalTF& tf) {
  ZerosPoles out;
  out.zeros = factor(tf.num(), &out.warnings);
  out.poles = factor(tf.den(), &out.warnings);
  if (out.poles.delay() != 0)
    throw std::logic_error("roots_of: denominator with leading zero");
  return out;
}

RationalTF from_roots(const RootSet& zeros, const RootSet& poles) {
  Vec den = poles.polynomial() / poles.gain();
  return RationalTF(zeros.polynomial(), den);
}

Vec circular_delay(const Vec& x, int d) {
  const Eigen::Index N = x.size();
  if (N == 0) return x;
  d %= static_cast<int>(N);
  if (d < 0) d += static_cast<int>(N);
  Vec out(N);
  out.tail(N - d) = x.head(N - d);
  out.head(d) = x.tail(d);
  return out;
}

Vec delay(const Vec& x, int d, InitialState init) {
  if (init == InitialState::steady_periodic) return circular_delay(x, d);
  const Eigen::Index N = x.size();
  Vec out = Vec::Zero(N);
  if (d < N) out.tail(N - d) = x.head(N - d);
  return out;
}

Vec fir(const Vec& b, const Vec& x, InitialState init) {
  const Eigen::Index N = x.size();
  Vec out = Vec::Zero(N);
  if (N == 0) return out;
  for (Eigen::Index j = 0; j < b.size(); ++j) {
    if (b(j) == 0.0) continue;
    if (init == InitialState::steady_periodic) {
      const Eigen::Index s = j % N;
      out.tail(N - s) += b(j) * x.head(N - s);
      if (s > 0) out.head(s) += b(j) * x.tail(s);
    } else if (j < N) {
      out.tail(N - j) += b(j) * x.head(N - j);
    }
  }
  return out;
}

}  // namespace pwh
