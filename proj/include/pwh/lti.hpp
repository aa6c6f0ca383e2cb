#pragma once

#include <complex>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace pwh {

using Vec = Eigen::VectorXd;
using CVec = Eigen::VectorXcd;
using Mat = Eigen::MatrixXd;
using cplx = std::complex<double>;

// Polynomials in the backward shift operator w = q^{-1} are stored with
// ascending powers: c(0) + c(1) w + ... + c(n) w^n.

/// Product of two polynomials.
Vec poly_mul(const Vec& a, const Vec& b);

/// Evaluates the polynomial at w.
cplx poly_eval(const Vec& c, cplx w);

/// Roots in the z-plane of c(0) + c(1) z^{-1} + ... , i.e. the zeros of
/// c(0) z^n + c(1) z^{n-1} + ... + c(n). Leading and trailing zero
/// coefficients must be trimmed by the caller.
std::vector<cplx> poly_roots(const Vec& c);

/// Monic polynomial prod_k (1 - r_k w); imaginary residue is dropped, so the
/// roots must be closed under conjugation.
Vec poly_from_roots(std::span<const cplx> roots);

/// One real root or one conjugate pair; a pair is stored through its member
/// with positive imaginary part.
struct RootGroup {
  cplx root;
  bool pair = false;

  int degree() const { return pair ? 2 : 1; }
};

/// Factored polynomial gain * w^delay * prod (1 - r w).
class RootSet {
 public:
  RootSet() = default;
  RootSet(std::vector<RootGroup> groups, double gain = 1.0, int delay = 0);

  /// Groups a flat root list into reals and conjugate pairs. Throws
  /// std::invalid_argument when a complex root has no conjugate partner.
  static RootSet from_roots(std::span<const cplx> roots, double gain = 1.0,
                            int delay = 0);

  const std::vector<RootGroup>& groups() const { return groups_; }
  std::vector<cplx> roots() const;
  double gain() const { return gain_; }
  int delay() const { return delay_; }
  int degree() const;

  /// Coefficients of the polynomial this set represents.
  Vec polynomial() const;

 private:
  std::vector<RootGroup> groups_;
  double gain_ = 1.0;
  int delay_ = 0;
};

/// |Im r| below this (relative) is treated as a real root.
double pairing_tolerance(cplx r);

/// Factorizes a coefficient vector. Trailing zero coefficients (roots at the
/// origin) reduce the degree; a note is appended to `warnings` when given.
RootSet factor(const Vec& c, std::vector<std::string>* warnings = nullptr);

/// Discrete-time rational transfer function B(q^{-1}) / A(q^{-1}).
/// The denominator is monic and all its roots are strictly inside the unit
/// circle; construction throws std::invalid_argument otherwise.
class RationalTF {
 public:
  RationalTF();
  RationalTF(Vec num, Vec den);

  const Vec& num() const { return num_; }
  const Vec& den() const { return den_; }
  int num_order() const { return static_cast<int>(num_.size()) - 1; }
  int den_order() const { return static_cast<int>(den_.size()) - 1; }

  /// Value at z (evaluates B(1/z) / A(1/z)).
  cplx eval(cplx z) const;

  /// Response on the DFT grid exp(j 2 pi k / N). Bins must lie in (0, N/2).
  CVec freq_response(std::span<const int> bins, int N) const;

  RationalTF operator*(const RationalTF& other) const;

  nlohmann::json to_json() const;
  static RationalTF from_json(const nlohmann::json& j);

 private:
  Vec num_;
  Vec den_;
};

/// True when every root of the monic polynomial `den` has modulus < 1.
bool is_stable_polynomial(const Vec& den);

/// Reflects roots outside the unit circle to 1/conj(r). The result is monic.
/// Returns the number of reflected roots through `n_reflected`.
Vec reflect_unstable_roots(const Vec& den, int* n_reflected = nullptr);

enum class InitialState { zero, steady_periodic };

/// Solves A(q) y = B(q) u. With steady_periodic the input is taken as one
/// period of a periodic signal and the periodic steady-state response is
/// returned.
Vec filter(const RationalTF& tf, const Vec& u,
           InitialState init = InitialState::zero);

/// Zeros and poles of a transfer function; the numerator gain and any pure
/// delay are carried by the zero set.
struct ZerosPoles {
  RootSet zeros;
  RootSet poles;
  std::vector<std::string> warnings;
};

ZerosPoles roots_of(const RationalTF& tf);

/// Rebuilds a transfer function; the zero-set gain becomes the numerator
/// gain and the pole polynomial is monic.
RationalTF from_roots(const RootSet& zeros, const RootSet& poles);

/// Periodic circular delay: out(k) = x(k - d mod N).
Vec circular_delay(const Vec& x, int d);

/// d >= 0 sample delay; circular for periodic records, zero-filled otherwise.
Vec delay(const Vec& x, int d, InitialState init);

/// FIR filtering b(q^{-1}) x with the same initial-state conventions as filter.
Vec fir(const Vec& b, const Vec& x, InitialState init);

}  // namespace pwh
