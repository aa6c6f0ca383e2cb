#pragma once

#include <vector>

#include "pwh/lti.hpp"

namespace pwh {

/// Basis of the MIMO static nonlinearity. Inputs are divided by `scales`
/// before evaluation. Feature 0 is always the constant.
struct BasisDescriptor {
  enum class Kind { polynomial, tanh_network };

  Kind kind = Kind::polynomial;
  int degree = 3;    // polynomial: total degree
  int neurons = 10;  // tanh network: hidden units
  int n_in = 1;
  int n_out = 1;
  Vec scales;  // size n_in; empty means all ones

  int n_features() const;
  double scale(int i) const { return scales.size() ? scales(i) : 1.0; }

  nlohmann::json to_json() const;
  static BasisDescriptor from_json(const nlohmann::json& j);
};

/// Exponent tuples of all monomials in n_in variables up to total degree,
/// graded, constant first.
std::vector<std::vector<int>> monomial_exponents(int n_in, int degree);

/// r = features(x) * W. The constant feeds output 0 only: W(0, j) stays zero
/// for j > 0, otherwise constants pushed through the different back blocks
/// are collinear.
struct MimoNonlinearity {
  BasisDescriptor basis;
  Mat W;  // n_features x n_out
  Mat V;  // tanh network input weights, neurons x n_in
  Vec c;  // tanh network biases

  static MimoNonlinearity zero(const BasisDescriptor& b);

  static bool weight_free(int feature, int out) { return feature != 0 || out == 0; }
  int n_free_weights() const { return static_cast<int>(W.size()) - (basis.n_out - 1); }

  /// X: L x n_in raw inputs. Returns L x n_features.
  Mat features(const Mat& X) const;
  Mat eval(const Mat& X) const { return features(X) * W; }
  /// d features / d x_i with respect to the raw input i; L x n_features.
  Mat feature_derivative(const Mat& X, int i) const;

  nlohmann::json to_json() const;
  static MimoNonlinearity from_json(const nlohmann::json& j);
};

}  // namespace pwh
