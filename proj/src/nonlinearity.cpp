#include "pwh/nonlinearity.hpp"

#include <cmath>
#include <stdexcept>

namespace pwh {

namespace {

void exponents_rec(int n_in, int remaining, int var, std::vector<int>& cur,
                   std::vector<std::vector<int>>& out) {
  if (var == n_in - 1) {
    cur[var] = remaining;
    out.push_back(cur);
    return;
  }
  for (int e = remaining; e >= 0; --e) {
    cur[var] = e;
    exponents_rec(n_in, remaining - e, var + 1, cur, out);
  }
}

std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

Vec to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

nlohmann::json mat_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(to_std(m.row(r).transpose()));
  return rows;
}

Mat json_mat(const nlohmann::json& j, Eigen::Index cols) {
  Mat m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    const auto row = j[r].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != cols) throw std::invalid_argument("matrix row has wrong length");
    m.row(static_cast<Eigen::Index>(r)) = to_vec(row).transpose();
  }
  return m;
}

}  // namespace

std::vector<std::vector<int>> monomial_exponents(int n_in, int degree) {
  if (n_in < 1 || degree < 0) throw std::invalid_argument("monomial_exponents: bad arguments");
  std::vector<std::vector<int>> out;
  std::vector<int> cur(n_in, 0);
  for (int d = 0; d <= degree; ++d) exponents_rec(n_in, d, 0, cur, out);
  return out;
}

int BasisDescriptor::n_features() const {
  if (kind == Kind::tanh_network) return neurons + 1;
  return static_cast<int>(monomial_exponents(n_in, degree).size());
}

nlohmann::json BasisDescriptor::to_json() const {
  nlohmann::json j{{"kind", kind == Kind::polynomial ? "polynomial" : "tanh_network"},
                   {"n_in", n_in},
                   {"n_out", n_out},
                   {"scales", to_std(scales)}};
  if (kind == Kind::polynomial)
    j["degree"] = degree;
  else
    j["neurons"] = neurons;
  return j;
}

BasisDescriptor BasisDescriptor::from_json(const nlohmann::json& j) {
  BasisDescriptor b;
  const std::string kind = j.value("kind", "polynomial");
  if (kind == "polynomial")
    b.kind = Kind::polynomial;
  else if (kind == "tanh_network")
    b.kind = Kind::tanh_network;
  else
    throw std::invalid_argument("unknown basis kind '" + kind + "'");
  b.degree = j.value("degree", 3);
  b.neurons = j.value("neurons", 10);
  b.n_in = j.value("n_in", 1);
  b.n_out = j.value("n_out", b.n_in);
  if (j.contains("scales")) b.scales = to_vec(j.at("scales").get<std::vector<double>>());
  if (b.degree < 1 || b.neurons < 1 || b.n_in < 1 || b.n_out < 1)
    throw std::invalid_argument("basis: degree, neurons and dimensions must be >= 1");
  if (b.scales.size() && b.scales.size() != b.n_in) throw std::invalid_argument("basis: scales size != n_in");
  return b;
}

MimoNonlinearity MimoNonlinearity::zero(const BasisDescriptor& b) {
  MimoNonlinearity nl;
  nl.basis = b;
  nl.W = Mat::Zero(b.n_features(), b.n_out);
  if (b.kind == BasisDescriptor::Kind::tanh_network) {
    nl.V = Mat::Zero(b.neurons, b.n_in);
    nl.c = Vec::Zero(b.neurons);
  }
  return nl;
}

Mat MimoNonlinearity::features(const Mat& X) const {
  if (X.cols() != basis.n_in) throw std::invalid_argument("nonlinearity: input has wrong dimension");
  const auto L = X.rows();
  Mat Xs = X;
  for (int i = 0; i < basis.n_in; ++i) Xs.col(i) /= basis.scale(i);

  if (basis.kind == BasisDescriptor::Kind::tanh_network) {
    Mat F(L, basis.neurons + 1);
    F.col(0).setOnes();
    F.rightCols(basis.neurons) = ((Xs * V.transpose()).rowwise() + c.transpose()).array().tanh().matrix();
    return F;
  }

  const auto exps = monomial_exponents(basis.n_in, basis.degree);
  // Powers per input, reused across monomials.
  std::vector<Mat> pow(basis.n_in, Mat(L, basis.degree + 1));
  for (int i = 0; i < basis.n_in; ++i) {
    pow[i].col(0).setOnes();
    for (int d = 1; d <= basis.degree; ++d) pow[i].col(d) = pow[i].col(d - 1).cwiseProduct(Xs.col(i));
  }
  Mat F(L, static_cast<Eigen::Index>(exps.size()));
  for (std::size_t f = 0; f < exps.size(); ++f) {
    Vec col = Vec::Ones(L);
    for (int i = 0; i < basis.n_in; ++i)
      if (exps[f][i] > 0) col = col.cwiseProduct(pow[i].col(exps[f][i]));
    F.col(static_cast<Eigen::Index>(f)) = col;
  }
  return F;
}

Mat MimoNonlinearity::feature_derivative(const Mat& X, int i) const {
  if (X.cols() != basis.n_in || i < 0 || i >= basis.n_in)
    throw std::invalid_argument("nonlinearity: bad input for feature_derivative");
  const auto L = X.rows();
  const double si = basis.scale(i);
  Mat Xs = X;
  for (int l = 0; l < basis.n_in; ++l) Xs.col(l) /= basis.scale(l);

  if (basis.kind == BasisDescriptor::Kind::tanh_network) {
    const Mat T = ((Xs * V.transpose()).rowwise() + c.transpose()).array().tanh().matrix();
    Mat D = Mat::Zero(L, basis.neurons + 1);
    D.rightCols(basis.neurons) =
        ((1.0 - T.array().square()).rowwise() * (V.col(i).transpose().array() / si)).matrix();
    return D;
  }

  const auto exps = monomial_exponents(basis.n_in, basis.degree);
  std::vector<Mat> pow(basis.n_in, Mat(L, basis.degree + 1));
  for (int l = 0; l < basis.n_in; ++l) {
    pow[l].col(0).setOnes();
    for (int d = 1; d <= basis.degree; ++d) pow[l].col(d) = pow[l].col(d - 1).cwiseProduct(Xs.col(l));
  }
  Mat D = Mat::Zero(L, static_cast<Eigen::Index>(exps.size()));
  for (std::size_t f = 0; f < exps.size(); ++f) {
    const int e = exps[f][i];
    if (e == 0) continue;
    Vec col = (static_cast<double>(e) / si) * pow[i].col(e - 1);
    for (int l = 0; l < basis.n_in; ++l)
      if (l != i && exps[f][l] > 0) col = col.cwiseProduct(pow[l].col(exps[f][l]));
    D.col(static_cast<Eigen::Index>(f)) = col;
  }
  return D;
}

nlohmann::json MimoNonlinearity::to_json() const {
  nlohmann::json j{{"basis", basis.to_json()}, {"W", mat_json(W)}};
  if (basis.kind == BasisDescriptor::Kind::tanh_network) {
    j["V"] = mat_json(V);
    j["c"] = to_std(c);
  }
  return j;
}

MimoNonlinearity MimoNonlinearity::from_json(const nlohmann::json& j) {
  MimoNonlinearity nl;
  nl.basis = BasisDescriptor::from_json(j.at("basis"));
  nl.W = json_mat(j.at("W"), nl.basis.n_out);
  if (nl.W.rows() != nl.basis.n_features()) throw std::invalid_argument("nonlinearity: W has wrong row count");
  if (nl.basis.kind == BasisDescriptor::Kind::tanh_network) {
    nl.V = json_mat(j.at("V"), nl.basis.n_in);
    nl.c = to_vec(j.at("c").get<std::vector<double>>());
    if (nl.V.rows() != nl.basis.neurons || nl.c.size() != nl.basis.neurons)
      throw std::invalid_argument("nonlinearity: tanh network size mismatch");
  }
  return nl;
}

}  // namespace pwh
