#include "pwh/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "pwh/parallel.hpp"

namespace pwh {

Eigen::Index Dataset::samples() const {
  Eigen::Index n = 0;
  for (const auto& v : y) n += v.size();
  return n;
}

Vec Dataset::stacked_y() const {
  Vec out(samples());
  Eigen::Index off = 0;
  for (const auto& v : y) {
    out.segment(off, v.size()) = v;
    off += v.size();
  }
  return out;
}

Dataset periodic_records(const std::vector<SignalEnsemble>& u, const std::vector<SignalEnsemble>& y,
                         const std::vector<int>& setpoints, int realizations) {
  if (u.size() != y.size()) throw std::invalid_argument("periodic_records: u and y setpoint counts differ");
  Dataset d;
  for (int r : setpoints) {
    const auto& ur = u.at(static_cast<std::size_t>(r));
    const auto& yr = y.at(static_cast<std::size_t>(r));
    const int M = realizations < 0 ? ur.M() : std::min(realizations, ur.M());
    for (int m = 0; m < M; ++m) {
      d.u.push_back(ur.period(m, 0));
      d.y.push_back(yr.period_mean(m));
    }
  }
  return d;
}

double rms(const Vec& v) { return v.size() ? std::sqrt(v.squaredNorm() / static_cast<double>(v.size())) : 0.0; }

void ParallelWHModel::check() const {
  const int nb = n_br();
  if (nb < 1 || static_cast<int>(backs.size()) != nb)
    throw std::invalid_argument("model: need matching, non-empty front and back lists");
  for (int i = 1; i < nb; ++i)
    if (fronts[i].den() != fronts[0].den() || backs[i].den() != backs[0].den())
      throw std::invalid_argument("model: branch denominators must be shared");
  if (nl.basis.n_in != nb || nl.basis.n_out != nb)
    throw std::invalid_argument("model: nonlinearity dimensions must equal the branch count");
  if (nl.W.rows() != nl.basis.n_features() || nl.W.cols() != nb)
    throw std::invalid_argument("model: weight matrix has the wrong shape");
}

int ParallelWHModel::weight_offset() const {
  int n = fronts[0].den_order() + backs[0].den_order();
  for (const auto& f : fronts) n += static_cast<int>(f.num().size());
  for (const auto& b : backs) n += static_cast<int>(b.num().size());
  return n;
}

int ParallelWHModel::n_params() const {
  int n = weight_offset() + nl.n_free_weights();
  if (nl.basis.kind == BasisDescriptor::Kind::tanh_network) n += static_cast<int>(nl.V.size() + nl.c.size());
  return n;
}

Vec ParallelWHModel::flatten() const {
  check();
  Vec t(n_params());
  Eigen::Index k = 0;
  auto put = [&](const Vec& v) {
    t.segment(k, v.size()) = v;
    k += v.size();
  };
  put(fronts[0].den().tail(fronts[0].den_order()));
  put(backs[0].den().tail(backs[0].den_order()));
  for (const auto& f : fronts) put(f.num());
  for (const auto& b : backs) put(b.num());
  for (Eigen::Index j = 0; j < nl.W.cols(); ++j)
    for (Eigen::Index f = 0; f < nl.W.rows(); ++f)
      if (MimoNonlinearity::weight_free(static_cast<int>(f), static_cast<int>(j))) t(k++) = nl.W(f, j);
  if (nl.basis.kind == BasisDescriptor::Kind::tanh_network) {
    for (Eigen::Index h = 0; h < nl.V.rows(); ++h)
      for (Eigen::Index i = 0; i < nl.V.cols(); ++i) t(k++) = nl.V(h, i);
    put(nl.c);
  }
  return t;
}

bool ParallelWHModel::unflatten(const Vec& theta) {
  if (theta.size() != n_params()) throw std::invalid_argument("unflatten: theta has the wrong size");
  Eigen::Index k = 0;
  auto take = [&](Eigen::Index n) {
    Vec v = theta.segment(k, n);
    k += n;
    return v;
  };
  Vec af(fronts[0].den().size()), as(backs[0].den().size());
  af(0) = 1.0;
  as(0) = 1.0;
  af.tail(af.size() - 1) = take(af.size() - 1);
  as.tail(as.size() - 1) = take(as.size() - 1);
  if (!af.allFinite() || !as.allFinite() || !is_stable_polynomial(af) || !is_stable_polynomial(as)) return false;
  std::vector<RationalTF> nf, nbk;
  for (const auto& f : fronts) nf.emplace_back(take(f.num().size()), af);
  for (const auto& b : backs) nbk.emplace_back(take(b.num().size()), as);
  MimoNonlinearity n2 = nl;
  for (Eigen::Index j = 0; j < n2.W.cols(); ++j)
    for (Eigen::Index f = 0; f < n2.W.rows(); ++f)
      n2.W(f, j) = MimoNonlinearity::weight_free(static_cast<int>(f), static_cast<int>(j)) ? theta(k++) : 0.0;
  if (n2.basis.kind == BasisDescriptor::Kind::tanh_network) {
    for (Eigen::Index h = 0; h < n2.V.rows(); ++h)
      for (Eigen::Index i = 0; i < n2.V.cols(); ++i) n2.V(h, i) = theta(k++);
    n2.c = take(n2.c.size());
  }
  fronts = std::move(nf);
  backs = std::move(nbk);
  nl = std::move(n2);
  return true;
}

nlohmann::json ParallelWHModel::to_json() const {
  nlohmann::json jf = nlohmann::json::array(), jb = nlohmann::json::array();
  for (const auto& f : fronts) jf.push_back(f.to_json());
  for (const auto& b : backs) jb.push_back(b.to_json());
  return {{"n_br", n_br()}, {"fronts", jf}, {"backs", jb}, {"nonlinearity", nl.to_json()}};
}

ParallelWHModel ParallelWHModel::from_json(const nlohmann::json& j) {
  ParallelWHModel m;
  for (const auto& f : j.at("fronts")) m.fronts.push_back(RationalTF::from_json(f));
  for (const auto& b : j.at("backs")) m.backs.push_back(RationalTF::from_json(b));
  m.nl = MimoNonlinearity::from_json(j.at("nonlinearity"));
  m.check();
  return m;
}

void ParallelWHModel::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << to_json().dump(2) << "\n";
}

ParallelWHModel ParallelWHModel::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot read model file " + path);
  return from_json(nlohmann::json::parse(f));
}

ParallelWHModel ParallelWHModel::from_true_system(const TrueSystem& sys) {
  const int nb = sys.n_br();
  if (nb < 1) throw std::invalid_argument("from_true_system: empty system");
  Vec af = Vec::Ones(1), as = Vec::Ones(1);
  for (const auto& b : sys.branches) {
    af = poly_mul(af, b.front.den());
    as = poly_mul(as, b.back.den());
  }
  ParallelWHModel m;
  for (int i = 0; i < nb; ++i) {
    Vec bf = sys.branches[i].front.num(), bs = sys.branches[i].back.num();
    for (int j = 0; j < nb; ++j) {
      if (j == i) continue;
      bf = poly_mul(bf, sys.branches[j].front.den());
      bs = poly_mul(bs, sys.branches[j].back.den());
    }
    m.fronts.emplace_back(bf, af);
    m.backs.emplace_back(bs, as);
  }
  BasisDescriptor basis;
  basis.n_in = basis.n_out = nb;
  basis.degree = 1;
  for (const auto& b : sys.branches) {
    if (b.nl.kind != ScalarNonlinearity::Kind::polynomial)
      throw std::invalid_argument("from_true_system: only polynomial nonlinearities map onto the basis");
    basis.degree = std::max(basis.degree, static_cast<int>(b.nl.coeffs.size()) - 1);
  }
  m.nl = MimoNonlinearity::zero(basis);
  const auto exps = monomial_exponents(nb, basis.degree);
  for (int i = 0; i < nb; ++i) {
    const Vec& a = sys.branches[i].nl.coeffs;
    for (Eigen::Index k = 1; k < a.size(); ++k) {
      std::vector<int> e(nb, 0);
      e[i] = static_cast<int>(k);
      for (std::size_t f = 0; f < exps.size(); ++f)
        if (exps[f] == e) m.nl.W(static_cast<Eigen::Index>(f), i) = a(k);
    }
    // Constants move to output 0 with the DC gain ratio of the back blocks.
    if (a.size() > 0 && a(0) != 0.0) {
      const double g0 = m.backs[0].eval(1.0).real(), gi = m.backs[i].eval(1.0).real();
      if (g0 == 0.0) throw std::invalid_argument("from_true_system: back block 0 has no DC gain");
      m.nl.W(0, 0) += a(0) * gi / g0;
    }
  }
  return m;
}

ModelResponse simulate_record(const ParallelWHModel& model, const Vec& u, InitialState init) {
  const int nb = model.n_br();
  ModelResponse out;
  out.x.resize(u.size(), nb);
  for (int i = 0; i < nb; ++i) out.x.col(i) = filter(model.fronts[i], u, init);
  if (!out.x.allFinite()) throw std::runtime_error("simulate_model: non-finite front output");
  out.r = model.nl.eval(out.x);
  if (!out.r.allFinite()) throw std::runtime_error("simulate_model: non-finite nonlinearity output");
  out.y = Vec::Zero(u.size());
  for (int i = 0; i < nb; ++i) out.y += filter(model.backs[i], out.r.col(i), init);
  if (!out.y.allFinite()) throw std::runtime_error("simulate_model: non-finite output");
  return out;
}

SignalEnsemble simulate_model(const ParallelWHModel& model, const SignalEnsemble& u, InitialState init) {
  SignalEnsemble y = u;
  y.rescale_factors.clear();
  if (init == InitialState::steady_periodic) {
    parallel_for(u.M(), [&](int m) { y.set_realization(m, simulate_record(model, u.period(m, 0), init).y); });
  } else {
    // Non-periodic: each realization is one continuous record.
    parallel_for(u.M(), [&](int m) {
      Vec rec(static_cast<Eigen::Index>(u.P()) * u.N());
      for (int p = 0; p < u.P(); ++p) rec.segment(static_cast<Eigen::Index>(p) * u.N(), u.N()) = u.period(m, p);
      const Vec yr = simulate_record(model, rec, init).y;
      for (int p = 0; p < u.P(); ++p) y.period(m, p) = yr.segment(static_cast<Eigen::Index>(p) * u.N(), u.N());
    });
  }
  return y;
}

Vec simulate_dataset(const ParallelWHModel& model, const Dataset& data) {
  Vec out(data.samples());
  std::vector<Eigen::Index> off(data.size() + 1, 0);
  for (std::size_t i = 0; i < data.size(); ++i) off[i + 1] = off[i] + data.u[i].size();
  for (std::size_t i = 0; i < data.size(); ++i)
    out.segment(off[i], data.u[i].size()) = simulate_record(model, data.u[i], data.init).y;
  return out;
}

}  // namespace pwh
