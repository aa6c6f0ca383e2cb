#include "pwh/refine.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "pwh/parallel.hpp"

namespace pwh {

void LMOptions::validate() const {
  if (max_iter < 1) throw std::invalid_argument("LM: max_iter must be >= 1");
  if (!(lambda_init > 0.0) || !(lambda_up > 1.0) || !(lambda_down > 1.0))
    throw std::invalid_argument("LM: lambda_init > 0 and lambda_up, lambda_down > 1 required");
  if (!(cost_tol > 0.0) || !(step_tol > 0.0)) throw std::invalid_argument("LM: tolerances must be > 0");
}

LMResult levenberg_marquardt(const ResidualFn& residual, const JacobianFn& jac, const Vec& theta0,
                             const LMOptions& opts) {
  opts.validate();
  LMResult res;
  res.theta = theta0;
  auto e0 = residual(theta0);
  if (!e0 || !e0->allFinite()) throw std::runtime_error("LM: residual at the starting point is not finite");
  Vec e = *e0;
  double cost = e.squaredNorm();
  res.initial_cost = cost;
  const Eigen::Index n = theta0.size();

  Vec d;
  Mat A;
  Vec g;
  auto linearize = [&]() {
    const Mat J = jac(res.theta);
    if (!J.allFinite()) throw std::runtime_error("LM: non-finite Jacobian");
    d = J.colwise().norm().transpose();
    for (Eigen::Index k = 0; k < n; ++k)
      if (!(d(k) > 0.0)) d(k) = 1.0;
    const Mat Js = J * d.cwiseInverse().asDiagonal();
    A = Js.transpose() * Js;
    g = Js.transpose() * e;
  };
  linearize();
  double lambda = opts.lambda_init * std::max(A.diagonal().mean(), 1e-300);
  const double lambda_max = 1e20 * std::max(A.diagonal().mean(), 1e-300);
  res.stop_reason = "max_iter";

  for (int it = 1; it <= opts.max_iter; ++it) {
    Mat H = A;
    H.diagonal().array() += lambda;
    const Vec ds = -H.ldlt().solve(g);
    const Vec step = ds.cwiseQuotient(d);
    const Vec trial = res.theta + step;
    double c_trial = std::numeric_limits<double>::infinity();
    std::optional<Vec> r;
    if (step.allFinite()) {
      r = residual(trial);
      if (r && r->allFinite()) c_trial = r->squaredNorm();
    }
    const bool accepted = c_trial < cost;
    res.trace.push_back({it, c_trial, lambda, step.norm(), accepted});
    const bool tiny_step = step.norm() < opts.step_tol * (res.theta.norm() + opts.step_tol);
    if (accepted) {
      const double rel = (cost - c_trial) / cost;
      res.theta = trial;
      e = *r;
      cost = c_trial;
      lambda /= opts.lambda_down;
      if (rel < opts.cost_tol) {
        res.stop_reason = "cost_tol";
        break;
      }
      if (tiny_step) {
        res.stop_reason = "step_tol";
        break;
      }
      if (cost == 0.0) {
        res.stop_reason = "zero_cost";
        break;
      }
      linearize();
    } else {
      lambda *= opts.lambda_up;
      if (tiny_step) {
        res.stop_reason = "step_tol";
        break;
      }
      if (lambda > lambda_max) {
        res.stop_reason = "lambda_max";
        break;
      }
    }
  }
  res.cost = cost;
  return res;
}

namespace {

// Sensitivities of one record; rows of J for that record.
void analytic_record(const ParallelWHModel& m, const Vec& u, InitialState init, Eigen::Ref<Mat> J) {
  const int nb = m.n_br();
  const auto L = u.size();
  const RationalTF Pf(Vec::Ones(1), m.fronts[0].den()), Ps(Vec::Ones(1), m.backs[0].den());
  const int naf = m.fronts[0].den_order(), nas = m.backs[0].den_order();
  const Vec vu = filter(Pf, u, init);
  Mat X(L, nb), Zf(L, nb);
  for (int i = 0; i < nb; ++i) {
    X.col(i) = fir(m.fronts[i].num(), vu, init);
    Zf.col(i) = filter(Pf, X.col(i), init);
  }
  const Mat F = m.nl.features(X);
  const Mat R = F * m.nl.W;
  Mat Q(L, nb);
  Vec y = Vec::Zero(L);
  for (int j = 0; j < nb; ++j) {
    Q.col(j) = filter(Ps, R.col(j), init);
    y += fir(m.backs[j].num(), Q.col(j), init);
  }
  std::vector<Mat> Dr;  // dr / dx_i, L x nb
  for (int i = 0; i < nb; ++i) Dr.push_back(m.nl.feature_derivative(X, i) * m.nl.W);
  // y sensitivity to a perturbation G of the nonlinearity outputs.
  auto back_sum = [&](const Mat& G) {
    Vec acc = Vec::Zero(L);
    for (int j = 0; j < nb; ++j) acc += fir(m.backs[j].num(), G.col(j), init);
    return filter(Ps, acc, init);
  };

  int k = 0;
  Mat G(L, nb);
  for (int d = 1; d <= naf; ++d, ++k) {
    G.setZero();
    for (int i = 0; i < nb; ++i) {
      const Vec dx = -delay(Zf.col(i), d, init);
      for (int j = 0; j < nb; ++j) G.col(j) += Dr[i].col(j).cwiseProduct(dx);
    }
    J.col(k) = back_sum(G);
  }
  const Vec zy = filter(Ps, y, init);
  for (int d = 1; d <= nas; ++d, ++k) J.col(k) = -delay(zy, d, init);
  for (int i = 0; i < nb; ++i)
    for (Eigen::Index d = 0; d < m.fronts[i].num().size(); ++d, ++k) {
      const Vec dx = delay(vu, static_cast<int>(d), init);
      for (int j = 0; j < nb; ++j) G.col(j) = Dr[i].col(j).cwiseProduct(dx);
      J.col(k) = back_sum(G);
    }
  for (int j = 0; j < nb; ++j)
    for (Eigen::Index d = 0; d < m.backs[j].num().size(); ++d, ++k) J.col(k) = delay(Q.col(j), static_cast<int>(d), init);
  std::vector<Vec> Fp(static_cast<std::size_t>(F.cols()));
  for (int j = 0; j < nb; ++j)
    for (Eigen::Index f = 0; f < F.cols(); ++f) {
      if (!MimoNonlinearity::weight_free(static_cast<int>(f), j)) continue;
      if (Fp[f].size() == 0) Fp[f] = filter(Ps, F.col(f), init);
      J.col(k++) = fir(m.backs[j].num(), Fp[f], init);
    }
  if (m.nl.basis.kind == BasisDescriptor::Kind::tanh_network) {
    const int H = m.nl.basis.neurons;
    const Mat S = 1.0 - F.rightCols(H).array().square();  // tanh'
    auto neuron_col = [&](int h, const Vec& s) {
      for (int j = 0; j < nb; ++j) G.col(j) = m.nl.W(h + 1, j) * s;
      return back_sum(G);
    };
    for (int h = 0; h < H; ++h)
      for (int i = 0; i < nb; ++i)
        J.col(k++) = neuron_col(h, S.col(h).cwiseProduct(X.col(i) / m.nl.basis.scale(i)));
    for (int h = 0; h < H; ++h) J.col(k++) = neuron_col(h, S.col(h));
  }
}

Mat analytic_jacobian(const ParallelWHModel& model, const Dataset& data, int workers) {
  std::vector<Eigen::Index> off(data.size() + 1, 0);
  for (std::size_t r = 0; r < data.size(); ++r) off[r + 1] = off[r] + data.u[r].size();
  Mat J(off.back(), model.n_params());
  parallel_for(
      static_cast<int>(data.size()),
      [&](int r) {
        analytic_record(model, data.u[static_cast<std::size_t>(r)], data.init,
                        J.middleRows(off[static_cast<std::size_t>(r)], data.u[static_cast<std::size_t>(r)].size()));
      },
      workers);
  return J;
}

// Jacobian columns first..end of the flattened parameter vector.
Mat jacobian_block(const ParallelWHModel& model, const Dataset& data, JacobianMode mode, int workers,
                   double rel_step, double abs_step, int first) {
  if (mode == JacobianMode::analytic) {
    Mat J = analytic_jacobian(model, data, workers);
    return first == 0 ? J : Mat(J.rightCols(J.cols() - first));
  }
  const Vec theta = model.flatten();
  const int n = static_cast<int>(theta.size());
  Mat J(data.samples(), n - first);
  const int w0 = model.weight_offset();
  const int w1 = w0 + model.nl.n_free_weights();

  if (mode == JacobianMode::analytic_weights && w1 > std::max(first, w0)) {
    // Output is linear in the weights: columns are back_j(g_f(x)).
    std::vector<std::pair<int, int>> cols;  // (feature, output) in theta order
    for (int j = 0; j < model.n_br(); ++j)
      for (int f = 0; f < model.nl.W.rows(); ++f)
        if (MimoNonlinearity::weight_free(f, j)) cols.emplace_back(f, j);
    Eigen::Index off = 0;
    for (std::size_t r = 0; r < data.size(); ++r) {
      const ModelResponse resp = simulate_record(model, data.u[r], data.init);
      const Mat F = model.nl.features(resp.x);
      for (int k = std::max(first, w0); k < w1; ++k) {
        const auto [f, j] = cols[static_cast<std::size_t>(k - w0)];
        J.col(k - first).segment(off, F.rows()) = filter(model.backs[j], F.col(f), data.init);
      }
      off += F.rows();
    }
  }

  std::vector<int> fd;
  for (int k = first; k < n; ++k)
    if (mode == JacobianMode::finite_difference || k < w0 || k >= w1) fd.push_back(k);
  parallel_for(
      static_cast<int>(fd.size()),
      [&](int idx) {
        const int k = fd[static_cast<std::size_t>(idx)];
        const double h = std::max(rel_step * std::abs(theta(k)), abs_step);
        ParallelWHModel mp = model, mm = model;
        Vec tp = theta, tm = theta;
        tp(k) += h;
        tm(k) -= h;
        const bool okp = mp.unflatten(tp), okm = mm.unflatten(tm);
        const Vec y0 = (okp && okm) ? Vec() : simulate_dataset(model, data);
        if (okp && okm)
          J.col(k - first) = (simulate_dataset(mp, data) - simulate_dataset(mm, data)) / (2.0 * h);
        else if (okp)
          J.col(k - first) = (simulate_dataset(mp, data) - y0) / h;
        else if (okm)
          J.col(k - first) = (y0 - simulate_dataset(mm, data)) / h;
        else
          J.col(k - first).setZero();
      },
      workers);
  return J;
}

}  // namespace

Mat jacobian(const ParallelWHModel& model, const Dataset& data, JacobianMode mode, int workers, double rel_step,
             double abs_step) {
  return jacobian_block(model, data, mode, workers, rel_step, abs_step, 0);
}

OptimizeResult optimize(const ParallelWHModel& model, const Dataset& data, const LMOptions& opts) {
  model.check();
  const Vec y = data.stacked_y();
  ParallelWHModel work = model;
  auto residual = [&](const Vec& t) -> std::optional<Vec> {
    ParallelWHModel m = model;
    if (!m.unflatten(t)) return std::nullopt;
    try {
      return simulate_dataset(m, data) - y;
    } catch (const std::runtime_error&) {
      return std::nullopt;
    }
  };
  auto jac = [&](const Vec& t) {
    ParallelWHModel m = model;
    if (!m.unflatten(t)) throw std::logic_error("optimize: accepted point is unstable");
    return jacobian(m, data, opts.jacobian, opts.workers);
  };
  OptimizeResult out;
  out.lm = levenberg_marquardt(residual, jac, model.flatten(), opts);
  out.model = model;
  if (!out.model.unflatten(out.lm.theta)) throw std::logic_error("optimize: final point is unstable");
  return out;
}

ParallelWHModel refit_nonlinearity(const ParallelWHModel& model, const Dataset& data, const BasisDescriptor& basis,
                                   std::uint64_t seed, std::vector<std::string>* warnings, const LMOptions& opts) {
  model.check();
  const int nb = model.n_br();
  // Intermediate signals of the current model.
  Mat X(data.samples(), nb), Rt(data.samples(), nb);
  Eigen::Index off = 0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    const auto resp = simulate_record(model, data.u[r], data.init);
    X.middleRows(off, resp.x.rows()) = resp.x;
    Rt.middleRows(off, resp.r.rows()) = resp.r;
    off += resp.x.rows();
  }

  BasisDescriptor b = basis;
  b.n_in = b.n_out = nb;
  if (model.nl.basis.scales.size() == nb)
    b.scales = model.nl.basis.scales;
  else
    b.scales = (X.colwise().squaredNorm() / static_cast<double>(X.rows())).cwiseSqrt().transpose();

  ParallelWHModel out = model;
  out.nl = MimoNonlinearity::zero(b);
  if (b.kind == BasisDescriptor::Kind::tanh_network) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    for (Eigen::Index h = 0; h < out.nl.V.rows(); ++h) {
      for (Eigen::Index i = 0; i < out.nl.V.cols(); ++i) out.nl.V(h, i) = U(rng);
      out.nl.c(h) = U(rng);
    }
  }
  // Output weights by LS on the static map, per output.
  const Mat F = out.nl.features(X);
  for (int j = 0; j < nb; ++j) {
    const Eigen::Index first = j == 0 ? 0 : 1;
    const Mat Fj = F.rightCols(F.cols() - first);
    const Vec w = Fj.colPivHouseholderQr().solve(Rt.col(j));
    out.nl.W.col(j).tail(Fj.cols()) = w;
  }

  const Vec y = data.stacked_y();
  const int first = out.weight_offset();
  const Vec full = out.flatten();
  auto assemble = [&](const Vec& sub) {
    Vec t = full;
    t.tail(sub.size()) = sub;
    return t;
  };
  auto residual = [&](const Vec& sub) -> std::optional<Vec> {
    ParallelWHModel m = out;
    if (!m.unflatten(assemble(sub))) return std::nullopt;
    try {
      return simulate_dataset(m, data) - y;
    } catch (const std::runtime_error&) {
      return std::nullopt;
    }
  };
  auto jac = [&](const Vec& sub) {
    ParallelWHModel m = out;
    m.unflatten(assemble(sub));
    return jacobian_block(m, data, opts.jacobian, opts.workers, 1e-6, 1e-8, first);
  };
  const double old_cost = (simulate_dataset(model, data) - y).squaredNorm();
  LMResult lm;
  try {
    lm = levenberg_marquardt(residual, jac, full.tail(full.size() - first), opts);
  } catch (const std::runtime_error& e) {
    if (warnings) warnings->push_back(std::string("nonlinearity refit failed: ") + e.what());
    return model;
  }
  if (!(lm.cost <= old_cost)) {
    if (warnings)
      warnings->push_back("nonlinearity refit did not reduce the output error (" + std::to_string(lm.cost) +
                          " > " + std::to_string(old_cost) + "); keeping the previous nonlinearity");
    return model;
  }
  out.unflatten(assemble(lm.theta));
  return out;
}

void write_trace_csv(const std::string& path, const std::vector<LMTraceRow>& trace) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "iter,cost,lambda,step_norm,accepted\n";
  f.precision(17);
  for (const auto& r : trace)
    f << r.iter << "," << r.cost << "," << r.lambda << "," << r.step_norm << "," << (r.accepted ? 1 : 0) << "\n";
}

}  // namespace pwh
