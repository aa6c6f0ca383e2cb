#include "pwh/structure.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <Eigen/QR>

#include "pwh/parallel.hpp"

namespace pwh {

namespace {

std::uint64_t binom(int n, int k) {
  if (k < 0 || k > n) return 0;
  std::uint64_t r = 1;
  for (int i = 1; i <= k; ++i) r = r * static_cast<std::uint64_t>(n - k + i) / static_cast<std::uint64_t>(i);
  return r;
}

std::uint64_t ipow(std::uint64_t b, int e) {
  std::uint64_t r = 1;
  while (e-- > 0) r *= b;
  return r;
}

int pole_degree(const PartitionSpace& s) { return s.poles.degree(); }

int finite_zero_degree(const RootSet& z) {
  int d = 0;
  for (const auto& g : z.groups()) d += g.degree();
  return d;
}

struct ZeroOption {
  std::uint64_t mask;
  int front_degree;
};

std::vector<ZeroOption> zero_options(const RootSet& z) {
  const int ng = static_cast<int>(z.groups().size());
  const int nu = ng + z.delay();
  if (nu > 62) throw std::length_error("partition space: too many zero units");
  std::vector<ZeroOption> out;
  out.reserve(std::size_t{1} << nu);
  for (std::uint64_t m = 0; m < (std::uint64_t{1} << nu); ++m) {
    int d = 0;
    for (int g = 0; g < ng; ++g)
      if (m >> g & 1U) d += z.groups()[g].degree();
    out.push_back({m, d});
  }
  return out;
}

int front_pole_degree(const PartitionSpace& s, std::uint64_t mask) {
  int d = 0;
  for (std::size_t g = 0; g < s.poles.groups().size(); ++g)
    if (mask >> g & 1U) d += s.poles.groups()[g].degree();
  return d;
}

bool pole_split_ok(const PartitionSpace& s, int pf) {
  const int P = pole_degree(s);
  if (s.max_front_order >= 0 && pf > s.max_front_order) return false;
  if (s.max_back_order >= 0 && P - pf > s.max_back_order) return false;
  return true;
}

bool zero_split_ok(const PartitionSpace& s, int branch, int pf, int zf) {
  if (!s.proper) return true;
  const int P = pole_degree(s), Z = finite_zero_degree(s.zeros[branch]);
  return zf <= pf && Z - zf <= P - pf;
}

RootSet select(const RootSet& rs, std::uint64_t mask, bool front, double gain, int delay) {
  std::vector<RootGroup> g;
  for (std::size_t i = 0; i < rs.groups().size(); ++i)
    if (static_cast<bool>(mask >> i & 1U) == front) g.push_back(rs.groups()[i]);
  return RootSet(std::move(g), gain, delay);
}

}  // namespace

int PartitionSpace::n_zero_units(int branch) const {
  const auto& z = zeros.at(static_cast<std::size_t>(branch));
  return static_cast<int>(z.groups().size()) + z.delay();
}

PartitionSpace PartitionSpace::from_decomposition(const BranchDecomposition& d, std::vector<std::string>* warnings) {
  PartitionSpace s;
  s.poles = factor(d.shared_den, warnings);
  for (const auto& num : d.branch_numerators) s.zeros.push_back(factor(num, warnings));
  return s;
}

std::string PartitionMasks::to_string() const {
  std::ostringstream os;
  os << poles << ":";
  for (std::size_t i = 0; i < zeros.size(); ++i) os << (i ? "|" : "") << zeros[i];
  return os.str();
}

std::uint64_t count_partitions(int n_poles, int n_zeros, int n_br, RootStructure structure, bool proper) {
  if (n_poles < 0 || n_zeros < 0 || n_br < 0) throw std::invalid_argument("count_partitions: negative count");
  int gp = n_poles, gz = n_zeros;
  if (structure == RootStructure::all_conjugate) {
    if (n_poles % 2 || n_zeros % 2)
      throw std::invalid_argument("count_partitions: conjugate structure needs even counts");
    gp /= 2;
    gz /= 2;
  }
  if (!proper) {
    if (gp + n_br * gz > 63) throw std::overflow_error("count_partitions: count exceeds 64 bits");
    return std::uint64_t{1} << (gp + n_br * gz);
  }
  std::uint64_t total = 0;
  for (int k = 0; k <= gz; ++k) total += ipow(binom(gz, k), n_br);
  return total;
}

std::uint64_t count_admissible(const PartitionSpace& s) {
  const int gp = s.n_pole_units();
  if (gp > 62) throw std::length_error("partition space: too many pole groups");
  const int P = pole_degree(s);
  // Pole masks by front degree.
  std::vector<std::uint64_t> cp(static_cast<std::size_t>(P) + 1, 0);
  for (std::uint64_t m = 0; m < (std::uint64_t{1} << gp); ++m) ++cp[static_cast<std::size_t>(front_pole_degree(s, m))];
  std::vector<std::vector<std::uint64_t>> cz;
  for (int i = 0; i < s.n_br(); ++i) {
    std::vector<std::uint64_t> c(static_cast<std::size_t>(finite_zero_degree(s.zeros[i])) + 1, 0);
    for (const auto& o : zero_options(s.zeros[i])) ++c[static_cast<std::size_t>(o.front_degree)];
    cz.push_back(std::move(c));
  }
  std::uint64_t total = 0;
  for (int pf = 0; pf <= P; ++pf) {
    if (cp[pf] == 0 || !pole_split_ok(s, pf)) continue;
    std::uint64_t prod = cp[pf];
    for (int i = 0; i < s.n_br(); ++i) {
      std::uint64_t n = 0;
      for (std::size_t zf = 0; zf < cz[i].size(); ++zf)
        if (zero_split_ok(s, i, pf, static_cast<int>(zf))) n += cz[i][zf];
      prod *= n;
    }
    total += prod;
  }
  return total;
}

void enumerate_partitions(const PartitionSpace& s, const std::function<void(const PartitionMasks&)>& visit,
                          std::uint64_t cap) {
  const std::uint64_t n = count_admissible(s);
  if (n > cap)
    throw std::length_error("partition scan of " + std::to_string(n) + " assignments exceeds the cap of " +
                            std::to_string(cap) + "; enable properness or limit block orders");
  std::vector<std::vector<ZeroOption>> opts;
  for (int i = 0; i < s.n_br(); ++i) opts.push_back(zero_options(s.zeros[i]));
  const int nb = s.n_br();
  PartitionMasks cur;
  cur.zeros.assign(static_cast<std::size_t>(nb), 0);
  std::vector<std::vector<std::uint64_t>> allowed(static_cast<std::size_t>(nb));
  for (std::uint64_t pm = 0; pm < (std::uint64_t{1} << s.n_pole_units()); ++pm) {
    const int pf = front_pole_degree(s, pm);
    if (!pole_split_ok(s, pf)) continue;
    bool empty = false;
    for (int i = 0; i < nb; ++i) {
      allowed[i].clear();
      for (const auto& o : opts[i])
        if (zero_split_ok(s, i, pf, o.front_degree)) allowed[i].push_back(o.mask);
      empty = empty || allowed[i].empty();
    }
    if (empty) continue;
    cur.poles = pm;
    // Odometer over the branches, last branch fastest.
    std::vector<std::size_t> idx(static_cast<std::size_t>(nb), 0);
    while (true) {
      for (int i = 0; i < nb; ++i) cur.zeros[i] = allowed[i][idx[i]];
      visit(cur);
      int i = nb - 1;
      while (i >= 0 && ++idx[i] == allowed[i].size()) idx[i--] = 0;
      if (i < 0) break;
    }
  }
}

std::vector<PartitionMasks> enumerate_partitions(const PartitionSpace& s, std::uint64_t cap) {
  std::vector<PartitionMasks> out;
  out.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count_admissible(s), cap)));
  enumerate_partitions(s, [&](const PartitionMasks& m) { out.push_back(m); }, cap);
  return out;
}

std::pair<RationalTF, RationalTF> split_branch(const PartitionSpace& s, const PartitionMasks& masks, int branch) {
  const RootSet& z = s.zeros.at(static_cast<std::size_t>(branch));
  const int ng = static_cast<int>(z.groups().size());
  int d_front = 0;
  for (int k = 0; k < z.delay(); ++k)
    if (masks.zeros[branch] >> (ng + k) & 1U) ++d_front;
  const RootSet zf = select(z, masks.zeros[branch], true, z.gain(), d_front);
  const RootSet zb = select(z, masks.zeros[branch], false, 1.0, z.delay() - d_front);
  const RootSet pf = select(s.poles, masks.poles, true, 1.0, 0);
  const RootSet pb = select(s.poles, masks.poles, false, 1.0, 0);
  return {RationalTF(zf.polynomial(), pf.polynomial()), RationalTF(zb.polynomial(), pb.polynomial())};
}

PartitionCandidate fit_partition(const PartitionSpace& s, const PartitionMasks& masks, const BasisDescriptor& basis,
                                 const Dataset& data, const FitOptions& opts) {
  const int nb = s.n_br();
  PartitionCandidate c;
  c.masks = masks;
  for (int i = 0; i < nb; ++i) {
    auto [f, b] = split_branch(s, masks, i);
    c.model.fronts.push_back(std::move(f));
    c.model.backs.push_back(std::move(b));
  }
  BasisDescriptor bd = basis;
  bd.n_in = bd.n_out = nb;
  bd.scales = Vec::Zero(nb);

  std::vector<Mat> xs;
  for (std::size_t r = 0; r < data.size(); ++r) {
    Mat x(data.u[r].size(), nb);
    for (int i = 0; i < nb; ++i) x.col(i) = filter(c.model.fronts[i], data.u[r], data.init);
    bd.scales += x.colwise().squaredNorm().transpose();
    xs.push_back(std::move(x));
  }
  bd.scales = (bd.scales / static_cast<double>(data.samples())).cwiseSqrt();
  c.model.nl = MimoNonlinearity::zero(bd);
  if (!(bd.scales.minCoeff() > 0.0) || !bd.scales.allFinite()) {
    c.degenerate = true;
    return c;
  }

  // Columns: back_j applied to every feature that is free for output j.
  // The shared back denominator is applied once per feature.
  const int nf = bd.n_features();
  std::vector<std::pair<int, int>> cols;  // (feature, output)
  for (int j = 0; j < nb; ++j)
    for (int f = 0; f < nf; ++f)
      if (MimoNonlinearity::weight_free(f, j)) cols.emplace_back(f, j);
  Mat K(data.samples(), static_cast<Eigen::Index>(cols.size()));
  const RationalTF all_pole(Vec::Ones(1), c.model.backs[0].den());
  Eigen::Index off = 0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    const Mat F = c.model.nl.features(xs[r]);
    const Eigen::Index L = F.rows();
    Mat v(L, nf);
    for (int f = 0; f < nf; ++f) v.col(f) = filter(all_pole, F.col(f), data.init);
    for (std::size_t k = 0; k < cols.size(); ++k)
      K.col(static_cast<Eigen::Index>(k)).segment(off, L) =
          fir(c.model.backs[cols[k].second].num(), v.col(cols[k].first), data.init);
    off += L;
  }
  if (!K.allFinite()) {
    c.degenerate = true;
    return c;
  }
  Vec norms = Vec::Ones(K.cols());
  if (opts.normalize_columns) {
    norms = K.colwise().norm().transpose();
    if (!(norms.minCoeff() > 0.0)) {
      c.degenerate = true;
      return c;
    }
    K *= norms.cwiseInverse().asDiagonal();
  }
  const Vec y = data.stacked_y();
  Eigen::ColPivHouseholderQR<Mat> qr(K);
  qr.setThreshold(opts.rank_tol);
  if (qr.rank() < K.cols()) {
    c.degenerate = true;
    return c;
  }
  const Vec w = qr.solve(y);
  c.rms_error = rms(y - K * w);
  const Vec wu = w.cwiseQuotient(norms);
  for (std::size_t k = 0; k < cols.size(); ++k) c.model.nl.W(cols[k].first, cols[k].second) = wu(static_cast<Eigen::Index>(k));
  return c;
}

ScanResult scan_partitions(const PartitionSpace& s, const BasisDescriptor& basis, const Dataset& data, int keep,
                           std::uint64_t cap, int workers) {
  const auto all = enumerate_partitions(s, cap);
  std::vector<double> err(all.size(), std::numeric_limits<double>::infinity());
  parallel_for(
      static_cast<int>(all.size()),
      [&](int i) {
        const auto c = fit_partition(s, all[static_cast<std::size_t>(i)], basis, data);
        err[static_cast<std::size_t>(i)] = c.degenerate ? std::numeric_limits<double>::infinity() : c.rms_error;
      },
      workers);
  // Enumeration order is lexicographic, so the index breaks ties.
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err[a] < err[b]; });
  ScanResult out;
  out.all.reserve(all.size());
  for (std::size_t i : order) out.all.push_back({all[i], err[i]});
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(keep, 0)), order.size());
  for (std::size_t i = 0; i < k; ++i) out.top.push_back(fit_partition(s, all[order[i]], basis, data));
  return out;
}

std::vector<PartitionMasks> sample_partitions(const PartitionSpace& s, int n, std::uint64_t seed, std::uint64_t cap) {
  auto all = enumerate_partitions(s, cap);
  std::mt19937_64 rng(seed);
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(n, 0)), all.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(k);
  return all;
}

void write_scan_csv(const std::string& path, const ScanResult& scan) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "rank,pole_mask,zero_masks,rms_error\n";
  f.precision(17);
  for (std::size_t i = 0; i < scan.all.size(); ++i) {
    const auto& e = scan.all[i];
    f << i + 1 << "," << e.masks.poles << ",";
    for (std::size_t b = 0; b < e.masks.zeros.size(); ++b) f << (b ? "|" : "") << e.masks.zeros[b];
    f << "," << e.rms_error << "\n";
  }
}

}  // namespace pwh
