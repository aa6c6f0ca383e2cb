#include "pwh/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "pwh/parallel.hpp"

#ifndef PWH_VERSION
#define PWH_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;

namespace pwh {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return nlohmann::json::parse(in);
}

nlohmann::json masks_json(const PartitionMasks& m) { return {{"poles", m.poles}, {"zeros", m.zeros}}; }

PartitionMasks masks_from_json(const nlohmann::json& j) {
  PartitionMasks m;
  m.poles = j.at("poles").get<std::uint64_t>();
  m.zeros = j.at("zeros").get<std::vector<std::uint64_t>>();
  return m;
}

const char* jacobian_name(JacobianMode m) {
  switch (m) {
    case JacobianMode::finite_difference: return "finite_difference";
    case JacobianMode::analytic_weights: return "analytic_weights";
    case JacobianMode::analytic: return "analytic";
  }
  return "analytic";
}

JacobianMode jacobian_from(const std::string& s) {
  if (s == "finite_difference") return JacobianMode::finite_difference;
  if (s == "analytic_weights") return JacobianMode::analytic_weights;
  if (s == "analytic") return JacobianMode::analytic;
  throw ConfigError("unknown jacobian mode '" + s + "'");
}

nlohmann::json lm_json(const LMOptions& o) {
  return {{"max_iter", o.max_iter},     {"lambda_init", o.lambda_init}, {"lambda_up", o.lambda_up},
          {"lambda_down", o.lambda_down}, {"cost_tol", o.cost_tol},       {"step_tol", o.step_tol},
          {"jacobian", jacobian_name(o.jacobian)}};
}

LMOptions lm_from(const nlohmann::json& j) {
  LMOptions o;
  o.max_iter = j.value("max_iter", o.max_iter);
  o.lambda_init = j.value("lambda_init", o.lambda_init);
  o.lambda_up = j.value("lambda_up", o.lambda_up);
  o.lambda_down = j.value("lambda_down", o.lambda_down);
  o.cost_tol = j.value("cost_tol", o.cost_tol);
  o.step_tol = j.value("step_tol", o.step_tol);
  if (j.contains("jacobian")) o.jacobian = jacobian_from(j.at("jacobian").get<std::string>());
  return o;
}

// Periods [discard, P) of every realization.
SignalEnsemble drop_periods(const SignalEnsemble& e, int discard) {
  if (discard <= 0) return e;
  SignalEnsemble out(e.M(), e.P() - discard, e.N(), e.fs(), e.excited_bins(), e.setpoint_id());
  for (int m = 0; m < e.M(); ++m)
    for (int p = discard; p < e.P(); ++p) out.period(m, p - discard) = e.period(m, p);
  out.rescale_factors = e.rescale_factors;
  return out;
}

double ac_rms(const Vec& v) {
  if (v.size() == 0) return 0.0;
  return std::sqrt((v.array() - v.mean()).square().sum() / static_cast<double>(v.size()));
}

// Relative rms error of a model over a dataset.
double relative_error(const ParallelWHModel& model, const Dataset& d) {
  const Vec y = d.stacked_y();
  try {
    const Vec yh = simulate_dataset(model, d);
    const double e = rms(yh - y) / rms(y);
    return std::isfinite(e) ? e : std::numeric_limits<double>::infinity();
  } catch (const std::runtime_error&) {
    return std::numeric_limits<double>::infinity();
  }
}

std::string level_label(double level) {
  std::ostringstream os;
  os << "level_" << level;
  return os.str();
}

const BlaBaseline* closest_baseline(const std::vector<BlaBaseline>& b, double level) {
  const BlaBaseline* best = nullptr;
  for (const auto& x : b)
    if (!best || std::abs(x.level - level) < std::abs(best->level - level)) best = &x;
  return best;
}

MetricsRow make_row(const std::string& model, const std::string& segment, const Vec& u, const Vec& y,
                    const Vec& yh) {
  MetricsRow r;
  r.model = model;
  r.segment = segment;
  r.input_rms = rms(u);
  r.output_rms = rms(y);
  r.e = error_metrics(yh - y);
  return r;
}

// Records scored by run_validate, shared with the error-spectrum export.
struct ValidationRecord {
  std::string segment;
  double level = 0.0;
  Vec u;
  InitialState init = InitialState::steady_periodic;
};

std::vector<ValidationRecord> validation_records(const ValidationConfig& cfg) {
  std::vector<ValidationRecord> recs;
  const auto bins = cfg.bins.empty() ? bin_range(1, cfg.N / 2 - 1) : cfg.bins;
  if (cfg.kind == ValidationKind::multisine_levels) {
    for (std::size_t i = 0; i < cfg.levels.size(); ++i) {
      MultisineSpec s;
      s.N = cfg.N;
      s.fs = cfg.fs;
      s.excited_bins = bins;
      s.amplitude = cfg.levels[i];
      s.dc_offset = cfg.dc_offset;
      s.seed = cfg.seed + i;
      recs.push_back({level_label(cfg.levels[i]), cfg.levels[i], multisine_period(s, 0),
                      InitialState::steady_periodic});
    }
  } else {
    Vec u = gen_growing_envelope(cfg.N, cfg.fs, cfg.envelope_cutoff * cfg.fs, cfg.seed);
    const double r = rms(u);
    if (r > 0.0) u *= cfg.envelope_scale / r;
    u.array() += cfg.dc_offset;
    recs.push_back({"total", cfg.envelope_scale, u, InitialState::zero});
  }
  return recs;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  for (double a : {0.25, 0.5, 0.75, 1.0}) {
    SetpointConfig s;
    s.amplitude = a;
    c.setpoints.push_back(s);
  }
  return c;
}

std::vector<int> ExperimentConfig::excited_bins() const {
  return bin_range(bin_first, bin_last < 0 ? N / 2 - 1 : bin_last);
}

MultisineSpec ExperimentConfig::multisine(int r) const {
  const auto& sp = setpoints.at(static_cast<std::size_t>(r));
  MultisineSpec s;
  s.N = N;
  s.fs = fs;
  s.excited_bins = excited_bins();
  s.amplitude = sp.amplitude;
  s.dc_offset = sp.dc_offset;
  s.coloring = sp.coloring;
  s.seed = seed_input + 1000 * static_cast<std::uint64_t>(r);
  return s;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (setpoints.empty()) fail("at least one setpoint is required");
  if (N < 8) fail("N must be >= 8");
  if (!(fs > 0.0)) fail("fs must be > 0");
  const int last = bin_last < 0 ? N / 2 - 1 : bin_last;
  if (bin_first < 1 || last < bin_first || 2 * last >= N) fail("excited bins must lie in [1, N/2-1]");
  if (M < 2) fail("M must be >= 2 (the BLA variance needs two realizations)");
  if (P < 1) fail("P must be >= 1");
  if (discard_periods < 0 || discard_periods >= P) fail("discard_periods must be in [0, P)");
  if (n_c < 1 || n_d < 0) fail("orders need n_c >= 1 and n_d >= 0");
  if (n_br < 0) fail("n_br must be >= 0");
  if (top_k < 1 || refine_top < 1) fail("top_k and refine_top must be >= 1");
  if (eval_realizations < 1) fail("eval_realizations must be >= 1");
  for (int r : eval_setpoints)
    if (r < 0 || r >= static_cast<int>(setpoints.size())) fail("eval_setpoints index out of range");
  if (basis.kind == BasisDescriptor::Kind::tanh_network)
    fail("the partition scan needs a linear-in-the-parameters basis; use refit_basis for tanh networks");
  if (resume_from < 0 || resume_from > 6) fail("resume_from must be in [0, 6]");
  if (data) {
    if (data->u_csv.size() != setpoints.size() || data->y_csv.size() != setpoints.size())
      fail("external data needs one u and one y CSV per setpoint");
  }
  for (const auto& s : setpoints)
    if (!(s.amplitude > 0.0)) fail("setpoint amplitude must be > 0");
  try {
    lm.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json sp = nlohmann::json::array();
  for (const auto& s : setpoints) {
    nlohmann::json e{{"id", s.id}, {"amplitude", s.amplitude}, {"dc_offset", s.dc_offset}};
    if (s.coloring) e["coloring"] = s.coloring->to_json();
    sp.push_back(e);
  }
  nlohmann::json j{
      {"system", system},
      {"setpoints", sp},
      {"N", N},
      {"fs", fs},
      {"bins", {bin_first, bin_last}},
      {"M", M},
      {"P", P},
      {"discard_periods", discard_periods},
      {"snr_db", snr_db ? nlohmann::json(*snr_db) : nlohmann::json(nullptr)},
      {"orders", {{"n_c", n_c}, {"n_d", n_d}}},
      {"bla",
       {{"max_iter", bla.max_iter},
        {"tol", bla.tol},
        {"polish_iter", bla.polish_iter},
        {"weighting", bla.weighting == BlaWeighting::total ? "total" : "noise"},
        {"stabilize", bla.stabilize}}},
      {"decomposition",
       {{"n_br", n_br}, {"threshold", rank.threshold}, {"noise_edge_scaling", rank.noise_edge_scaling}, {"align", align}}},
      {"basis", basis.to_json()},
      {"partition",
       {{"proper", proper},
        {"max_front_order", max_front_order},
        {"max_back_order", max_back_order},
        {"cap", partition_cap},
        {"eval_setpoints", eval_setpoints},
        {"eval_realizations", eval_realizations}}},
      {"top_k", top_k},
      {"refine_top", refine_top},
      {"refit_basis", refit_basis ? refit_basis->to_json() : nlohmann::json(nullptr)},
      {"lm", lm_json(lm)},
      {"seeds",
       {{"input", seed_input},
        {"noise", seed_noise},
        {"validation", seed_validation},
        {"refit", seed_refit},
        {"init_study", seed_init_study}}},
      {"validation",
       {{"levels", validation.levels},
        {"growing_envelope_N", validation.growing_envelope_N},
        {"growing_envelope_cutoff", validation.growing_envelope_cutoff},
        {"growing_envelope_scale", validation.growing_envelope_scale}}},
      {"assumption_samples", assumption_samples},
      {"output_dir", output_dir},
  };
  if (data) j["data"] = {{"u", data->u_csv}, {"y", data->y_csv}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  try {
    ExperimentConfig c = defaults();
    c.system = j.value("system", c.system);
    if (j.contains("data") && !j.at("data").is_null()) {
      ExternalData d;
      d.u_csv = j.at("data").at("u").get<std::vector<std::string>>();
      d.y_csv = j.at("data").at("y").get<std::vector<std::string>>();
      c.data = d;
    }
    if (j.contains("setpoints")) {
      c.setpoints.clear();
      for (const auto& e : j.at("setpoints")) {
        SetpointConfig s;
        s.id = e.value("id", "");
        s.amplitude = e.value("amplitude", 1.0);
        s.dc_offset = e.value("dc_offset", 0.0);
        if (e.contains("coloring") && !e.at("coloring").is_null()) s.coloring = RationalTF::from_json(e.at("coloring"));
        c.setpoints.push_back(s);
      }
    }
    c.N = j.value("N", c.N);
    c.fs = j.value("fs", c.fs);
    if (j.contains("bins")) {
      const auto b = j.at("bins").get<std::vector<int>>();
      if (b.size() != 2) throw ConfigError("bins must be [first, last]");
      c.bin_first = b[0];
      c.bin_last = b[1];
    }
    c.M = j.value("M", c.M);
    c.P = j.value("P", c.P);
    c.discard_periods = j.value("discard_periods", c.discard_periods);
    if (j.contains("snr_db") && !j.at("snr_db").is_null()) c.snr_db = j.at("snr_db").get<double>();
    if (j.contains("orders")) {
      c.n_c = j.at("orders").value("n_c", c.n_c);
      c.n_d = j.at("orders").value("n_d", c.n_d);
    }
    if (j.contains("bla")) {
      const auto& b = j.at("bla");
      c.bla.max_iter = b.value("max_iter", c.bla.max_iter);
      c.bla.tol = b.value("tol", c.bla.tol);
      c.bla.polish_iter = b.value("polish_iter", c.bla.polish_iter);
      const std::string w = b.value("weighting", "total");
      if (w != "total" && w != "noise") throw ConfigError("bla.weighting must be 'total' or 'noise'");
      c.bla.weighting = w == "total" ? BlaWeighting::total : BlaWeighting::noise;
      c.bla.stabilize = b.value("stabilize", c.bla.stabilize);
    }
    if (j.contains("decomposition")) {
      const auto& d = j.at("decomposition");
      c.n_br = d.value("n_br", c.n_br);
      c.rank.threshold = d.value("threshold", c.rank.threshold);
      c.rank.noise_edge_scaling = d.value("noise_edge_scaling", c.rank.noise_edge_scaling);
      c.align = d.value("align", c.align);
    }
    if (j.contains("basis")) c.basis = BasisDescriptor::from_json(j.at("basis"));
    if (j.contains("partition")) {
      const auto& p = j.at("partition");
      c.proper = p.value("proper", c.proper);
      c.max_front_order = p.value("max_front_order", c.max_front_order);
      c.max_back_order = p.value("max_back_order", c.max_back_order);
      c.partition_cap = p.value("cap", c.partition_cap);
      c.eval_setpoints = p.value("eval_setpoints", c.eval_setpoints);
      c.eval_realizations = p.value("eval_realizations", c.eval_realizations);
    }
    c.top_k = j.value("top_k", c.top_k);
    c.refine_top = j.value("refine_top", c.refine_top);
    if (j.contains("refit_basis") && !j.at("refit_basis").is_null())
      c.refit_basis = BasisDescriptor::from_json(j.at("refit_basis"));
    if (j.contains("lm")) c.lm = lm_from(j.at("lm"));
    if (j.contains("seeds")) {
      const auto& s = j.at("seeds");
      c.seed_input = s.value("input", c.seed_input);
      c.seed_noise = s.value("noise", c.seed_noise);
      c.seed_validation = s.value("validation", c.seed_validation);
      c.seed_refit = s.value("refit", c.seed_refit);
      c.seed_init_study = s.value("init_study", c.seed_init_study);
    }
    if (j.contains("validation")) {
      const auto& v = j.at("validation");
      c.validation.levels = v.value("levels", c.validation.levels);
      c.validation.growing_envelope_N = v.value("growing_envelope_N", c.validation.growing_envelope_N);
      c.validation.growing_envelope_cutoff = v.value("growing_envelope_cutoff", c.validation.growing_envelope_cutoff);
      c.validation.growing_envelope_scale = v.value("growing_envelope_scale", c.validation.growing_envelope_scale);
    }
    c.assumption_samples = j.value("assumption_samples", c.assumption_samples);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return from_json(j);
}

void check_persistence(const ExperimentConfig& cfg, std::vector<std::string>* warnings) {
  cfg.validate();
  const int R = static_cast<int>(cfg.setpoints.size());
  const int bins = static_cast<int>(cfg.excited_bins().size());
  // Enough excited lines to identify the BLA dynamics.
  if (2 * bins < cfg.n_c + cfg.n_d + 1)
    throw ConfigError("persistence: " + std::to_string(bins) + " excited bins cannot identify orders n_c = " +
                      std::to_string(cfg.n_c) + ", n_d = " + std::to_string(cfg.n_d));
  // The joint fit has R (n_d + 1) + n_c real unknowns.
  if (R * (cfg.n_d + 1) + cfg.n_c > 2 * bins)
    throw ConfigError("persistence: R (n_d + 1) + n_c = " + std::to_string(R * (cfg.n_d + 1) + cfg.n_c) +
                      " unknowns exceed 2 x " + std::to_string(bins) + " excited bins");
  if (warnings) {
    if (cfg.M < 4) warnings->push_back("persistence: M = " + std::to_string(cfg.M) + " < 4 realizations per setpoint");
    if (R < 2 && cfg.n_br != 1)
      warnings->push_back("persistence: a single setpoint cannot reveal more than one branch");
    if (cfg.n_br > R)
      warnings->push_back("persistence: n_br = " + std::to_string(cfg.n_br) + " exceeds the number of setpoints");
  }
}

// ---------------------------------------------------------------------------
// Validation

SystemOracle oracle_from_system(const TrueSystem& sys) {
  return [sys](const Vec& u, InitialState init) { return simulate_signal(sys, u, init); };
}

MetricsReport run_validate(const ParallelWHModel& model, const SystemOracle& truth, const ValidationConfig& cfg,
                           const std::vector<BlaBaseline>& baselines) {
  MetricsReport rep;
  const double max_level = cfg.levels.empty() ? 1.0 : *std::max_element(cfg.levels.begin(), cfg.levels.end());
  for (const auto& rec : validation_records(cfg)) {
    const Vec y = truth(rec.u, rec.init);
    const Vec yh = simulate_record(model, rec.u, rec.init).y;
    const BlaBaseline* bla = nullptr;
    if (cfg.kind == ValidationKind::multisine_levels)
      bla = closest_baseline(baselines, rec.level);
    else
      bla = closest_baseline(baselines, 0.775 * max_level);
    const Vec yb = bla ? filter(bla->tf, rec.u, rec.init) : Vec();

    if (cfg.kind == ValidationKind::multisine_levels) {
      rep.rows.push_back(make_row("model", rec.segment, rec.u, y, yh));
      if (bla) rep.rows.push_back(make_row("bla", rec.segment, rec.u, y, yb));
      continue;
    }
    rep.rows.push_back(make_row("model", "total", rec.u, y, yh));
    if (bla) rep.rows.push_back(make_row("bla", "total", rec.u, y, yb));
    const Eigen::Index n = rec.u.size();
    for (int q = 0; q < 4; ++q) {
      const Eigen::Index lo = n * q / 4, len = n * (q + 1) / 4 - lo;
      const std::string seg = "quarter_" + std::to_string(q + 1);
      rep.rows.push_back(make_row("model", seg, rec.u.segment(lo, len), y.segment(lo, len), yh.segment(lo, len)));
      if (bla)
        rep.rows.push_back(make_row("bla", seg, rec.u.segment(lo, len), y.segment(lo, len), yb.segment(lo, len)));
    }
  }
  return rep;
}

void write_error_spectra_csv(const std::string& path, const ParallelWHModel& model, const SystemOracle& truth,
                             const ValidationConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << std::setprecision(17) << "segment,bin,abs_Y,abs_E\n";
  for (const auto& rec : validation_records(cfg)) {
    const Vec y = truth(rec.u, rec.init);
    const Vec e = simulate_record(model, rec.u, rec.init).y - y;
    const auto n = static_cast<int>(y.size());
    std::vector<int> bins;
    for (int k = 0; 2 * k <= n; ++k) bins.push_back(k);
    const CVec Y = dft_bins(y, bins), E = dft_bins(e, bins);
    for (std::size_t i = 0; i < bins.size(); ++i)
      out << rec.segment << ',' << bins[i] << ',' << std::abs(Y(i)) << ',' << std::abs(E(i)) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Identification stages

namespace {

const char* kStageNames[] = {"data", "bla", "common_den", "decomposition", "partition", "refine", "validate"};

class Runner {
 public:
  explicit Runner(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.workers <= 0) cfg_.workers = default_workers();
    if (cfg_.lm.workers <= 0) cfg_.lm.workers = cfg_.workers;
    for (std::size_t r = 0; r < cfg_.setpoints.size(); ++r)
      if (cfg_.setpoints[r].id.empty()) cfg_.setpoints[r].id = "r" + std::to_string(r);
    root_ = cfg_.output_dir;
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  std::vector<std::string>& warnings() { return warnings_; }
  MetricsReport& timings() { return timings_; }

  fs::path stage_dir(int k) const { return root_ / (std::to_string(k) + "_" + kStageNames[k]); }

  // Runs or loads stage k, wrapping failures in StageError.
  template <class Fn>
  void stage(int k, Fn&& compute, const std::function<void()>& load) {
    const auto t0 = Clock::now();
    try {
      if (k < cfg_.resume_from) {
        load();
      } else {
        fs::create_directories(stage_dir(k));
        compute();
      }
    } catch (const StageError&) {
      throw;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(kStageNames[k], e.what());
    }
    timings_.timings.emplace_back(kStageNames[k], seconds_since(t0));
  }

  void prepare() {
    check_persistence(cfg_, &warnings_);
    fs::create_directories(root_);
    if (cfg_.resume_from == 0) write_json(root_ / "config.json", cfg_.to_json());
  }

  // Stage 0: excitation and response ensembles.
  void data() {
    stage(
        0,
        [&] {
          const int R = static_cast<int>(cfg_.setpoints.size());
          u_.clear();
          y_.clear();
          if (cfg_.data) {
            for (int r = 0; r < R; ++r) {
              u_.push_back(read_ensemble_csv(cfg_.data->u_csv[r], cfg_.excited_bins()));
              y_.push_back(read_ensemble_csv(cfg_.data->y_csv[r], cfg_.excited_bins()));
              u_.back().set_setpoint_id(cfg_.setpoints[r].id);
              y_.back().set_setpoint_id(cfg_.setpoints[r].id);
            }
          } else {
            system_ = load_reference_system(cfg_.system);
            system_->save((stage_dir(0) / "system.json").string());
            std::vector<MultisineSpec> specs;
            for (int r = 0; r < R; ++r) specs.push_back(cfg_.multisine(r));
            const auto report = check_assumptions(*system_, specs, cfg_.assumption_samples);
            write_json(stage_dir(0) / "assumptions.json", report.to_json());
            for (const auto& c : report.checks)
              if (!c.pass)
                warnings_.push_back("assumption " + std::to_string(c.id) + " (" + c.name + ") violated: " + c.detail);
            for (int r = 0; r < R; ++r) {
              SignalEnsemble u = gen_multisine(specs[r], cfg_.M, cfg_.P, cfg_.setpoints[r].id);
              SignalEnsemble y = simulate(*system_, u).y0;
              if (cfg_.snr_db) {
                const double sigma = ac_rms(y.data()) * std::pow(10.0, -*cfg_.snr_db / 20.0);
                y = add_output_noise(y, RationalTF(), sigma, cfg_.seed_noise + 1000 * static_cast<std::uint64_t>(r));
              }
              u_.push_back(std::move(u));
              y_.push_back(std::move(y));
            }
          }
          for (int r = 0; r < R; ++r) {
            const auto& id = cfg_.setpoints[r].id;
            write_ensemble_csv((stage_dir(0) / ("u_" + id + ".csv")).string(), u_[r]);
            write_ensemble_csv((stage_dir(0) / ("y_" + id + ".csv")).string(), y_[r]);
          }
          discard();
        },
        [&] {
          u_.clear();
          y_.clear();
          for (const auto& sp : cfg_.setpoints) {
            u_.push_back(read_ensemble_csv((stage_dir(0) / ("u_" + sp.id + ".csv")).string(), cfg_.excited_bins()));
            y_.push_back(read_ensemble_csv((stage_dir(0) / ("y_" + sp.id + ".csv")).string(), cfg_.excited_bins()));
          }
          if (fs::exists(stage_dir(0) / "system.json"))
            system_ = TrueSystem::load((stage_dir(0) / "system.json").string());
          discard();
        });
  }

  // Stage 1: nonparametric BLA per setpoint.
  void bla() {
    stage(
        1,
        [&] {
          blas_.clear();
          for (std::size_t r = 0; r < u_.size(); ++r) {
            blas_.push_back(estimate_bla(u_[r], y_[r]));
            blas_.back().write_csv((stage_dir(1) / ("bla_" + cfg_.setpoints[r].id + ".csv")).string());
          }
        },
        [&] {
          blas_.clear();
          for (const auto& sp : cfg_.setpoints)
            blas_.push_back(NonparametricBla::read_csv((stage_dir(1) / ("bla_" + sp.id + ".csv")).string()));
        });
  }

  // Stage 2: common-denominator parametric BLA.
  void common_den() {
    stage(
        2,
        [&] {
          cd_ = fit_common_den(blas_, cfg_.n_c, cfg_.n_d, cfg_.bla);
          for (const auto& w : cd_.warnings) warnings_.push_back("common_den: " + w);
          write_json(stage_dir(2) / "common_den.json", cd_.to_json());
          write_frf_csv(stage_dir(2) / "frf.csv");
        },
        [&] { cd_ = CommonDenModel::from_json(read_json(stage_dir(2) / "common_den.json")); });
  }

  // Stage 3: D matrix, rank test, branch numerators.
  void decomposition() {
    stage(
        3,
        [&] {
          const NumeratorMatrix nm = build_D(cd_);
          dec_ = decompose(nm, cd_, cfg_.n_br, cfg_.rank);
          AlignmentReport ar;
          if (cfg_.align && dec_.n_br > 1) {
            dec_ = align_branches(dec_, &ar);
            if (!ar.applied) warnings_.push_back("decomposition: branch alignment skipped: " + ar.note);
          }
          write_json(stage_dir(3) / "decomposition.json", dec_.to_json());
          write_json(stage_dir(3) / "alignment.json", {{"applied", ar.applied},
                                                       {"condition", ar.condition},
                                                       {"pole_cluster", ar.pole_cluster},
                                                       {"note", ar.note}});
          std::ofstream sv(stage_dir(3) / "singular_values.csv");
          sv << std::setprecision(17) << "index,singular_value,whitened_singular_value\n";
          for (Eigen::Index i = 0; i < dec_.singular_values.size(); ++i)
            sv << i + 1 << ',' << dec_.singular_values(i) << ','
               << (i < dec_.whitened_singular_values.size() ? dec_.whitened_singular_values(i) : 0.0) << '\n';
        },
        [&] { dec_ = BranchDecomposition::from_json(read_json(stage_dir(3) / "decomposition.json")); });
  }

  PartitionSpace space() {
    PartitionSpace s = PartitionSpace::from_decomposition(dec_, &warnings_);
    s.proper = cfg_.proper;
    s.max_front_order = cfg_.max_front_order;
    s.max_back_order = cfg_.max_back_order;
    return s;
  }

  Dataset eval_records() const {
    std::vector<int> sel = cfg_.eval_setpoints;
    if (sel.empty()) {
      int lo = 0, hi = 0;
      for (int r = 0; r < static_cast<int>(cfg_.setpoints.size()); ++r) {
        if (cfg_.setpoints[r].amplitude < cfg_.setpoints[lo].amplitude) lo = r;
        if (cfg_.setpoints[r].amplitude > cfg_.setpoints[hi].amplitude) hi = r;
      }
      sel = {lo};
      if (hi != lo) sel.push_back(hi);
    }
    return periodic_records(u_, y_, sel, cfg_.eval_realizations);
  }

  Dataset estimation_records() const {
    std::vector<int> all(cfg_.setpoints.size());
    for (std::size_t r = 0; r < all.size(); ++r) all[r] = static_cast<int>(r);
    return periodic_records(u_, y_, all);
  }

  // Stage 4: partition scan.
  void partition() {
    stage(
        4,
        [&] {
          const PartitionSpace s = space();
          admissible_ = count_admissible(s);
          if (admissible_ > cfg_.partition_cap)
            throw std::length_error(std::to_string(admissible_) + " admissible partitions exceed the cap of " +
                                    std::to_string(cfg_.partition_cap) +
                                    "; enable properness or set max_front_order / max_back_order");
          const ScanResult scan = scan_partitions(s, cfg_.basis, eval_records(), cfg_.top_k, cfg_.partition_cap,
                                                  cfg_.workers);
          write_scan_csv((stage_dir(4) / "scan.csv").string(), scan);
          candidates_ = scan.top;
          nlohmann::json cj = nlohmann::json::array();
          for (const auto& c : candidates_)
            cj.push_back({{"masks", masks_json(c.masks)},
                          {"rms_error", c.rms_error},
                          {"degenerate", c.degenerate},
                          {"model", c.model.to_json()}});
          write_json(stage_dir(4) / "candidates.json", {{"admissible", admissible_}, {"candidates", cj}});
        },
        [&] {
          const auto j = read_json(stage_dir(4) / "candidates.json");
          admissible_ = j.at("admissible").get<std::uint64_t>();
          candidates_.clear();
          for (const auto& c : j.at("candidates")) {
            PartitionCandidate pc;
            pc.masks = masks_from_json(c.at("masks"));
            pc.rms_error = c.at("rms_error").get<double>();
            pc.degenerate = c.at("degenerate").get<bool>();
            pc.model = ParallelWHModel::from_json(c.at("model"));
            candidates_.push_back(std::move(pc));
          }
        });
  }

  // Refit (optional) and LM on the estimation records.
  OptimizeResult refine_one(const ParallelWHModel& start, const Dataset& est, std::vector<std::string>* warnings) {
    ParallelWHModel m = start;
    if (cfg_.refit_basis) m = refit_nonlinearity(m, est, *cfg_.refit_basis, cfg_.seed_refit, warnings, cfg_.lm);
    return optimize(m, est, cfg_.lm);
  }

  // Stage 5: LM refinement of the top candidates.
  void refine() {
    stage(
        5,
        [&] {
          if (candidates_.empty()) throw std::runtime_error("no partition candidates to refine");
          const Dataset est = estimation_records();
          const auto L = static_cast<double>(est.samples());
          const int n = std::min<int>(cfg_.refine_top, static_cast<int>(candidates_.size()));
          refined_.clear();
          double best = std::numeric_limits<double>::infinity();
          std::ofstream summary(stage_dir(5) / "summary.csv");
          summary << std::setprecision(17) << "rank,masks,initial_rms,final_rms,iterations,stop_reason\n";
          for (int i = 0; i < n; ++i) {
            RefinedCandidate rc;
            rc.masks = candidates_[i].masks;
            rc.initial_rms = candidates_[i].rms_error;
            try {
              std::vector<std::string> w;
              const OptimizeResult res = refine_one(candidates_[i].model, est, &w);
              for (const auto& s : w) warnings_.push_back("refine candidate " + std::to_string(i + 1) + ": " + s);
              rc.final_rms = std::sqrt(res.lm.cost / L);
              rc.iterations = static_cast<int>(res.lm.trace.size());
              rc.stop_reason = res.lm.stop_reason;
              write_trace_csv((stage_dir(5) / ("trace_" + std::to_string(i + 1) + ".csv")).string(), res.lm.trace);
              res.model.save((stage_dir(5) / ("refined_" + std::to_string(i + 1) + ".json")).string());
              if (rc.final_rms < best) {
                best = rc.final_rms;
                model_ = res.model;
                selected_ = i;
              }
            } catch (const std::runtime_error& e) {
              rc.final_rms = std::numeric_limits<double>::infinity();
              rc.stop_reason = std::string("failed: ") + e.what();
              warnings_.push_back("refine candidate " + std::to_string(i + 1) + " failed: " + e.what());
            }
            summary << i + 1 << ',' << rc.masks.to_string() << ',' << rc.initial_rms << ',' << rc.final_rms << ','
                    << rc.iterations << ',' << rc.stop_reason << '\n';
            refined_.push_back(rc);
          }
          if (selected_ < 0) throw std::runtime_error("every candidate failed to refine");
          model_.save((stage_dir(5) / "model.json").string());
          write_json(stage_dir(5) / "selected.json", {{"rank", selected_ + 1}, {"masks", masks_json(refined_[selected_].masks)}});
        },
        [&] {
          model_ = ParallelWHModel::load((stage_dir(5) / "model.json").string());
          selected_ = read_json(stage_dir(5) / "selected.json").at("rank").get<int>() - 1;
        });
  }

  ValidationConfig validation_config(ValidationKind kind) const {
    ValidationConfig v;
    v.kind = kind;
    v.levels = cfg_.validation.levels;
    if (v.levels.empty())
      for (const auto& s : cfg_.setpoints) v.levels.push_back(s.amplitude);
    v.N = kind == ValidationKind::multisine_levels ? cfg_.N : cfg_.validation.growing_envelope_N;
    v.bins = cfg_.excited_bins();
    v.fs = cfg_.fs;
    v.envelope_cutoff = cfg_.validation.growing_envelope_cutoff;
    v.envelope_scale = cfg_.validation.growing_envelope_scale * *std::max_element(v.levels.begin(), v.levels.end());
    v.seed = cfg_.seed_validation;
    return v;
  }

  std::vector<BlaBaseline> baselines() const {
    std::vector<BlaBaseline> b;
    for (int r = 0; r < cd_.R(); ++r)
      b.push_back({cfg_.setpoints.at(static_cast<std::size_t>(r)).amplitude, cd_.tf(r)});
    return b;
  }

  // Stage 6: fresh-realization validation (synthetic systems only).
  void validate_stage() {
    stage(
        6,
        [&] {
          if (!system_) return;
          const SystemOracle truth = oracle_from_system(*system_);
          const auto ms = validation_config(ValidationKind::multisine_levels);
          MetricsReport rep = run_validate(model_, truth, ms, baselines());
          write_error_spectra_csv((stage_dir(6) / "error_spectra.csv").string(), model_, truth, ms);
          if (cfg_.validation.growing_envelope_N > 0) {
            const auto ge = validation_config(ValidationKind::growing_envelope);
            MetricsReport g = run_validate(model_, truth, ge, baselines());
            for (auto& row : g.rows) {
              row.segment = "envelope_" + row.segment;
              rep.rows.push_back(row);
            }
          }
          rep.write_csv((stage_dir(6) / "metrics.csv").string());
          validation_ = rep;
        },
        [] {});
  }

  void write_manifest() {
    nlohmann::json files = nlohmann::json::object();
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(root_))
      if (e.is_regular_file() && e.path().filename() != "manifest.json") paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) files[fs::relative(p, root_).generic_string()] = file_sha256(p.string());
    nlohmann::json t = nlohmann::json::object();
    for (const auto& [k, v] : timings_.timings) t[k] = v;
    write_json(root_ / "manifest.json", {{"version", PWH_VERSION},
                                         {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                                       std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                                       std::to_string(EIGEN_MINOR_VERSION)},
                                         {"seeds", cfg_.to_json().at("seeds")},
                                         {"workers", cfg_.workers},
                                         {"files", files},
                                         {"timings_s", t},
                                         {"warnings", warnings_}});
  }

  std::vector<SignalEnsemble> u_, y_;
  std::optional<TrueSystem> system_;
  std::vector<NonparametricBla> blas_;
  CommonDenModel cd_;
  BranchDecomposition dec_;
  std::uint64_t admissible_ = 0;
  std::vector<PartitionCandidate> candidates_;
  std::vector<RefinedCandidate> refined_;
  ParallelWHModel model_;
  int selected_ = -1;
  std::optional<MetricsReport> validation_;

 private:
  void discard() {
    for (auto& e : u_) e = drop_periods(e, cfg_.discard_periods);
    for (auto& e : y_) e = drop_periods(e, cfg_.discard_periods);
  }

  void write_frf_csv(const fs::path& path) const {
    std::ofstream out(path);
    out << std::setprecision(17) << "setpoint,bin,freq,re_G,im_G,re_fit,im_fit,var_total,var_noise\n";
    for (std::size_t r = 0; r < blas_.size(); ++r) {
      const auto& b = blas_[r];
      const CVec fit = cd_.tf(static_cast<int>(r)).freq_response(b.bins, b.N);
      for (std::size_t i = 0; i < b.bins.size(); ++i)
        out << cfg_.setpoints[r].id << ',' << b.bins[i] << ',' << b.bins[i] * b.fs / b.N << ',' << b.G(i).real()
            << ',' << b.G(i).imag() << ',' << fit(i).real() << ',' << fit(i).imag() << ',' << b.var_total(i) << ','
            << b.var_noise(i) << '\n';
    }
  }

  ExperimentConfig cfg_;
  fs::path root_;
  std::vector<std::string> warnings_;
  MetricsReport timings_;
};

}  // namespace

IdentifyResult run_identify(const ExperimentConfig& cfg) {
  Runner run(cfg);
  run.prepare();
  run.data();
  run.bla();
  run.common_den();
  run.decomposition();
  run.partition();
  run.refine();
  run.validate_stage();
  run.write_manifest();

  IdentifyResult res;
  res.model = run.model_;
  res.run_dir = run.cfg().output_dir;
  res.n_br = run.dec_.n_br;
  res.warnings = run.warnings();
  res.bla_model = run.cd_;
  res.decomposition = run.dec_;
  res.admissible = run.admissible_;
  res.refined = run.refined_;
  res.selected = run.selected_;
  res.validation = run.validation_;
  res.timings = run.timings();
  if (run.validation_) {
    double se = 0.0, sy = 0.0;
    for (const auto& r : run.validation_->rows) {
      if (r.model != "model" || r.segment.rfind("level_", 0) != 0) continue;
      se += r.e.rms * r.e.rms * static_cast<double>(r.e.n);
      sy += r.output_rms * r.output_rms * static_cast<double>(r.e.n);
    }
    res.validation_rel_error = sy > 0.0 ? std::sqrt(se / sy) : 0.0;
  }
  return res;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

InitStudyResult run_init_study(const ExperimentConfig& cfg_in, int n_random, int n_best) {
  if (n_random < 0 || n_best < 0) throw ConfigError("init study counts must be >= 0");
  ExperimentConfig cfg = cfg_in;
  cfg.top_k = std::max(1, n_best);
  Runner run(cfg);
  run.prepare();
  run.data();
  run.bla();
  run.common_den();
  run.decomposition();
  run.partition();

  InitStudyResult out;
  const fs::path dir = run.stage_dir(5).parent_path() / "init_study";
  try {
    fs::create_directories(dir);
    const Dataset est = run.estimation_records();
    Dataset val;
    if (run.system_) {
      const auto vc = run.validation_config(ValidationKind::multisine_levels);
      const SystemOracle truth = oracle_from_system(*run.system_);
      for (const auto& rec : validation_records(vc)) {
        val.u.push_back(rec.u);
        val.y.push_back(truth(rec.u, rec.init));
      }
    } else {
      val = est;
    }

    const PartitionSpace space = run.space();
    std::vector<PartitionCandidate> best(run.candidates_.begin(),
                                         run.candidates_.begin() + std::min<std::size_t>(n_best, run.candidates_.size()));
    std::vector<PartitionCandidate> random;
    for (const auto& m : sample_partitions(space, n_random, cfg.seed_init_study, cfg.partition_cap))
      random.push_back(fit_partition(space, m, cfg.basis, run.eval_records()));

    std::ofstream csv(dir / "errors.csv");
    csv << std::setprecision(17) << "group,index,masks,initial_rms,final_rel_error,iterations\n";
    auto optimize_all = [&](const std::vector<PartitionCandidate>& cands, const std::string& group,
                            std::vector<double>& errors) {
      for (std::size_t i = 0; i < cands.size(); ++i) {
        double err = std::numeric_limits<double>::infinity();
        int iters = 0;
        try {
          const OptimizeResult r = run.refine_one(cands[i].model, est, nullptr);
          err = relative_error(r.model, val);
          iters = static_cast<int>(r.lm.trace.size());
        } catch (const std::runtime_error&) {
        }
        errors.push_back(err);
        csv << group << ',' << i + 1 << ',' << cands[i].masks.to_string() << ',' << cands[i].rms_error << ',' << err
            << ',' << iters << '\n';
      }
    };
    optimize_all(best, "best", out.best_errors);
    optimize_all(random, "random", out.random_errors);
    out.best_median = median(out.best_errors);
    out.random_median = median(out.random_errors);
    write_json(dir / "summary.json", {{"n_best", out.best_errors.size()},
                                      {"n_random", out.random_errors.size()},
                                      {"best_median", out.best_median},
                                      {"random_median", out.random_median}});
  } catch (const std::exception& e) {
    throw StageError("init_study", e.what());
  }
  run.write_manifest();
  return out;
}

std::string file_sha256(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

}  // namespace pwh
