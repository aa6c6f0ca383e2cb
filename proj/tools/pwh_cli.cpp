// Command-line front end: identify, validate, simulate, init-study and
// count-partitions. Exit codes: 0 success, 2 config error, 3 stage failure.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "pwh/pipeline.hpp"

using namespace pwh;

namespace {

struct ConfigFlags {
  std::string config;
  std::string output;
  std::string system;
  std::optional<double> snr;
  std::optional<int> n_br;
  std::optional<int> max_order;
  std::optional<int> top_k;
  std::optional<int> max_iter;
  std::optional<int> resume_from;
  std::optional<int> workers;
  std::optional<std::uint64_t> seed;
  bool no_align = false;

  void add(CLI::App* app) {
    app->add_option("-c,--config", config, "experiment config JSON (defaults when omitted)");
    app->add_option("-o,--output", output, "run directory");
    app->add_option("--system", system, "reference system name or JSON path");
    app->add_option("--snr", snr, "output SNR in dB (noiseless when omitted)");
    app->add_option("--n-br", n_br, "branch count (0: rank test)");
    app->add_option("--max-order", max_order, "pole degree cap for front and back blocks");
    app->add_option("--top-k", top_k, "candidates kept from the partition scan");
    app->add_option("--max-iter", max_iter, "LM iteration cap");
    app->add_option("--resume-from", resume_from, "first stage to recompute (0-6)");
    app->add_option("--workers", workers, "worker threads (default: PWH_WORKERS or all cores)");
    app->add_option("--seed", seed, "input seed");
    app->add_flag("--no-align", no_align, "keep the SVD basis for the branch numerators");
  }

  ExperimentConfig build() const {
    ExperimentConfig c = config.empty() ? ExperimentConfig::defaults() : ExperimentConfig::load(config);
    if (!output.empty()) c.output_dir = output;
    if (!system.empty()) c.system = system;
    if (snr) c.snr_db = *snr;
    if (n_br) c.n_br = *n_br;
    if (max_order) c.max_front_order = c.max_back_order = *max_order;
    if (top_k) c.top_k = *top_k;
    if (max_iter) c.lm.max_iter = *max_iter;
    if (resume_from) c.resume_from = *resume_from;
    if (workers) c.workers = *workers;
    if (seed) c.seed_input = *seed;
    if (no_align) c.align = false;
    c.validate();
    return c;
  }
};

void print_report(const MetricsReport& rep) {
  std::cout << "model,segment,input_rms,rms_e,mu_e,sigma_e\n";
  for (const auto& r : rep.rows)
    std::cout << r.model << ',' << r.segment << ',' << r.input_rms << ',' << r.e.rms << ',' << r.e.mu << ','
              << r.e.sigma << '\n';
}

int identify(const ConfigFlags& f) {
  const IdentifyResult r = run_identify(f.build());
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  nlohmann::json out{{"run_dir", r.run_dir},
                     {"n_br", r.n_br},
                     {"admissible_partitions", r.admissible},
                     {"selected_rank", r.selected + 1}};
  if (r.validation) out["validation_rel_error"] = r.validation_rel_error;
  std::cout << out.dump(2) << '\n';
  return 0;
}

int init_study(const ConfigFlags& f, int n_random, int n_best) {
  const InitStudyResult r = run_init_study(f.build(), n_random, n_best);
  std::cout << nlohmann::json{{"best_median", r.best_median},
                              {"random_median", r.random_median},
                              {"best", r.best_errors},
                              {"random", r.random_errors}}
                   .dump(2)
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallel Wiener-Hammerstein identification"};
  app.require_subcommand(1);

  ConfigFlags idf;
  auto* id_cmd = app.add_subcommand("identify", "run the identification stages and validate");
  idf.add(id_cmd);

  ConfigFlags isf;
  int n_random = 10, n_best = 10;
  auto* is_cmd = app.add_subcommand("init-study", "optimize the best-ranked and random partitions");
  isf.add(is_cmd);
  is_cmd->add_option("--n-random", n_random, "random partitions")->check(CLI::NonNegativeNumber);
  is_cmd->add_option("--n-best", n_best, "top-ranked partitions")->check(CLI::NonNegativeNumber);

  std::string v_model, v_system, v_kind = "levels", v_out, v_u, v_y, v_spectra;
  std::vector<double> v_levels;
  int v_N = 4096;
  std::uint64_t v_seed = 3;
  double v_scale = 0.8;
  auto* va_cmd = app.add_subcommand("validate", "score a model on fresh or measured records");
  va_cmd->add_option("--model", v_model, "model JSON")->required()->check(CLI::ExistingFile);
  va_cmd->add_option("--system", v_system, "reference system name or JSON path");
  va_cmd->add_option("--u-csv", v_u, "measured input ensemble CSV");
  va_cmd->add_option("--y-csv", v_y, "measured output ensemble CSV");
  va_cmd->add_option("--kind", v_kind, "levels | envelope")->check(CLI::IsMember({"levels", "envelope"}));
  va_cmd->add_option("--levels", v_levels, "multisine rms levels");
  va_cmd->add_option("-N", v_N, "samples per record");
  va_cmd->add_option("--seed", v_seed, "validation seed");
  va_cmd->add_option("--envelope-rms", v_scale, "input rms of the growing-envelope record");
  va_cmd->add_option("--out", v_out, "metrics CSV");
  va_cmd->add_option("--spectra", v_spectra, "error spectra CSV");

  std::string s_model, s_system, s_input, s_u_out, s_y_out = "y.csv";
  double s_amp = 1.0, s_offset = 0.0, s_snr = -1.0;
  int s_N = 4096, s_M = 1, s_P = 1;
  std::uint64_t s_seed = 1;
  auto* si_cmd = app.add_subcommand("simulate", "simulate a system or model on a multisine or a given ensemble");
  si_cmd->add_option("--model", s_model, "model JSON");
  si_cmd->add_option("--system", s_system, "reference system name or JSON path");
  si_cmd->add_option("--input", s_input, "input ensemble CSV (a multisine is generated when omitted)");
  si_cmd->add_option("--amplitude", s_amp, "multisine rms");
  si_cmd->add_option("--offset", s_offset, "multisine DC offset");
  si_cmd->add_option("-N", s_N, "samples per period");
  si_cmd->add_option("-M", s_M, "realizations");
  si_cmd->add_option("-P", s_P, "periods");
  si_cmd->add_option("--seed", s_seed, "multisine and noise seed");
  si_cmd->add_option("--snr", s_snr, "output SNR in dB (negative: noiseless)");
  si_cmd->add_option("--u-out", s_u_out, "write the generated input here");
  si_cmd->add_option("--y-out", s_y_out, "output ensemble CSV");

  int c_poles = 10, c_zeros = 10, c_branches = 2;
  std::string c_structure = "real", c_decomposition;
  bool c_proper = false;
  int c_max_order = -1;
  auto* cp_cmd = app.add_subcommand("count-partitions", "size of the pole-zero partition scan");
  cp_cmd->add_option("--poles", c_poles, "number of poles")->check(CLI::NonNegativeNumber);
  cp_cmd->add_option("--zeros", c_zeros, "zeros per branch")->check(CLI::NonNegativeNumber);
  cp_cmd->add_option("--branches", c_branches, "branches")->check(CLI::NonNegativeNumber);
  cp_cmd->add_option("--structure", c_structure, "real | conjugate")->check(CLI::IsMember({"real", "conjugate"}));
  cp_cmd->add_flag("--proper", c_proper, "keep proper blocks only");
  cp_cmd->add_option("--decomposition", c_decomposition, "decomposition JSON: count admissible assignments exactly")
      ->check(CLI::ExistingFile);
  cp_cmd->add_option("--max-order", c_max_order, "pole degree cap (with --decomposition)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*id_cmd) return identify(idf);
    if (*is_cmd) return init_study(isf, n_random, n_best);

    if (*va_cmd) {
      const ParallelWHModel model = ParallelWHModel::load(v_model);
      MetricsReport rep;
      if (!v_u.empty() || !v_y.empty()) {
        if (v_u.empty() || v_y.empty()) throw ConfigError("validate: --u-csv and --y-csv go together");
        const SignalEnsemble u = read_ensemble_csv(v_u, {}), y = read_ensemble_csv(v_y, {});
        if (u.M() != y.M() || u.N() != y.N()) throw ConfigError("validate: u and y ensembles differ in shape");
        for (int m = 0; m < u.M(); ++m) {
          MetricsRow row;
          const Vec um = u.period(m, 0), ym = y.period_mean(m);
          row.model = "model";
          row.segment = "realization_" + std::to_string(m);
          row.input_rms = rms(um);
          row.output_rms = rms(ym);
          row.e = error_metrics(simulate_record(model, um).y - ym);
          rep.rows.push_back(row);
        }
      } else {
        if (v_system.empty()) throw ConfigError("validate: give --system or --u-csv/--y-csv");
        ValidationConfig vc;
        vc.kind = v_kind == "levels" ? ValidationKind::multisine_levels : ValidationKind::growing_envelope;
        if (!v_levels.empty()) vc.levels = v_levels;
        vc.N = v_N;
        vc.seed = v_seed;
        vc.envelope_scale = v_scale;
        const SystemOracle truth = oracle_from_system(load_reference_system(v_system));
        rep = run_validate(model, truth, vc);
        if (!v_spectra.empty()) write_error_spectra_csv(v_spectra, model, truth, vc);
      }
      if (!v_out.empty()) rep.write_csv(v_out);
      print_report(rep);
      return 0;
    }

    if (*si_cmd) {
      if (s_model.empty() == s_system.empty()) throw ConfigError("simulate: give exactly one of --model, --system");
      SignalEnsemble u;
      if (!s_input.empty()) {
        u = read_ensemble_csv(s_input, {});
      } else {
        MultisineSpec spec;
        spec.N = s_N;
        spec.excited_bins = bin_range(1, s_N / 2 - 1);
        spec.amplitude = s_amp;
        spec.dc_offset = s_offset;
        spec.seed = s_seed;
        try {
          spec.validate();
        } catch (const std::invalid_argument& e) {
          throw ConfigError(e.what());
        }
        u = gen_multisine(spec, s_M, s_P);
      }
      SignalEnsemble y = s_model.empty() ? simulate(load_reference_system(s_system), u).y0
                                         : simulate_model(ParallelWHModel::load(s_model), u);
      if (s_snr >= 0.0) {
        const double sigma = rms(y.data().array() - y.data().mean()) * std::pow(10.0, -s_snr / 20.0);
        y = add_output_noise(y, RationalTF(), sigma, s_seed + 1);
      }
      if (!s_u_out.empty()) write_ensemble_csv(s_u_out, u);
      write_ensemble_csv(s_y_out, y);
      std::cout << nlohmann::json{{"M", y.M()}, {"P", y.P()}, {"N", y.N()}, {"y_rms", rms(y.data())}}.dump() << '\n';
      return 0;
    }

    if (*cp_cmd) {
      nlohmann::json out;
      if (!c_decomposition.empty()) {
        std::ifstream in(c_decomposition);
        const auto dec = BranchDecomposition::from_json(nlohmann::json::parse(in));
        PartitionSpace space = PartitionSpace::from_decomposition(dec);
        space.proper = c_proper;
        space.max_front_order = space.max_back_order = c_max_order;
        out = {{"admissible", count_admissible(space)}};
      } else {
        const auto st = c_structure == "real" ? RootStructure::all_real : RootStructure::all_conjugate;
        out = {{"count", count_partitions(c_poles, c_zeros, c_branches, st, c_proper)}};
      }
      std::cout << out.dump() << '\n';
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
