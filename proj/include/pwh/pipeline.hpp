#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pwh/bla.hpp"
#include "pwh/decomposition.hpp"
#include "pwh/metrics.hpp"
#include "pwh/refine.hpp"
#include "pwh/structure.hpp"

namespace pwh {

/// Invalid configuration or failed persistence pre-check (CLI exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A stage aborted (CLI exit code 3).
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "': " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct SetpointConfig {
  std::string id;  // defaults to r<index>
  double amplitude = 1.0;
  double dc_offset = 0.0;
  std::optional<RationalTF> coloring;
};

/// Measured ensembles, one u/y CSV pair per setpoint.
struct ExternalData {
  std::vector<std::string> u_csv;
  std::vector<std::string> y_csv;
};

struct ValidationSpec {
  std::vector<double> levels;  // multisine rms levels; empty: the setpoint amplitudes
  int growing_envelope_N = 0;  // 0 disables the growing-envelope record
  double growing_envelope_cutoff = 0.2;  // fraction of fs
  double growing_envelope_scale = 0.8;  // input rms of the envelope record relative to the largest level
};

struct ExperimentConfig {
  std::string system = "two_branch_cubic";  // reference name or JSON path
  std::optional<ExternalData> data;         // replaces the simulator when set
  std::vector<SetpointConfig> setpoints;
  int N = 4096;
  double fs = 1.0;
  int bin_first = 1;
  int bin_last = -1;  // negative: N/2 - 1
  int M = 4;
  int P = 2;
  int discard_periods = 0;
  std::optional<double> snr_db;  // output SNR per setpoint; noiseless when empty
  int n_c = 12;
  int n_d = 6;
  CommonDenOptions bla;
  int n_br = 0;  // 0: whitened rank test
  RankOptions rank;
  bool align = true;
  BasisDescriptor basis;
  bool proper = true;
  int max_front_order = -1;
  int max_back_order = -1;
  std::uint64_t partition_cap = 5'000'000;
  std::vector<int> eval_setpoints;  // empty: lowest and highest amplitude
  int eval_realizations = 1;
  int top_k = 5;
  int refine_top = 5;
  std::optional<BasisDescriptor> refit_basis;
  LMOptions lm;
  std::uint64_t seed_input = 1;
  std::uint64_t seed_noise = 2;
  std::uint64_t seed_validation = 3;
  std::uint64_t seed_refit = 4;
  std::uint64_t seed_init_study = 5;
  ValidationSpec validation;
  int assumption_samples = 1 << 18;
  std::string output_dir = "run";
  int resume_from = 0;  // first stage to recompute; earlier ones load from output_dir
  int workers = 0;

  /// Default setpoints: amplitudes 0.25, 0.5, 0.75, 1.0.
  static ExperimentConfig defaults();
  std::vector<int> excited_bins() const;
  MultisineSpec multisine(int setpoint) const;
  /// Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults. Throws ConfigError.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
};

/// Persistence and sizing checks run before any stage. Errors throw
/// ConfigError; soft findings are appended to `warnings`.
void check_persistence(const ExperimentConfig& cfg, std::vector<std::string>* warnings = nullptr);

struct RefinedCandidate {
  PartitionMasks masks;
  double initial_rms = 0.0;  // scan error
  double final_rms = 0.0;    // rms output error on the estimation records after LM
  int iterations = 0;
  std::string stop_reason;
};

struct IdentifyResult {
  ParallelWHModel model;
  std::string run_dir;
  int n_br = 0;
  std::vector<std::string> warnings;
  CommonDenModel bla_model;
  BranchDecomposition decomposition;
  std::uint64_t admissible = 0;
  std::vector<RefinedCandidate> refined;
  int selected = -1;
  std::optional<MetricsReport> validation;  // synthetic systems only
  double validation_rel_error = 0.0;        // rms(e) / rms(y) over all levels
  MetricsReport timings;
};

/// Stages: 0 data, 1 bla, 2 common_den, 3 decomposition, 4 partition,
/// 5 refine, 6 validate. Every stage writes its artifacts to
/// <output_dir>/<k>_<name>; a manifest.json records seeds and file hashes.
IdentifyResult run_identify(const ExperimentConfig& cfg);

/// Output of the system under test for one record.
using SystemOracle = std::function<Vec(const Vec& u, InitialState init)>;
SystemOracle oracle_from_system(const TrueSystem& sys);

/// Parametric BLA measured at `level`, used as a linear baseline.
struct BlaBaseline {
  double level = 0.0;
  RationalTF tf;
};

enum class ValidationKind { multisine_levels, growing_envelope };

struct ValidationConfig {
  ValidationKind kind = ValidationKind::multisine_levels;
  std::vector<double> levels{0.25, 0.5, 0.75, 1.0};
  int N = 4096;
  std::vector<int> bins;  // empty: 1 .. N/2 - 1
  double fs = 1.0;
  double dc_offset = 0.0;
  double envelope_cutoff = 0.2;  // fraction of fs
  double envelope_scale = 1.0;   // input rms of the growing-envelope record
  std::uint64_t seed = 3;
};

/// Multisine levels: one fresh realization per level, steady state, rows
/// labelled by level. Growing envelope: one record from rest, rows for the
/// total and each quarter. Baseline rows use the BLA measured closest to the
/// level (for the envelope record: closest to 0.775 of the largest level).
MetricsReport run_validate(const ParallelWHModel& model, const SystemOracle& truth, const ValidationConfig& cfg,
                           const std::vector<BlaBaseline>& baselines = {});

/// Writes the per-bin error spectra of a validation run as tidy CSV
/// (segment, bin, |Y|, |E_model|).
void write_error_spectra_csv(const std::string& path, const ParallelWHModel& model, const SystemOracle& truth,
                             const ValidationConfig& cfg);

struct InitStudyResult {
  std::vector<double> best_errors;    // ranked candidates, in rank order
  std::vector<double> random_errors;  // random admissible partitions
  double best_median = 0.0;
  double random_median = 0.0;
};

/// Runs stages 0-4, then optimizes the n_best top-ranked and n_random random
/// admissible partitions. Errors are relative rms output errors on fresh
/// validation records (estimation records when the system is external).
InitStudyResult run_init_study(const ExperimentConfig& cfg, int n_random, int n_best);

double median(std::vector<double> v);

/// SHA-256 of a file as lowercase hex.
std::string file_sha256(const std::string& path);

}  // namespace pwh
