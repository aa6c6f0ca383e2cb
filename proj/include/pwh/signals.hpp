#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pwh/lti.hpp"

namespace pwh {

/// Periodic records organized as realizations x periods x samples.
class SignalEnsemble {
 public:
  SignalEnsemble() = default;
  SignalEnsemble(int M, int P, int N, double fs, std::vector<int> excited_bins,
                 std::string setpoint_id);

  int M() const { return M_; }
  int P() const { return P_; }
  int N() const { return N_; }
  double fs() const { return fs_; }
  const std::vector<int>& excited_bins() const { return bins_; }
  const std::string& setpoint_id() const { return setpoint_id_; }
  void set_setpoint_id(std::string id) { setpoint_id_ = std::move(id); }

  Eigen::Map<Vec> period(int m, int p);
  Eigen::Map<const Vec> period(int m, int p) const;

  /// Average over the periods of realization m.
  Vec period_mean(int m) const;

  /// Copies one period into every period of realization m.
  void set_realization(int m, const Vec& one_period);

  const Vec& data() const { return data_; }
  Vec& data() { return data_; }

  /// Multisine rms rescale factor per realization (empty for other signals).
  std::vector<double> rescale_factors;

 private:
  int M_ = 0, P_ = 0, N_ = 0;
  double fs_ = 1.0;
  std::vector<int> bins_;
  std::string setpoint_id_;
  Vec data_;
};

/// Random-phase multisine with a flat (or colored) amplitude spectrum.
struct MultisineSpec {
  int N = 4096;
  double fs = 1.0;
  std::vector<int> excited_bins;
  double amplitude = 1.0;  // rms of the AC part
  double dc_offset = 0.0;
  std::uint64_t seed = 0;
  /// Optional spectral coloring: bin amplitudes follow |coloring(bin)|.
  std::optional<RationalTF> coloring;

  void validate() const;
};

/// Bins first..last inclusive.
std::vector<int> bin_range(int first, int last);

/// M independent phase realizations, each repeated over P periods. The
/// realized rms equals spec.amplitude exactly (rescaled after synthesis).
SignalEnsemble gen_multisine(const MultisineSpec& spec, int M, int P = 1,
                             const std::string& setpoint_id = "");

/// Single period of realization m, identical to gen_multisine's.
Vec multisine_period(const MultisineSpec& spec, int m, double* rescale = nullptr);

/// Chebyshev type I low-pass by bilinear transform with prewarping.
RationalTF chebyshev1_lowpass(int order, double ripple_db, double cutoff_hz,
                              double fs);

/// u(k) = (2k/N) [H(q) r(k)] with r white unit Gaussian and H a 6th order,
/// 0.5 dB ripple Chebyshev low-pass at `cutoff`.
Vec gen_growing_envelope(int N, double fs, double cutoff, std::uint64_t seed);

/// Adds sigma * noise_tf(q) e(k), e white unit Gaussian, independently per
/// realization and period.
SignalEnsemble add_output_noise(const SignalEnsemble& y, const RationalTF& noise_tf,
                                double sigma, std::uint64_t seed);

/// Spectra (unnormalized DFT) of one period at the given bins.
CVec dft_bins(const Vec& x, std::span<const int> bins);

/// CSV with a '#' header row carrying f_s, setpoint_id and the shape, a row
/// of column names m<i>p<j>, then one row per sample.
void write_ensemble_csv(const std::string& path, const SignalEnsemble& e);
SignalEnsemble read_ensemble_csv(const std::string& path,
                                 const std::vector<int>& excited_bins);

}  // namespace pwh
