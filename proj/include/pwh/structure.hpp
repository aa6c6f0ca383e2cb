#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "pwh/decomposition.hpp"
#include "pwh/model.hpp"

namespace pwh {

/// Poles are shared by all branches; every branch has its own zeros. Each
/// unit of pure delay in a branch numerator is an extra zero unit that can
/// sit in front or back; delays do not count towards properness.
struct PartitionSpace {
  RootSet poles;
  std::vector<RootSet> zeros;  // per branch, gain carried here
  bool proper = true;          // #finite zeros <= #poles in every block
  int max_front_order = -1;    // pole degree caps, negative means none
  int max_back_order = -1;

  int n_br() const { return static_cast<int>(zeros.size()); }
  int n_pole_units() const { return static_cast<int>(poles.groups().size()); }
  int n_zero_units(int branch) const;

  static PartitionSpace from_decomposition(const BranchDecomposition& d,
                                           std::vector<std::string>* warnings = nullptr);
};

/// Bit set means "front". Zero bits index the branch's root groups first,
/// then its delay units.
struct PartitionMasks {
  std::uint64_t poles = 0;
  std::vector<std::uint64_t> zeros;

  auto operator<=>(const PartitionMasks&) const = default;
  std::string to_string() const;
};

enum class RootStructure { all_real, all_conjugate };

/// Closed-form scan size for n poles and n_zeros zeros per branch, all real
/// or all in conjugate pairs. Unconstrained: 2^(pole units + n_br * zero
/// units). With `proper` this evaluates the published bound
/// sum_k C(g, k)^n_br over g = zero units (see README); the exact admissible
/// count, which also enumerates the pole split, is count_admissible.
std::uint64_t count_partitions(int n_poles, int n_zeros, int n_br, RootStructure structure, bool proper);

/// Exact number of assignments enumerate_partitions yields.
std::uint64_t count_admissible(const PartitionSpace& space);

/// Visits all admissible assignments in lexicographic mask order (poles
/// most significant, then branch 0, 1, ...). Throws std::length_error when
/// count_admissible exceeds `cap`.
void enumerate_partitions(const PartitionSpace& space, const std::function<void(const PartitionMasks&)>& visit,
                          std::uint64_t cap = 5'000'000);
std::vector<PartitionMasks> enumerate_partitions(const PartitionSpace& space, std::uint64_t cap = 5'000'000);

/// Front and back blocks of one branch; the branch gain goes to the front.
std::pair<RationalTF, RationalTF> split_branch(const PartitionSpace& space, const PartitionMasks& masks,
                                               int branch);

struct PartitionCandidate {
  PartitionMasks masks;
  ParallelWHModel model;  // inputs rms-normalized through model.nl.basis.scales
  double rms_error = std::numeric_limits<double>::infinity();
  bool degenerate = false;
};

struct FitOptions {
  bool normalize_columns = true;
  double rank_tol = 1e-10;  // QR threshold relative to the largest pivot
};

/// Linear LS of the MIMO nonlinearity weights for one partition. `basis`
/// supplies kind and degree; dimensions and input scales are set here.
PartitionCandidate fit_partition(const PartitionSpace& space, const PartitionMasks& masks,
                                 const BasisDescriptor& basis, const Dataset& data,
                                 const FitOptions& opts = {});

struct ScanEntry {
  PartitionMasks masks;
  double rms_error = std::numeric_limits<double>::infinity();
};

struct ScanResult {
  std::vector<PartitionCandidate> top;  // ranked, best first
  std::vector<ScanEntry> all;           // every evaluated assignment, ranked
};

/// Evaluates every admissible assignment; ties are broken by mask order.
ScanResult scan_partitions(const PartitionSpace& space, const BasisDescriptor& basis, const Dataset& data,
                           int keep, std::uint64_t cap = 5'000'000, int workers = 0);

/// `n` distinct admissible assignments drawn uniformly (all when fewer exist).
std::vector<PartitionMasks> sample_partitions(const PartitionSpace& space, int n, std::uint64_t seed,
                                              std::uint64_t cap = 5'000'000);

void write_scan_csv(const std::string& path, const ScanResult& scan);

}  // namespace pwh
