#pragma once

#include <cstddef>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "phyprobit/engine.hpp"
#include "phyprobit/model.hpp"

namespace phyprobit {

/// Writes one row per retained record: iteration, then parameter_names().
/// Numbers use the shortest round-trip representation.
void write_chain_csv(std::ostream& out, const ChainResult& chain, const TraitData& traits);

/// A chain CSV read back: column-major parameter draws.
struct ChainTable {
  std::vector<std::string> columns;  // parameter columns, without "iteration"
  std::vector<std::size_t> iterations;
  std::vector<std::vector<double>> draws;  // draws[c][row]

  std::size_t rows() const { return iterations.size(); }
};

/// Throws InputError (naming `source`) on a malformed header, a short or
/// non-numeric row, or a file not ending in a newline.
ChainTable read_chain_csv(std::istream& in, const std::string& source);

struct ParameterDiagnostics {
  std::string name;
  double ess = 0.0;  // summed over chains
  bool degenerate = false;
  double rhat = 0.0;  // NaN when it cannot be computed
  bool flagged = false;  // rhat > threshold
};

struct RunDiagnostics {
  std::vector<ParameterDiagnostics> parameters;
  double min_ess = 0.0;
  double median_ess = 0.0;
  double max_rhat = 0.0;  // NaN when no rhat was computed
  std::size_t chains = 0;
  std::size_t draws_per_chain = 0;
};

/// ESS per parameter (summed over chains) and split-Rhat across chains.
/// Rhat needs at least two chains of equal length >= 10; otherwise NaN.
RunDiagnostics diagnose(const std::vector<ChainTable>& chains, double rhat_threshold = 1.1);
std::string diagnostics_json(const RunDiagnostics& diagnostics, double rhat_threshold = 1.1);

struct CorrelationSummary {
  std::string name;  // R[i,j], 1-based
  std::size_t row = 0, col = 0;  // 0-based, row < col
  double mean = 0.0;
  double lower = 0.0, upper = 0.0;
  bool significant = false;  // HPD interval excludes zero
};

/// Posterior mean and HPD(mass) interval of every correlation column,
/// pooled over chains.
std::vector<CorrelationSummary> summarize_correlations(const std::vector<ChainTable>& chains, double mass = 0.9);
bool hpd_excludes_zero(double lower, double upper);

void write_summary_csv(std::ostream& out, const std::vector<CorrelationSummary>& summary);
/// Heatmap-ready matrices (mean, lower, upper, significant) with unit
/// diagonal, labelled by `trait_names`.
std::string summary_json(const std::vector<CorrelationSummary>& summary, const std::vector<std::string>& trait_names,
                         double mass);

struct BenchmarkEntry {
  std::string label;
  LatentSampler sampler = LatentSampler::kBps;
  double multiplier = 0.0;  // BPS only
  LatentEfficiency efficiency;
};

/// Min/median latent ESS per hour, ratios to the first entry, and shared-bin
/// histograms of log10 ESS/hr.
std::string benchmark_json(const std::vector<BenchmarkEntry>& entries, std::size_t bins,
                           std::size_t min_samples = 100);
void write_benchmark_csv(std::ostream& out, const std::vector<BenchmarkEntry>& entries);

/// Shortest round-trip decimal form of `x`.
std::string format_number(double x);

}  // namespace phyprobit
