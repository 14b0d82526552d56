#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "phyprobit/engine.hpp"
#include "phyprobit/error.hpp"
#include "phyprobit/model.hpp"
#include "phyprobit/tree.hpp"

namespace phyprobit {

/// Bad or inconsistent configuration (unknown key, out-of-range value,
/// missing input path).
class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

enum class CovarianceModeKind { kFullTree, kDatedStar, kUltrametricStar };

struct BenchmarkConfig {
  std::vector<LatentSampler> samplers{LatentSampler::kBps, LatentSampler::kBaseline};
  double seconds = 60.0;  // wall time per sampler
  std::vector<double> travel_time_sweep;
  std::size_t target_records = 2000;
  std::size_t histogram_bins = 20;
};

/// Everything a run needs, as read from an INI-style file:
///
///   [paths]     tree, traits, output, dates
///   [traits]    binary, continuous (comma lists), negative, positive
///   [model]     covariance_mode, root_date, root_mean, root_sample_size, likelihood
///   [priors]    lkj_eta, scale_log_mean, scale_log_sd
///   [schedule]  iterations, warmup, thin, latent_weight, covariance_weight,
///               chains, workers, seed, latent_sampler, record_latent
///   [bps]       travel_time_multiplier, travel_time
///   [hmc]       target_accept, path_length, initial_step
///   [benchmark] samplers, seconds, travel_time_sweep, target_records, histogram_bins
///
/// Relative paths are resolved against the config file's directory.
struct RunConfig {
  std::string tree_path;
  std::string traits_path;
  std::string output_dir;
  std::string dates_path;

  std::vector<ColumnSpec> columns;

  CovarianceModeKind mode = CovarianceModeKind::kFullTree;
  double root_date = 0.0;
  std::vector<double> root_mean{0.0};  // one value, or one per trait
  double root_sample_size = 10.0;      // may be +infinity

  ChainSettings chain;
  std::size_t chains = 4;
  std::size_t workers = 1;

  std::optional<BenchmarkConfig> benchmark;

  /// FNV-1a 64 of the raw config text, as 16 hex digits.
  std::string hash;
};

/// Parses config text. `base_dir` resolves relative paths. Throws ConfigError
/// for syntax errors, unknown sections or keys, and invalid values. Input
/// paths are not checked here.
RunConfig parse_config(std::istream& in, const std::string& base_dir = ".");

/// Reads and parses a config file, then checks that every input path exists.
RunConfig load_config(const std::string& path);

std::string fnv1a_hex(const std::string& bytes);

/// Data read from the paths in a RunConfig.
struct LoadedData {
  std::vector<Tree> trees;  // as read, before the covariance mode is applied
  ModelInputs inputs;
  TreeCovarianceMode mode;
};

/// Loads trees, dates and traits, applies the covariance mode and fills in
/// the root prior. Throws InputError for malformed data files.
LoadedData load_data(RunConfig& config);

}  // namespace phyprobit
