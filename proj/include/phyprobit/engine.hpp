#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "phyprobit/covariance.hpp"
#include "phyprobit/hmc.hpp"
#include "phyprobit/model.hpp"
#include "phyprobit/rng.hpp"
#include "phyprobit/tree.hpp"
#include "phyprobit/tree_gauss.hpp"

namespace phyprobit {

enum class LatentSampler { kBps, kBaseline };

/// Random-scan Gibbs schedule: each iteration applies the latent kernel with
/// probability latent_weight, otherwise the covariance kernel.
struct GibbsSchedule {
  double latent_weight = 0.8;
  double covariance_weight = 0.2;
  std::size_t iterations = 10000;  // after warmup
  std::size_t warmup = 1000;
  std::size_t thin = 1;
  std::uint64_t seed = 1;

  /// Throws InputError unless the weights are non-negative, sum to one and
  /// thinning is at least one.
  void validate() const;
};

struct ChainSettings {
  GibbsSchedule schedule;
  LatentSampler latent_sampler = LatentSampler::kBps;
  /// BPS travel time = multiplier * sqrt(lambda_max(Gamma (x) Sigma)).
  double travel_time_multiplier = 0.01;
  /// Fixed travel time; overrides the multiplier when set.
  std::optional<double> travel_time;
  HmcSettings hmc;
  double lkj_eta = 1.0;
  ScalePrior scale_prior;
  RootPrior root_prior;  // mean must have one entry per trait
  bool likelihood = true;  // false: covariance kernel samples the prior
  bool record_latent = false;
  std::size_t baseline_retry_cap = 1000;
  /// Stop after this much wall time (seconds) even if iterations remain.
  std::optional<double> time_budget;
};

struct SampleRecord {
  std::size_t iteration = 0;
  Eigen::MatrixXd correlation;
  Eigen::VectorXd scales;
  std::optional<RowMatrix> latent;
};

struct ChainStats {
  std::size_t latent_updates = 0;
  std::size_t covariance_updates = 0;
  std::size_t bps_gradient_events = 0;
  std::size_t bps_boundary_events = 0;
  std::size_t hmc_accepted = 0;
  std::size_t hmc_divergences = 0;
  double hmc_step_size = 0.0;
  std::size_t baseline_proposals = 0;
  std::size_t baseline_rejections = 0;  // retry cap hit, row left unchanged
  std::size_t iterations_run = 0;       // including warmup
  double seconds = 0.0;
  double sampling_seconds = 0.0;  // time spent after warmup
};

struct ChainResult {
  std::size_t chain = 0;
  std::vector<SampleRecord> records;
  ChainStats stats;
};

/// Inputs shared read-only by every chain.
struct ModelInputs {
  std::vector<std::shared_ptr<const Tree>> trees;  // cycled round-robin per iteration
  TraitData traits;
};

/// Called for each retained record; records are also collected unless the
/// callback returns false.
using RecordSink = std::function<bool(const SampleRecord&)>;

/// One resumable chain. The chain draws from Rng(seed).split(chain); kernel
/// selection, latent moves, covariance moves and initialisation use
/// disjoint sub-streams.
class GibbsChain {
 public:
  GibbsChain(const ModelInputs& inputs, const ChainSettings& settings, std::size_t chain);
  ~GibbsChain();
  GibbsChain(GibbsChain&&) noexcept;
  GibbsChain& operator=(GibbsChain&&) noexcept;

  /// Runs up to `iterations` more iterations (fewer if the time budget runs
  /// out), appending retained records to `out`.
  void advance(std::size_t iterations, ChainResult& out, const RecordSink& sink = {});
  std::size_t iterations_done() const;
  const RowMatrix& latent() const;
  const CovarianceDecomposition& decomposition() const;

 private:
  class Impl;
  std::unique_ptr<Impl> impl_;
};

/// Runs one chain for warmup + iterations. The chain draws from Rng(seed).split(chain); kernel
/// selection, latent moves, covariance moves and initialisation use
/// disjoint sub-streams. Kernel failures are rethrown with the chain and
/// iteration in the message.
ChainResult run_chain(const ModelInputs& inputs, const ChainSettings& settings, std::size_t chain,
                      const RecordSink& sink = {});

/// Runs `chains` chains on up to `workers` threads; results in chain order.
std::vector<ChainResult> run_chains(const ModelInputs& inputs, const ChainSettings& settings, std::size_t chains,
                                    std::size_t workers);

/// Conditional of one taxon's latent row given every other taxon:
/// N(mean, variance * Sigma).
struct TipConditional {
  Eigen::VectorXd mean;
  double variance = 0.0;
};

TipConditional tip_conditional(const TreeGaussian& gauss, const Eigen::Ref<const RowMatrix>& x,
                               const Eigen::VectorXd& root_mean, std::size_t taxon);

/// Per-taxon rejection sampler: draws row `taxon` from its conditional,
/// conditioned on observed continuous cells, until the observed binary signs
/// hold, at most `retry_cap` proposals. Returns the number of proposals, or
/// 0 when the cap was hit and the row was left unchanged.
std::size_t baseline_taxon_sampler_transition(RowMatrix& x, std::size_t taxon, const TraitData& traits,
                                              const TipConditional& conditional, const Eigen::MatrixXd& sigma,
                                              Rng& rng, std::size_t retry_cap = 1000);

/// Column names used for recorded parameters: R[i,j] for i < j, then
/// delta[k] for each free scale (indices 1-based, canonical trait order).
std::vector<std::string> parameter_names(const TraitData& traits);
/// Values in the order of parameter_names.
std::vector<double> parameter_values(const SampleRecord& record, const TraitData& traits);

}  // namespace phyprobit

namespace phyprobit {

/// ESS of the free latent dimensions (everything except observed continuous
/// cells) over a fixed wall-time budget.
struct LatentEfficiency {
  std::size_t samples = 0;
  std::size_t iterations = 0;
  double seconds = 0.0;  // sampling time, warmup excluded
  double min_ess = 0.0;
  double median_ess = 0.0;
  double min_per_hour = 0.0;
  double median_per_hour = 0.0;
  std::vector<double> ess;  // per free latent dimension, taxon-major
  std::size_t degenerate = 0;
};

/// Runs chain `chain` under `settings` through its warmup, then samples for
/// `seconds` of wall time, keeping about `target_records` evenly thinned
/// latent snapshots.
LatentEfficiency measure_latent_efficiency(const ModelInputs& inputs, const ChainSettings& settings, double seconds,
                                           std::size_t target_records = 2000, std::size_t chain = 0);

/// ESS summary of recorded latent snapshots over the free dimensions.
LatentEfficiency latent_ess(const std::vector<SampleRecord>& records, const TraitData& traits, double seconds);

}  // namespace phyprobit
