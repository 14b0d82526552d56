#include "phyprobit/engine.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>

#include "phyprobit/bps.hpp"
#include "phyprobit/diagnostics.hpp"
#include "phyprobit/error.hpp"

namespace phyprobit {

void GibbsSchedule::validate() const {
  if (!(latent_weight >= 0.0) || !(covariance_weight >= 0.0))
    throw InputError("kernel weights must be non-negative");
  if (std::abs(latent_weight + covariance_weight - 1.0) > 1e-9) throw InputError("kernel weights must sum to 1");
  if (thin < 1) throw InputError("thinning interval must be at least 1");
}

TipConditional tip_conditional(const TreeGaussian& gauss, const Eigen::Ref<const RowMatrix>& x,
                               const Eigen::VectorXd& root_mean, std::size_t taxon) {
  thread_local TreeGaussian::Workspace ws;
  const RowMatrix means = gauss.tip_conditional_means(x, root_mean, ws);
  return {means.row(static_cast<Eigen::Index>(taxon)).transpose(), gauss.pre_variance()[static_cast<Eigen::Index>(taxon)]};
}

std::size_t baseline_taxon_sampler_transition(RowMatrix& x, std::size_t taxon, const TraitData& traits,
                                              const TipConditional& conditional, const Eigen::MatrixXd& sigma,
                                              Rng& rng, std::size_t retry_cap) {
  const auto p = static_cast<Eigen::Index>(traits.trait_count());
  const auto row = static_cast<Eigen::Index>(taxon);
  std::vector<Eigen::Index> free, fixed;
  for (Eigen::Index j = 0; j < p; ++j) {
    const bool observed_continuous =
        traits.kinds[static_cast<std::size_t>(j)] == TraitKind::kContinuous && !std::isnan(traits.values(row, j));
    (observed_continuous ? fixed : free).push_back(j);
  }
  if (free.empty()) return 1;
  const auto nf = static_cast<Eigen::Index>(free.size()), nc = static_cast<Eigen::Index>(fixed.size());

  Eigen::VectorXd mean(nf);
  Eigen::MatrixXd cov(nf, nf);
  for (Eigen::Index a = 0; a < nf; ++a) {
    mean[a] = conditional.mean[free[static_cast<std::size_t>(a)]];
    for (Eigen::Index b = 0; b < nf; ++b) cov(a, b) = sigma(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(b)]);
  }
  if (nc > 0) {
    Eigen::MatrixXd s_fc(nf, nc), s_cc(nc, nc);
    Eigen::VectorXd resid(nc);
    for (Eigen::Index c = 0; c < nc; ++c) {
      const Eigen::Index jc = fixed[static_cast<std::size_t>(c)];
      resid[c] = x(row, jc) - conditional.mean[jc];
      for (Eigen::Index a = 0; a < nf; ++a) s_fc(a, c) = sigma(free[static_cast<std::size_t>(a)], jc);
      for (Eigen::Index d = 0; d < nc; ++d) s_cc(c, d) = sigma(jc, fixed[static_cast<std::size_t>(d)]);
    }
    const Eigen::LLT<Eigen::MatrixXd> llt(s_cc);
    mean += s_fc * llt.solve(resid);
    cov -= s_fc * llt.solve(s_fc.transpose());
  }
  cov *= conditional.variance;
  const Eigen::LLT<Eigen::MatrixXd> chol(cov);
  if (chol.info() != Eigen::Success) throw NumericalError("per-taxon conditional covariance is not positive definite");
  const Eigen::MatrixXd l = chol.matrixL();

  Eigen::VectorXd z(nf), draw(nf);
  for (std::size_t tries = 1; tries <= retry_cap; ++tries) {
    for (Eigen::Index a = 0; a < nf; ++a) z[a] = rng.normal();
    draw = mean + l * z;
    bool ok = true;
    for (Eigen::Index a = 0; a < nf && ok; ++a) {
      const Eigen::Index j = free[static_cast<std::size_t>(a)];
      const double y = traits.values(row, j);
      if (!std::isnan(y)) ok = y > 0 ? draw[a] > 0.0 : draw[a] < 0.0;
    }
    if (ok) {
      for (Eigen::Index a = 0; a < nf; ++a) x(row, free[static_cast<std::size_t>(a)]) = draw[a];
      return tries;
    }
  }
  return 0;
}

std::vector<std::string> parameter_names(const TraitData& traits) {
  std::vector<std::string> names;
  const std::size_t p = traits.trait_count();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = i + 1; j < p; ++j)
      names.push_back("R[" + std::to_string(i + 1) + "," + std::to_string(j + 1) + "]");
  for (std::size_t k = 0; k < p; ++k)
    if (traits.kinds[k] == TraitKind::kContinuous) names.push_back("delta[" + std::to_string(k + 1) + "]");
  return names;
}

std::vector<double> parameter_values(const SampleRecord& record, const TraitData& traits) {
  std::vector<double> out;
  const auto p = static_cast<Eigen::Index>(traits.trait_count());
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = i + 1; j < p; ++j) out.push_back(record.correlation(i, j));
  for (Eigen::Index k = 0; k < p; ++k)
    if (traits.kinds[static_cast<std::size_t>(k)] == TraitKind::kContinuous) out.push_back(record.scales[k]);
  return out;
}

namespace {

// Largest eigenvalue of Gamma by power iteration on its action.
double tree_lambda_max(const std::shared_ptr<const Tree>& tree, double kappa) {
  TreePrecision op(std::make_shared<const TreeGaussian>(tree, kappa, Eigen::MatrixXd::Identity(1, 1)));
  return tune_travel_time(op, 1.0).lambda_max;
}

}  // namespace

class GibbsChain::Impl {
 public:
  Impl(const ModelInputs& inputs, const ChainSettings& settings, std::size_t index)
      : in_(inputs), s_(settings), index_(index), hmc_(settings.hmc) {
    const Rng root = Rng(settings.schedule.seed).split(index);
    select_rng_ = root.split(0);
    latent_rng_ = root.split(1);
    cov_rng_ = root.split(2);
    Rng init_rng = root.split(3);

    const TraitData& d = in_.traits;
    p_ = d.trait_count();
    free_ = d.free_scale();
    if (in_.trees.empty()) throw InputError("no tree supplied");
    if (static_cast<std::size_t>(s_.root_prior.mean.size()) != p_)
      throw InputError("root mean length does not match the trait count");
    const auto pp = static_cast<Eigen::Index>(p_);
    decomposition_ = std::make_unique<CovarianceDecomposition>(CovarianceDecomposition::identity(free_));
    theta_ = to_unconstrained(*decomposition_);
    sigma_ = decomposition_->covariance();
    lambda_sigma_ = 1.0;
    for (const auto& tree : in_.trees) {
      if (tree->tip_count() != d.taxa_count() || tree->labels() != d.taxa)
        throw InputError("tree tips do not match the trait taxa");
      auto g = std::make_shared<TreeGaussian>(tree, s_.root_prior.sample_size, Eigen::MatrixXd::Identity(pp, pp));
      targets_.push_back(build_target(d, g, s_.root_prior.mean));
      gauss_.push_back(std::move(g));
      gauss_version_.push_back(0);
      lambda_tree_.push_back(s_.travel_time ? 0.0 : tree_lambda_max(tree, s_.root_prior.sample_size));
    }
    x_ = initialize_latent(d, init_rng);
  }

  void advance(std::size_t iterations, ChainResult& out, const RecordSink& sink) {
    const GibbsSchedule& sch = s_.schedule;
    out.chain = index_;
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&]() { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
    double sampling_start = it_ >= sch.warmup ? 0.0 : -1.0;
    for (std::size_t k = 0; k < iterations; ++k, ++it_) {
      if (s_.time_budget && out.stats.seconds + elapsed() > *s_.time_budget) break;
      if (it_ == sch.warmup && sampling_start < 0.0) sampling_start = elapsed();
      try {
        step(it_, out.stats);
      } catch (const InputError& e) {
        throw InputError(context(it_) + e.what());
      } catch (const NumericalError& e) {
        throw NumericalError(context(it_) + e.what());
      }
      ++out.stats.iterations_run;
      if (it_ >= sch.warmup && (it_ - sch.warmup + 1) % sch.thin == 0) {
        SampleRecord rec;
        rec.iteration = it_ + 1;
        rec.correlation = decomposition_->correlation();
        rec.scales = decomposition_->scales();
        if (s_.record_latent) rec.latent = x_;
        if (!sink || sink(rec)) out.records.push_back(std::move(rec));
      }
    }
    const double total = elapsed();
    out.stats.seconds += total;
    if (sampling_start >= 0.0) out.stats.sampling_seconds += total - sampling_start;
    out.stats.hmc_step_size = hmc_.step_size();
    out.stats.hmc_divergences = hmc_.divergences();
  }

  std::size_t iterations_done() const { return it_; }
  const RowMatrix& latent() const { return x_; }
  const CovarianceDecomposition& decomposition() const { return *decomposition_; }

 private:
  std::string context(std::size_t it) const {
    return "chain " + std::to_string(index_) + ", iteration " + std::to_string(it + 1) + ": ";
  }

  void sync_tree(std::size_t t) {
    if (gauss_version_[t] != sigma_version_) {
      gauss_[t]->set_trait_covariance(sigma_);
      gauss_version_[t] = sigma_version_;
#ifdef PHYPROBIT_VERIFY_CACHES
      verify_products(t);
#endif
    }
  }

#ifdef PHYPROBIT_VERIFY_CACHES
  void verify_products(std::size_t t) {
    const TreeGaussian& g = *gauss_[t];
    if (g.dim() > 200) return;
    Rng rng(sigma_version_);
    Eigen::VectorXd w(static_cast<Eigen::Index>(g.dim()));
    for (auto& v : w) v = rng.normal();
    const Eigen::VectorXd fast = g.multiply(w);
    const Eigen::VectorXd dense = dense_precision(g) * w;
    if ((fast - dense).cwiseAbs().maxCoeff() > 1e-8 * std::max(1.0, dense.cwiseAbs().maxCoeff()))
      throw NumericalError("tree precision product disagrees with the dense precision after a covariance update");
  }
#endif

  double travel_time(std::size_t t) const {
    if (s_.travel_time) return *s_.travel_time;
    return s_.travel_time_multiplier * std::sqrt(lambda_tree_[t] * lambda_sigma_);
  }

  void step(std::size_t it, ChainStats& stats) {
    const std::size_t t = it % gauss_.size();
    sync_tree(t);
    const bool latent = select_rng_.uniform() < s_.schedule.latent_weight;
    if (latent) {
      ++stats.latent_updates;
      if (s_.latent_sampler == LatentSampler::kBps) {
        BpsStats bs;
        Eigen::Map<Eigen::VectorXd> flat(x_.data(), x_.size());
        flat = bps_transition(targets_[t], flat, travel_time(t), latent_rng_, &bs);
        stats.bps_gradient_events += bs.gradient_events;
        stats.bps_boundary_events += bs.boundary_events;
      } else {
        const auto taxon = static_cast<std::size_t>(latent_rng_.below(in_.traits.taxa_count()));
        const TipConditional cond = tip_conditional(*gauss_[t], x_, s_.root_prior.mean, taxon);
        const std::size_t tries = baseline_taxon_sampler_transition(x_, taxon, in_.traits, cond, sigma_, latent_rng_,
                                                                    s_.baseline_retry_cap);
        stats.baseline_proposals += tries == 0 ? s_.baseline_retry_cap : tries;
        if (tries == 0) ++stats.baseline_rejections;
      }
      return;
    }
    ++stats.covariance_updates;
    if (theta_.size() == 0) return;
    const CovarianceLikelihood lik = s_.likelihood
                                         ? CovarianceLikelihood::from_latent(*gauss_[t], x_, s_.root_prior.mean)
                                         : CovarianceLikelihood::prior_only(p_);
    const CovariancePrior prior{s_.lkj_eta, s_.scale_prior};
    const LogDensityFn f = [&](const Eigen::VectorXd& th, Eigen::VectorXd& g) {
      return cov_posterior_log_density_and_grad(th, lik, prior, free_, g);
    };
    const HmcResult r = hmc_.step(theta_, f, cov_rng_, it < s_.schedule.warmup);
    if (r.accepted) {
      ++stats.hmc_accepted;
      theta_ = r.position;
      decomposition_ = std::make_unique<CovarianceDecomposition>(to_decomposition(theta_, p_, free_));
      sigma_ = decomposition_->covariance();
      lambda_sigma_ = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(sigma_, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
      ++sigma_version_;
    }
  }

  const ModelInputs& in_;
  const ChainSettings& s_;
  std::size_t index_;
  std::size_t p_ = 0;
  std::vector<std::uint8_t> free_;
  Rng select_rng_, latent_rng_, cov_rng_;
  HmcKernel hmc_;
  std::unique_ptr<CovarianceDecomposition> decomposition_;
  Eigen::VectorXd theta_;
  Eigen::MatrixXd sigma_;
  double lambda_sigma_ = 1.0;
  std::size_t sigma_version_ = 0;
  std::vector<std::shared_ptr<TreeGaussian>> gauss_;
  std::vector<std::size_t> gauss_version_;
  std::vector<TruncatedNormalTarget> targets_;
  std::vector<double> lambda_tree_;
  RowMatrix x_;
  std::size_t it_ = 0;
};


GibbsChain::GibbsChain(const ModelInputs& inputs, const ChainSettings& settings, std::size_t chain) {
  settings.schedule.validate();
  if (!(settings.travel_time_multiplier > 0.0)) throw InputError("travel-time multiplier must be positive");
  if (settings.travel_time && !(*settings.travel_time > 0.0)) throw InputError("travel time must be positive");
  if (!(settings.lkj_eta > 0.0)) throw InputError("LKJ shape must be positive");
  impl_ = std::make_unique<Impl>(inputs, settings, chain);
}
GibbsChain::~GibbsChain() = default;
GibbsChain::GibbsChain(GibbsChain&&) noexcept = default;
GibbsChain& GibbsChain::operator=(GibbsChain&&) noexcept = default;

void GibbsChain::advance(std::size_t iterations, ChainResult& out, const RecordSink& sink) {
  impl_->advance(iterations, out, sink);
}
std::size_t GibbsChain::iterations_done() const { return impl_->iterations_done(); }
const RowMatrix& GibbsChain::latent() const { return impl_->latent(); }
const CovarianceDecomposition& GibbsChain::decomposition() const { return impl_->decomposition(); }

ChainResult run_chain(const ModelInputs& inputs, const ChainSettings& settings, std::size_t chain,
                      const RecordSink& sink) {
  GibbsChain c(inputs, settings, chain);
  ChainResult out;
  c.advance(settings.schedule.warmup + settings.schedule.iterations, out, sink);
  return out;
}

std::vector<ChainResult> run_chains(const ModelInputs& inputs, const ChainSettings& settings, std::size_t chains,
                                    std::size_t workers) {
  std::vector<ChainResult> results(chains);
  workers = std::max<std::size_t>(1, std::min(workers, chains));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&]() {
    for (std::size_t k = next++; k < chains; k = next++) {
      try {
        results[k] = run_chain(inputs, settings, k);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = chains;
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

}  // namespace phyprobit

namespace phyprobit {

LatentEfficiency latent_ess(const std::vector<SampleRecord>& records, const TraitData& traits, double seconds) {
  LatentEfficiency out;
  out.samples = records.size();
  out.seconds = seconds;
  const auto n = static_cast<Eigen::Index>(traits.taxa_count());
  const auto p = static_cast<Eigen::Index>(traits.trait_count());
  std::vector<double> series(records.size());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) {
      if (traits.kinds[static_cast<std::size_t>(j)] == TraitKind::kContinuous && !std::isnan(traits.values(i, j)))
        continue;
      for (std::size_t k = 0; k < records.size(); ++k) {
        if (!records[k].latent) throw InputError("latent ESS needs recorded latent snapshots");
        series[k] = (*records[k].latent)(i, j);
      }
      const EssResult e = ess(series);
      if (e.degenerate) ++out.degenerate;
      out.ess.push_back(e.value);
    }
  if (out.ess.empty()) return out;
  std::vector<double> sorted = out.ess;
  std::sort(sorted.begin(), sorted.end());
  out.min_ess = sorted.front();
  const std::size_t m = sorted.size();
  out.median_ess = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  if (seconds > 0.0) {
    out.min_per_hour = out.min_ess / seconds * 3600.0;
    out.median_per_hour = out.median_ess / seconds * 3600.0;
  }
  return out;
}

LatentEfficiency measure_latent_efficiency(const ModelInputs& inputs, const ChainSettings& settings, double seconds,
                                           std::size_t target_records, std::size_t chain) {
  if (!(seconds > 0.0)) throw InputError("benchmark budget must be positive");
  if (target_records < 10) throw InputError("benchmark needs at least 10 records");
  ChainSettings s = settings;
  s.record_latent = true;
  s.schedule.thin = 1;
  s.time_budget.reset();
  GibbsChain c(inputs, s, chain);
  ChainResult scratch;
  const RecordSink drop = [](const SampleRecord&) { return false; };
  c.advance(s.schedule.warmup, scratch, drop);

  // Pilot for the iteration rate, then thin to about target_records.
  using Clock = std::chrono::steady_clock;
  auto since = [](Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); };
  const double pilot_budget = std::min(1.0, 0.1 * seconds);
  std::size_t pilot = 0;
  const auto pilot_start = Clock::now();
  while (since(pilot_start) < pilot_budget) {
    c.advance(10, scratch, drop);
    pilot += 10;
  }
  const double rate = static_cast<double>(pilot) / since(pilot_start);
  const auto thin = std::max<std::size_t>(
      1, static_cast<std::size_t>(rate * seconds / static_cast<double>(target_records)));
  const std::size_t chunk = std::max<std::size_t>(1, static_cast<std::size_t>(rate * 0.05));

  ChainResult run;
  std::size_t counter = 0;
  const RecordSink keep_thinned = [&](const SampleRecord&) { return ++counter % thin == 0; };
  const auto start = Clock::now();
  std::size_t iterations = 0;
  while (since(start) < seconds) {
    c.advance(chunk, run, keep_thinned);
    iterations += chunk;
  }
  const double elapsed = since(start);
  if (run.records.size() < 100)
    std::cerr << "warning: benchmark budget kept only " << run.records.size() << " samples (fewer than 100)\n";
  if (run.records.size() < 10) throw InputError("benchmark budget too small to estimate ESS");
  LatentEfficiency out = latent_ess(run.records, inputs.traits, elapsed);
  out.iterations = iterations;
  return out;
}

}  // namespace phyprobit
