#pragma once

#include <cstddef>
#include <functional>

#include <Eigen/Dense>

#include "phyprobit/rng.hpp"

namespace phyprobit {

/// Returns log pi(q) and writes its gradient into the second argument.
using LogDensityFn = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

/// `steps` leapfrog steps (half kick, drift, half kick) with identity mass.
/// `gradient` must hold the gradient at q on entry and holds it at the new q
/// on exit. Returns the log density at the new q.
double leapfrog(Eigen::VectorXd& q, Eigen::VectorXd& m, Eigen::VectorXd& gradient, double step_size,
                std::size_t steps, const LogDensityFn& log_density);

struct HmcResult {
  Eigen::VectorXd position;
  double log_density = 0.0;
  double accept_prob = 0.0;
  bool accepted = false;
  bool divergent = false;
};

/// One Metropolis-corrected HMC transition from q0 with fresh N(0, I)
/// momentum. Non-finite energies and numerical failures inside the
/// trajectory are rejected and flagged as divergent.
HmcResult hmc_transition(const Eigen::VectorXd& q0, const LogDensityFn& log_density, double step_size,
                         std::size_t steps, Rng& rng);

/// Dual averaging of log step size toward a target acceptance rate.
class DualAveraging {
 public:
  explicit DualAveraging(double initial_step, double target_accept = 0.8, double gamma = 0.05, double t0 = 10.0,
                         double kappa = 0.75);

  /// Feeds one acceptance probability; returns the next step size.
  double update(double accept_prob);
  double step() const { return std::exp(log_step_); }
  /// Step size to freeze after warmup.
  double final_step() const { return std::exp(log_step_bar_); }
  std::size_t iterations() const { return t_; }

 private:
  double mu_, target_, gamma_, t0_, kappa_;
  double log_step_, log_step_bar_ = 0.0, h_bar_ = 0.0;
  std::size_t t_ = 0;
};

/// L = ceil(path_length / step_size), drawn uniformly from the integers in
/// [0.9 L, 1.1 L], never below 1.
std::size_t jittered_steps(double path_length, double step_size, Rng& rng);

struct HmcSettings {
  double path_length = 1.0;
  double initial_step = 0.1;
  double target_accept = 0.8;
};

/// HMC with step-size adaptation while `adapt` is passed true; the step is
/// frozen at the averaged value on the first non-adapting call.
class HmcKernel {
 public:
  explicit HmcKernel(const HmcSettings& settings = {});

  HmcResult step(const Eigen::VectorXd& q, const LogDensityFn& log_density, Rng& rng, bool adapt);

  double step_size() const { return step_size_; }
  std::size_t divergences() const { return divergences_; }
  std::size_t transitions() const { return transitions_; }
  std::size_t accepted() const { return accepted_; }

 private:
  HmcSettings settings_;
  DualAveraging averaging_;
  double step_size_;
  bool frozen_ = false;
  std::size_t divergences_ = 0, transitions_ = 0, accepted_ = 0;
};

}  // namespace phyprobit
