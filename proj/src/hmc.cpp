#include "phyprobit/hmc.hpp"

#include <algorithm>
#include <cmath>

#include "phyprobit/error.hpp"

namespace phyprobit {

double leapfrog(Eigen::VectorXd& q, Eigen::VectorXd& m, Eigen::VectorXd& gradient, double step_size,
                std::size_t steps, const LogDensityFn& log_density) {
  double lp = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    m += 0.5 * step_size * gradient;
    q += step_size * m;
    lp = log_density(q, gradient);
    m += 0.5 * step_size * gradient;
  }
  return lp;
}

HmcResult hmc_transition(const Eigen::VectorXd& q0, const LogDensityFn& log_density, double step_size,
                         std::size_t steps, Rng& rng) {
  if (!(step_size > 0.0) || !std::isfinite(step_size)) throw InputError("HMC step size must be positive");
  if (steps < 1) throw InputError("HMC needs at least one leapfrog step");
  HmcResult out;
  out.position = q0;
  Eigen::VectorXd gradient;
  const double lp0 = log_density(q0, gradient);
  out.log_density = lp0;
  if (!std::isfinite(lp0)) throw NumericalError("HMC started at a point of zero density");

  Eigen::VectorXd m(q0.size());
  for (Eigen::Index i = 0; i < m.size(); ++i) m[i] = rng.normal();
  const double h0 = -lp0 + 0.5 * m.squaredNorm();

  Eigen::VectorXd q = q0;
  double lp1;
  try {
    lp1 = leapfrog(q, m, gradient, step_size, steps, log_density);
  } catch (const NumericalError&) {
    out.divergent = true;
    rng.uniform();  // keep the stream aligned with accepted proposals
    return out;
  }
  const double h1 = -lp1 + 0.5 * m.squaredNorm();
  const double u = rng.uniform();
  if (!std::isfinite(h1) || !q.allFinite()) {
    out.divergent = true;
    return out;
  }
  out.accept_prob = std::min(1.0, std::exp(h0 - h1));
  if (h1 - h0 > 1000.0) out.divergent = true;
  if (u < out.accept_prob) {
    out.position = std::move(q);
    out.log_density = lp1;
    out.accepted = true;
  }
  return out;
}

DualAveraging::DualAveraging(double initial_step, double target_accept, double gamma, double t0, double kappa)
    : mu_(std::log(10.0 * initial_step)),
      target_(target_accept),
      gamma_(gamma),
      t0_(t0),
      kappa_(kappa),
      log_step_(std::log(initial_step)) {
  if (!(initial_step > 0.0)) throw InputError("initial step size must be positive");
  if (!(target_accept > 0.0 && target_accept < 1.0)) throw InputError("target acceptance must lie in (0, 1)");
}

double DualAveraging::update(double accept_prob) {
  ++t_;
  const double t = static_cast<double>(t_);
  const double w = 1.0 / (t + t0_);
  h_bar_ = (1.0 - w) * h_bar_ + w * (target_ - accept_prob);
  log_step_ = mu_ - std::sqrt(t) / gamma_ * h_bar_;
  const double eta = std::pow(t, -kappa_);
  log_step_bar_ = eta * log_step_ + (1.0 - eta) * log_step_bar_;
  return step();
}

std::size_t jittered_steps(double path_length, double step_size, Rng& rng) {
  if (!(path_length > 0.0) || !(step_size > 0.0)) throw InputError("HMC path length and step size must be positive");
  const double base = std::ceil(path_length / step_size);
  const auto lo = static_cast<std::size_t>(std::max(1.0, std::floor(0.9 * base)));
  const auto hi = static_cast<std::size_t>(std::max(1.0, std::ceil(1.1 * base)));
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

HmcKernel::HmcKernel(const HmcSettings& settings)
    : settings_(settings),
      averaging_(settings.initial_step, settings.target_accept),
      step_size_(settings.initial_step) {
  if (!(settings.path_length > 0.0)) throw InputError("HMC path length must be positive");
}

HmcResult HmcKernel::step(const Eigen::VectorXd& q, const LogDensityFn& log_density, Rng& rng, bool adapt) {
  if (!adapt && !frozen_) {
    if (averaging_.iterations() > 0) step_size_ = averaging_.final_step();
    frozen_ = true;
  }
  const std::size_t steps = jittered_steps(settings_.path_length, step_size_, rng);
  HmcResult r = hmc_transition(q, log_density, step_size_, steps, rng);
  ++transitions_;
  if (r.accepted) ++accepted_;
  if (r.divergent) ++divergences_;
  if (adapt && !frozen_) step_size_ = averaging_.update(r.accept_prob);
  return r;
}

}  // namespace phyprobit
