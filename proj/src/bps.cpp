#include "phyprobit/bps.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "phyprobit/error.hpp"

namespace phyprobit {

namespace {

constexpr std::size_t kNpos = std::numeric_limits<std::size_t>::max();

std::span<const double> cspan(const Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
std::span<double> mspan(Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

}  // namespace

void PrecisionOperator::covariance_multiply(std::span<const double> w, std::span<double> out) const {
  // Conjugate gradients on Phi y = w.
  const auto d = static_cast<Eigen::Index>(dim());
  Eigen::Map<const Eigen::VectorXd> b(w.data(), d);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(d), r = b, p = b, ap(d);
  double rr = r.squaredNorm();
  const double stop = 1e-24 * std::max(rr, 1e-300);
  for (Eigen::Index it = 0; it < 4 * d + 10 && rr > stop; ++it) {
    multiply(cspan(p), mspan(ap));
    const double alpha = rr / p.dot(ap);
    y += alpha * p;
    r -= alpha * ap;
    const double rr_new = r.squaredNorm();
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  Eigen::Map<Eigen::VectorXd>(out.data(), d) = y;
}

DensePrecision::DensePrecision(Eigen::MatrixXd precision) : phi_(std::move(precision)), llt_(phi_) {
  if (phi_.rows() != phi_.cols()) throw InputError("precision matrix must be square");
  if (llt_.info() != Eigen::Success) throw InputError("precision matrix is not positive definite");
}

void DensePrecision::multiply(std::span<const double> w, std::span<double> out) const {
  const auto d = phi_.rows();
  Eigen::Map<Eigen::VectorXd>(out.data(), d).noalias() = phi_ * Eigen::Map<const Eigen::VectorXd>(w.data(), d);
}

void DensePrecision::column(std::size_t i, std::span<double> out) const {
  if (i >= dim()) throw InputError("precision column index out of range");
  Eigen::Map<Eigen::VectorXd>(out.data(), phi_.rows()) = phi_.col(static_cast<Eigen::Index>(i));
}

void DensePrecision::covariance_multiply(std::span<const double> w, std::span<double> out) const {
  const auto d = phi_.rows();
  Eigen::Map<Eigen::VectorXd>(out.data(), d) = llt_.solve(Eigen::Map<const Eigen::VectorXd>(w.data(), d));
}

std::optional<double> DensePrecision::covariance_trace() const {
  return llt_.solve(Eigen::MatrixXd::Identity(phi_.rows(), phi_.cols())).trace();
}

void TreePrecision::multiply(std::span<const double> w, std::span<double> out) const {
  thread_local TreeGaussian::Workspace ws;
  gauss_->multiply(w, out, ws);
}

void TreePrecision::column(std::size_t i, std::span<double> out) const {
  thread_local TreeGaussian::Workspace ws;
  gauss_->column(i, out, ws);
}

void TreePrecision::covariance_multiply(std::span<const double> w, std::span<double> out) const {
  gauss_->covariance_multiply(w, out);
}

std::size_t TruncatedNormalTarget::free_count() const {
  return static_cast<std::size_t>(std::count(fixed.begin(), fixed.end(), std::uint8_t{0}));
}

void TruncatedNormalTarget::validate() const {
  const std::size_t d = dim();
  if (!precision) throw InputError("target has no precision operator");
  if (precision->dim() != d) throw InputError("target precision dimension does not match mean");
  if (sign.size() != d || fixed.size() != d) throw InputError("target sign/mask length does not match mean");
  for (std::size_t i = 0; i < d; ++i)
    if (fixed[i] && sign[i] != Orthant::kFree) throw InputError("fixed coordinate cannot carry a sign constraint");
}

bool TruncatedNormalTarget::admits(const Eigen::VectorXd& x) const {
  if (static_cast<std::size_t>(x.size()) != dim()) return false;
  for (std::size_t i = 0; i < dim(); ++i) {
    const double xi = x[static_cast<Eigen::Index>(i)];
    if (!std::isfinite(xi)) return false;
    if (sign[i] == Orthant::kPositive && !(xi > 0.0)) return false;
    if (sign[i] == Orthant::kNegative && !(xi < 0.0)) return false;
  }
  return true;
}

double gradient_event_time(double v_dot_phix, double v_dot_phiv, double exp_draw) {
  if (!(v_dot_phiv > 0.0)) throw NumericalError("gradient event time needs <v, Phi v> > 0");
  const double a = 0.5 * v_dot_phiv;
  const double b = v_dot_phix;
  const double t_min = std::max(0.0, -b / v_dot_phiv);
  const double c = -a * t_min * t_min - b * t_min - exp_draw;
  const double disc = std::sqrt(std::max(0.0, b * b - 4.0 * a * c));
  // Larger root of a t^2 + b t + c, in the form free of cancellation.
  if (b < 0.0) return (-b + disc) / (2.0 * a);
  const double q = -0.5 * (b + disc);
  if (q == 0.0) return 0.0;
  return c / q;
}

std::pair<double, std::size_t> boundary_event_time(const Eigen::VectorXd& x, const Eigen::VectorXd& v,
                                                   const std::vector<Orthant>& sign) {
  double best = std::numeric_limits<double>::infinity();
  std::size_t arg = kNpos;
  for (std::size_t i = 0; i < sign.size(); ++i) {
    if (sign[i] == Orthant::kFree) continue;
    const auto k = static_cast<Eigen::Index>(i);
    if (x[k] * v[k] < 0.0) {
      const double t = std::abs(x[k] / v[k]);
      if (t < best) {
        best = t;
        arg = i;
      }
    }
  }
  return {best, arg};
}

Eigen::VectorXd bounce_gradient(const Eigen::VectorXd& v, const Eigen::VectorXd& gradient,
                                const std::vector<std::uint8_t>& fixed) {
  double vg = 0.0, gg = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!fixed.empty() && fixed[static_cast<std::size_t>(i)]) continue;
    vg += v[i] * gradient[i];
    gg += gradient[i] * gradient[i];
  }
  if (!(gg > 0.0)) throw NumericalError("gradient bounce against a zero gradient");
  Eigen::VectorXd out = v;
  const double f = 2.0 * vg / gg;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!fixed.empty() && fixed[static_cast<std::size_t>(i)]) continue;
    out[i] -= f * gradient[i];
  }
  return out;
}

void bounce_boundary(Eigen::VectorXd& v, Eigen::VectorXd& phi_v, std::size_t i, const Eigen::VectorXd& column_i) {
  const auto k = static_cast<Eigen::Index>(i);
  v[k] = -v[k];
  phi_v += (2.0 * v[k]) * column_i;
}

Eigen::VectorXd bps_transition(const TruncatedNormalTarget& target, const Eigen::VectorXd& x0, double travel_time,
                               Rng& rng, BpsStats* stats, const BpsOptions& options) {
  target.validate();
  if (!(travel_time > 0.0) || !std::isfinite(travel_time)) throw InputError("BPS travel time must be positive");
  if (!target.admits(x0)) throw InputError("BPS start point violates the truncation constraints");
  BpsStats local;
  BpsStats& st = stats ? *stats : local;

  const auto d = static_cast<Eigen::Index>(target.dim());
  Eigen::VectorXd x = x0;
  if (target.free_count() == 0) return x;

  const PrecisionOperator& phi = *target.precision;
  Eigen::VectorXd v(d), phi_x(d), phi_v(d), col(d), centered = x - target.mean;
  for (Eigen::Index i = 0; i < d; ++i) v[i] = target.fixed[static_cast<std::size_t>(i)] ? 0.0 : rng.normal();
  phi.multiply(cspan(centered), mspan(phi_x));
  ++st.full_products;

  double remaining = travel_time;
  double elapsed = 0.0;
  bool boundary_last = false;
  std::size_t last_coord = kNpos;
  while (remaining > 0.0) {
    if (boundary_last) {
      phi.column(last_coord, mspan(col));
      ++st.column_products;
      phi_v += (2.0 * v[static_cast<Eigen::Index>(last_coord)]) * col;
    } else {
      phi.multiply(cspan(v), mspan(phi_v));
      ++st.full_products;
    }
    // v is zero on fixed coordinates, so these are the masked products.
    const double vx = v.dot(phi_x);
    const double vv = v.dot(phi_v);
    if (!std::isfinite(vx) || !std::isfinite(vv)) throw NumericalError("non-finite value in BPS precision products");

    const double t_grad = gradient_event_time(vx, vv, rng.exponential());
    const auto [t_bound, i_bound] = boundary_event_time(x, v, target.sign);
    const double t_event = std::min(t_grad, t_bound);
    if (remaining < t_event) {
      x += remaining * v;
      phi_x += remaining * phi_v;
      elapsed += remaining;
      break;
    }
    const double tau = std::max(t_event, kMinEventTime);
    x += tau * v;
    phi_x += tau * phi_v;
    remaining -= tau;
    elapsed += tau;
    if (t_bound <= t_grad) {
      // Boundary wins ties; land exactly on the wall and reflect.
      const auto k = static_cast<Eigen::Index>(i_bound);
      x[k] = 0.0;
      v[k] = -v[k];
      boundary_last = true;
      last_coord = i_bound;
      ++st.boundary_events;
      if (options.trace) options.trace({BpsEventKind::kBoundary, elapsed, i_bound});
      if (remaining <= 0.0) remaining = kMinEventTime;  // never stop on the wall
    } else {
      v = bounce_gradient(v, phi_x, target.fixed);
      boundary_last = false;
      ++st.gradient_events;
      if (options.trace) options.trace({BpsEventKind::kGradient, elapsed, kNpos});
    }
  }
  if (options.trace) options.trace({BpsEventKind::kEnd, elapsed, kNpos});

  if (!x.allFinite()) throw NumericalError("BPS produced a non-finite position");
  if (!target.admits(x)) throw NumericalError("BPS left the truncation region");
  if (options.verify_cache) {
    centered = x - target.mean;
    Eigen::VectorXd fresh(d);
    phi.multiply(cspan(centered), mspan(fresh));
    const double scale = std::max(phi_x.cwiseAbs().maxCoeff(), 1e-300);
    const double drift = (phi_x - fresh).cwiseAbs().maxCoeff() / scale;
    st.max_cache_drift = std::max(st.max_cache_drift, drift);
#ifdef PHYPROBIT_VERIFY_CACHES
    if (drift > 1e-8) throw NumericalError("BPS cached gradient drifted from a fresh product");
#endif
  }
  return x;
}

TravelTimeTuning tune_travel_time(const PrecisionOperator& precision, double multiplier, double tolerance,
                                  std::size_t max_iterations) {
  if (!(multiplier > 0.0)) throw InputError("travel-time multiplier must be positive");
  const auto d = static_cast<Eigen::Index>(precision.dim());
  Eigen::VectorXd u(d), cu(d);
  for (Eigen::Index i = 0; i < d; ++i) u[i] = 1.0 + 0.5 * std::sin(static_cast<double>(i) + 1.0);
  u.normalize();
  double lambda = 0.0;
  bool converged = false;
  std::size_t it = 0;
  for (; it < max_iterations; ++it) {
    precision.covariance_multiply(cspan(u), mspan(cu));
    const double next = u.dot(cu);
    const double norm = cu.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) break;
    u = cu / norm;
    if (it > 0 && std::abs(next - lambda) <= tolerance * std::abs(next)) {
      lambda = next;
      converged = true;
      ++it;
      break;
    }
    lambda = next;
  }
  if (!converged) {
    const auto tr = precision.covariance_trace();
    std::cerr << "warning: travel-time power iteration did not converge in " << max_iterations
              << " iterations; using the covariance trace bound\n";
    if (tr) lambda = *tr;
  }
  return {multiplier * std::sqrt(lambda), lambda, it, converged};
}

}  // namespace phyprobit
