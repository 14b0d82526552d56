#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "phyprobit/rng.hpp"
#include "phyprobit/tree_gauss.hpp"

namespace phyprobit {

/// Action of a symmetric positive definite precision matrix. Implementations
/// must be safe to call concurrently from several chains.
class PrecisionOperator {
 public:
  virtual ~PrecisionOperator() = default;

  virtual std::size_t dim() const = 0;
  virtual void multiply(std::span<const double> w, std::span<double> out) const = 0;
  virtual void column(std::size_t i, std::span<double> out) const = 0;

  /// Covariance action Phi^{-1} w. Default: conjugate-gradient solve built
  /// on multiply().
  virtual void covariance_multiply(std::span<const double> w, std::span<double> out) const;

  /// trace(Phi^{-1}) when cheaply known.
  virtual std::optional<double> covariance_trace() const { return std::nullopt; }
};

/// Explicit matrix; for tests and small problems.
class DensePrecision final : public PrecisionOperator {
 public:
  explicit DensePrecision(Eigen::MatrixXd precision);
  std::size_t dim() const override { return static_cast<std::size_t>(phi_.rows()); }
  void multiply(std::span<const double> w, std::span<double> out) const override;
  void column(std::size_t i, std::span<double> out) const override;
  void covariance_multiply(std::span<const double> w, std::span<double> out) const override;
  std::optional<double> covariance_trace() const override;
  const Eigen::MatrixXd& matrix() const { return phi_; }

 private:
  Eigen::MatrixXd phi_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

/// (Gamma (x) Sigma)^{-1} through tree traversals.
class TreePrecision final : public PrecisionOperator {
 public:
  explicit TreePrecision(std::shared_ptr<const TreeGaussian> gauss) : gauss_(std::move(gauss)) {}
  std::size_t dim() const override { return gauss_->dim(); }
  void multiply(std::span<const double> w, std::span<double> out) const override;
  void column(std::size_t i, std::span<double> out) const override;
  void covariance_multiply(std::span<const double> w, std::span<double> out) const override;
  std::optional<double> covariance_trace() const override { return gauss_->covariance_trace(); }
  const TreeGaussian& gaussian() const { return *gauss_; }

 private:
  std::shared_ptr<const TreeGaussian> gauss_;
};

/// Per-coordinate constraint: sign(x_i) must equal +1 / -1, or is free.
enum class Orthant : std::int8_t { kNegative = -1, kFree = 0, kPositive = 1 };

/// N(mean, Phi^{-1}) restricted to an orthant on some coordinates, with
/// `fixed` coordinates held at their current values (the sampler then
/// targets the conditional of the rest).
struct TruncatedNormalTarget {
  Eigen::VectorXd mean;
  std::shared_ptr<const PrecisionOperator> precision;
  std::vector<Orthant> sign;
  std::vector<std::uint8_t> fixed;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
  std::size_t free_count() const;
  /// Throws InputError when shapes disagree or a fixed coordinate is signed.
  void validate() const;
  /// True when every constrained, free coordinate of x is strictly inside.
  bool admits(const Eigen::VectorXd& x) const;
};

enum class BpsEventKind { kGradient, kBoundary, kEnd };

struct BpsEvent {
  BpsEventKind kind;
  double time;             // elapsed travel time at the event
  std::size_t coordinate;  // boundary coordinate, else npos
};

struct BpsStats {
  std::size_t gradient_events = 0;
  std::size_t boundary_events = 0;
  std::size_t full_products = 0;
  std::size_t column_products = 0;
  double max_cache_drift = 0.0;  // filled when verification is on
};

struct BpsOptions {
#ifdef PHYPROBIT_VERIFY_CACHES
  bool verify_cache = true;
#else
  bool verify_cache = false;
#endif
  std::function<void(const BpsEvent&)> trace;
};

/// Event times below this are advanced to it.
inline constexpr double kMinEventTime = 1e-12;

/// Time of the next gradient event on the segment x + t v, given
/// <v, Phi(x - mu)>, <v, Phi v> and an Exp(1) draw. Throws when
/// <v, Phi v> <= 0.
double gradient_event_time(double v_dot_phix, double v_dot_phiv, double exp_draw);

/// Earliest crossing of a constrained coordinate hyperplane, smallest index
/// on ties; (+inf, npos) when nothing is approached.
std::pair<double, std::size_t> boundary_event_time(const Eigen::VectorXd& x, const Eigen::VectorXd& v,
                                                   const std::vector<Orthant>& sign);

/// Elastic reflection of v against the gradient restricted to non-fixed
/// coordinates. Throws when that restricted gradient is zero.
Eigen::VectorXd bounce_gradient(const Eigen::VectorXd& v, const Eigen::VectorXd& gradient,
                                const std::vector<std::uint8_t>& fixed);

/// Flips v_i and updates Phi v with column i of Phi, in place.
void bounce_boundary(Eigen::VectorXd& v, Eigen::VectorXd& phi_v, std::size_t i, const Eigen::VectorXd& column_i);

/// One BPS transition of total travel time `travel_time`, starting from x0
/// with a fresh N(0, I) velocity on the non-fixed coordinates.
Eigen::VectorXd bps_transition(const TruncatedNormalTarget& target, const Eigen::VectorXd& x0, double travel_time,
                               Rng& rng, BpsStats* stats = nullptr, const BpsOptions& options = {});

struct TravelTimeTuning {
  double travel_time;
  double lambda_max;
  std::size_t iterations;
  bool converged;  // false: lambda_max is the trace upper bound
};

/// travel_time = multiplier * sqrt(largest covariance eigenvalue), the
/// eigenvalue from power iteration on the covariance action.
TravelTimeTuning tune_travel_time(const PrecisionOperator& precision, double multiplier = 0.01,
                                  double tolerance = 1e-3, std::size_t max_iterations = 200);

}  // namespace phyprobit
