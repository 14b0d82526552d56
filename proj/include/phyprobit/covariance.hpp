#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "phyprobit/tree_gauss.hpp"

namespace phyprobit {

/// Sigma = D R D with R a correlation matrix and D diagonal. Traits whose
/// scale is not free (binary traits) have D_ii = 1 exactly.
class CovarianceDecomposition {
 public:
  /// Throws InputError unless R is a valid correlation matrix, scales has one
  /// entry per trait, fixed-scale traits carry 1 and free scales are positive.
  CovarianceDecomposition(Eigen::MatrixXd correlation, Eigen::VectorXd scales, std::vector<std::uint8_t> free_scale);

  std::size_t traits() const { return static_cast<std::size_t>(r_.rows()); }
  const Eigen::MatrixXd& correlation() const { return r_; }
  const Eigen::MatrixXd& correlation_cholesky() const { return l_; }
  const Eigen::VectorXd& scales() const { return d_; }
  const std::vector<std::uint8_t>& free_scale() const { return free_; }
  std::size_t free_scale_count() const;

  Eigen::MatrixXd covariance() const { return d_.asDiagonal() * r_ * d_.asDiagonal(); }
  Eigen::MatrixXd precision() const;
  double log_det_correlation() const;
  double log_det_covariance() const;

  /// Identity correlation and unit scales.
  static CovarianceDecomposition identity(std::vector<std::uint8_t> free_scale);

 private:
  Eigen::MatrixXd r_, l_;
  Eigen::VectorXd d_;
  std::vector<std::uint8_t> free_;
};

/// Number of unconstrained coordinates: P(P-1)/2 correlation coordinates
/// followed by one log-scale per free scale.
std::size_t unconstrained_size(std::size_t traits, const std::vector<std::uint8_t>& free_scale);

/// Maps theta to (R, D). Correlation coordinates are ordered row by row over
/// the strict lower triangle, z_ij = tanh(theta), and the Cholesky factor of R
/// is built by stick-breaking on the canonical partial correlations.
CovarianceDecomposition to_decomposition(const Eigen::VectorXd& theta, std::size_t traits,
                                         const std::vector<std::uint8_t>& free_scale);
Eigen::VectorXd to_unconstrained(const CovarianceDecomposition& decomposition);

/// Unnormalised LKJ log-density (eta - 1) log det R.
double lkj_log_density(const Eigen::MatrixXd& correlation, double eta);

/// log delta_k^2 ~ N(log_mean, log_sd^2) independently for each free scale.
struct ScalePrior {
  double log_mean = 0.0;
  double log_sd = 1.0;
};

/// Log-normal densities of the free variances delta_k^2, evaluated on the
/// variance scale (so including the 1/delta^2 factor).
double scale_log_prior(const Eigen::VectorXd& delta, const std::vector<std::uint8_t>& free_scale,
                       const ScalePrior& prior = {});
/// Derivative of scale_log_prior with respect to each delta (zero where the
/// scale is fixed).
Eigen::VectorXd scale_log_prior_gradient(const Eigen::VectorXd& delta, const std::vector<std::uint8_t>& free_scale,
                                         const ScalePrior& prior = {});

/// The sufficient statistics of MN(X; 1 mu0', Gamma, Sigma) for Sigma:
/// S = (X - 1 mu0')' Gamma^{-1} (X - 1 mu0'), the taxon count and
/// log det Gamma. An empty statistic (taxa = 0) switches the likelihood off.
struct CovarianceLikelihood {
  Eigen::MatrixXd cross_product;
  double taxa = 0.0;
  double log_det_tree = 0.0;

  static CovarianceLikelihood from_latent(const TreeGaussian& gauss, const Eigen::Ref<const RowMatrix>& x,
                                          const Eigen::VectorXd& root_mean);
  static CovarianceLikelihood prior_only(std::size_t traits);

  /// log MN density for a given Sigma.
  double log_density(const Eigen::MatrixXd& sigma) const;
};

struct CovariancePrior {
  double eta = 1.0;
  ScalePrior scale;
};

/// Log posterior of theta (likelihood + LKJ + log-normal scales + log
/// Jacobian of the transform) and its exact gradient. `gradient` is resized.
/// The sampling coordinate for a scale is u = log delta, so its prior term
/// is logN(delta^2) + log|d delta^2 / du|.
double cov_posterior_log_density_and_grad(const Eigen::VectorXd& theta, const CovarianceLikelihood& likelihood,
                                          const CovariancePrior& prior, const std::vector<std::uint8_t>& free_scale,
                                          Eigen::VectorXd& gradient);

}  // namespace phyprobit
