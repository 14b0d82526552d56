#include "phyprobit/covariance.hpp"

#include <cmath>

#include "phyprobit/error.hpp"

namespace phyprobit {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kLog2 = 0.69314718055994530942;

// log(1 - tanh(y)^2) without cancellation for large |y|.
double log1m_tanh2(double y) {
  const double a = std::abs(y);
  return 2.0 * (kLog2 - a - std::log1p(std::exp(-2.0 * a)));
}

void check_free_scale(std::size_t traits, const std::vector<std::uint8_t>& free_scale) {
  if (free_scale.size() != traits) throw InputError("free-scale mask length does not match the trait count");
}

}  // namespace

CovarianceDecomposition::CovarianceDecomposition(Eigen::MatrixXd correlation, Eigen::VectorXd scales,
                                                 std::vector<std::uint8_t> free_scale)
    : r_(std::move(correlation)), d_(std::move(scales)), free_(std::move(free_scale)) {
  const auto p = r_.rows();
  if (p == 0 || r_.cols() != p) throw InputError("correlation matrix must be square and non-empty");
  if (d_.size() != p) throw InputError("scale vector length does not match the correlation matrix");
  check_free_scale(static_cast<std::size_t>(p), free_);
  for (Eigen::Index i = 0; i < p; ++i) {
    if (std::abs(r_(i, i) - 1.0) > 1e-12) throw InputError("correlation matrix must have a unit diagonal");
    for (Eigen::Index j = 0; j < i; ++j)
      if (std::abs(r_(i, j) - r_(j, i)) > 1e-12) throw InputError("correlation matrix must be symmetric");
    if (free_[static_cast<std::size_t>(i)]) {
      if (!(d_[i] > 0.0) || !std::isfinite(d_[i])) throw InputError("trait scales must be positive and finite");
    } else if (d_[i] != 1.0) {
      throw InputError("fixed trait scales must equal 1");
    }
  }
  Eigen::LLT<Eigen::MatrixXd> llt(r_);
  if (llt.info() != Eigen::Success) throw InputError("correlation matrix is not positive definite");
  l_ = llt.matrixL();
}

std::size_t CovarianceDecomposition::free_scale_count() const {
  std::size_t n = 0;
  for (auto f : free_) n += f ? 1 : 0;
  return n;
}

Eigen::MatrixXd CovarianceDecomposition::precision() const {
  const Eigen::MatrixXd m = d_.asDiagonal() * l_;
  const Eigen::MatrixXd minv =
      m.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
  return minv.transpose() * minv;
}

double CovarianceDecomposition::log_det_correlation() const {
  return 2.0 * l_.diagonal().array().log().sum();
}

double CovarianceDecomposition::log_det_covariance() const {
  return log_det_correlation() + 2.0 * d_.array().log().sum();
}

CovarianceDecomposition CovarianceDecomposition::identity(std::vector<std::uint8_t> free_scale) {
  const auto p = static_cast<Eigen::Index>(free_scale.size());
  return {Eigen::MatrixXd::Identity(p, p), Eigen::VectorXd::Ones(p), std::move(free_scale)};
}

std::size_t unconstrained_size(std::size_t traits, const std::vector<std::uint8_t>& free_scale) {
  check_free_scale(traits, free_scale);
  std::size_t n = traits * (traits - 1) / 2;
  for (auto f : free_scale) n += f ? 1 : 0;
  return n;
}

namespace {

// Cholesky factor of R from the correlation block of theta. The remaining
// squared length of row i after j entries, 1 - s_j, is the product of the
// (1 - z_k^2) for k < j; it is accumulated on the log scale.
Eigen::MatrixXd cholesky_from_unconstrained(const Eigen::VectorXd& theta, Eigen::Index p) {
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(p, p);
  l(0, 0) = 1.0;
  Eigen::Index k = 0;
  for (Eigen::Index i = 1; i < p; ++i) {
    double log_rest = 0.0;
    for (Eigen::Index j = 0; j < i; ++j, ++k) {
      l(i, j) = std::tanh(theta[k]) * std::exp(0.5 * log_rest);
      log_rest += log1m_tanh2(theta[k]);
    }
    l(i, i) = std::exp(0.5 * log_rest);
  }
  return l;
}

}  // namespace

CovarianceDecomposition to_decomposition(const Eigen::VectorXd& theta, std::size_t traits,
                                         const std::vector<std::uint8_t>& free_scale) {
  if (static_cast<std::size_t>(theta.size()) != unconstrained_size(traits, free_scale))
    throw InputError("unconstrained vector has the wrong length");
  const auto p = static_cast<Eigen::Index>(traits);
  const Eigen::MatrixXd l = cholesky_from_unconstrained(theta, p);
  Eigen::MatrixXd r = l * l.transpose();
  r.diagonal().setOnes();
  r = 0.5 * (r + r.transpose()).eval();
  Eigen::VectorXd d = Eigen::VectorXd::Ones(p);
  Eigen::Index k = p * (p - 1) / 2;
  for (Eigen::Index i = 0; i < p; ++i)
    if (free_scale[static_cast<std::size_t>(i)]) d[i] = std::exp(theta[k++]);
  return {std::move(r), std::move(d), free_scale};
}

Eigen::VectorXd to_unconstrained(const CovarianceDecomposition& decomposition) {
  const auto p = static_cast<Eigen::Index>(decomposition.traits());
  const Eigen::MatrixXd& l = decomposition.correlation_cholesky();
  Eigen::VectorXd theta(static_cast<Eigen::Index>(unconstrained_size(decomposition.traits(), decomposition.free_scale())));
  Eigen::Index k = 0;
  for (Eigen::Index i = 1; i < p; ++i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < i; ++j) {
      const double w = std::sqrt(std::max(0.0, 1.0 - s));
      const double z = w > 0.0 ? l(i, j) / w : 0.0;
      if (!(std::abs(z) < 1.0)) throw InputError("correlation lies on the boundary of the unconstrained space");
      theta[k++] = std::atanh(z);
      s += l(i, j) * l(i, j);
    }
  }
  for (Eigen::Index i = 0; i < p; ++i)
    if (decomposition.free_scale()[static_cast<std::size_t>(i)]) theta[k++] = std::log(decomposition.scales()[i]);
  return theta;
}

double lkj_log_density(const Eigen::MatrixXd& correlation, double eta) {
  if (!(eta > 0.0)) throw InputError("LKJ shape must be positive");
  Eigen::LLT<Eigen::MatrixXd> llt(correlation);
  if (llt.info() != Eigen::Success) throw NumericalError("LKJ density of a non positive definite matrix");
  if (eta == 1.0) return 0.0;
  const Eigen::MatrixXd l = llt.matrixL();
  return (eta - 1.0) * 2.0 * l.diagonal().array().log().sum();
}

void check_scale_prior(const ScalePrior& prior) {
  if (!(prior.log_sd > 0.0) || !std::isfinite(prior.log_mean)) throw InputError("invalid log-normal scale prior");
}

double scale_log_prior(const Eigen::VectorXd& delta, const std::vector<std::uint8_t>& free_scale,
                       const ScalePrior& prior) {
  check_free_scale(static_cast<std::size_t>(delta.size()), free_scale);
  check_scale_prior(prior);
  double lp = 0.0;
  for (Eigen::Index k = 0; k < delta.size(); ++k) {
    if (!free_scale[static_cast<std::size_t>(k)]) continue;
    if (!(delta[k] > 0.0)) throw InputError("trait scales must be positive");
    const double y = 2.0 * std::log(delta[k]);  // log delta^2
    const double z = (y - prior.log_mean) / prior.log_sd;
    lp += -0.5 * kLog2Pi - std::log(prior.log_sd) - 0.5 * z * z - y;
  }
  return lp;
}

Eigen::VectorXd scale_log_prior_gradient(const Eigen::VectorXd& delta, const std::vector<std::uint8_t>& free_scale,
                                         const ScalePrior& prior) {
  check_free_scale(static_cast<std::size_t>(delta.size()), free_scale);
  check_scale_prior(prior);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(delta.size());
  for (Eigen::Index k = 0; k < delta.size(); ++k) {
    if (!free_scale[static_cast<std::size_t>(k)]) continue;
    if (!(delta[k] > 0.0)) throw InputError("trait scales must be positive");
    const double y = 2.0 * std::log(delta[k]);
    const double s2 = prior.log_sd * prior.log_sd;
    g[k] = (-(y - prior.log_mean) / s2 - 1.0) * 2.0 / delta[k];
  }
  return g;
}

CovarianceLikelihood CovarianceLikelihood::from_latent(const TreeGaussian& gauss, const Eigen::Ref<const RowMatrix>& x,
                                                       const Eigen::VectorXd& root_mean) {
  CovarianceLikelihood out;
  out.cross_product = gauss.centered_cross_product(x, root_mean);
  out.taxa = static_cast<double>(gauss.taxa());
  out.log_det_tree = gauss.log_det_tree_covariance();
  return out;
}

CovarianceLikelihood CovarianceLikelihood::prior_only(std::size_t traits) {
  CovarianceLikelihood out;
  const auto p = static_cast<Eigen::Index>(traits);
  out.cross_product = Eigen::MatrixXd::Zero(p, p);
  return out;
}

double CovarianceLikelihood::log_density(const Eigen::MatrixXd& sigma) const {
  if (taxa == 0.0) return 0.0;
  const double p = static_cast<double>(sigma.rows());
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) throw NumericalError("trait covariance is not positive definite");
  const Eigen::MatrixXd l = llt.matrixL();
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  const double quad = llt.solve(cross_product).trace();
  return -0.5 * (taxa * p * kLog2Pi + p * log_det_tree + taxa * log_det + quad);
}

double cov_posterior_log_density_and_grad(const Eigen::VectorXd& theta, const CovarianceLikelihood& likelihood,
                                          const CovariancePrior& prior, const std::vector<std::uint8_t>& free_scale,
                                          Eigen::VectorXd& gradient) {
  const auto p = static_cast<Eigen::Index>(free_scale.size());
  if (static_cast<std::size_t>(theta.size()) != unconstrained_size(free_scale.size(), free_scale))
    throw InputError("unconstrained vector has the wrong length");
  if (likelihood.cross_product.rows() != p) throw InputError("likelihood statistic does not match the trait count");
  if (!(prior.eta > 0.0)) throw InputError("LKJ shape must be positive");
  check_scale_prior(prior.scale);
  if (!theta.allFinite()) throw NumericalError("non-finite unconstrained covariance parameters");

  const Eigen::Index n_corr = p * (p - 1) / 2;
  gradient.setZero(theta.size());
  const Eigen::MatrixXd l = cholesky_from_unconstrained(theta, p);
  Eigen::VectorXd d = Eigen::VectorXd::Ones(p);
  for (Eigen::Index i = 0, k = n_corr; i < p; ++i)
    if (free_scale[static_cast<std::size_t>(i)]) d[i] = std::exp(theta[k++]);

  double value = 0.0;
  Eigen::MatrixXd grad_l = Eigen::MatrixXd::Zero(p, p);
  if (likelihood.taxa > 0.0) {
    const Eigen::MatrixXd m = d.asDiagonal() * l;  // Cholesky factor of Sigma
    if (!(m.diagonal().array() > 0.0).all()) throw NumericalError("trait covariance lost positive definiteness");
    const Eigen::MatrixXd minv =
        m.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(p, p));
    const Eigen::MatrixXd sigma_inv = minv.transpose() * minv;
    const double log_det = 2.0 * m.diagonal().array().log().sum();
    const Eigen::MatrixXd ss = sigma_inv * likelihood.cross_product;
    value += -0.5 * (likelihood.taxa * static_cast<double>(p) * kLog2Pi +
                     static_cast<double>(p) * likelihood.log_det_tree + likelihood.taxa * log_det + ss.trace());
    // d/dSigma of the log-likelihood.
    Eigen::MatrixXd g = -0.5 * likelihood.taxa * sigma_inv + 0.5 * ss * sigma_inv;
    g = 0.5 * (g + g.transpose()).eval();
    grad_l = 2.0 * d.asDiagonal() * g * d.asDiagonal() * l;
    const Eigen::MatrixXd r = l * l.transpose();
    for (Eigen::Index i = 0, k = n_corr; i < p; ++i) {
      if (!free_scale[static_cast<std::size_t>(i)]) continue;
      double gd = 0.0;
      for (Eigen::Index j = 0; j < p; ++j) gd += g(i, j) * r(i, j) * d[j];
      gradient[k++] += 2.0 * gd * d[i];
    }
  }

  // Correlation block: LKJ and the transform Jacobian, folded per row.
  // With lambda_j = log(1 - z_j^2) and ell_j = sum_{k<j} lambda_k:
  // L_ij = z_j exp(ell_j / 2), L_ii = exp(ell_i / 2), and the row contributes
  // sum_j lambda_j + sum_{0<j<i} ell_j / 2 + c_i ell_i / 2.
  Eigen::Index k0 = 0;
  std::vector<double> z, w, adj_ell;
  for (Eigen::Index i = 1; i < p; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const double c = static_cast<double>(p - i - 1) + 2.0 * (prior.eta - 1.0);
    z.assign(ui, 0.0);
    w.assign(ui, 0.0);
    adj_ell.assign(ui + 1, 0.0);
    double ell = 0.0;
    for (Eigen::Index j = 0; j < i; ++j) {
      const auto uj = static_cast<std::size_t>(j);
      z[uj] = std::tanh(theta[k0 + j]);
      w[uj] = std::exp(0.5 * ell);
      if (j > 0) value += 0.5 * ell;
      adj_ell[uj] = 0.5 * grad_l(i, j) * l(i, j) + (j > 0 ? 0.5 : 0.0);
      const double lambda = log1m_tanh2(theta[k0 + j]);
      value += lambda;
      ell += lambda;
    }
    value += 0.5 * c * ell;
    adj_ell[ui] = 0.5 * c + 0.5 * grad_l(i, i) * l(i, i);
    // Suffix sums: y_j moves every ell_m with m > j.
    double later = 0.0;
    for (Eigen::Index j = i - 1; j >= 0; --j) {
      const auto uj = static_cast<std::size_t>(j);
      later += adj_ell[uj + 1];
      const double one_minus_z2 = std::exp(log1m_tanh2(theta[k0 + j]));
      gradient[k0 + j] += grad_l(i, j) * w[uj] * one_minus_z2 - 2.0 * z[uj] * (1.0 + later);
    }
    k0 += i;
  }

  // Log-scales: log-normal on delta^2 plus log|d delta^2 / d log delta|.
  // With y = log delta^2 = 2u the two combine to log 2 + log N(2u; m, s^2).
  const double m = prior.scale.log_mean, sd = prior.scale.log_sd;
  for (Eigen::Index i = 0, k = n_corr; i < p; ++i) {
    if (!free_scale[static_cast<std::size_t>(i)]) continue;
    const double z = (2.0 * theta[k] - m) / sd;
    value += kLog2 - 0.5 * kLog2Pi - std::log(sd) - 0.5 * z * z;
    gradient[k] += -2.0 * z / sd;
    ++k;
  }
  if (!std::isfinite(value) || !gradient.allFinite()) throw NumericalError("non-finite covariance posterior");
  return value;
}

}  // namespace phyprobit
