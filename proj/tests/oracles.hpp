#pragma once

// Test-only reference computations. Everything here goes through dense
// matrices and textbook formulas, never through the tree traversals.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "phyprobit/rng.hpp"
#include "phyprobit/tree.hpp"
#include "phyprobit/tree_gauss.hpp"

namespace oracle {

using phyprobit::Rng;

/// Random rooted bifurcating tree in Newick form: repeatedly joins two random
/// clades with Exp(1)-ish branch lengths.
inline std::string random_newick(std::size_t n, Rng& rng, double zero_branch_prob = 0.0) {
  std::vector<std::string> clades;
  for (std::size_t i = 0; i < n; ++i) clades.push_back("t" + std::to_string(i));
  auto len = [&]() {
    if (zero_branch_prob > 0.0 && rng.uniform() < zero_branch_prob) return std::string("0");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", 0.05 + rng.exponential());
    return std::string(buf);
  };
  while (clades.size() > 1) {
    std::size_t a = rng.below(clades.size());
    std::size_t b = rng.below(clades.size() - 1);
    if (b >= a) ++b;
    std::string joined = "(" + clades[a] + ":" + len() + "," + clades[b] + ":" + len() + ")";
    if (a < b) std::swap(a, b);
    clades.erase(clades.begin() + static_cast<long>(a));
    clades.erase(clades.begin() + static_cast<long>(b));
    clades.push_back(joined);
  }
  return clades.front() + ";";
}

inline Eigen::MatrixXd random_spd(int p, Rng& rng) {
  Eigen::MatrixXd a(p, p);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j) a(i, j) = rng.normal();
  return a * a.transpose() / p + 0.5 * Eigen::MatrixXd::Identity(p, p);
}

inline Eigen::VectorXd random_vector(Eigen::Index d, Rng& rng) {
  Eigen::VectorXd v(d);
  for (Eigen::Index i = 0; i < d; ++i) v[i] = rng.normal();
  return v;
}

/// Gamma (x) Sigma, taxon-major ordering.
inline Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

/// (Gamma (x) Sigma)^{-1} w via vec(Gamma^{-1} W Sigma^{-1}) with dense inverses.
inline Eigen::VectorXd kron_precision_product(const Eigen::MatrixXd& gamma, const Eigen::MatrixXd& sigma,
                                              const Eigen::VectorXd& w) {
  const Eigen::Index n = gamma.rows(), p = sigma.rows();
  Eigen::MatrixXd wm(n, p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) wm(i, j) = w[i * p + j];
  const Eigen::MatrixXd r = gamma.inverse() * wm * sigma.inverse();
  Eigen::VectorXd out(n * p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) out[i * p + j] = r(i, j);
  return out;
}

inline double mvn_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov) {
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
  const Eigen::VectorXd r = x - mu;
  const double logdet = ldlt.vectorD().array().log().sum();
  return -0.5 * (static_cast<double>(x.size()) * std::log(2.0 * M_PI) + logdet + r.dot(ldlt.solve(r)));
}

/// Dense log MN(X; 1 mu0', Gamma, Sigma) through the NP-dimensional MVN.
inline double matrix_normal_log_density(const phyprobit::RowMatrix& x, const Eigen::VectorXd& mu0,
                                        const Eigen::MatrixXd& gamma, const Eigen::MatrixXd& sigma) {
  const Eigen::Index n = x.rows(), p = x.cols();
  Eigen::VectorXd v(n * p), m(n * p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) {
      v[i * p + j] = x(i, j);
      m[i * p + j] = mu0[j];
    }
  return mvn_log_density(v, m, kron(gamma, sigma));
}

inline double max_rel_error(const Eigen::VectorXd& got, const Eigen::VectorXd& want) {
  const double scale = std::max(want.cwiseAbs().maxCoeff(), 1e-300);
  return (got - want).cwiseAbs().maxCoeff() / scale;
}

/// Sample mean and Monte-Carlo standard error with batch means.
struct McEstimate {
  double mean;
  double se;
};

inline McEstimate batch_mean(const std::vector<double>& xs, std::size_t batches = 50) {
  const std::size_t per = xs.size() / batches;
  std::vector<double> bm(batches, 0.0);
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t k = 0; k < per; ++k) bm[b] += xs[b * per + k];
    bm[b] /= static_cast<double>(per);
  }
  double mean = 0.0;
  for (double v : bm) mean += v;
  mean /= static_cast<double>(batches);
  double var = 0.0;
  for (double v : bm) var += (v - mean) * (v - mean);
  var /= static_cast<double>(batches - 1);
  return {mean, std::sqrt(var / static_cast<double>(batches))};
}

}  // namespace oracle
