#pragma once

#include <cstddef>
#include <memory>
#include <span>

#include <Eigen/Dense>

#include "phyprobit/tree.hpp"

namespace phyprobit {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Partial-data statistics from a children-to-root pass: the tips below node
/// i, seen from node i, are N(mean.row(i), variance[i] * Sigma).
struct PostOrderStats {
  RowMatrix mean;          // node_count x P
  Eigen::VectorXd variance;
};

/// Statistics from the root-to-children pass: node i given every tip not
/// below it is N(mean.row(i), variance[i] * Sigma). `partial_variance` is the
/// value before adding the node's own branch.
struct PreOrderStats {
  RowMatrix mean;
  Eigen::VectorXd variance;
  Eigen::VectorXd partial_variance;
};

PostOrderStats post_order_pass(const Tree& tree, const Eigen::Ref<const RowMatrix>& tip_values);
PreOrderStats pre_order_pass(const Tree& tree, const PostOrderStats& post, const RootPrior& root_prior);

/// Matrix-normal tip distribution MN(1 mu0', Gamma, Sigma) evaluated by tree
/// traversals. Vectors of length N*P are taxon-major: entry i*P + j is taxon
/// i, trait j, so the joint covariance is Gamma (x) Sigma.
///
/// The variance scalars and message weights depend only on the tree and the
/// root sample size; they are computed once here and shared by every
/// product. Only the mean recursions run per call.
class TreeGaussian {
 public:
  struct Workspace {
    RowMatrix post_mean;
    RowMatrix pre_mean;
    Eigen::VectorXd post_scalar;
    Eigen::VectorXd pre_scalar;
  };

  /// Throws InputError when the tree covariance is singular (a zero-length
  /// cherry, or zero-length tips under an infinitely tight root).
  TreeGaussian(std::shared_ptr<const Tree> tree, double root_sample_size,
               const Eigen::MatrixXd& trait_covariance);

  /// Same traversal scalars, new Sigma.
  void set_trait_covariance(const Eigen::MatrixXd& trait_covariance);

  std::size_t taxa() const { return tree_->tip_count(); }
  std::size_t traits() const { return static_cast<std::size_t>(sigma_.rows()); }
  std::size_t dim() const { return taxa() * traits(); }
  const Tree& tree() const { return *tree_; }
  std::shared_ptr<const Tree> tree_ptr() const { return tree_; }
  double root_sample_size() const { return kappa_; }

  const Eigen::MatrixXd& trait_covariance() const { return sigma_; }
  const Eigen::MatrixXd& trait_precision() const { return sigma_inv_; }
  double log_det_trait_covariance() const { return log_det_sigma_; }
  /// log det Gamma from the independent-contrast variances.
  double log_det_tree_covariance() const { return log_det_gamma_; }

  const Eigen::VectorXd& post_variance() const { return post_var_; }
  const Eigen::VectorXd& pre_variance() const { return pre_var_; }
  const Eigen::VectorXd& pre_partial_variance() const { return pre_partial_; }

  /// Gamma^{-1} W for an N x K matrix, O(N K).
  RowMatrix tree_precision_multiply(const Eigen::Ref<const RowMatrix>& w, Workspace& ws) const;
  RowMatrix tree_precision_multiply(const Eigen::Ref<const RowMatrix>& w) const;

  /// out = (Gamma (x) Sigma)^{-1} w in O(N P^2).
  void multiply(std::span<const double> w, std::span<double> out, Workspace& ws) const;
  Eigen::VectorXd multiply(const Eigen::VectorXd& w) const;

  /// Column i of the precision; the tree part is a one-hot scalar traversal.
  void column(std::size_t i, std::span<double> out, Workspace& ws) const;
  Eigen::VectorXd column(std::size_t i) const;

  /// Gamma^{-1} e_taxon as an N-vector.
  void tree_precision_column(std::size_t taxon, Eigen::Ref<Eigen::VectorXd> out, Workspace& ws) const;

  /// out = (Gamma (x) Sigma) w, by subtree sums (no solves).
  void covariance_multiply(std::span<const double> w, std::span<double> out) const;

  /// trace(Gamma (x) Sigma).
  double covariance_trace() const;

  /// Per-tip conditional means (N x P, rows) given all other tips, using the
  /// root mean `root_mean`; conditional covariance of tip i is
  /// pre_variance()[i] * Sigma.
  RowMatrix tip_conditional_means(const Eigen::Ref<const RowMatrix>& x, const Eigen::VectorXd& root_mean,
                                  Workspace& ws) const;

  /// (X - M)' Gamma^{-1} (X - M), P x P.
  Eigen::MatrixXd centered_cross_product(const Eigen::Ref<const RowMatrix>& x,
                                         const Eigen::VectorXd& root_mean) const;

  /// log MN(X; 1 mu0', Gamma, Sigma).
  double log_density(const Eigen::Ref<const RowMatrix>& x, const Eigen::VectorXd& root_mean) const;

 private:
  void post_means(const Eigen::Ref<const RowMatrix>& tips, RowMatrix& mean) const;
  void pre_means(const RowMatrix& post, const Eigen::Ref<const Eigen::RowVectorXd>& root_mean,
                 RowMatrix& mean) const;

  std::shared_ptr<const Tree> tree_;
  double kappa_;
  Eigen::VectorXd post_var_, pre_var_, pre_partial_;
  // Message weights: m_v = w_left * m_left + w_right * m_right (post-order);
  // m~_u = w_sib * m_sibling + w_par * m~_parent (pre-order).
  Eigen::VectorXd post_w_left_, post_w_right_, pre_w_sib_, pre_w_par_;
  double log_det_gamma_ = 0.0;

  Eigen::MatrixXd sigma_, sigma_inv_;
  double log_det_sigma_ = 0.0;
};

/// Free-function forms of the products for callers holding raw inputs.
Eigen::VectorXd precision_vector_product(const Tree& tree, const Eigen::MatrixXd& trait_covariance,
                                         const RootPrior& root_prior, const Eigen::VectorXd& w);
Eigen::VectorXd precision_column(const Tree& tree, const Eigen::MatrixXd& trait_covariance,
                                 const RootPrior& root_prior, std::size_t i);

/// Dense NP x NP precision assembled column by column. Guarded at NP <= 5000.
Eigen::MatrixXd dense_precision(const TreeGaussian& gauss);

/// JSON dump of both passes for fixtures and debugging.
std::string traversal_stats_json(const PostOrderStats& post, const PreOrderStats& pre);

}  // namespace phyprobit
