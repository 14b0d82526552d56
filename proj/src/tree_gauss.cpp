#include "phyprobit/tree_gauss.hpp"

#include <cmath>

#include "json.hpp"
#include "phyprobit/error.hpp"

namespace phyprobit {

namespace {

// Product of two Gaussian messages about the same node with variances a and
// b (either may be zero, meaning the value is known exactly). Returns the
// combined variance and the weights on each message mean.
struct Combined {
  double variance;
  double weight_a;
  double weight_b;
  bool degenerate;
};

Combined combine(double a, double b) {
  if (a == 0.0 && b == 0.0) return {0.0, 0.5, 0.5, true};
  if (a == 0.0) return {0.0, 1.0, 0.0, false};
  if (b == 0.0) return {0.0, 0.0, 1.0, false};
  if (std::isinf(a)) return {b, 0.0, 1.0, false};
  if (std::isinf(b)) return {a, 1.0, 0.0, false};
  return {a * b / (a + b), b / (a + b), a / (a + b), false};
}

}  // namespace

PostOrderStats post_order_pass(const Tree& tree, const Eigen::Ref<const RowMatrix>& tip_values) {
  const std::size_t n = tree.tip_count();
  if (static_cast<std::size_t>(tip_values.rows()) != n) throw InputError("tip value rows must equal tip count");
  if (!tip_values.allFinite()) throw InputError("tip values must be finite");
  PostOrderStats out;
  out.mean = RowMatrix::Zero(tree.node_count(), tip_values.cols());
  out.variance = Eigen::VectorXd::Zero(tree.node_count());
  for (std::size_t v : tree.post_order()) {
    if (tree.is_tip(v)) {
      out.mean.row(v) = tip_values.row(v);
      continue;
    }
    const std::size_t u = tree.node(v).left, w = tree.node(v).right;
    const Combined c = combine(out.variance[u] + tree.length(u), out.variance[w] + tree.length(w));
    if (c.degenerate) throw InputError("zero-length cherry: both child branches have zero variance");
    out.variance[v] = c.variance;
    out.mean.row(v) = c.weight_a * out.mean.row(u) + c.weight_b * out.mean.row(w);
  }
  return out;
}

PreOrderStats pre_order_pass(const Tree& tree, const PostOrderStats& post, const RootPrior& root_prior) {
  const auto p = post.mean.cols();
  if (root_prior.mean.size() != p) throw InputError("root prior mean has the wrong length");
  PreOrderStats out;
  out.mean = RowMatrix::Zero(tree.node_count(), p);
  out.variance = Eigen::VectorXd::Zero(tree.node_count());
  out.partial_variance = Eigen::VectorXd::Zero(tree.node_count());
  const std::size_t root = tree.root();
  out.variance[root] = root_prior.variance_scale();
  out.partial_variance[root] = out.variance[root];
  out.mean.row(root) = root_prior.mean.transpose();
  for (std::size_t v : tree.pre_order()) {
    if (tree.is_tip(v)) continue;
    const std::size_t kids[2] = {tree.node(v).left, tree.node(v).right};
    for (int k = 0; k < 2; ++k) {
      const std::size_t u = kids[k], w = kids[1 - k];
      const Combined c = combine(post.variance[w] + tree.length(w), out.variance[v]);
      if (c.degenerate) throw InputError("degenerate tree covariance: node value fixed from both sides");
      out.partial_variance[u] = c.variance;
      out.variance[u] = c.variance + tree.length(u);
      out.mean.row(u) = c.weight_a * post.mean.row(w) + c.weight_b * out.mean.row(v);
    }
  }
  return out;
}

TreeGaussian::TreeGaussian(std::shared_ptr<const Tree> tree, double root_sample_size,
                           const Eigen::MatrixXd& trait_covariance)
    : tree_(std::move(tree)), kappa_(root_sample_size) {
  if (!tree_) throw InputError("tree is null");
  if (!(kappa_ > 0.0)) throw InputError("root prior sample size must be positive");
  const Tree& t = *tree_;
  const std::size_t nodes = t.node_count();
  post_var_ = Eigen::VectorXd::Zero(nodes);
  pre_var_ = Eigen::VectorXd::Zero(nodes);
  pre_partial_ = Eigen::VectorXd::Zero(nodes);
  post_w_left_ = post_w_right_ = pre_w_sib_ = pre_w_par_ = Eigen::VectorXd::Zero(nodes);

  log_det_gamma_ = 0.0;
  for (std::size_t v : t.post_order()) {
    if (t.is_tip(v)) continue;
    const std::size_t u = t.node(v).left, w = t.node(v).right;
    const double a = post_var_[u] + t.length(u), b = post_var_[w] + t.length(w);
    const Combined c = combine(a, b);
    if (c.degenerate)
      throw InputError("singular tree covariance: zero-length cherry joining tips '" +
                       (t.is_tip(u) ? t.labels()[u] : std::string("<internal>")) + "' and '" +
                       (t.is_tip(w) ? t.labels()[w] : std::string("<internal>")) + "'");
    post_var_[v] = c.variance;
    post_w_left_[v] = c.weight_a;
    post_w_right_[v] = c.weight_b;
    log_det_gamma_ += std::log(a + b);
  }
  const double root_var = std::isinf(kappa_) ? 0.0 : 1.0 / kappa_;
  const double root_factor = post_var_[t.root()] + root_var;
  if (!(root_factor > 0.0)) throw InputError("singular tree covariance: root is fixed and tips have zero variance");
  log_det_gamma_ += std::log(root_factor);

  pre_var_[t.root()] = pre_partial_[t.root()] = root_var;
  for (std::size_t v : t.pre_order()) {
    if (t.is_tip(v)) continue;
    const std::size_t kids[2] = {t.node(v).left, t.node(v).right};
    for (int k = 0; k < 2; ++k) {
      const std::size_t u = kids[k], w = kids[1 - k];
      const Combined c = combine(post_var_[w] + t.length(w), pre_var_[v]);
      if (c.degenerate) throw InputError("singular tree covariance: node value fixed from both sides");
      pre_partial_[u] = c.variance;
      pre_var_[u] = c.variance + t.length(u);
      pre_w_sib_[u] = c.weight_a;
      pre_w_par_[u] = c.weight_b;
    }
  }
  for (std::size_t i = 0; i < t.tip_count(); ++i)
    if (!(pre_var_[i] > 0.0)) throw InputError("singular tree covariance at tip '" + t.labels()[i] + "'");
  set_trait_covariance(trait_covariance);
}

void TreeGaussian::set_trait_covariance(const Eigen::MatrixXd& trait_covariance) {
  if (trait_covariance.rows() != trait_covariance.cols() || trait_covariance.rows() == 0)
    throw InputError("trait covariance must be square and non-empty");
  Eigen::LLT<Eigen::MatrixXd> llt(trait_covariance);
  if (llt.info() != Eigen::Success) throw NumericalError("trait covariance is not positive definite");
  sigma_ = trait_covariance;
  const auto p = trait_covariance.rows();
  sigma_inv_ = llt.solve(Eigen::MatrixXd::Identity(p, p));
  sigma_inv_ = 0.5 * (sigma_inv_ + sigma_inv_.transpose()).eval();
  log_det_sigma_ = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

void TreeGaussian::post_means(const Eigen::Ref<const RowMatrix>& tips, RowMatrix& mean) const {
  const Tree& t = *tree_;
  mean.resize(static_cast<Eigen::Index>(t.node_count()), tips.cols());
  mean.topRows(tips.rows()) = tips;
  for (std::size_t v : t.post_order()) {
    if (t.is_tip(v)) continue;
    const Tree::Node& nd = t.node(v);
    mean.row(v) = post_w_left_[v] * mean.row(nd.left) + post_w_right_[v] * mean.row(nd.right);
  }
}

void TreeGaussian::pre_means(const RowMatrix& post, const Eigen::Ref<const Eigen::RowVectorXd>& root_mean,
                             RowMatrix& mean) const {
  const Tree& t = *tree_;
  mean.resize(post.rows(), post.cols());
  mean.row(t.root()) = root_mean;
  for (std::size_t v : t.pre_order()) {
    if (t.is_tip(v)) continue;
    const Tree::Node& nd = t.node(v);
    mean.row(nd.left) = pre_w_sib_[nd.left] * post.row(nd.right) + pre_w_par_[nd.left] * mean.row(v);
    mean.row(nd.right) = pre_w_sib_[nd.right] * post.row(nd.left) + pre_w_par_[nd.right] * mean.row(v);
  }
}

RowMatrix TreeGaussian::tree_precision_multiply(const Eigen::Ref<const RowMatrix>& w, Workspace& ws) const {
  const auto n = static_cast<Eigen::Index>(taxa());
  if (w.rows() != n) throw InputError("tree precision product: row count must equal tip count");
  post_means(w, ws.post_mean);
  pre_means(ws.post_mean, Eigen::RowVectorXd::Zero(w.cols()), ws.pre_mean);
  RowMatrix out = w - ws.pre_mean.topRows(n);
  for (Eigen::Index i = 0; i < n; ++i) out.row(i) /= pre_var_[i];
  return out;
}

RowMatrix TreeGaussian::tree_precision_multiply(const Eigen::Ref<const RowMatrix>& w) const {
  Workspace ws;
  return tree_precision_multiply(w, ws);
}

void TreeGaussian::multiply(std::span<const double> w, std::span<double> out, Workspace& ws) const {
  const auto n = static_cast<Eigen::Index>(taxa());
  const auto p = static_cast<Eigen::Index>(traits());
  if (w.size() != dim() || out.size() != dim()) throw InputError("precision product: vector length must be N*P");
  Eigen::Map<const RowMatrix> wm(w.data(), n, p);
  post_means(wm, ws.post_mean);
  pre_means(ws.post_mean, Eigen::RowVectorXd::Zero(p), ws.pre_mean);
  // Block i is Q_i (w_i - m~_i) with Q_i = Sigma^{-1} / p~_i.
  ws.pre_mean.topRows(n) = wm - ws.pre_mean.topRows(n);
  for (Eigen::Index i = 0; i < n; ++i) ws.pre_mean.row(i) /= pre_var_[i];
  Eigen::Map<RowMatrix> om(out.data(), n, p);
  om.noalias() = ws.pre_mean.topRows(n) * sigma_inv_;
}

Eigen::VectorXd TreeGaussian::multiply(const Eigen::VectorXd& w) const {
  Workspace ws;
  Eigen::VectorXd out(w.size());
  multiply(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())),
           std::span<double>(out.data(), static_cast<std::size_t>(out.size())), ws);
  return out;
}

void TreeGaussian::tree_precision_column(std::size_t taxon, Eigen::Ref<Eigen::VectorXd> out, Workspace& ws) const {
  const Tree& t = *tree_;
  const std::size_t nodes = t.node_count();
  if (taxon >= taxa()) throw InputError("tree precision column: taxon out of range");
  ws.post_scalar.setZero(static_cast<Eigen::Index>(nodes));
  ws.post_scalar[static_cast<Eigen::Index>(taxon)] = 1.0;
  // Only ancestors of the taxon carry nonzero post-order means.
  std::size_t child = taxon;
  for (std::size_t v = t.node(taxon).parent; v != Tree::kNone; child = v, v = t.node(v).parent) {
    const double wgt = (t.node(v).left == child) ? post_w_left_[v] : post_w_right_[v];
    ws.post_scalar[v] = wgt * ws.post_scalar[child];
  }
  ws.pre_scalar.resize(static_cast<Eigen::Index>(nodes));
  ws.pre_scalar[t.root()] = 0.0;
  for (std::size_t v : t.pre_order()) {
    if (t.is_tip(v)) continue;
    const Tree::Node& nd = t.node(v);
    ws.pre_scalar[nd.left] = pre_w_sib_[nd.left] * ws.post_scalar[nd.right] + pre_w_par_[nd.left] * ws.pre_scalar[v];
    ws.pre_scalar[nd.right] = pre_w_sib_[nd.right] * ws.post_scalar[nd.left] + pre_w_par_[nd.right] * ws.pre_scalar[v];
  }
  const auto n = static_cast<Eigen::Index>(taxa());
  for (Eigen::Index i = 0; i < n; ++i)
    out[i] = ((i == static_cast<Eigen::Index>(taxon) ? 1.0 : 0.0) - ws.pre_scalar[i]) / pre_var_[i];
}

void TreeGaussian::column(std::size_t i, std::span<double> out, Workspace& ws) const {
  if (i >= dim()) throw InputError("precision column index out of range");
  if (out.size() != dim()) throw InputError("precision column: output length must be N*P");
  const std::size_t p = traits();
  const auto n = static_cast<Eigen::Index>(taxa());
  Eigen::VectorXd g(n);
  tree_precision_column(i / p, g, ws);
  Eigen::Map<RowMatrix> om(out.data(), n, static_cast<Eigen::Index>(p));
  om.noalias() = g * sigma_inv_.row(static_cast<Eigen::Index>(i % p));
}

Eigen::VectorXd TreeGaussian::column(std::size_t i) const {
  Workspace ws;
  Eigen::VectorXd out(static_cast<Eigen::Index>(dim()));
  column(i, std::span<double>(out.data(), dim()), ws);
  return out;
}

void TreeGaussian::covariance_multiply(std::span<const double> w, std::span<double> out) const {
  const Tree& t = *tree_;
  const auto n = static_cast<Eigen::Index>(taxa());
  const auto p = static_cast<Eigen::Index>(traits());
  if (w.size() != dim() || out.size() != dim()) throw InputError("covariance product: vector length must be N*P");
  Eigen::Map<const RowMatrix> wm(w.data(), n, p);
  // Psi W: each branch contributes length * (sum of rows below it) to every
  // tip below it.
  RowMatrix below(static_cast<Eigen::Index>(t.node_count()), p);
  below.topRows(n) = wm;
  for (std::size_t v : t.post_order())
    if (!t.is_tip(v)) below.row(v) = below.row(t.node(v).left) + below.row(t.node(v).right);
  RowMatrix acc(static_cast<Eigen::Index>(t.node_count()), p);
  const double root_var = std::isinf(kappa_) ? 0.0 : 1.0 / kappa_;
  acc.row(t.root()) = root_var * below.row(t.root());
  for (std::size_t v : t.pre_order()) {
    if (v == t.root()) continue;
    acc.row(v) = acc.row(t.node(v).parent) + t.length(v) * below.row(v);
  }
  Eigen::Map<RowMatrix> om(out.data(), n, p);
  om.noalias() = acc.topRows(n) * sigma_;
}

double TreeGaussian::covariance_trace() const {
  double tr_gamma = 0.0;
  const double root_var = std::isinf(kappa_) ? 0.0 : 1.0 / kappa_;
  for (double d : tree_->tip_depths()) tr_gamma += d + root_var;
  return tr_gamma * sigma_.trace();
}

RowMatrix TreeGaussian::tip_conditional_means(const Eigen::Ref<const RowMatrix>& x, const Eigen::VectorXd& root_mean,
                                              Workspace& ws) const {
  post_means(x, ws.post_mean);
  pre_means(ws.post_mean, root_mean.transpose(), ws.pre_mean);
  return ws.pre_mean.topRows(x.rows());
}

Eigen::MatrixXd TreeGaussian::centered_cross_product(const Eigen::Ref<const RowMatrix>& x,
                                                     const Eigen::VectorXd& root_mean) const {
  const RowMatrix centered = x.rowwise() - root_mean.transpose();
  const RowMatrix g = tree_precision_multiply(centered);
  Eigen::MatrixXd s = centered.transpose() * g;
  return 0.5 * (s + s.transpose());
}

double TreeGaussian::log_density(const Eigen::Ref<const RowMatrix>& x, const Eigen::VectorXd& root_mean) const {
  const double n = static_cast<double>(taxa()), p = static_cast<double>(traits());
  const Eigen::MatrixXd s = centered_cross_product(x, root_mean);
  const double quad = (sigma_inv_.array() * s.array()).sum();
  return -0.5 * (n * p * std::log(2.0 * M_PI) + p * log_det_gamma_ + n * log_det_sigma_ + quad);
}

Eigen::VectorXd precision_vector_product(const Tree& tree, const Eigen::MatrixXd& trait_covariance,
                                         const RootPrior& root_prior, const Eigen::VectorXd& w) {
  TreeGaussian g(std::make_shared<const Tree>(tree), root_prior.sample_size, trait_covariance);
  return g.multiply(w);
}

Eigen::VectorXd precision_column(const Tree& tree, const Eigen::MatrixXd& trait_covariance,
                                 const RootPrior& root_prior, std::size_t i) {
  TreeGaussian g(std::make_shared<const Tree>(tree), root_prior.sample_size, trait_covariance);
  return g.column(i);
}

Eigen::MatrixXd dense_precision(const TreeGaussian& gauss) {
  const std::size_t d = gauss.dim();
  if (d > 5000) throw InputError("dense precision refused: N*P = " + std::to_string(d) + " exceeds 5000");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  TreeGaussian::Workspace ws;
  Eigen::VectorXd col(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i) {
    gauss.column(i, std::span<double>(col.data(), d), ws);
    out.col(static_cast<Eigen::Index>(i)) = col;
  }
  return out;
}

std::string traversal_stats_json(const PostOrderStats& post, const PreOrderStats& pre) {
  auto rows = [](const RowMatrix& m) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      std::vector<double> r(m.row(i).data(), m.row(i).data() + m.cols());
      out.push_back(r);
    }
    return out;
  };
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j;
  j["post_order"] = {{"mean", rows(post.mean)}, {"variance", vec(post.variance)}};
  j["pre_order"] = {{"mean", rows(pre.mean)},
                    {"variance", vec(pre.variance)},
                    {"partial_variance", vec(pre.partial_variance)}};
  return j.dump(2);
}

}  // namespace phyprobit
