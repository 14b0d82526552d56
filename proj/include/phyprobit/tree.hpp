#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace phyprobit {

/// Rooted bifurcating tree with branch lengths.
///
/// Node numbering: tips occupy 0..N-1 in sorted label order (so tip i is row i
/// of every trait matrix), internal nodes follow, and the root is the last
/// node (2N-2). A single-tip tree is just the root.
class Tree {
 public:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  struct Node {
    std::size_t parent = kNone;
    std::size_t left = kNone;
    std::size_t right = kNone;
    double length = 0.0;  // branch to parent; 0 at the root
  };

  Tree() = default;

  /// Builds and validates a tree from an arbitrary node list. `labels[i]`
  /// names node i when it is a tip and is ignored otherwise. Nodes are
  /// renumbered into canonical order.
  static Tree from_nodes(const std::vector<Node>& nodes,
                         const std::vector<std::string>& labels);

  std::size_t tip_count() const { return labels_.size(); }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t root() const { return nodes_.size() - 1; }
  bool is_tip(std::size_t i) const { return i < labels_.size(); }

  const Node& node(std::size_t i) const { return nodes_[i]; }
  double length(std::size_t i) const { return nodes_[i].length; }
  const std::vector<std::string>& labels() const { return labels_; }

  /// Index of the tip carrying `label`, or kNone.
  std::size_t tip_index(std::string_view label) const;

  /// Children before parents; ends with the root.
  const std::vector<std::size_t>& post_order() const { return post_order_; }
  /// Parents before children; starts with the root.
  const std::vector<std::size_t>& pre_order() const { return pre_order_; }

  /// Sum of branch lengths from each tip to the root.
  std::vector<double> tip_depths() const;

 private:
  std::vector<Node> nodes_;
  std::vector<std::string> labels_;
  std::vector<std::size_t> post_order_;
  std::vector<std::size_t> pre_order_;
};

/// Conjugate root prior: root ~ N(mean, Sigma / sample_size).
struct RootPrior {
  Eigen::VectorXd mean;
  double sample_size = 10.0;

  RootPrior() = default;
  RootPrior(Eigen::VectorXd m, double kappa);

  /// Root variance scale 1/kappa (0 when kappa is infinite).
  double variance_scale() const;
};

struct FullTree {};
struct DatedStar {
  std::map<std::string, double> dates;
  double root_date = 0.0;
};
struct UltrametricStar {};

using TreeCovarianceMode = std::variant<FullTree, DatedStar, UltrametricStar>;

std::string mode_name(const TreeCovarianceMode& mode);

/// Parses one Newick tree. Throws InputError (with a character offset) on
/// syntax errors, polytomies, missing or negative branch lengths, and
/// duplicate tip labels.
Tree parse_newick(std::string_view text);

/// Parses a file holding one Newick tree per non-empty line.
std::vector<Tree> read_newick_file(const std::string& path);

/// Tree whose tips are independent given the root: a caterpillar with
/// zero-length internal branches and the given tip branch lengths.
Tree make_star_tree(const std::vector<std::string>& labels,
                    const std::vector<double>& tip_lengths);

/// Tree actually used for inference under `mode`. FullTree returns `tree`
/// unchanged; the star modes keep its tip labels but replace the topology.
Tree apply_covariance_mode(const Tree& tree, const TreeCovarianceMode& mode);

/// Dense N x N across-taxa covariance Psi + (1/kappa) * 11'. kappa may be
/// +infinity to drop the root term. Small-N utility and test oracle only.
Eigen::MatrixXd tree_covariance_dense(const Tree& tree,
                                      const TreeCovarianceMode& mode,
                                      double kappa);

/// Tip label to row index, as a JSON object string.
std::string tip_map_json(const Tree& tree);

}  // namespace phyprobit
