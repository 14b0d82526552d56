#include "phyprobit/tree.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "phyprobit/error.hpp"
#include "json.hpp"

namespace phyprobit {

namespace {

bool has_children(const Tree::Node& n) { return n.left != Tree::kNone || n.right != Tree::kNone; }

}  // namespace

Tree Tree::from_nodes(const std::vector<Node>& nodes, const std::vector<std::string>& labels) {
  const std::size_t n = nodes.size();
  if (n == 0) throw InputError("tree has no nodes");
  if (labels.size() != n) throw InputError("tree label list does not match node count");

  std::size_t root = kNone;
  std::vector<std::size_t> child_count(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Node& nd = nodes[i];
    if (nd.parent == kNone) {
      if (root != kNone) throw InputError("tree has more than one root");
      root = i;
    } else {
      if (nd.parent >= n) throw InputError("tree node has an out-of-range parent");
      ++child_count[nd.parent];
      if (!std::isfinite(nd.length) || nd.length < 0.0)
        throw InputError("branch length must be finite and non-negative");
    }
    for (std::size_t c : {nd.left, nd.right}) {
      if (c != kNone && (c >= n || nodes[c].parent != i))
        throw InputError("tree child/parent links are inconsistent");
    }
    if ((nd.left == kNone) != (nd.right == kNone)) throw InputError("internal node must have exactly two children");
  }
  if (root == kNone) throw InputError("tree has no root");
  for (std::size_t i = 0; i < n; ++i) {
    if (has_children(nodes[i]) && child_count[i] != 2) throw InputError("tree node is not bifurcating");
    if (!has_children(nodes[i]) && child_count[i] != 0) throw InputError("tree child/parent links are inconsistent");
  }

  // Iterative post-order from the root; also detects unreachable nodes (cycles).
  std::vector<std::size_t> post;
  post.reserve(n);
  {
    std::vector<std::pair<std::size_t, bool>> stack{{root, false}};
    while (!stack.empty()) {
      auto [v, expanded] = stack.back();
      stack.pop_back();
      if (expanded || !has_children(nodes[v])) {
        post.push_back(v);
        if (post.size() > n) throw InputError("tree contains a cycle");
        continue;
      }
      stack.emplace_back(v, true);
      stack.emplace_back(nodes[v].right, false);
      stack.emplace_back(nodes[v].left, false);
    }
  }
  if (post.size() != n) throw InputError("tree is not connected");

  std::vector<std::size_t> tips;
  for (std::size_t i = 0; i < n; ++i)
    if (!has_children(nodes[i])) tips.push_back(i);
  const std::size_t n_tips = tips.size();
  if (n != 2 * n_tips - 1) throw InputError("tree is not bifurcating");

  std::set<std::string> seen;
  for (std::size_t t : tips) {
    if (labels[t].empty()) throw InputError("tree tip without a label");
    if (!seen.insert(labels[t]).second) throw InputError("duplicate tip label '" + labels[t] + "'");
  }
  std::sort(tips.begin(), tips.end(), [&](std::size_t a, std::size_t b) { return labels[a] < labels[b]; });

  std::vector<std::size_t> new_index(n, kNone);
  for (std::size_t k = 0; k < n_tips; ++k) new_index[tips[k]] = k;
  std::size_t next = n_tips;
  for (std::size_t v : post)
    if (has_children(nodes[v])) new_index[v] = next++;
  if (n_tips == 1) new_index[root] = 0;

  Tree tree;
  tree.nodes_.resize(n);
  tree.labels_.resize(n_tips);
  for (std::size_t i = 0; i < n; ++i) {
    Node& out = tree.nodes_[new_index[i]];
    const Node& in = nodes[i];
    out.parent = in.parent == kNone ? kNone : new_index[in.parent];
    out.left = in.left == kNone ? kNone : new_index[in.left];
    out.right = in.right == kNone ? kNone : new_index[in.right];
    out.length = in.parent == kNone ? 0.0 : in.length;
    if (!has_children(in)) tree.labels_[new_index[i]] = labels[i];
  }
  tree.post_order_.reserve(n);
  for (std::size_t v : post) tree.post_order_.push_back(new_index[v]);
  tree.pre_order_.assign(tree.post_order_.rbegin(), tree.post_order_.rend());
  // Reversed post-order visits every parent before its children.
  return tree;
}

std::size_t Tree::tip_index(std::string_view label) const {
  auto it = std::lower_bound(labels_.begin(), labels_.end(), label,
                             [](const std::string& a, std::string_view b) { return a < b; });
  if (it == labels_.end() || *it != label) return kNone;
  return static_cast<std::size_t>(it - labels_.begin());
}

std::vector<double> Tree::tip_depths() const {
  std::vector<double> depth(nodes_.size(), 0.0);
  for (std::size_t v : pre_order_)
    if (nodes_[v].parent != kNone) depth[v] = depth[nodes_[v].parent] + nodes_[v].length;
  depth.resize(tip_count());
  return depth;
}

RootPrior::RootPrior(Eigen::VectorXd m, double kappa) : mean(std::move(m)), sample_size(kappa) {
  if (!(kappa > 0.0)) throw InputError("root prior sample size must be positive");
}

double RootPrior::variance_scale() const { return std::isinf(sample_size) ? 0.0 : 1.0 / sample_size; }

std::string mode_name(const TreeCovarianceMode& mode) {
  if (std::holds_alternative<FullTree>(mode)) return "full_tree";
  if (std::holds_alternative<DatedStar>(mode)) return "dated_star";
  return "ultrametric_star";
}

namespace {

class NewickParser {
 public:
  explicit NewickParser(std::string_view text) : s_(text) {}

  Tree parse() {
    std::vector<std::size_t> open;  // internal nodes awaiting ')'
    std::size_t last = Tree::kNone;  // most recently completed subtree
    bool expect_subtree = true;

    skip();
    while (true) {
      skip();
      if (pos_ >= s_.size()) fail("unexpected end of input (missing ';')");
      const char c = s_[pos_];
      if (expect_subtree) {
        if (c == '(') {
          const std::size_t id = add_node(open.empty() ? Tree::kNone : open.back());
          open.push_back(id);
          ++pos_;
          continue;
        }
        if (is_delim(c)) fail(std::string("expected a subtree, found '") + c + "'");
        const std::size_t id = add_node(open.empty() ? Tree::kNone : open.back());
        labels_[id] = read_label();
        read_length(id);
        last = id;
        expect_subtree = false;
        continue;
      }
      if (c == ',') {
        if (open.empty()) fail("',' outside of parentheses");
        ++pos_;
        expect_subtree = true;
        continue;
      }
      if (c == ')') {
        if (open.empty()) fail("unbalanced ')'");
        const std::size_t id = open.back();
        open.pop_back();
        ++pos_;
        if (children_[id].size() != 2)
          fail("node with " + std::to_string(children_[id].size()) + " children (tree must be bifurcating)");
        skip();
        if (pos_ < s_.size() && !is_delim(s_[pos_])) read_label();  // internal labels are ignored
        read_length(id);
        last = id;
        continue;
      }
      if (c == ';') {
        if (!open.empty()) fail("unbalanced '(' before ';'");
        ++pos_;
        skip();
        if (pos_ != s_.size()) fail("trailing characters after ';'");
        break;
      }
      fail(std::string("unexpected character '") + c + "'");
    }
    (void)last;

    std::vector<Tree::Node> nodes(parents_.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      nodes[i].parent = parents_[i];
      if (parents_[i] != Tree::kNone) {
        if (!has_length_[i]) fail_at(offsets_[i], "missing branch length");
        nodes[i].length = lengths_[i];
      }
      if (!children_[i].empty()) {
        nodes[i].left = children_[i][0];
        nodes[i].right = children_[i][1];
      } else if (labels_[i].empty()) {
        fail_at(offsets_[i], "tip without a label");
      }
    }
    try {
      return Tree::from_nodes(nodes, labels_);
    } catch (const InputError& e) {
      throw InputError(std::string("newick: ") + e.what());
    }
  }

 private:
  static bool is_delim(char c) {
    return c == '(' || c == ')' || c == ',' || c == ':' || c == ';' || c == '[' ||
           std::isspace(static_cast<unsigned char>(c));
  }

  [[noreturn]] void fail(const std::string& msg) const { fail_at(pos_, msg); }
  [[noreturn]] static void fail_at(std::size_t at, const std::string& msg) {
    throw InputError("newick: " + msg + " at offset " + std::to_string(at));
  }

  void skip() {
    while (pos_ < s_.size()) {
      if (std::isspace(static_cast<unsigned char>(s_[pos_]))) {
        ++pos_;
      } else if (s_[pos_] == '[') {
        const auto close = s_.find(']', pos_);
        if (close == std::string_view::npos) fail("unterminated comment");
        pos_ = close + 1;
      } else {
        break;
      }
    }
  }

  std::size_t add_node(std::size_t parent) {
    const std::size_t id = parents_.size();
    parents_.push_back(parent);
    labels_.emplace_back();
    lengths_.push_back(0.0);
    has_length_.push_back(false);
    offsets_.push_back(pos_);
    children_.emplace_back();
    if (parent != Tree::kNone) {
      if (children_[parent].size() == 2) fail("node with more than 2 children (tree must be bifurcating)");
      children_[parent].push_back(id);
    } else if (id != 0) {
      fail("more than one top-level subtree");
    }
    return id;
  }

  std::string read_label() {
    skip();
    std::string out;
    if (pos_ < s_.size() && s_[pos_] == '\'') {
      ++pos_;
      while (true) {
        if (pos_ >= s_.size()) fail("unterminated quoted label");
        if (s_[pos_] == '\'') {
          if (pos_ + 1 < s_.size() && s_[pos_ + 1] == '\'') {
            out += '\'';
            pos_ += 2;
            continue;
          }
          ++pos_;
          break;
        }
        out += s_[pos_++];
      }
      return out;
    }
    while (pos_ < s_.size() && !is_delim(s_[pos_])) out += s_[pos_++];
    return out;
  }

  void read_length(std::size_t id) {
    skip();
    if (pos_ >= s_.size() || s_[pos_] != ':') return;
    ++pos_;
    skip();
    const std::size_t start = pos_;
    while (pos_ < s_.size() && !is_delim(s_[pos_])) ++pos_;
    const std::string tok(s_.substr(start, pos_ - start));
    if (tok.empty()) fail_at(start, "empty branch length");
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      fail_at(start, "invalid branch length '" + tok + "'");
    }
    if (used != tok.size()) fail_at(start, "invalid branch length '" + tok + "'");
    if (!std::isfinite(v) || v < 0.0) fail_at(start, "negative or non-finite branch length '" + tok + "'");
    lengths_[id] = v;
    has_length_[id] = true;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  std::vector<std::size_t> parents_;
  std::vector<std::string> labels_;
  std::vector<double> lengths_;
  std::vector<bool> has_length_;
  std::vector<std::size_t> offsets_;
  std::vector<std::vector<std::size_t>> children_;
};

}  // namespace

Tree parse_newick(std::string_view text) { return NewickParser(text).parse(); }

std::vector<Tree> read_newick_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open tree file '" + path + "'");
  std::vector<Tree> trees;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    try {
      trees.push_back(parse_newick(line));
    } catch (const InputError& e) {
      throw InputError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (trees.empty()) throw InputError("tree file '" + path + "' contains no trees");
  for (const Tree& t : trees)
    if (t.labels() != trees.front().labels()) throw InputError("trees in '" + path + "' have different tip sets");
  return trees;
}

Tree make_star_tree(const std::vector<std::string>& labels, const std::vector<double>& tip_lengths) {
  const std::size_t n = labels.size();
  if (n == 0 || tip_lengths.size() != n) throw InputError("star tree needs one length per label");
  if (n == 1) return Tree::from_nodes({Tree::Node{}}, labels);
  // Tips 0..n-1, then spine nodes n..2n-2; spine node n+k joins tip k with
  // the next spine node (or the last tip), all spine branches zero.
  std::vector<Tree::Node> nodes(2 * n - 1);
  std::vector<std::string> names(2 * n - 1);
  for (std::size_t k = 0; k < n; ++k) {
    names[k] = labels[k];
    nodes[k].length = tip_lengths[k];
  }
  for (std::size_t k = 0; k + 1 < n; ++k) {
    const std::size_t spine = n + k;
    const std::size_t other = (k + 2 < n) ? spine + 1 : n - 1;
    nodes[spine].left = k;
    nodes[spine].right = other;
    nodes[k].parent = spine;
    nodes[other].parent = spine;
    if (other != n - 1) nodes[other].length = 0.0;
  }
  return Tree::from_nodes(nodes, names);
}

namespace {

std::vector<double> star_lengths(const Tree& tree, const TreeCovarianceMode& mode) {
  const auto& labels = tree.labels();
  std::vector<double> lengths(labels.size(), 1.0);
  if (const auto* dated = std::get_if<DatedStar>(&mode)) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto it = dated->dates.find(labels[i]);
      if (it == dated->dates.end()) throw InputError("no sampling date for taxon '" + labels[i] + "'");
      if (!std::isfinite(it->second) || it->second < dated->root_date)
        throw InputError("sampling date of '" + labels[i] + "' precedes the root date");
      lengths[i] = it->second - dated->root_date;
    }
  }
  return lengths;
}

}  // namespace

Tree apply_covariance_mode(const Tree& tree, const TreeCovarianceMode& mode) {
  if (std::holds_alternative<FullTree>(mode)) return tree;
  return make_star_tree(tree.labels(), star_lengths(tree, mode));
}

Eigen::MatrixXd tree_covariance_dense(const Tree& tree, const TreeCovarianceMode& mode, double kappa) {
  if (!(kappa > 0.0)) throw InputError("root prior sample size must be positive");
  const std::size_t n = tree.tip_count();
  Eigen::MatrixXd psi = Eigen::MatrixXd::Zero(n, n);
  if (std::holds_alternative<FullTree>(mode)) {
    // Psi_ij = length of the root path shared by tips i and j.
    std::vector<double> depth(tree.node_count(), 0.0);
    for (std::size_t v : tree.pre_order())
      if (tree.node(v).parent != Tree::kNone) depth[v] = depth[tree.node(v).parent] + tree.length(v);
    std::vector<std::vector<std::size_t>> ancestors(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t v = i; v != Tree::kNone; v = tree.node(v).parent) ancestors[i].push_back(v);
    for (std::size_t i = 0; i < n; ++i) {
      std::set<std::size_t> mine(ancestors[i].begin(), ancestors[i].end());
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t v : ancestors[j]) {
          if (mine.count(v)) {
            psi(i, j) = depth[v];
            break;
          }
        }
      }
    }
  } else {
    const auto lengths = star_lengths(tree, mode);
    for (std::size_t i = 0; i < n; ++i) psi(i, i) = lengths[i];
  }
  const double c = std::isinf(kappa) ? 0.0 : 1.0 / kappa;
  return psi.array() + c;
}

std::string tip_map_json(const Tree& tree) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < tree.tip_count(); ++i) j[tree.labels()[i]] = i;
  return j.dump();
}

}  // namespace phyprobit
