#include "phyprobit/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include <boost/algorithm/string/trim.hpp>
#include <boost/tokenizer.hpp>

#include "phyprobit/error.hpp"

namespace phyprobit {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string> split_csv_line(const std::string& line) {
  using Tokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;
  std::vector<std::string> out;
  try {
    Tokenizer tok(line);
    for (const auto& field : tok) out.push_back(boost::algorithm::trim_copy(field));
  } catch (const boost::escaped_list_error& e) {
    throw InputError(std::string("malformed CSV line: ") + e.what());
  }
  return out;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  std::istringstream in(s);
  in.imbue(std::locale::classic());
  in >> out;
  return in && in.peek() == std::char_traits<char>::eof();
}

}  // namespace

bool TraitData::observed(std::size_t i, std::size_t j) const {
  return !std::isnan(values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
}

std::vector<std::uint8_t> TraitData::free_scale() const {
  std::vector<std::uint8_t> out(kinds.size());
  for (std::size_t j = 0; j < kinds.size(); ++j) out[j] = kinds[j] == TraitKind::kContinuous ? 1 : 0;
  return out;
}

TraitData load_traits(std::istream& csv, const std::vector<ColumnSpec>& spec, const Tree& tree) {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() {
    while (std::getline(csv, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!boost::algorithm::trim_copy(line).empty()) return true;
    }
    return false;
  };
  if (!next_line()) throw InputError("trait CSV is empty");
  const std::vector<std::string> header = split_csv_line(line);
  if (header.size() < 2) throw InputError("trait CSV needs a taxon column and at least one trait column");

  std::map<std::string, std::size_t> spec_index;
  for (std::size_t k = 0; k < spec.size(); ++k)
    if (!spec_index.emplace(spec[k].name, k).second) throw InputError("trait '" + spec[k].name + "' declared twice");
  std::vector<std::size_t> csv_to_spec(header.size(), 0);
  std::vector<bool> seen(spec.size(), false);
  for (std::size_t c = 1; c < header.size(); ++c) {
    auto it = spec_index.find(header[c]);
    if (it == spec_index.end()) throw InputError("trait CSV column '" + header[c] + "' has no column specification");
    if (seen[it->second]) throw InputError("trait CSV column '" + header[c] + "' appears twice");
    seen[it->second] = true;
    csv_to_spec[c] = it->second;
  }
  for (std::size_t k = 0; k < spec.size(); ++k)
    if (!seen[k]) throw InputError("declared trait '" + spec[k].name + "' is missing from the trait CSV");
  for (const auto& s : spec)
    if (s.kind == TraitKind::kBinary && (s.negative == s.positive || s.negative == kMissingToken ||
                                         s.positive == kMissingToken))
      throw InputError("binary coding for '" + s.name + "' must use two distinct tokens other than NA");

  // Canonical column order: binary traits first, each group in spec order.
  TraitData out;
  std::vector<std::size_t> spec_to_col(spec.size());
  for (TraitKind kind : {TraitKind::kBinary, TraitKind::kContinuous})
    for (std::size_t k = 0; k < spec.size(); ++k)
      if (spec[k].kind == kind) {
        spec_to_col[k] = out.names.size();
        out.names.push_back(spec[k].name);
        out.kinds.push_back(kind);
      }
  out.binary_count = static_cast<std::size_t>(std::count(out.kinds.begin(), out.kinds.end(), TraitKind::kBinary));

  const std::size_t n = tree.tip_count(), p = spec.size();
  out.taxa = tree.labels();
  out.values = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p), kNaN);
  std::vector<bool> row_seen(n, false);
  while (next_line()) {
    const auto fields = split_csv_line(line);
    const std::string where = "trait CSV line " + std::to_string(line_no);
    if (fields.size() != header.size())
      throw InputError(where + ": expected " + std::to_string(header.size()) + " fields, found " +
                       std::to_string(fields.size()));
    const std::size_t row = tree.tip_index(fields[0]);
    if (row == Tree::kNone) throw InputError(where + ": taxon '" + fields[0] + "' is not a tip of the tree");
    if (row_seen[row]) throw InputError(where + ": taxon '" + fields[0] + "' appears twice");
    row_seen[row] = true;
    for (std::size_t c = 1; c < fields.size(); ++c) {
      const ColumnSpec& s = spec[csv_to_spec[c]];
      const auto col = static_cast<Eigen::Index>(spec_to_col[csv_to_spec[c]]);
      const std::string& cell = fields[c];
      if (cell == kMissingToken) continue;
      double v = 0.0;
      if (s.kind == TraitKind::kBinary) {
        if (cell == s.positive) {
          v = 1.0;
        } else if (cell == s.negative) {
          v = -1.0;
        } else {
          throw InputError(where + ", column '" + s.name + "': value '" + cell + "' is outside the binary coding {" +
                           s.negative + ", " + s.positive + "}");
        }
      } else if (!parse_double(cell, v) || !std::isfinite(v)) {
        throw InputError(where + ", column '" + s.name + "': '" + cell + "' is not a finite number");
      }
      out.values(static_cast<Eigen::Index>(row), col) = v;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!row_seen[i]) throw InputError("tree tip '" + tree.labels()[i] + "' has no row in the trait CSV");
  return out;
}

TraitData load_traits_file(const std::string& path, const std::vector<ColumnSpec>& spec, const Tree& tree) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open trait file '" + path + "'");
  return load_traits(in, spec, tree);
}

void write_traits_csv(std::ostream& out, const TraitData& traits) {
  out << "taxon";
  for (const auto& name : traits.names) out << ',' << name;
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < traits.taxa_count(); ++i) {
    out << traits.taxa[i];
    for (std::size_t j = 0; j < traits.trait_count(); ++j) {
      out << ',';
      const double v = traits.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (std::isnan(v)) {
        out << kMissingToken;
      } else if (traits.kinds[j] == TraitKind::kBinary) {
        out << (v > 0 ? '1' : '0');
      } else {
        out << v;
      }
    }
    out << '\n';
  }
}

TruncatedNormalTarget build_target(const TraitData& traits, std::shared_ptr<const TreeGaussian> gauss,
                                   const Eigen::VectorXd& root_mean) {
  const std::size_t n = traits.taxa_count(), p = traits.trait_count();
  if (gauss->taxa() != n || gauss->traits() != p) throw InputError("tree Gaussian does not match the trait data");
  if (static_cast<std::size_t>(root_mean.size()) != p) throw InputError("root mean length does not match the traits");
  TruncatedNormalTarget t;
  t.mean = root_mean.replicate(static_cast<Eigen::Index>(n), 1);
  t.precision = std::make_shared<TreePrecision>(std::move(gauss));
  t.sign.assign(n * p, Orthant::kFree);
  t.fixed.assign(n * p, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      if (!traits.observed(i, j)) continue;
      const std::size_t k = i * p + j;
      if (traits.kinds[j] == TraitKind::kBinary) {
        t.sign[k] = traits.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) > 0 ? Orthant::kPositive
                                                                                                 : Orthant::kNegative;
      } else {
        t.fixed[k] = 1;
      }
    }
  return t;
}

bool consistent(const Eigen::Ref<const RowMatrix>& x, const TraitData& traits) {
  if (static_cast<std::size_t>(x.rows()) != traits.taxa_count() ||
      static_cast<std::size_t>(x.cols()) != traits.trait_count())
    throw InputError("latent matrix shape does not match the trait data");
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double y = traits.values(i, j);
      if (std::isnan(y)) continue;
      const double v = x(i, j);
      if (traits.kinds[static_cast<std::size_t>(j)] == TraitKind::kBinary) {
        if (!(y > 0 ? v > 0.0 : v < 0.0)) return false;
      } else if (v != y) {
        return false;
      }
    }
  return true;
}

Eigen::MatrixXd observe(const Eigen::Ref<const RowMatrix>& x, const TraitData& traits) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Constant(x.rows(), x.cols(), kNaN);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (std::isnan(traits.values(i, j))) continue;
      const double v = x(i, j);
      if (traits.kinds[static_cast<std::size_t>(j)] == TraitKind::kBinary) {
        out(i, j) = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      } else {
        out(i, j) = v;
      }
    }
  return out;
}

double augmented_log_likelihood(const Eigen::Ref<const RowMatrix>& x, const TraitData& traits,
                                const TreeGaussian& gauss, const Eigen::VectorXd& root_mean) {
  if (!consistent(x, traits)) return -std::numeric_limits<double>::infinity();
  return gauss.log_density(x, root_mean);
}

RowMatrix initialize_latent(const TraitData& traits, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(traits.taxa_count());
  const auto p = static_cast<Eigen::Index>(traits.trait_count());
  RowMatrix x(n, p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) {
      const double y = traits.values(i, j);
      const double z = rng.normal();
      if (std::isnan(y)) {
        x(i, j) = z;
      } else if (traits.kinds[static_cast<std::size_t>(j)] == TraitKind::kBinary) {
        // |z| is zero with probability zero; guard anyway for a strictly signed start.
        x(i, j) = y * std::max(std::abs(z), 1e-300);
      } else {
        x(i, j) = y;
      }
    }
  return x;
}

Tree simulate_tree(std::size_t taxa, Rng& rng, double depth) {
  if (taxa == 0) throw InputError("cannot simulate a tree with no taxa");
  if (!(depth > 0.0)) throw InputError("tree depth must be positive");
  const std::size_t total = 2 * taxa - 1;
  std::vector<Tree::Node> nodes(total);
  std::vector<double> height(total, 0.0);
  std::vector<std::string> labels(total);
  const int width = static_cast<int>(std::to_string(taxa).size());
  for (std::size_t i = 0; i < taxa; ++i) {
    std::ostringstream name;
    name << 't' << std::setw(std::max(3, width)) << std::setfill('0') << (i + 1);
    labels[i] = name.str();
  }
  std::vector<std::size_t> active(taxa);
  for (std::size_t i = 0; i < taxa; ++i) active[i] = i;
  double t = 0.0;
  for (std::size_t next = taxa; next < total; ++next) {
    const double k = static_cast<double>(active.size());
    t += rng.exponential() / (0.5 * k * (k - 1.0));
    const auto a = static_cast<std::size_t>(rng.below(active.size()));
    const std::size_t left = active[a];
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(a));
    const auto b = static_cast<std::size_t>(rng.below(active.size()));
    const std::size_t right = active[b];
    active[b] = next;
    nodes[next].left = left;
    nodes[next].right = right;
    nodes[left].parent = next;
    nodes[right].parent = next;
    height[next] = t;
  }
  const double scale = taxa > 1 ? depth / t : 1.0;
  for (std::size_t v = 0; v + 1 < total; ++v) nodes[v].length = scale * (height[nodes[v].parent] - height[v]);
  return Tree::from_nodes(nodes, labels);
}

RowMatrix simulate_latent(const Tree& tree, const Eigen::MatrixXd& sigma, const RootPrior& root_prior, Rng& rng) {
  const Eigen::Index p = sigma.rows();
  if (root_prior.mean.size() != p) throw InputError("root mean length does not match the trait covariance");
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) throw InputError("trait covariance is not positive definite");
  const Eigen::MatrixXd chol = llt.matrixL();
  auto draw = [&](double scale) {
    Eigen::VectorXd z(p);
    for (Eigen::Index j = 0; j < p; ++j) z[j] = rng.normal();
    return Eigen::VectorXd(std::sqrt(scale) * (chol * z));
  };
  RowMatrix node_values(static_cast<Eigen::Index>(tree.node_count()), p);
  for (std::size_t v : tree.pre_order()) {
    const auto r = static_cast<Eigen::Index>(v);
    if (v == tree.root()) {
      node_values.row(r) = root_prior.mean.transpose() + draw(root_prior.variance_scale()).transpose();
    } else {
      node_values.row(r) =
          node_values.row(static_cast<Eigen::Index>(tree.node(v).parent)) + draw(tree.length(v)).transpose();
    }
  }
  return node_values.topRows(static_cast<Eigen::Index>(tree.tip_count()));
}

TraitData simulate_traits(const Tree& tree, const Eigen::Ref<const RowMatrix>& x, std::size_t binary_count,
                          double missing_prob, Rng& rng) {
  const std::size_t p = static_cast<std::size_t>(x.cols());
  if (binary_count > p) throw InputError("more binary traits than columns");
  if (static_cast<std::size_t>(x.rows()) != tree.tip_count()) throw InputError("latent rows do not match the tree");
  TraitData out;
  out.taxa = tree.labels();
  out.binary_count = binary_count;
  for (std::size_t j = 0; j < p; ++j) {
    const bool binary = j < binary_count;
    out.names.push_back((binary ? "b" : "c") + std::to_string(binary ? j + 1 : j - binary_count + 1));
    out.kinds.push_back(binary ? TraitKind::kBinary : TraitKind::kContinuous);
  }
  out.values = Eigen::MatrixXd(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const bool hide = missing_prob > 0.0 && rng.uniform() < missing_prob;
      const double v = static_cast<std::size_t>(j) < binary_count ? (x(i, j) > 0 ? 1.0 : -1.0) : x(i, j);
      out.values(i, j) = hide ? kNaN : v;
    }
  return out;
}

}  // namespace phyprobit
