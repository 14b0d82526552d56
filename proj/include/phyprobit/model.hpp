#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "phyprobit/bps.hpp"
#include "phyprobit/rng.hpp"
#include "phyprobit/tree.hpp"
#include "phyprobit/tree_gauss.hpp"

namespace phyprobit {

enum class TraitKind { kBinary, kContinuous };

/// How one CSV column is read. Binary columns map `negative` to -1 and
/// `positive` to +1; any other token except the missing marker is an error.
struct ColumnSpec {
  std::string name;
  TraitKind kind = TraitKind::kContinuous;
  std::string negative = "0";
  std::string positive = "1";
};

inline constexpr const char* kMissingToken = "NA";

/// Observed tip traits. Rows follow the tree's tip order; columns are in
/// canonical order, every binary trait before every continuous one.
struct TraitData {
  std::vector<std::string> taxa;
  std::vector<std::string> names;
  std::vector<TraitKind> kinds;
  std::size_t binary_count = 0;
  /// Binary cells hold -1/+1, continuous cells their value, missing cells NaN.
  Eigen::MatrixXd values;

  std::size_t taxa_count() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t trait_count() const { return static_cast<std::size_t>(values.cols()); }
  bool observed(std::size_t i, std::size_t j) const;
  /// Free-scale mask for the covariance decomposition: continuous traits.
  std::vector<std::uint8_t> free_scale() const;
};

/// Reads a CSV with a header of trait names and the taxon label in the first
/// column. Every CSV trait column must appear in `spec` and vice versa; rows
/// are reordered to the tree's tips. Throws InputError naming the offending
/// row/column.
TraitData load_traits(std::istream& csv, const std::vector<ColumnSpec>& spec, const Tree& tree);
TraitData load_traits_file(const std::string& path, const std::vector<ColumnSpec>& spec, const Tree& tree);

/// Writes `traits` in the format load_traits reads, with binary cells coded
/// 0/1 and columns in canonical order.
void write_traits_csv(std::ostream& out, const TraitData& traits);

/// Truncated normal full conditional of the latent matrix: mean 1 mu0',
/// tree precision, sign constraints on observed binary cells and fixed
/// dimensions at observed continuous cells.
TruncatedNormalTarget build_target(const TraitData& traits, std::shared_ptr<const TreeGaussian> gauss,
                                   const Eigen::VectorXd& root_mean);

/// True when X reproduces every observed cell.
bool consistent(const Eigen::Ref<const RowMatrix>& x, const TraitData& traits);

/// The latent-to-observed map: sign for binary traits, identity for
/// continuous ones, NaN where the trait is missing.
Eigen::MatrixXd observe(const Eigen::Ref<const RowMatrix>& x, const TraitData& traits);

/// log MN(X; 1 mu0', Gamma, Sigma) when X is consistent with the data, else
/// -infinity.
double augmented_log_likelihood(const Eigen::Ref<const RowMatrix>& x, const TraitData& traits,
                                const TreeGaussian& gauss, const Eigen::VectorXd& root_mean);

/// Continuous cells at their observations, observed binary cells at
/// sign * |N(0, 1)|, everything else N(0, 1).
RowMatrix initialize_latent(const TraitData& traits, Rng& rng);

/// Random coalescent-style tree with tips t001, t002, ...; branch lengths
/// scaled so the mean root-to-tip depth is about `depth`.
Tree simulate_tree(std::size_t taxa, Rng& rng, double depth = 1.0);

/// Brownian motion down the tree: root ~ N(mu0, Sigma / kappa) (fixed at mu0
/// when kappa is infinite), each branch adds N(0, t Sigma).
RowMatrix simulate_latent(const Tree& tree, const Eigen::MatrixXd& sigma, const RootPrior& root_prior, Rng& rng);

/// Thresholds the first `binary_count` columns of X at zero and hides each
/// cell independently with probability `missing_prob`.
TraitData simulate_traits(const Tree& tree, const Eigen::Ref<const RowMatrix>& x, std::size_t binary_count,
                          double missing_prob, Rng& rng);

}  // namespace phyprobit
