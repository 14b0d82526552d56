#pragma once

#include <utility>
#include <vector>

namespace phyprobit {

struct EssResult {
  double value = 0.0;
  bool degenerate = false;  // constant series; value is 0
};

/// Effective sample size from the autocorrelations, truncated by Geyer's
/// initial positive sequence and made monotone. Capped at the series length.
/// Throws InputError for fewer than 10 draws.
EssResult ess(const std::vector<double>& series);

/// Split-Rhat: each chain halved, then the between/within variance ratio.
/// Throws InputError for fewer than two chains, unequal or short chains, and
/// NumericalError when every half has zero variance.
double rhat(const std::vector<std::vector<double>>& chains);

/// Shortest interval spanning ceil(mass * n) consecutive sorted draws,
/// lowest lower end on ties. Throws InputError for fewer than 20 draws or
/// mass outside (0, 1).
std::pair<double, double> hpd_interval(std::vector<double> series, double mass = 0.9);

}  // namespace phyprobit
