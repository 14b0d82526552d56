#include "phyprobit/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include "phyprobit/error.hpp"

namespace phyprobit {

namespace {

// Autocovariances at lags 0..n-1 (biased, divided by n) by zero-padded FFT.
std::vector<double> autocovariance(const std::vector<double>& x) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  std::size_t m = 1;
  while (m < 2 * n) m <<= 1;
  std::vector<double> padded(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) padded[i] = x[i] - mean;
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> freq;
  fft.fwd(freq, padded);
  for (auto& f : freq) f = std::norm(f);
  std::vector<double> back;
  fft.inv(back, freq);
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = back[k] / static_cast<double>(n);
  return out;
}

}  // namespace

EssResult ess(const std::vector<double>& series) {
  const std::size_t n = series.size();
  if (n < 10) throw InputError("ESS needs at least 10 draws");
  for (double v : series)
    if (!std::isfinite(v)) throw InputError("ESS of a series with non-finite values");
  const auto [lo, hi] = std::minmax_element(series.begin(), series.end());
  if (*lo == *hi) return {0.0, true};

  const std::vector<double> acov = autocovariance(series);
  if (!(acov[0] > 0.0)) return {0.0, true};
  // Sums of adjacent autocorrelation pairs, kept while positive and forced
  // non-increasing.
  double tau = -1.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k + 1 < n; k += 2) {
    double pair = (acov[k] + acov[k + 1]) / acov[0];
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    tau += 2.0 * pair;
    prev_pair = pair;
  }
  const double nd = static_cast<double>(n);
  if (!(tau > 0.0)) return {nd, false};
  return {std::min(nd / tau, nd), false};
}

double rhat(const std::vector<std::vector<double>>& chains) {
  if (chains.size() < 2) throw InputError("Rhat needs at least two chains");
  const std::size_t n = chains.front().size();
  if (n < 10) throw InputError("Rhat needs chains of at least 10 draws");
  for (const auto& c : chains)
    if (c.size() != n) throw InputError("Rhat needs chains of equal length");
  const std::size_t half = n / 2;
  std::vector<double> means, vars;
  for (const auto& c : chains)
    for (std::size_t start : {std::size_t{0}, n - half}) {
      double mean = 0.0;
      for (std::size_t i = 0; i < half; ++i) mean += c[start + i];
      mean /= static_cast<double>(half);
      double var = 0.0;
      for (std::size_t i = 0; i < half; ++i) var += (c[start + i] - mean) * (c[start + i] - mean);
      means.push_back(mean);
      vars.push_back(var / static_cast<double>(half - 1));
    }
  const double m = static_cast<double>(means.size()), len = static_cast<double>(half);
  double grand = 0.0, w = 0.0;
  for (std::size_t j = 0; j < means.size(); ++j) {
    grand += means[j];
    w += vars[j];
  }
  grand /= m;
  w /= m;
  if (!(w > 0.0)) throw NumericalError("Rhat undefined: zero within-chain variance");
  double b = 0.0;
  for (double mu : means) b += (mu - grand) * (mu - grand);
  b *= len / (m - 1.0);
  const double var_plus = (len - 1.0) / len * w + b / len;
  return std::sqrt(var_plus / w);
}

std::pair<double, double> hpd_interval(std::vector<double> series, double mass) {
  const std::size_t n = series.size();
  if (n < 20) throw InputError("HPD interval needs at least 20 draws");
  if (!(mass > 0.0 && mass < 1.0)) throw InputError("HPD mass must lie in (0, 1)");
  std::sort(series.begin(), series.end());
  auto gap = static_cast<std::size_t>(std::ceil(mass * static_cast<double>(n) - 1e-9));
  gap = std::min(gap, n - 1);
  std::size_t best = 0;
  double width = series[gap] - series[0];
  for (std::size_t i = 1; i + gap < n; ++i) {
    const double w = series[i + gap] - series[i];
    if (w < width) {
      width = w;
      best = i;
    }
  }
  return {series[best], series[best + gap]};
}

}  // namespace phyprobit
