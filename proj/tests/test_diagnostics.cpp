#include "doctest.h"

#include <cmath>
#include <tuple>

#include "phyprobit/diagnostics.hpp"
#include "phyprobit/error.hpp"
#include "phyprobit/rng.hpp"

using namespace phyprobit;

namespace {

std::vector<double> normals(std::size_t n, std::uint64_t seed, double shift = 0.0) {
  Rng rng(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = shift + rng.normal();
  return out;
}

}  // namespace

TEST_CASE("ESS of independent draws is close to n") {
  const auto x = normals(10000, 1);
  const auto e = ess(x);
  CHECK_FALSE(e.degenerate);
  CHECK(e.value >= 8000);
  CHECK(e.value <= 10000);
}

TEST_CASE("ESS of an alternating series is capped at n") {
  std::vector<double> x(1000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = i % 2 ? 1.0 : -1.0;
  CHECK(ess(x).value == doctest::Approx(1000.0));
}

TEST_CASE("ESS of an AR(1) series") {
  Rng rng(2);
  const double rho = 0.9;
  std::vector<double> x(100000);
  double v = rng.normal() / std::sqrt(1 - rho * rho);
  for (auto& xi : x) {
    v = rho * v + rng.normal();
    xi = v;
  }
  const double ratio = ess(x).value / static_cast<double>(x.size());
  const double want = (1 - rho) / (1 + rho);
  CHECK(std::abs(ratio - want) < 0.3 * want);
}

TEST_CASE("ESS degenerate and short series") {
  const auto e = ess(std::vector<double>(50, 3.0));
  CHECK(e.degenerate);
  CHECK(e.value == 0.0);
  CHECK_THROWS_AS(ess(std::vector<double>(9, 1.0)), InputError);
}

TEST_CASE("split Rhat") {
  const auto a = normals(2000, 3);
  const double same = rhat({a, a});
  CHECK(same >= 0.99);
  CHECK(same <= 1.05);
  const double iid = rhat({normals(2000, 4), normals(2000, 5), normals(2000, 6)});
  CHECK(iid >= 0.99);
  CHECK(iid <= 1.05);
  CHECK(rhat({normals(500, 7, -10.0), normals(500, 8, 10.0)}) > 1.1);

  SUBCASE("a drifting chain is caught by the split") {
    std::vector<double> drift(1000);
    for (std::size_t i = 0; i < drift.size(); ++i) drift[i] = 0.01 * static_cast<double>(i);
    CHECK(rhat({drift, drift}) > 1.1);
  }

  CHECK_THROWS_AS(rhat({a}), InputError);
  CHECK_THROWS_AS(rhat({a, normals(100, 9)}), InputError);
  CHECK_THROWS_AS(rhat({std::vector<double>(20, 1.0), std::vector<double>(20, 2.0)}), NumericalError);
}

TEST_CASE("HPD interval") {
  std::vector<double> x(100);
  for (std::size_t i = 0; i < 100; ++i) x[i] = static_cast<double>(i + 1);
  auto [lo, hi] = hpd_interval(x, 0.9);
  CHECK(lo == 1.0);
  CHECK(hi == 91.0);

  const auto z = normals(100000, 10);
  std::tie(lo, hi) = hpd_interval(z, 0.9);
  CHECK(std::abs(lo + 1.645) < 0.05);
  CHECK(std::abs(hi - 1.645) < 0.05);
  CHECK(lo < 0.0);
  CHECK(hi > 0.0);

  // Skewed sample: the interval hugs the mode at zero.
  Rng rng(11);
  std::vector<double> ex(20000);
  for (auto& v : ex) v = rng.exponential();
  std::tie(lo, hi) = hpd_interval(ex, 0.9);
  CHECK(lo < 0.01);
  CHECK(hi == doctest::Approx(std::log(10.0)).epsilon(0.05));

  CHECK_THROWS_AS(hpd_interval(std::vector<double>(19, 0.0)), InputError);
  CHECK_THROWS_AS(hpd_interval(x, 1.0), InputError);
  CHECK_THROWS_AS(hpd_interval(x, 0.0), InputError);
}
