#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "phyprobit/covariance.hpp"
#include "phyprobit/hmc.hpp"

using namespace phyprobit;

namespace {

LogDensityFn gaussian(const Eigen::MatrixXd& precision) {
  return [precision](const Eigen::VectorXd& q, Eigen::VectorXd& g) {
    g = -precision * q;
    return -0.5 * q.dot(precision * q);
  };
}

// Kolmogorov-Smirnov distance between a sample and Uniform(-1, 1).
double ks_uniform(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = (xs[i] + 1.0) / 2.0;
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

std::vector<double> prior_correlation_draws(std::size_t p, std::size_t draws, std::size_t thin, std::uint64_t seed) {
  const std::vector<std::uint8_t> mask(p, 0);
  const auto lik = CovarianceLikelihood::prior_only(p);
  LogDensityFn f = [&](const Eigen::VectorXd& t, Eigen::VectorXd& g) {
    return cov_posterior_log_density_and_grad(t, lik, {1.0}, mask, g);
  };
  HmcKernel kernel;
  Rng rng(seed);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(unconstrained_size(p, mask)));
  for (int i = 0; i < 1000; ++i) theta = kernel.step(theta, f, rng, true).position;
  std::vector<double> out;
  for (std::size_t i = 0; i < draws * thin; ++i) {
    theta = kernel.step(theta, f, rng, false).position;
    if ((i + 1) % thin == 0) out.push_back(to_decomposition(theta, p, mask).correlation()(1, 0));
  }
  return out;
}

}  // namespace

TEST_CASE("one leapfrog step on the harmonic potential") {
  Eigen::VectorXd q = Eigen::VectorXd::Zero(1), m = Eigen::VectorXd::Ones(1), g;
  auto f = gaussian(Eigen::MatrixXd::Identity(1, 1));
  f(q, g);
  leapfrog(q, m, g, 0.1, 1, f);
  CHECK(q[0] == doctest::Approx(0.1));
  CHECK(m[0] == doctest::Approx(0.995));
}

TEST_CASE("leapfrog is reversible and volume preserving on quadratic targets") {
  Rng rng(1);
  const Eigen::MatrixXd prec = oracle::random_spd(4, rng);
  auto f = gaussian(prec);
  const Eigen::VectorXd q0 = oracle::random_vector(4, rng), m0 = oracle::random_vector(4, rng);
  Eigen::VectorXd q = q0, m = m0, g;
  f(q, g);
  leapfrog(q, m, g, 0.05, 25, f);
  m = -m;
  leapfrog(q, m, g, 0.05, 25, f);
  CHECK((q - q0).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((-m - m0).cwiseAbs().maxCoeff() < 1e-10);

  // Jacobian of the flow map by finite differences has unit determinant.
  const double h = 1e-6;
  Eigen::MatrixXd jac(8, 8);
  auto flow = [&](Eigen::VectorXd z) {
    Eigen::VectorXd a = z.head(4), b = z.tail(4), gg;
    f(a, gg);
    leapfrog(a, b, gg, 0.05, 10, f);
    Eigen::VectorXd out(8);
    out << a, b;
    return out;
  };
  Eigen::VectorXd z(8);
  z << q0, m0;
  for (int k = 0; k < 8; ++k) {
    Eigen::VectorXd a = z, b = z;
    a[k] += h;
    b[k] -= h;
    jac.col(k) = (flow(a) - flow(b)) / (2 * h);
  }
  CHECK(jac.determinant() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("acceptance tends to one as the step shrinks") {
  Rng rng(2);
  auto f = gaussian(oracle::random_spd(3, rng));
  double last = 0.0;
  for (double eps : {0.2, 0.05, 0.01}) {
    double acc = 0.0;
    Eigen::VectorXd q = Eigen::VectorXd::Zero(3);
    for (int i = 0; i < 200; ++i) {
      auto r = hmc_transition(q, f, eps, static_cast<std::size_t>(std::ceil(1.0 / eps)), rng);
      acc += r.accept_prob;
      q = r.position;
    }
    acc /= 200;
    CHECK(acc >= last - 0.02);
    last = acc;
  }
  CHECK(last > 0.99);
}

TEST_CASE("5-D Gaussian covariance is recovered") {
  Rng rng(3);
  const Eigen::MatrixXd cov = oracle::random_spd(5, rng);
  auto f = gaussian(cov.inverse());
  HmcKernel kernel({1.5, 0.1, 0.8});
  Eigen::VectorXd q = Eigen::VectorXd::Zero(5);
  for (int i = 0; i < 500; ++i) q = kernel.step(q, f, rng, true).position;
  std::vector<std::vector<double>> prods(15);
  for (int i = 0; i < 20000; ++i) {
    q = kernel.step(q, f, rng, false).position;
    int k = 0;
    for (int a = 0; a < 5; ++a)
      for (int b = 0; b <= a; ++b) prods[static_cast<std::size_t>(k++)].push_back(q[a] * q[b]);
  }
  int k = 0, failures = 0;
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b <= a; ++b) {
      const auto e = oracle::batch_mean(prods[static_cast<std::size_t>(k++)]);
      if (std::abs(e.mean - cov(a, b)) > 3 * e.se) ++failures;
    }
  CHECK(failures == 0);
}

TEST_CASE("dual averaging direction") {
  DualAveraging up(0.1);
  double prev = up.step();
  for (int i = 0; i < 50; ++i) {
    const double next = up.update(1.0);
    CHECK(next > prev);
    prev = next;
  }
  DualAveraging down(0.1);
  prev = down.update(0.0);
  for (int i = 0; i < 50; ++i) {
    const double next = down.update(0.0);
    CHECK(next < prev);
    prev = next;
  }
  CHECK(prev < 0.1);
}

TEST_CASE("adapted acceptance on a 10-D Gaussian is near the target") {
  Rng rng(4);
  Eigen::VectorXd scales(10);
  for (int i = 0; i < 10; ++i) scales[i] = 0.5 + 0.15 * i;
  const Eigen::MatrixXd prec = scales.array().square().inverse().matrix().asDiagonal();
  auto f = gaussian(prec);
  HmcKernel kernel;
  Eigen::VectorXd q = Eigen::VectorXd::Zero(10);
  for (int i = 0; i < 1000; ++i) q = kernel.step(q, f, rng, true).position;
  double acc = 0.0;
  for (int i = 0; i < 2000; ++i) {
    auto r = kernel.step(q, f, rng, false);
    acc += r.accept_prob;
    q = r.position;
  }
  CHECK(std::abs(acc / 2000 - 0.8) < 0.1);
}

TEST_CASE("jittered path length") {
  Rng rng(5);
  std::size_t lo = 1000, hi = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto l = jittered_steps(1.0, 0.1, rng);
    lo = std::min(lo, l);
    hi = std::max(hi, l);
  }
  CHECK(lo == 9);
  CHECK(hi == 11);
  CHECK(jittered_steps(1.0, 10.0, rng) == 1);
}

TEST_CASE("divergent trajectories are rejected") {
  LogDensityFn f = [](const Eigen::VectorXd& q, Eigen::VectorXd& g) {
    g = -q;
    return q.norm() > 1.5 ? -std::numeric_limits<double>::infinity() : -0.5 * q.squaredNorm();
  };
  Rng rng(6);
  HmcKernel kernel({10.0, 1.0, 0.8});
  Eigen::VectorXd q = Eigen::VectorXd::Zero(2);
  for (int i = 0; i < 50; ++i) {
    auto r = kernel.step(q, f, rng, false);
    CHECK(r.position.allFinite());
    q = r.position;
  }
  CHECK(kernel.divergences() > 0);
}

TEST_CASE("LKJ(1) with two traits gives uniform correlations") {
  const auto draws = prior_correlation_draws(2, 10000, 5, 7);
  CHECK(ks_uniform(draws) < 1.628 / std::sqrt(10000.0));
}

TEST_CASE("LKJ(1) with three traits gives correlation variance 1/4") {
  const auto draws = prior_correlation_draws(3, 20000, 2, 8);
  std::vector<double> sq;
  for (double r : draws) sq.push_back(r * r);
  const auto e = oracle::batch_mean(sq);
  CHECK(std::abs(e.mean - 0.25) < 3 * e.se);
}
