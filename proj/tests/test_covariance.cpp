#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "phyprobit/covariance.hpp"
#include "phyprobit/error.hpp"
#include "phyprobit/tree.hpp"

using namespace phyprobit;

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * M_PI);

Eigen::VectorXd random_theta(std::size_t n, Rng& rng, double scale = 1.0) {
  Eigen::VectorXd t(static_cast<Eigen::Index>(n));
  for (auto& v : t) v = scale * rng.normal();
  return t;
}

double posterior(const Eigen::VectorXd& theta, const CovarianceLikelihood& lik, double eta,
                 const std::vector<std::uint8_t>& free_scale) {
  Eigen::VectorXd g;
  return cov_posterior_log_density_and_grad(theta, lik, {eta}, free_scale, g);
}

Eigen::VectorXd central_difference(const Eigen::VectorXd& theta, const CovarianceLikelihood& lik, double eta,
                                   const std::vector<std::uint8_t>& free_scale, double h = 1e-6) {
  Eigen::VectorXd g(theta.size());
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    Eigen::VectorXd a = theta, b = theta;
    a[k] += h;
    b[k] -= h;
    g[k] = (posterior(a, lik, eta, free_scale) - posterior(b, lik, eta, free_scale)) / (2 * h);
  }
  return g;
}

// Strict lower triangle of R as a vector, row by row.
Eigen::VectorXd lower_entries(const Eigen::MatrixXd& r) {
  const auto p = r.rows();
  Eigen::VectorXd out(p * (p - 1) / 2);
  Eigen::Index k = 0;
  for (Eigen::Index i = 1; i < p; ++i)
    for (Eigen::Index j = 0; j < i; ++j) out[k++] = r(i, j);
  return out;
}

}  // namespace

TEST_CASE("LKJ density examples") {
  Eigen::MatrixXd r = Eigen::MatrixXd::Identity(2, 2);
  CHECK(lkj_log_density(r, 2.0) == doctest::Approx(0.0));
  r(0, 1) = r(1, 0) = 0.6;
  CHECK(lkj_log_density(r, 2.0) == doctest::Approx(std::log(0.64)));
  CHECK(lkj_log_density(r, 2.0) == doctest::Approx(-0.44629).epsilon(1e-4));
  CHECK(lkj_log_density(r, 1.0) == 0.0);
  r(0, 1) = r(1, 0) = 1.5;
  CHECK_THROWS_AS(lkj_log_density(r, 2.0), NumericalError);
  CHECK_THROWS_AS(lkj_log_density(Eigen::MatrixXd::Identity(2, 2), 0.0), InputError);
}

TEST_CASE("log-normal scale prior") {
  const std::vector<std::uint8_t> one{1};
  CHECK(scale_log_prior(Eigen::VectorXd::Ones(1), one) == doctest::Approx(-kHalfLog2Pi));
  // delta^2 = e: the Gaussian kernel drops by 1/2 and the 1/delta^2 factor by 1.
  const Eigen::VectorXd d = Eigen::VectorXd::Constant(1, std::exp(0.5));
  CHECK(scale_log_prior(d, one) == doctest::Approx(-kHalfLog2Pi - 0.5 - 1.0));
  // Fixed scales contribute nothing.
  CHECK(scale_log_prior(Eigen::VectorXd::Ones(3), {0, 1, 0}) == doctest::Approx(-kHalfLog2Pi));
  CHECK_THROWS_AS(scale_log_prior(Eigen::VectorXd::Zero(1), one), InputError);

  Rng rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    Eigen::VectorXd delta(4);
    for (auto& v : delta) v = std::exp(rng.normal());
    const std::vector<std::uint8_t> mask{1, 0, 1, 1};
    const Eigen::VectorXd g = scale_log_prior_gradient(delta, mask);
    for (Eigen::Index k = 0; k < 4; ++k) {
      Eigen::VectorXd a = delta, b = delta;
      a[k] += 1e-6;
      b[k] -= 1e-6;
      const double fd = (scale_log_prior(a, mask) - scale_log_prior(b, mask)) / 2e-6;
      CHECK(std::abs(g[k] - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("decomposition validation") {
  Eigen::MatrixXd r = Eigen::MatrixXd::Identity(2, 2);
  CHECK_NOTHROW(CovarianceDecomposition(r, Eigen::Vector2d(1.0, 2.0), {0, 1}));
  CHECK_THROWS_AS(CovarianceDecomposition(r, Eigen::Vector2d(2.0, 2.0), {0, 1}), InputError);
  CHECK_THROWS_AS(CovarianceDecomposition(r, Eigen::Vector2d(1.0, -2.0), {0, 1}), InputError);
  r(0, 0) = 2.0;
  CHECK_THROWS_AS(CovarianceDecomposition(r, Eigen::Vector2d(1.0, 1.0), {0, 0}), InputError);
  r = Eigen::MatrixXd::Identity(2, 2);
  r(0, 1) = r(1, 0) = 1.2;
  CHECK_THROWS_AS(CovarianceDecomposition(r, Eigen::Vector2d(1.0, 1.0), {0, 0}), InputError);

  const auto dec = CovarianceDecomposition(Eigen::MatrixXd::Identity(3, 3), Eigen::Vector3d(1.0, 2.0, 3.0), {0, 1, 1});
  CHECK(dec.covariance()(2, 2) == doctest::Approx(9.0));
  CHECK(dec.log_det_covariance() == doctest::Approx(std::log(36.0)));
  CHECK((dec.precision() * dec.covariance() - Eigen::MatrixXd::Identity(3, 3)).norm() < 1e-12);
}

TEST_CASE("transform round trip and invariants") {
  Rng rng(2);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t p = 1 + rng.below(6);
    std::vector<std::uint8_t> mask(p);
    for (auto& m : mask) m = static_cast<std::uint8_t>(rng.below(2));
    const std::size_t n = unconstrained_size(p, mask);
    const Eigen::VectorXd theta = random_theta(n, rng);
    const auto dec = to_decomposition(theta, p, mask);
    const Eigen::MatrixXd& r = dec.correlation();
    CHECK((r - r.transpose()).norm() == 0.0);
    CHECK((r.diagonal().array() == 1.0).all());
    CHECK(Eigen::LLT<Eigen::MatrixXd>(dec.covariance()).info() == Eigen::Success);
    for (std::size_t k = 0; k < p; ++k)
      if (!mask[k]) CHECK(dec.scales()[static_cast<Eigen::Index>(k)] == 1.0);
    const Eigen::VectorXd back = to_unconstrained(dec);
    CHECK(back.size() == theta.size());
    if (theta.size() > 0) CHECK((back - theta).cwiseAbs().maxCoeff() < 1e-10);
  }
  CHECK_THROWS_AS(to_decomposition(Eigen::VectorXd::Zero(2), 2, {0, 0}), InputError);
}

TEST_CASE("P = 2 correlation coordinate is tanh") {
  const auto dec = to_decomposition(Eigen::VectorXd::Constant(1, 0.3), 2, {0, 0});
  CHECK(dec.correlation()(1, 0) == doctest::Approx(std::tanh(0.3)));
}

TEST_CASE("prior density in unconstrained coordinates equals LKJ times the numerical Jacobian") {
  Rng rng(3);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t p = 2 + rng.below(3);
    const std::vector<std::uint8_t> mask(p, 0);
    const double eta = 0.5 + 2.0 * rng.uniform();
    const Eigen::VectorXd theta = random_theta(unconstrained_size(p, mask), rng, 0.7);
    const auto n = theta.size();
    Eigen::MatrixXd jac(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
      Eigen::VectorXd a = theta, b = theta;
      a[k] += 1e-6;
      b[k] -= 1e-6;
      jac.col(k) = (lower_entries(to_decomposition(a, p, mask).correlation()) -
                    lower_entries(to_decomposition(b, p, mask).correlation())) / 2e-6;
    }
    const double want = lkj_log_density(to_decomposition(theta, p, mask).correlation(), eta) +
                        std::log(std::abs(jac.determinant()));
    CHECK(posterior(theta, CovarianceLikelihood::prior_only(p), eta, mask) == doctest::Approx(want).epsilon(1e-7));
  }
}

TEST_CASE("one trait on a two-taxon star matches a bivariate normal") {
  auto tree = std::make_shared<const Tree>(parse_newick("(a:1,b:1);"));
  const double kappa = 2.0, delta = 1.7;
  TreeGaussian gauss(tree, kappa, Eigen::MatrixXd::Constant(1, 1, delta * delta));
  RowMatrix x(2, 1);
  x << 0.4, -1.1;
  const Eigen::VectorXd mu0 = Eigen::VectorXd::Constant(1, 0.2);
  const auto lik = CovarianceLikelihood::from_latent(gauss, x, mu0);

  Eigen::MatrixXd cov(2, 2);
  cov << 1.0 + 1.0 / kappa, 1.0 / kappa, 1.0 / kappa, 1.0 + 1.0 / kappa;
  cov *= delta * delta;
  const double dense = oracle::mvn_log_density(Eigen::Vector2d(0.4, -1.1), Eigen::Vector2d(0.2, 0.2), cov);
  CHECK(lik.log_density(Eigen::MatrixXd::Constant(1, 1, delta * delta)) == doctest::Approx(dense));

  const double u = std::log(delta);
  const double prior = std::log(2.0) - kHalfLog2Pi - 2.0 * u * u;
  CHECK(posterior(Eigen::VectorXd::Constant(1, u), lik, 1.0, {1}) == doctest::Approx(dense + prior));
}

TEST_CASE("likelihood statistic agrees with the matrix-normal oracle") {
  Rng rng(4);
  auto tree = std::make_shared<const Tree>(parse_newick(oracle::random_newick(9, rng)));
  const Eigen::MatrixXd sigma = oracle::random_spd(3, rng);
  TreeGaussian gauss(tree, 0.5, sigma);
  RowMatrix x(9, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const Eigen::VectorXd mu0 = oracle::random_vector(3, rng);
  const auto lik = CovarianceLikelihood::from_latent(gauss, x, mu0);
  CHECK(lik.log_density(sigma) == doctest::Approx(gauss.log_density(x, mu0)));
}

TEST_CASE("posterior gradient matches central differences") {
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t p = 1 + rng.below(4);
    const std::size_t n = 3 + rng.below(10);
    std::vector<std::uint8_t> mask(p);
    for (auto& m : mask) m = static_cast<std::uint8_t>(rng.below(2));
    auto tree = std::make_shared<const Tree>(parse_newick(oracle::random_newick(n, rng)));
    TreeGaussian gauss(tree, 1.0, Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p)));
    RowMatrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 1.5 * rng.normal();
    const auto lik = rep % 10 == 0 ? CovarianceLikelihood::prior_only(p)
                                   : CovarianceLikelihood::from_latent(gauss, x, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p)));
    const double eta = 0.5 + 3.0 * rng.uniform();
    const Eigen::VectorXd theta = random_theta(unconstrained_size(p, mask), rng, 0.8);
    Eigen::VectorXd g;
    cov_posterior_log_density_and_grad(theta, lik, {eta}, mask, g);
    const Eigen::VectorXd fd = central_difference(theta, lik, eta, mask);
    if (theta.size() == 0) continue;
    const double err = (g - fd).cwiseAbs().maxCoeff() / std::max(1.0, fd.cwiseAbs().maxCoeff());
    CHECK(err < 1e-5);
  }
}

TEST_CASE("N = 10, P = 4 gradient") {
  Rng rng(6);
  auto tree = std::make_shared<const Tree>(parse_newick(oracle::random_newick(10, rng)));
  TreeGaussian gauss(tree, 1.0, Eigen::MatrixXd::Identity(4, 4));
  RowMatrix x(10, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const std::vector<std::uint8_t> mask{0, 0, 1, 1};
  const auto lik = CovarianceLikelihood::from_latent(gauss, x, Eigen::VectorXd::Zero(4));
  const Eigen::VectorXd theta = random_theta(unconstrained_size(4, mask), rng, 0.5);
  Eigen::VectorXd g;
  cov_posterior_log_density_and_grad(theta, lik, {1.0}, mask, g);
  const Eigen::VectorXd fd = central_difference(theta, lik, 1.0, mask);
  for (Eigen::Index k = 0; k < g.size(); ++k)
    CHECK(std::abs(g[k] - fd[k]) <= 1e-5 * std::max(1.0, std::abs(fd[k])));
}

TEST_CASE("eta = 1 without data is flat in R apart from the Jacobian") {
  // P = 2: the Jacobian is 1 - r^2 and nothing else.
  for (double y : {-2.0, -0.3, 0.0, 0.9, 3.0}) {
    const double r = std::tanh(y);
    CHECK(posterior(Eigen::VectorXd::Constant(1, y), CovarianceLikelihood::prior_only(2), 1.0, {0, 0}) ==
          doctest::Approx(std::log(1.0 - r * r)));
  }
}

TEST_CASE("extreme coordinates stay finite") {
  Eigen::VectorXd g;
  Eigen::VectorXd theta = Eigen::VectorXd::Constant(3, 12.0);
  CHECK(std::isfinite(cov_posterior_log_density_and_grad(theta, CovarianceLikelihood::prior_only(3), {1.0}, {0, 0, 0}, g)));
  CHECK(g.allFinite());
}
