#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "phyprobit/bps.hpp"
#include "phyprobit/error.hpp"
#include "phyprobit/tree.hpp"

using namespace phyprobit;

namespace {

std::shared_ptr<const DensePrecision> dense(const Eigen::MatrixXd& m) { return std::make_shared<DensePrecision>(m); }

TruncatedNormalTarget make_target(const Eigen::MatrixXd& phi, std::vector<Orthant> sign,
                                  std::vector<std::uint8_t> fixed = {}) {
  TruncatedNormalTarget t;
  t.mean = Eigen::VectorXd::Zero(phi.rows());
  t.precision = dense(phi);
  t.sign = std::move(sign);
  t.fixed = fixed.empty() ? std::vector<std::uint8_t>(t.sign.size(), 0) : std::move(fixed);
  return t;
}

double energy(const Eigen::MatrixXd& phi, const Eigen::VectorXd& x) { return 0.5 * x.dot(phi * x); }

Eigen::MatrixXd corr2(double rho) {
  Eigen::MatrixXd c(2, 2);
  c << 1.0, rho, rho, 1.0;
  return c;
}

bool agree(const oracle::McEstimate& a, const oracle::McEstimate& b) {
  return std::abs(a.mean - b.mean) <= 3.0 * std::sqrt(a.se * a.se + b.se * b.se);
}

}  // namespace

TEST_CASE("gradient event time closed forms") {
  CHECK(gradient_event_time(0.0, 1.0, 2.0) == doctest::Approx(2.0));
  CHECK(gradient_event_time(-1.0, 1.0, 0.5) == doctest::Approx(2.0));
  CHECK_THROWS_AS(gradient_event_time(1.0, 0.0, 1.0), NumericalError);
  CHECK_THROWS_AS(gradient_event_time(1.0, -1.0, 1.0), NumericalError);
}

TEST_CASE("standard normal from origin hits first gradient event at the exponential draw") {
  // d=1, x=0, v=+1: U(t) = t^2/2 so T=2 gives t=2.
  CHECK(gradient_event_time(1.0 * 0.0, 1.0, 2.0) == doctest::Approx(2.0));
}

TEST_CASE("gradient event time solves the energy equation") {
  Rng rng(11);
  for (int rep = 0; rep < 200; ++rep) {
    const int d = 1 + static_cast<int>(rng.below(6));
    const Eigen::MatrixXd phi = oracle::random_spd(d, rng);
    const Eigen::VectorXd x = oracle::random_vector(d, rng) * 3.0;
    const Eigen::VectorXd v = oracle::random_vector(d, rng);
    const double big_t = rng.exponential();
    const double vx = v.dot(phi * x), vv = v.dot(phi * v);
    const double t = gradient_event_time(vx, vv, big_t);
    const double t_min = std::max(0.0, -vx / vv);
    CHECK(t > t_min);
    const double u_min = energy(phi, x + t_min * v);
    const double got = energy(phi, x + t * v) - u_min;
    CHECK(std::abs(got - big_t) < 1e-10 * std::max(1.0, energy(phi, x)));
  }
}

TEST_CASE("gradient event time stays accurate when b^2 dominates 4ac") {
  const double t = gradient_event_time(1e8, 1.0, 1e-6);
  // Exact root of t^2/2 + 1e8 t - 1e-6 = 0.
  CHECK(t == doctest::Approx(1e-14).epsilon(1e-6));
}

TEST_CASE("boundary event time") {
  Eigen::VectorXd x(2), v(2);
  x << 1.0, -2.0;
  v << -1.0, 1.0;
  std::vector<Orthant> s{Orthant::kPositive, Orthant::kNegative};
  auto [t, i] = boundary_event_time(x, v, s);
  CHECK(t == doctest::Approx(1.0));
  CHECK(i == 0);

  v << 1.0, -1.0;
  t = boundary_event_time(x, v, s).first;
  CHECK(std::isinf(t));

  x << 1.0, 1.0;
  v << -1.0, -1.0;
  s = {Orthant::kFree, Orthant::kFree};
  CHECK(std::isinf(boundary_event_time(x, v, s).first));

  SUBCASE("ties go to the smallest index") {
    x << 2.0, 1.0;
    v << -2.0, -1.0;
    s = {Orthant::kPositive, Orthant::kPositive};
    CHECK(boundary_event_time(x, v, s).second == 0);
  }
}

TEST_CASE("gradient bounce") {
  Eigen::VectorXd v(2), g(2);
  v << 1.0, 0.0;
  g << 1.0, 0.0;
  Eigen::VectorXd out = bounce_gradient(v, g, {});
  CHECK(out[0] == doctest::Approx(-1.0));
  CHECK(out[1] == doctest::Approx(0.0));
  v << 1.0, 1.0;
  out = bounce_gradient(v, g, {});
  CHECK(out[0] == doctest::Approx(-1.0));
  CHECK(out[1] == doctest::Approx(1.0));
  CHECK_THROWS_AS(bounce_gradient(v, Eigen::VectorXd::Zero(2), {}), NumericalError);

  Rng rng(3);
  for (int rep = 0; rep < 100; ++rep) {
    const Eigen::VectorXd a = oracle::random_vector(7, rng), b = oracle::random_vector(7, rng);
    const Eigen::VectorXd r = bounce_gradient(a, b, {});
    CHECK(std::abs(r.squaredNorm() - a.squaredNorm()) < 1e-12 * std::max(1.0, a.squaredNorm()));
    CHECK(r.dot(b) == doctest::Approx(-a.dot(b)));
  }

  SUBCASE("fixed coordinates are ignored") {
    Eigen::VectorXd vm(3), gm(3);
    vm << 1.0, 0.0, 0.0;
    gm << 1.0, 0.0, 5.0;
    const Eigen::VectorXd r = bounce_gradient(vm, gm, {0, 0, 1});
    CHECK(r[0] == doctest::Approx(-1.0));
    CHECK(r[2] == 0.0);
  }
}

TEST_CASE("boundary bounce") {
  Eigen::VectorXd v(2), phiv(2), col(2);
  v << -1.0, 1.0;
  phiv = v;
  col << 1.0, 0.0;
  bounce_boundary(v, phiv, 0, col);
  CHECK(v[0] == 1.0);
  CHECK(v[1] == 1.0);
  CHECK(phiv[0] == doctest::Approx(1.0));
  CHECK(phiv[1] == doctest::Approx(1.0));

  Rng rng(5);
  const Eigen::MatrixXd phi = oracle::random_spd(6, rng);
  Eigen::VectorXd w = oracle::random_vector(6, rng);
  Eigen::VectorXd pw = phi * w;
  const Eigen::VectorXd w0 = w, pw0 = pw;
  bounce_boundary(w, pw, 3, phi.col(3));
  CHECK(oracle::max_rel_error(pw, phi * w) < 1e-10);
  bounce_boundary(w, pw, 3, phi.col(3));
  CHECK(w == w0);
  CHECK(oracle::max_rel_error(pw, pw0) < 1e-12);
}

TEST_CASE("travel time tuning") {
  auto t = tune_travel_time(DensePrecision(Eigen::MatrixXd::Identity(3, 3)));
  CHECK(t.travel_time == doctest::Approx(0.01));
  Eigen::MatrixXd phi = Eigen::MatrixXd::Zero(2, 2);
  phi(0, 0) = 1.0;
  phi(1, 1) = 0.25;
  t = tune_travel_time(DensePrecision(phi));
  CHECK(t.converged);
  CHECK(t.travel_time == doctest::Approx(0.02).epsilon(1e-3));
  CHECK(tune_travel_time(DensePrecision(phi), 0.1).travel_time == doctest::Approx(0.2).epsilon(1e-3));

  SUBCASE("cap reached falls back to the trace bound") {
    Eigen::MatrixXd p = Eigen::MatrixXd::Identity(3, 3);
    p(0, 0) = 1.0 / 1.0;
    p(1, 1) = 1.0 / 0.999;
    p(2, 2) = 1.0 / 0.5;
    const auto f = tune_travel_time(DensePrecision(p), 0.01, 1e-14, 2);
    CHECK_FALSE(f.converged);
    CHECK(f.lambda_max == doctest::Approx(2.499));
  }

  SUBCASE("tree operator agrees with its dense form") {
    Rng rng(9);
    auto tree = std::make_shared<const Tree>(parse_newick(oracle::random_newick(12, rng)));
    auto g = std::make_shared<const TreeGaussian>(tree, 2.0, oracle::random_spd(3, rng));
    const auto a = tune_travel_time(TreePrecision(g));
    const Eigen::MatrixXd cov = dense_precision(*g).inverse();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    CHECK(a.lambda_max == doctest::Approx(es.eigenvalues().maxCoeff()).epsilon(5e-3));
  }
}

TEST_CASE("generic conjugate-gradient covariance action") {
  struct Plain final : PrecisionOperator {
    Eigen::MatrixXd m;
    std::size_t dim() const override { return static_cast<std::size_t>(m.rows()); }
    void multiply(std::span<const double> w, std::span<double> out) const override {
      Eigen::Map<Eigen::VectorXd>(out.data(), m.rows()) = m * Eigen::Map<const Eigen::VectorXd>(w.data(), m.rows());
    }
    void column(std::size_t i, std::span<double> out) const override {
      Eigen::Map<Eigen::VectorXd>(out.data(), m.rows()) = m.col(static_cast<Eigen::Index>(i));
    }
  } op;
  Rng rng(4);
  op.m = oracle::random_spd(8, rng);
  const Eigen::VectorXd w = oracle::random_vector(8, rng);
  Eigen::VectorXd out(8);
  op.covariance_multiply({w.data(), 8}, {out.data(), 8});
  CHECK(oracle::max_rel_error(out, op.m.llt().solve(w)) < 1e-8);
}

TEST_CASE("target validation") {
  auto t = make_target(Eigen::MatrixXd::Identity(2, 2), {Orthant::kPositive, Orthant::kFree}, {0, 1});
  CHECK_NOTHROW(t.validate());
  t.fixed = {1, 0};
  CHECK_THROWS_AS(t.validate(), InputError);
  t.fixed = {0};
  CHECK_THROWS_AS(t.validate(), InputError);

  auto u = make_target(Eigen::MatrixXd::Identity(2, 2), {Orthant::kPositive, Orthant::kNegative});
  Eigen::VectorXd x(2);
  x << 1.0, -1.0;
  CHECK(u.admits(x));
  x << 0.0, -1.0;
  CHECK_FALSE(u.admits(x));
  Rng rng(1);
  CHECK_THROWS_AS(bps_transition(u, x, 1.0, rng), InputError);
  x << 1.0, -1.0;
  CHECK_THROWS_AS(bps_transition(u, x, 0.0, rng), InputError);
}

TEST_CASE("fully masked target returns the start") {
  auto t = make_target(Eigen::MatrixXd::Identity(3, 3), {Orthant::kFree, Orthant::kFree, Orthant::kFree}, {1, 1, 1});
  Eigen::VectorXd x(3);
  x << 0.3, -1.0, 2.0;
  Rng rng(2);
  CHECK(bps_transition(t, x, 1.0, rng) == x);
}

TEST_CASE("constraints, masking and cache consistency along a long run") {
  Rng rng(21);
  const int d = 6;
  const Eigen::MatrixXd phi = oracle::random_spd(d, rng);
  TruncatedNormalTarget t;
  t.mean = oracle::random_vector(d, rng);
  t.precision = dense(phi);
  t.sign = {Orthant::kPositive, Orthant::kNegative, Orthant::kFree, Orthant::kPositive, Orthant::kFree, Orthant::kFree};
  t.fixed = {0, 0, 0, 0, 1, 0};
  Eigen::VectorXd x(d);
  x << 0.5, -0.5, 0.1, 1.0, 0.123456789, -0.7;
  BpsStats stats;
  BpsOptions opt;
  opt.verify_cache = true;
  std::size_t events = 0;
  opt.trace = [&](const BpsEvent& e) {
    if (e.kind != BpsEventKind::kEnd) ++events;
  };
  for (int it = 0; it < 3000; ++it) {
    const double fixed_before = x[4];
    x = bps_transition(t, x, 1.0, rng, &stats, opt);
    CHECK(x[4] == fixed_before);
    CHECK(t.admits(x));
  }
  CHECK(stats.boundary_events > 0);
  CHECK(stats.gradient_events > 0);
  CHECK(events == stats.boundary_events + stats.gradient_events);
  CHECK(stats.column_products > 0);
  CHECK(stats.max_cache_drift < 1e-8);
}

TEST_CASE("tree precision drives the sampler identically to its dense form") {
  Rng rng(31);
  auto tree = std::make_shared<const Tree>(parse_newick(oracle::random_newick(5, rng)));
  auto g = std::make_shared<const TreeGaussian>(tree, 1.0, oracle::random_spd(2, rng));
  TruncatedNormalTarget a;
  a.mean = Eigen::VectorXd::Zero(10);
  a.precision = std::make_shared<TreePrecision>(g);
  a.sign.assign(10, Orthant::kPositive);
  a.fixed.assign(10, 0);
  TruncatedNormalTarget b = a;
  b.precision = dense(dense_precision(*g));
  Eigen::VectorXd x = Eigen::VectorXd::Ones(10);
  Rng r1(8), r2(8);
  const Eigen::VectorXd xa = bps_transition(a, x, 2.0, r1);
  const Eigen::VectorXd xb = bps_transition(b, x, 2.0, r2);
  CHECK(oracle::max_rel_error(xa, xb) < 1e-6);
}

TEST_CASE("same seed gives the same trajectory") {
  Rng seed_rng(1);
  auto t = make_target(oracle::random_spd(4, seed_rng),
                       {Orthant::kPositive, Orthant::kFree, Orthant::kNegative, Orthant::kFree});
  Eigen::VectorXd x(4);
  x << 1.0, 0.0, -1.0, 0.0;
  Rng r1(77), r2(77);
  for (int i = 0; i < 50; ++i) {
    const Eigen::VectorXd a = bps_transition(t, x, 0.5, r1);
    const Eigen::VectorXd b = bps_transition(t, x, 0.5, r2);
    CHECK(a == b);
    x = a;
  }
}

TEST_CASE("orthant moments match rejection sampling") {
  const Eigen::MatrixXd cov = corr2(0.5);
  auto t = make_target(cov.inverse(), {Orthant::kPositive, Orthant::kPositive});
  const std::size_t n = 40000;

  Rng rng(100);
  std::vector<double> m1, m2, s11, s12;
  Eigen::VectorXd x = Eigen::VectorXd::Constant(2, 0.5);
  for (std::size_t i = 0; i < 1000; ++i) x = bps_transition(t, x, 1.0, rng);
  for (std::size_t i = 0; i < n; ++i) {
    x = bps_transition(t, x, 1.0, rng);
    m1.push_back(x[0]);
    m2.push_back(x[1]);
    s11.push_back(x[0] * x[0]);
    s12.push_back(x[0] * x[1]);
  }

  Rng orng(200);
  const Eigen::MatrixXd l = cov.llt().matrixL();
  std::vector<double> r1, r2, q11, q12;
  while (r1.size() < 200000) {
    Eigen::VectorXd z(2);
    z << orng.normal(), orng.normal();
    const Eigen::VectorXd y = l * z;
    if (y[0] > 0 && y[1] > 0) {
      r1.push_back(y[0]);
      r2.push_back(y[1]);
      q11.push_back(y[0] * y[0]);
      q12.push_back(y[0] * y[1]);
    }
  }
  CHECK(agree(oracle::batch_mean(m1), oracle::batch_mean(r1)));
  CHECK(agree(oracle::batch_mean(m2), oracle::batch_mean(r2)));
  CHECK(agree(oracle::batch_mean(s11), oracle::batch_mean(q11)));
  CHECK(agree(oracle::batch_mean(s12), oracle::batch_mean(q12)));
}

TEST_CASE("masked dimension gives the conditional Gaussian") {
  const Eigen::MatrixXd cov = (Eigen::MatrixXd(3, 3) << 1.0, 0.3, 0.5, 0.3, 2.0, -0.4, 0.5, -0.4, 1.5).finished();
  TruncatedNormalTarget t;
  t.mean = (Eigen::VectorXd(3) << 0.2, -0.1, 0.4).finished();
  t.precision = dense(cov.inverse());
  t.sign.assign(3, Orthant::kFree);
  t.fixed = {0, 0, 1};
  const double x3 = 1.3;
  // Analytic conditional of the first two given the third.
  const Eigen::Vector2d s12 = cov.block(0, 2, 2, 1);
  const Eigen::Vector2d cmean = t.mean.head(2) + s12 * (x3 - t.mean[2]) / cov(2, 2);
  const Eigen::Matrix2d ccov = cov.topLeftCorner(2, 2) - s12 * s12.transpose() / cov(2, 2);

  Rng rng(300);
  Eigen::VectorXd x(3);
  x << 0.0, 0.0, x3;
  std::vector<double> a, b, aa, ab;
  for (int i = 0; i < 40000; ++i) {
    x = bps_transition(t, x, 1.5, rng);
    REQUIRE(x[2] == x3);
    a.push_back(x[0]);
    b.push_back(x[1]);
    aa.push_back((x[0] - cmean[0]) * (x[0] - cmean[0]));
    ab.push_back((x[0] - cmean[0]) * (x[1] - cmean[1]));
  }
  const auto ea = oracle::batch_mean(a), eb = oracle::batch_mean(b);
  const auto eaa = oracle::batch_mean(aa), eab = oracle::batch_mean(ab);
  CHECK(std::abs(ea.mean - cmean[0]) < 3 * ea.se);
  CHECK(std::abs(eb.mean - cmean[1]) < 3 * eb.se);
  CHECK(std::abs(eaa.mean - ccov(0, 0)) < 3 * eaa.se);
  CHECK(std::abs(eab.mean - ccov(0, 1)) < 3 * eab.se);
}
