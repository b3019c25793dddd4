#include <gtest/gtest.h>

#include "oracles.hpp"
#include "rhl/coeffs.hpp"
#include "rhl/fields.hpp"
#include "rhl/solver.hpp"

using namespace rhl;

namespace {

ScalarField random_scalar(const TorusLattice& lat, std::uint64_t seed) {
  ScalarField u(lat);
  const auto v = oracle::random_values(lat.volume(), seed);
  std::copy(v.begin(), v.end(), u.values().begin());
  return u;
}

CoefficientField sigmoid_environment(const TorusLattice& lat, double lo, double hi, std::uint64_t seed) {
  return evaluate_map(CoefficientMap::isotropic_sigmoid(lo, hi), sample_white_noise(lat, seed));
}

}  // namespace

TEST(SolveConst, TwoSiteGreen) {
  const auto lat = TorusLattice::cube(1, 2);
  // dense 2x2 oracle: [[3, -2], [-2, 3]] u = (1, 0)
  Eigen::Matrix2d M;
  M << 3, -2, -2, 3;
  const Eigen::Vector2d ref = M.lu().solve(Eigen::Vector2d(1, 0));
  const auto u = solve_const(1.0, Matrix::Identity(1, 1), delta(lat));
  EXPECT_NEAR(u[0], ref(0), 1e-14);
  EXPECT_NEAR(u[1], ref(1), 1e-14);
  EXPECT_NEAR(u[0], 0.6, 1e-14);
  EXPECT_NEAR(u[1], 0.4, 1e-14);
}

TEST(SolveConst, SumRuleAndResidual) {
  const auto lat = TorusLattice({8, 6, 4});
  Matrix A(3, 3);
  A << 2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0;
  const auto f = random_scalar(lat, 3);
  const auto u = solve_const(0.7, A, f);
  double su = 0.0, sf = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) su += u[i], sf += f[i];
  EXPECT_NEAR(0.7 * su, sf, 1e-10);
  const auto a = CoefficientField::constant(lat, A);
  EXPECT_LE(relative_residual(0.7, a, u, f), 1e-10);
}

TEST(SolveConst, ConstantRightSide) {
  const auto lat = TorusLattice::cube(2, 8);
  const auto u = solve_const(1.0, Matrix::Identity(2, 2), ScalarField(lat, 2.0));
  for (double v : u.values()) EXPECT_NEAR(v, 2.0, 1e-13);
}

TEST(SolveConst, EtaZeroRequiresMeanZero) {
  const auto lat = TorusLattice::cube(2, 8);
  EXPECT_THROW(solve_const(0.0, Matrix::Identity(2, 2), delta(lat)), DomainError);
  auto f = random_scalar(lat, 4);
  remove_mean(f);
  const auto u = solve_const(0.0, Matrix::Identity(2, 2), f);
  EXPECT_NEAR(mean(u.values()), 0.0, 1e-13);
  EXPECT_LE(relative_residual(0.0, CoefficientField::identity(lat), u, f), 1e-10);
}

TEST(SolveCg, MatchesSpectralForIdentity) {
  const auto lat = TorusLattice::cube(3, 16);
  const auto f = random_scalar(lat, 8);
  const auto [u, rep] = solve_cg(0.5, CoefficientField::identity(lat), f, {1e-12, 100});
  const auto ref = solve_const(0.5, Matrix::Identity(3, 3), f);
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(u[i], ref[i], 1e-8);
  EXPECT_LE(rep.relative_residual, 1e-12);
}

TEST(SolveCg, MatchesDenseLu) {
  const auto lat = TorusLattice::cube(3, 4);
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto a = oracle::random_coefficients(lat, 0.5, 3.0, 100 + s);
    const auto f = random_scalar(lat, 200 + s);
    const auto M = oracle::dense_operator(0.5, a);
    const Eigen::Map<const Eigen::VectorXd> fv(f.values().data(), 64);
    const Eigen::VectorXd ref = M.partialPivLu().solve(fv);
    const auto [u, rep] = solve_cg(0.5, a, f, {1e-13, 500});
    for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(u[i], ref(static_cast<Eigen::Index>(i)), 1e-8);
  }
}

TEST(SolveCg, ReportedResidualIsRecomputable) {
  const auto lat = TorusLattice::cube(3, 8);
  const auto a = sigmoid_environment(lat, 1.0, 4.0, 9);
  const auto f = random_scalar(lat, 10);
  const auto [u, rep] = solve_cg(0.1, a, f);
  EXPECT_LE(rep.relative_residual, rep.tolerance);
  EXPECT_NEAR(relative_residual(0.1, a, u, f), rep.relative_residual, 1e-12);
  EXPECT_EQ(rep.method, "pcg-midpoint");
  // energy bound ||grad u||^2 <= ||f|| ||u|| / lambda
  const double g2 = std::pow(norm2(gradient(u).values()), 2);
  EXPECT_LE(g2, norm2(f.values()) * norm2(u.values()) / a.lambda());
}

TEST(SolveCg, PeriodicCorrectorProblem) {
  const auto lat = TorusLattice::cube(2, 16);
  const auto a = sigmoid_environment(lat, 1.0, 4.0, 12);
  auto f = random_scalar(lat, 13);
  EXPECT_THROW(solve_cg(0.0, a, f), DomainError);
  remove_mean(f);
  const auto [u, rep] = solve_cg(0.0, a, f);
  EXPECT_NEAR(mean(u.values()), 0.0, 1e-12);
  EXPECT_LE(relative_residual(0.0, a, u, f), 1e-8);
}

TEST(SolveCg, IterationsGrowWithContrast) {
  const auto lat = TorusLattice::cube(3, 16);
  const auto w = sample_white_noise(lat, 77);
  const auto f = random_scalar(lat, 78);
  int last = 0;
  for (double c : {1.0, 2.0, 4.0, 8.0}) {
    const auto a = evaluate_map(CoefficientMap::isotropic_sigmoid(1.0, c), w);
    const int it = solve_cg(0.01, a, f, {1e-8, 1000}).second.iterations;
    EXPECT_GE(it, last) << "contrast " << c;
    last = it;
  }
}

TEST(SolveCg, NonConvergenceCarriesBestIterate) {
  const auto lat = TorusLattice::cube(3, 8);
  const auto a = sigmoid_environment(lat, 1.0, 8.0, 14);
  const auto f = random_scalar(lat, 15);
  try {
    solve_cg(1e-3, a, f, {1e-12, 2});
    FAIL() << "expected non-convergence";
  } catch (const CgNonConvergence& e) {
    EXPECT_EQ(e.iterations(), 2);
    EXPECT_GT(e.residual(), 1e-12);
    EXPECT_NEAR(relative_residual(1e-3, a, e.best_iterate(), f), e.residual(), 1e-12);
  }
}

TEST(SolveCg, UpperPreconditionerAlsoConverges) {
  const auto lat = TorusLattice::cube(3, 8);
  const auto a = sigmoid_environment(lat, 1.0, 4.0, 16);
  const auto f = random_scalar(lat, 17);
  CgOptions o;
  o.preconditioner = Preconditioner::upper;
  const auto [u, rep] = solve_cg(0.2, a, f, o);
  const auto ref = solve_cg(0.2, a, f).first;
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(u[i], ref[i], 1e-6);
  EXPECT_EQ(rep.method, "pcg-upper");
}

TEST(Richardson, ConstantCoefficientsTerminateImmediately) {
  const auto lat = TorusLattice::cube(3, 8);
  const auto a = CoefficientField::constant(lat, 2.0 * Matrix::Identity(3, 3));
  const auto [phi, tr] = solve_richardson(0.1, a, Vector::Unit(3, 0));
  EXPECT_EQ(tr.iterations, 1);
  EXPECT_EQ(tr.grad_norms.front(), 0.0);
  EXPECT_EQ(norm_inf(phi.values()), 0.0);
}

TEST(Richardson, ContractionAndAgreementWithCg) {
  const auto lat = TorusLattice::cube(3, 8);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto a = sigmoid_environment(lat, 1.0, 4.0, 300 + s);
    const double eta = 0.05;
    const auto [phi, tr] = solve_richardson(eta, a, Vector::Unit(3, 1), 1e-12);
    ASSERT_EQ(tr.ratios.size() + 1, tr.grad_norms.size());
    for (double r : tr.ratios) {
      EXPECT_GT(r, 0.0);
      EXPECT_LE(r, 0.75 + 1e-10);
    }
    ScalarField rhs = divergence(coefficient_column(a, 1));
    for (auto& v : rhs.values()) v = -v;
    auto ref = solve_cg(eta, a, rhs, {1e-12, 2000}).first;
    remove_mean(ref);
    double diff = 0.0;
    for (std::size_t i = 0; i < phi.size(); ++i) diff = std::max(diff, std::abs(phi[i] - ref[i]));
    EXPECT_LE(diff, 1e-6 * (1.0 + norm_inf(phi.values())));
  }
}

TEST(Richardson, RequiresPositiveEtaAndReportsNonConvergence) {
  const auto lat = TorusLattice::cube(2, 8);
  const auto a = sigmoid_environment(lat, 1.0, 4.0, 5);
  EXPECT_THROW(solve_richardson(0.0, a, Vector::Unit(2, 0)), DomainError);
  try {
    solve_richardson(0.1, a, Vector::Unit(2, 0), 1e-14, 3);
    FAIL();
  } catch (const RichardsonNonConvergence& e) {
    EXPECT_EQ(e.trace().iterations, 3);
    EXPECT_EQ(e.trace().ratios.size(), 2u);
  }
}
