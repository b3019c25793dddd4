#include <gtest/gtest.h>

#include "oracles.hpp"
#include "rhl/coefficient_field.hpp"
#include "rhl/lattice.hpp"

using namespace rhl;

namespace {

ScalarField random_scalar(const TorusLattice& lat, std::uint64_t seed) {
  ScalarField u(lat);
  const auto v = oracle::random_values(lat.volume(), seed);
  std::copy(v.begin(), v.end(), u.values().begin());
  return u;
}

VectorField random_vector(const TorusLattice& lat, std::uint64_t seed) {
  VectorField w(lat);
  const auto v = oracle::random_values(w.values().size(), seed);
  std::copy(v.begin(), v.end(), w.values().begin());
  return w;
}

}  // namespace

TEST(TorusLattice, RejectsOddOrZeroSides) {
  EXPECT_THROW(TorusLattice({3, 4}), DimensionError);
  EXPECT_THROW(TorusLattice({0}), DimensionError);
  EXPECT_THROW(TorusLattice(std::vector<std::size_t>{}), DimensionError);
}

TEST(TorusLattice, IndexRoundTrip) {
  const TorusLattice lat({4, 6, 2});
  EXPECT_EQ(lat.volume(), 48u);
  for (std::size_t x = 0; x < lat.volume(); ++x) EXPECT_EQ(lat.index(lat.coords(x)), x);
  // row-major, last coordinate fastest
  EXPECT_EQ(lat.index({0, 0, 1}), 1u);
  EXPECT_EQ(lat.index({0, 1, 0}), 2u);
  EXPECT_EQ(lat.index({1, 0, 0}), 12u);
  EXPECT_EQ(lat.index({-1, 0, 0}), lat.index({3, 0, 0}));
}

TEST(TorusLattice, NeighborsInvert) {
  const TorusLattice lat({4, 6, 2});
  for (std::size_t x = 0; x < lat.volume(); ++x)
    for (int i = 0; i < 3; ++i) {
      EXPECT_EQ(lat.neighbor(lat.neighbor(x, i, +1), i, -1), x);
      EXPECT_EQ(lat.neighbor(lat.neighbor(x, i, -1), i, +1), x);
    }
}

TEST(TorusLattice, MinimalImage) {
  const TorusLattice lat = TorusLattice::cube(2, 8);
  EXPECT_DOUBLE_EQ(lat.min_image_norm(lat.index({7, 0})), 1.0);
  EXPECT_DOUBLE_EQ(lat.min_image_norm(lat.index({3, 4})), 5.0);
}

TEST(Gradient, ConstantGivesZero) {
  const auto lat = TorusLattice::cube(3, 4);
  ScalarField u(lat, 2.5);
  const auto g = gradient(u);
  EXPECT_EQ(norm_inf(g.values()), 0.0);
}

TEST(Gradient, OneDimensionalWraparound) {
  const auto lat = TorusLattice::cube(1, 2);
  ScalarField u(lat);
  u[1] = 1.0;
  const auto g = gradient(u);
  EXPECT_EQ(g(0, 0), 1.0);
  EXPECT_EQ(g(1, 0), -1.0);
}

TEST(Gradient, ShiftInvariant) {
  const auto lat = TorusLattice::cube(3, 4);
  auto u = random_scalar(lat, 1);
  auto w = u;
  for (auto& v : w.values()) v += 3.7;
  const auto a = gradient(u), b = gradient(w);
  for (std::size_t i = 0; i < a.values().size(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-14);
}

TEST(Divergence, ConstantGivesZeroAndSumsToZero) {
  const auto lat = TorusLattice::cube(3, 4);
  VectorField c(lat);
  for (std::size_t x = 0; x < lat.volume(); ++x)
    for (int i = 0; i < 3; ++i) c(x, i) = 1.0 + i;
  EXPECT_EQ(norm_inf(divergence(c).values()), 0.0);

  const auto v = random_vector(lat, 2);
  const auto dv = divergence(v);
  double s = 0.0;
  for (double x : dv.values()) s += x;
  EXPECT_LE(std::abs(s), 1e-12 * norm1(v.values()));
}

TEST(Divergence, AdjointOfGradient) {
  for (const auto& sides : std::vector<std::vector<std::size_t>>{{16}, {8, 6}, {4, 4, 4}, {16, 16, 16}, {4, 2, 4, 2}}) {
    const TorusLattice lat(sides);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto u = random_scalar(lat, 10 + s);
      const auto v = random_vector(lat, 20 + s);
      const double lhs = dot(gradient(u).values(), v.values());
      const double rhs = dot(u.values(), divergence(v).values());
      EXPECT_LE(std::abs(lhs - rhs), 1e-12 * norm2(u.values()) * norm2(v.values())) << lat.describe();
    }
  }
}

TEST(ApplyOperator, ConstantField) {
  const auto lat = TorusLattice::cube(3, 4);
  const auto a = CoefficientField::identity(lat);
  const auto out = apply_operator(1.0, a, ScalarField(lat, 0.3));
  for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 0.3);
}

TEST(ApplyOperator, TwoSiteExample) {
  const auto lat = TorusLattice::cube(1, 2);
  ScalarField u(lat);
  u[0] = 0.6;
  u[1] = 0.4;
  const auto out = apply_operator(1.0, CoefficientField::identity(lat), u);
  EXPECT_NEAR(out[0], 1.0, 1e-15);
  EXPECT_NEAR(out[1], 0.0, 1e-15);
}

TEST(ApplyOperator, LinearAndMatchesDenseAssembly) {
  const auto lat = TorusLattice::cube(3, 4);
  const auto a = oracle::random_coefficients(lat, 1.0, 4.0, 5);
  const auto u = random_scalar(lat, 6), w = random_scalar(lat, 7);
  const auto lhs = apply_operator(0.3, a, linear_combination(2.0, u, -0.5, w));
  const auto rhs = linear_combination(2.0, apply_operator(0.3, a, u), -0.5, apply_operator(0.3, a, w));
  for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-12);

  const auto M = oracle::dense_operator(0.3, a);
  const Eigen::Map<const Eigen::VectorXd> uv(u.values().data(), static_cast<Eigen::Index>(u.size()));
  const Eigen::VectorXd ref = M * uv;
  const auto got = apply_operator(0.3, a, u);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], ref(static_cast<Eigen::Index>(i)), 1e-12);
}

TEST(ApplyOperator, RejectsMismatchAndNegativeEta) {
  const auto a = CoefficientField::identity(TorusLattice::cube(2, 4));
  EXPECT_THROW(apply_operator(1.0, a, ScalarField(TorusLattice::cube(2, 6))), DimensionError);
  EXPECT_THROW(apply_operator(-1.0, a, ScalarField(TorusLattice::cube(2, 4))), DomainError);
}

TEST(ApplyOperator, EnergyWithinEllipticBounds) {
  const auto lat = TorusLattice::cube(3, 6);
  const auto a = oracle::random_coefficients(lat, 0.5, 3.0, 11);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto u = random_scalar(lat, 30 + s);
    const double e = dot(u.values(), apply_operator(0.0, a, u).values());
    const double g2 = std::pow(norm2(gradient(u).values()), 2);
    EXPECT_GE(e, 0.5 * g2 * (1 - 1e-12));
    EXPECT_LE(e, 3.0 * g2 * (1 + 1e-12));
  }
}
