#include <gtest/gtest.h>

#include "oracles.hpp"
#include "rhl/fields.hpp"
#include "rhl/solver.hpp"

using namespace rhl;

TEST(WhiteNoise, DeterministicAndStandard) {
  const auto lat = TorusLattice::cube(3, 64);
  const auto a = sample_white_noise(lat, 42), b = sample_white_noise(lat, 42);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  Accumulator acc;
  for (double v : a.values()) acc.add(v);
  EXPECT_LE(std::abs(acc.mean()), 4.0 / std::sqrt(double(lat.volume())));
  // chi-squared band: sd of the sample variance is sqrt(2/V) ~ 0.0017
  EXPECT_NEAR(acc.variance(), 1.0, 0.05);
}

TEST(WhiteNoise, IndependentSeeds) {
  const auto lat = TorusLattice::cube(3, 32);
  const auto a = sample_white_noise(lat, 1), b = sample_white_noise(lat, 2);
  const double rho = dot(a.values(), b.values()) / (norm2(a.values()) * norm2(b.values()));
  EXPECT_LE(std::abs(rho), 4.0 / std::sqrt(double(lat.volume())));
}

TEST(MassiveGff, RejectsNonPositiveMass) {
  const auto lat = TorusLattice::cube(2, 8);
  EXPECT_THROW(sample_massive_gff(lat, 0.0, Matrix::Identity(2, 2), 1), DomainError);
}

TEST(MassiveGff, CovarianceMatchesSymbolSum) {
  const auto lat = TorusLattice::cube(3, 16);
  const std::size_t n = 10000;
  Accumulator v0, c1, c2, m4;
  std::vector<double> raw;
  double worst_imag = 0.0;
  const std::size_t e1 = lat.index({1, 0, 0}), e2 = lat.index({2, 0, 0});
  for (std::size_t r = 0; r < n; ++r) {
    double imag = 0.0;
    const auto phi = sample_massive_gff(lat, 1.0, Matrix::Identity(3, 3), 2024, r, &imag);
    worst_imag = std::max(worst_imag, imag);
    v0.add(phi[0] * phi[0]);
    c1.add(phi[e1] * phi[0]);
    c2.add(phi[e2] * phi[0]);
    raw.push_back(phi[0]);
  }
  EXPECT_LE(worst_imag, 1e-10);
  const double g0 = oracle::symbol_sum_green(lat, 1.0, {0, 0, 0});
  const double g1 = oracle::symbol_sum_green(lat, 1.0, {1, 0, 0});
  const double g2 = oracle::symbol_sum_green(lat, 1.0, {2, 0, 0});
  EXPECT_NEAR(v0.mean(), g0, 3 * v0.stderr_mean());
  EXPECT_NEAR(c1.mean(), g1, 3 * c1.stderr_mean());
  EXPECT_NEAR(c2.mean(), g2, 3 * c2.stderr_mean());
  // kurtosis of the site marginal
  Accumulator m;
  for (double x : raw) m.add(x);
  double s4 = 0.0;
  for (double x : raw) s4 += std::pow(x - m.mean(), 4);
  const double kurt = s4 / double(n) / std::pow(m.variance(), 2);
  EXPECT_NEAR(kurt, 3.0, 0.2);
}

TEST(MasslessGff, ZeroMeanAndDimensionCheck) {
  const auto lat = TorusLattice::cube(3, 16);
  double imag = 0.0;
  const auto phi = sample_massless_gff(lat, 5, 0, MasslessRegularization::zero_mode, &imag);
  double s = 0.0;
  for (double v : phi.values()) s += v;
  EXPECT_LE(std::abs(s), 1e-10 * double(lat.volume()));
  EXPECT_LE(imag, 1e-10);
  EXPECT_THROW(sample_massless_gff(TorusLattice::cube(2, 16), 5), DomainError);
  EnvironmentSpec spec{TorusLattice::cube(2, 8)};
  spec.base = BaseMeasure::massless_gff;
  EXPECT_THROW(spec.validate(), DomainError);
}

TEST(Kernel, PowerLawValues) {
  const auto lat = TorusLattice::cube(3, 16);
  const auto k = build_kernel(lat, KernelFamily::power_law, {0.5});
  EXPECT_DOUBLE_EQ(k.components[0][0], 1.0);
  EXPECT_DOUBLE_EQ(k.components[0][lat.index({2, 0, 0})], 0.2);
  EXPECT_DOUBLE_EQ(k.components[0][lat.index({-2, 0, 0})], 0.2);
  EXPECT_THROW(build_kernel(lat, KernelFamily::power_law, {0.0}), DomainError);
  EXPECT_THROW(build_kernel(TorusLattice::cube(2, 8), KernelFamily::grad_green), DomainError);
}

TEST(Kernel, GradGreenNormIsStable) {
  const double n32 = build_kernel(TorusLattice::cube(3, 32), KernelFamily::grad_green).lq_norm(1.6);
  const double n64 = build_kernel(TorusLattice::cube(3, 64), KernelFamily::grad_green).lq_norm(1.6);
  EXPECT_TRUE(std::isfinite(n64));
  EXPECT_LE(n64, 1.1 * n32);
}

TEST(Kernel, GradGreenReproducesField) {
  // sum_j h_j * grad_j phi = phi - mean(phi)
  const auto lat = TorusLattice::cube(3, 8);
  const auto k = build_kernel(lat, KernelFamily::grad_green);
  const auto phi = sample_white_noise(lat, 3);
  const auto out = convolve_env(k, gradient(phi));
  const double m = mean(phi.values());
  for (std::size_t x = 0; x < lat.volume(); ++x) EXPECT_NEAR(out[x], phi[x] - m, 1e-12);
}

TEST(Convolve, DeltaKernelIsIdentityAndLinear) {
  const auto lat = TorusLattice::cube(3, 8);
  KernelParams p;
  p.values = delta(lat);
  const auto k = build_kernel(lat, KernelFamily::custom, p);
  const auto w = sample_white_noise(lat, 1), v = sample_white_noise(lat, 2);
  const auto out = convolve_env(k, w);
  for (std::size_t x = 0; x < lat.volume(); ++x) EXPECT_NEAR(out[x], w[x], 1e-13);
  const auto kp = build_kernel(lat, KernelFamily::power_law, {0.5});
  const auto lhs = convolve_env(kp, linear_combination(2.0, w, 3.0, v));
  const auto rhs = linear_combination(2.0, convolve_env(kp, w), 3.0, convolve_env(kp, v));
  for (std::size_t x = 0; x < lat.volume(); ++x) EXPECT_NEAR(lhs[x], rhs[x], 1e-11);
  EXPECT_THROW(convolve_env(kp, ScalarField(TorusLattice::cube(3, 4))), DimensionError);
}

TEST(Convolve, WhiteNoiseVarianceIsKernelNorm) {
  const auto lat = TorusLattice::cube(3, 8);
  const auto k = build_kernel(lat, KernelFamily::power_law, {0.5});
  const double h2 = std::pow(k.lq_norm(2.0), 2);
  Accumulator v;
  for (std::size_t r = 0; r < 2000; ++r) {
    const auto w = convolve_env(k, sample_white_noise(lat, 9, r));
    v.add(w[0] * w[0]);
  }
  EXPECT_NEAR(v.mean(), h2, 3 * v.stderr_mean());
}

TEST(Correlation, WhiteNoiseProfile) {
  EnvironmentSpec spec{TorusLattice::cube(3, 16)};
  spec.seed = 4;
  const auto prof = estimate_correlation(spec, 20);
  ASSERT_GT(prof.radii.size(), 3u);
  EXPECT_EQ(prof.radii[0], 0.0);
  EXPECT_NEAR(prof.means[0], 1.0, 0.05);
  for (std::size_t i = 1; i < prof.radii.size(); ++i) {
    EXPECT_GT(prof.radii[i], prof.radii[i - 1]);
    EXPECT_GT(prof.counts[i], 0u);
    EXPECT_GE(prof.stderrs[i], 0.0);
    EXPECT_LE(std::abs(prof.means[i]), 4 * prof.stderrs[i] + 1e-15);
  }
  EXPECT_THROW(estimate_correlation(spec, 1), DomainError);
}

TEST(Correlation, MassiveProfileDecays) {
  EnvironmentSpec spec{TorusLattice::cube(3, 32)};
  spec.base = BaseMeasure::massive_gff;
  spec.seed = 5;
  const auto prof = estimate_correlation(spec, 20);
  for (std::size_t i = 1; i < prof.radii.size() && prof.radii[i] <= 8; ++i)
    EXPECT_LE(prof.means[i], prof.means[i - 1] + 3 * (prof.stderrs[i] + prof.stderrs[i - 1]));
}

TEST(Correlation, MatchesDoubleSumOnSmallTorus) {
  // <omega(x) omega(0)> = sum_{y,y'} h(x-y) h(-y') G(y-y') for a Gaussian base.
  const auto lat = TorusLattice::cube(3, 8);
  EnvironmentSpec spec{lat};
  spec.base = BaseMeasure::massive_gff;
  spec.mass2 = 1.0;
  spec.kernel = build_kernel(lat, KernelFamily::power_law, {0.5});
  spec.seed = 8;
  const auto prof = estimate_correlation(spec, 400);
  const auto& h = spec.kernel->components[0];
  std::vector<double> G(lat.volume());
  for (std::size_t y = 0; y < lat.volume(); ++y) G[y] = oracle::symbol_sum_green(lat, 1.0, lat.coords(y));
  for (std::size_t x : {lat.index({0, 0, 0}), lat.index({1, 0, 0}), lat.index({2, 1, 0}), lat.index({4, 4, 4})}) {
    const auto cx = lat.coords(x);
    double ref = 0.0;
    for (std::size_t y = 0; y < lat.volume(); ++y) {
      const auto cy = lat.coords(y);
      std::vector<long> xmy(3);
      for (int i = 0; i < 3; ++i) xmy[i] = cx[i] - cy[i];
      const double hx = h[lat.index(xmy)];
      for (std::size_t yp = 0; yp < lat.volume(); ++yp) {
        const auto cyp = lat.coords(yp);
        std::vector<long> myp(3), d(3);
        for (int i = 0; i < 3; ++i) myp[i] = -cyp[i], d[i] = cy[i] - cyp[i];
        ref += hx * h[lat.index(myp)] * G[lat.index(d)];
      }
    }
    EXPECT_NEAR(prof.site_means[x], ref, 3 * prof.site_stderrs[x]) << "site " << x;
  }
}
