#include <gtest/gtest.h>

#include <random>

#include "rhl/stats.hpp"

using namespace rhl;

TEST(Accumulator, SmallExamples) {
  Accumulator a;
  for (double v : {1.0, 1.0, 1.0}) a.add(v);
  EXPECT_EQ(a.mean(), 1.0);
  EXPECT_EQ(a.variance(), 0.0);
  Accumulator b = accumulate(accumulate(Accumulator{}, 0.0), 2.0);
  EXPECT_EQ(b.mean(), 1.0);
  EXPECT_EQ(b.variance(), 2.0);
}

TEST(Accumulator, RejectsNonFinite) {
  Accumulator a;
  EXPECT_THROW(a.add(std::nan("")), DataError);
  EXPECT_THROW(a.add(INFINITY), DataError);
}

TEST(Accumulator, NoCancellation) {
  Accumulator a;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) a.add(1.0 + ((i % 2) ? -1e-8 : 1e-8));
  // exact sample variance of the alternating sequence: n/(n-1) * 1e-16
  const double exact = static_cast<double>(n) / (n - 1) * 1e-16;
  EXPECT_NEAR(a.variance(), exact, 1e-18);
}

TEST(Accumulator, MergeMatchesConcatenation) {
  std::mt19937_64 g(1);
  std::normal_distribution<double> nd(3.0, 2.0);
  std::vector<double> v(1000);
  for (auto& x : v) x = nd(g);
  Accumulator all, p1, p2, p3;
  for (std::size_t i = 0; i < v.size(); ++i) {
    all.add(v[i]);
    (i < 300 ? p1 : i < 700 ? p2 : p3).add(v[i]);
  }
  Accumulator left = p1, right = p2;
  left.merge(p2);
  left.merge(p3);
  right.merge(p3);
  Accumulator assoc = p1;
  assoc.merge(right);
  for (const auto* m : {&left, &assoc}) {
    EXPECT_EQ(m->count(), all.count());
    EXPECT_NEAR(m->mean(), all.mean(), 1e-12 * std::abs(all.mean()));
    EXPECT_NEAR(m->variance(), all.variance(), 1e-12 * all.variance());
  }
}

TEST(ArrayAccumulator, MatchesScalar) {
  ArrayAccumulator arr(2);
  Accumulator a, b;
  for (int i = 0; i < 10; ++i) {
    const double x = i * 0.5, y = i * i;
    arr.add(std::vector<double>{x, y});
    a.add(x);
    b.add(y);
  }
  EXPECT_NEAR(arr.mean(0), a.mean(), 1e-14);
  EXPECT_NEAR(arr.variance(1), b.variance(), 1e-10);
  EXPECT_NEAR(arr.stderr_mean(1), b.stderr_mean(), 1e-12);
}

namespace {
double sample_mean(std::span<const double> s) {
  double t = 0;
  for (double v : s) t += v;
  return t / static_cast<double>(s.size());
}
}  // namespace

TEST(Bootstrap, ConstantSamples) {
  std::vector<double> s(50, 2.5);
  const auto ci = bootstrap_ci(s, sample_mean, 500, 3);
  EXPECT_EQ(ci.low, 2.5);
  EXPECT_EQ(ci.high, 2.5);
}

TEST(Bootstrap, WidthMatchesNormalTheory) {
  std::mt19937_64 g(9);
  std::normal_distribution<double> nd;
  std::vector<double> s(400);
  for (auto& x : s) x = nd(g);
  const auto ci = bootstrap_ci(s, sample_mean, 2000, 4);
  const double ref = 2 * 1.96 / std::sqrt(400.0);
  EXPECT_NEAR(ci.high - ci.low, ref, 0.3 * ref);
  const auto again = bootstrap_ci(s, sample_mean, 2000, 4);
  EXPECT_EQ(ci.low, again.low);
  EXPECT_EQ(ci.high, again.high);
}

TEST(Bootstrap, Preconditions) {
  std::vector<double> few(9, 1.0), ok(10, 1.0);
  EXPECT_THROW(bootstrap_ci(few, sample_mean, 500, 1), DomainError);
  EXPECT_THROW(bootstrap_ci(ok, sample_mean, 100, 1), DomainError);
}

TEST(LogLogFit, ExactPowerLaw) {
  std::vector<FitPoint> p;
  for (int r = 1; r <= 10; ++r) p.push_back({double(r), 7.0 * std::pow(r, -3.0), 0.0});
  const auto f = loglog_fit(p, {1, 10});
  EXPECT_NEAR(f.exponent, -3.0, 1e-10);
  EXPECT_NEAR(f.prefactor, 7.0, 1e-9);
  EXPECT_EQ(f.n_points, 10);
  EXPECT_LE(f.ci_low, f.exponent);
  EXPECT_GE(f.ci_high, f.exponent);
}

TEST(LogLogFit, NoisyRecoveryOfPlantedExponents) {
  std::mt19937_64 g(5);
  std::normal_distribution<double> nd;
  for (double p : {-1.0, -2.0, -3.0, -4.0}) {
    std::vector<FitPoint> pts;
    for (int r = 2; r <= 30; ++r) {
      const double v = std::pow(r, p);
      pts.push_back({double(r), v * (1 + 0.01 * nd(g)), 0.01 * v});
    }
    const auto f = loglog_fit(pts, {2, 30});
    EXPECT_NEAR(f.exponent, p, 0.02 * std::abs(p));
    EXPECT_LE(f.ci_low, p + 0.05);
    EXPECT_GE(f.ci_high, p - 0.05);
  }
}

TEST(LogLogFit, NoisyOneOverR) {
  std::mt19937_64 g(6);
  std::normal_distribution<double> nd;
  std::vector<FitPoint> pts;
  for (int r = 1; r <= 20; ++r) pts.push_back({double(r), (1 + 0.01 * nd(g)) / r, 0.01 / r});
  EXPECT_NEAR(loglog_fit(pts, {1, 20}).exponent, -1.0, 0.05);
}

TEST(LogLogFit, Degeneracies) {
  std::vector<FitPoint> p;
  for (int r = 1; r <= 4; ++r) p.push_back({double(r), 1.0 / r, 0.0});
  EXPECT_THROW(loglog_fit(p, {1, 4}), DomainError);
  p.push_back({5, -1.0, 0.0});
  EXPECT_THROW(loglog_fit(p, {1, 5}), FitError);
  // values within 2 sigma of zero are excluded and reported
  std::vector<FitPoint> q;
  for (int r = 1; r <= 8; ++r) q.push_back({double(r), std::pow(r, -2.0), r > 6 ? 1.0 : 1e-4});
  const auto f = loglog_fit(q, {1, 8});
  EXPECT_EQ(f.n_excluded, 2);
  EXPECT_EQ(f.n_points, 6);
  for (auto& x : q) x.stderr = 1.0;
  EXPECT_THROW(loglog_fit(q, {1, 8}), FitError);
}

TEST(LogLogFit, ExponentialCofit) {
  std::vector<FitPoint> p;
  for (int r = 1; r <= 20; ++r) p.push_back({double(r), std::pow(r, -1.5) * std::exp(-0.2 * r), 0.0});
  LogLogOptions o;
  o.cofit_exponential = true;
  const auto f = loglog_fit(p, {1, 20}, o);
  EXPECT_NEAR(f.exponent, -1.5, 1e-9);
  EXPECT_NEAR(f.decay_rate, 0.2, 1e-9);
}

TEST(OffsetFit, RecoversShiftedPowerLaw) {
  std::vector<FitPoint> p;
  for (int r = 2; r <= 20; ++r) p.push_back({double(r), 2.0 / r - 0.05, 0.0});
  const auto f = offset_loglog_fit(p, {2, 20});
  EXPECT_NEAR(f.exponent, -1.0, 1e-3);
  EXPECT_NEAR(f.offset, -0.05, 1e-4);
}

TEST(ControlledArrayAccumulator, MatchesLeastSquaresIntercept) {
  std::mt19937_64 gen(17);
  std::normal_distribution<double> g;
  const int n = 50;
  Eigen::MatrixXd X(n, 2);
  Eigen::MatrixXd Y(n, 2);
  ControlledArrayAccumulator acc(2);
  for (int k = 0; k < n; ++k) {
    const double c = g(gen);
    const double y0 = 2.0 + 3.0 * c + 0.1 * g(gen);
    const double y1 = -1.0 + 0.5 * g(gen);
    X(k, 0) = 1.0;
    X(k, 1) = c;
    Y(k, 0) = y0;
    Y(k, 1) = y1;
    acc.add(std::vector<double>{y0, y1}, c);
  }
  const Eigen::MatrixXd coef = X.colPivHouseholderQr().solve(Y);
  const Eigen::MatrixXd resid = Y - X * coef;
  const auto m = acc.means();
  const auto s = acc.stderrs();
  for (int i = 0; i < 2; ++i) {
    EXPECT_NEAR(m[static_cast<std::size_t>(i)], coef(0, i), 1e-12);
    EXPECT_NEAR(acc.beta(static_cast<std::size_t>(i)), coef(1, i), 1e-12);
    EXPECT_NEAR(s[static_cast<std::size_t>(i)], std::sqrt(resid.col(i).squaredNorm() / (n - 2) / n), 1e-12);
  }
  EXPECT_EQ(acc.count(), static_cast<std::uint64_t>(n));
}

TEST(ControlledArrayAccumulator, ConstantControlFallsBackToPlainMean) {
  ControlledArrayAccumulator acc(1);
  Accumulator plain;
  for (double v : {1.0, 4.0, 2.0, 7.0}) {
    acc.add(std::vector<double>{v}, 0.5);
    plain.add(v);
  }
  EXPECT_EQ(acc.beta(0), 0.0);
  EXPECT_DOUBLE_EQ(acc.means()[0], plain.mean());
  EXPECT_DOUBLE_EQ(acc.stderrs()[0], plain.stderr_mean());
  EXPECT_THROW(acc.add(std::vector<double>{1.0, 2.0}, 0.0), DimensionError);
}
