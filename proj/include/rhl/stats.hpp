#pragma once

// Streaming Monte Carlo statistics, percentile bootstrap and weighted
// power-law regression.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rhl/errors.hpp"

namespace rhl {

/// Welford accumulator for count, mean and sum of squared deviations.
class Accumulator {
 public:
  void add(double value) {
    if (!std::isfinite(value)) throw DataError("Accumulator: non-finite value");
    ++n_;
    const double delta = value - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (value - mean_);
  }

  /// Chan et al. pairwise combination.
  void merge(const Accumulator& o) {
    if (o.n_ == 0) return;
    if (n_ == 0) {
      *this = o;
      return;
    }
    const double n = static_cast<double>(n_ + o.n_);
    const double delta = o.mean_ - mean_;
    mean_ += delta * static_cast<double>(o.n_) / n;
    m2_ += o.m2_ + delta * delta * static_cast<double>(n_) * static_cast<double>(o.n_) / n;
    n_ += o.n_;
  }

  std::uint64_t count() const noexcept { return n_; }
  double mean() const noexcept { return mean_; }
  double m2() const noexcept { return m2_; }
  /// Sample (n - 1) variance; 0 for fewer than two values.
  double variance() const noexcept { return n_ > 1 ? std::max(0.0, m2_ / static_cast<double>(n_ - 1)) : 0.0; }
  double stddev() const noexcept { return std::sqrt(variance()); }
  double stderr_mean() const noexcept { return n_ > 1 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0; }

 private:
  std::uint64_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

inline Accumulator accumulate(Accumulator acc, double value) {
  acc.add(value);
  return acc;
}

/// One Welford accumulator per slot, stored column-wise for field-sized data.
class ArrayAccumulator {
 public:
  ArrayAccumulator() = default;
  explicit ArrayAccumulator(std::size_t size) : mean_(size, 0.0), m2_(size, 0.0) {}

  void add(std::span<const double> values) {
    if (values.size() != mean_.size()) throw DimensionError("ArrayAccumulator: size mismatch");
    ++n_;
    const double inv = 1.0 / static_cast<double>(n_);
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) throw DataError("ArrayAccumulator: non-finite value");
      const double delta = values[i] - mean_[i];
      mean_[i] += delta * inv;
      m2_[i] += delta * (values[i] - mean_[i]);
    }
  }

  std::uint64_t count() const noexcept { return n_; }
  std::size_t size() const noexcept { return mean_.size(); }
  std::span<const double> means() const noexcept { return mean_; }
  double mean(std::size_t i) const { return mean_[i]; }
  double variance(std::size_t i) const {
    return n_ > 1 ? std::max(0.0, m2_[i] / static_cast<double>(n_ - 1)) : 0.0;
  }
  double stderr_mean(std::size_t i) const {
    return n_ > 1 ? std::sqrt(variance(i) / static_cast<double>(n_)) : 0.0;
  }
  std::vector<double> stderrs() const {
    std::vector<double> s(mean_.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = stderr_mean(i);
    return s;
  }

 private:
  std::uint64_t n_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

/// ArrayAccumulator plus a scalar control variate c with known expectation 0.
///
/// adjusted(i) = mean_i - beta_i mean(c), beta_i = cov(x_i, c) / var(c),
/// removes the part of each slot explained linearly by c.
class ControlledArrayAccumulator {
 public:
  ControlledArrayAccumulator() = default;
  explicit ControlledArrayAccumulator(std::size_t size) : mean_(size, 0.0), m2_(size, 0.0), cm_(size, 0.0) {}

  void add(std::span<const double> values, double control) {
    if (values.size() != mean_.size()) throw DimensionError("ControlledArrayAccumulator: size mismatch");
    if (!std::isfinite(control)) throw DataError("ControlledArrayAccumulator: non-finite control");
    ++n_;
    const double inv = 1.0 / static_cast<double>(n_);
    const double dc = control - cmean_;
    cmean_ += dc * inv;
    cm2_ += dc * (control - cmean_);
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) throw DataError("ControlledArrayAccumulator: non-finite value");
      const double delta = values[i] - mean_[i];
      mean_[i] += delta * inv;
      m2_[i] += delta * (values[i] - mean_[i]);
      cm_[i] += delta * (control - cmean_);
    }
  }

  std::uint64_t count() const noexcept { return n_; }
  std::size_t size() const noexcept { return mean_.size(); }
  double control_mean() const noexcept { return cmean_; }
  std::span<const double> raw_means() const noexcept { return mean_; }

  double beta(std::size_t i) const { return cm2_ > 0.0 ? cm_[i] / cm2_ : 0.0; }

  std::vector<double> means() const {
    std::vector<double> m(mean_.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = mean_[i] - beta(i) * cmean_;
    return m;
  }

  /// Residual standard error; one degree of freedom goes to beta. A control
  /// that never varied leaves the plain standard error.
  std::vector<double> stderrs() const {
    std::vector<double> s(mean_.size(), 0.0);
    const bool fitted = cm2_ > 0.0;
    if (n_ < (fitted ? 3u : 2u)) return s;
    const double n = static_cast<double>(n_);
    const double dof = fitted ? n - 2.0 : n - 1.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double resid = std::max(0.0, m2_[i] - (fitted ? cm_[i] * cm_[i] / cm2_ : 0.0));
      s[i] = std::sqrt(resid / dof / n);
    }
    return s;
  }

 private:
  std::uint64_t n_ = 0;
  double cmean_ = 0.0, cm2_ = 0.0;
  std::vector<double> mean_, m2_, cm_;
};

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

/// Value at probability p of sorted data using linear interpolation between order statistics.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw DomainError("quantile_sorted: empty data");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double t = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - t) + sorted[hi] * t;
}

/// Percentile 95% bootstrap interval of `statistic` over `resamples` resamples
/// drawn with a seeded mt19937_64.
inline Interval bootstrap_ci(std::span<const double> samples,
                             const std::function<double(std::span<const double>)>& statistic,
                             int resamples, std::uint64_t seed, double level = 0.95) {
  if (samples.size() < 10) throw DomainError("bootstrap_ci: need at least 10 samples");
  if (resamples < 200) throw DomainError("bootstrap_ci: need at least 200 resamples");
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  std::vector<double> draw(samples.size());
  std::vector<double> stats(static_cast<std::size_t>(resamples));
  for (auto& s : stats) {
    for (auto& v : draw) v = samples[pick(gen)];
    s = statistic(draw);
  }
  std::sort(stats.begin(), stats.end());
  const double tail = 0.5 * (1.0 - level);
  return {quantile_sorted(stats, tail), quantile_sorted(stats, 1.0 - tail)};
}

/// Result of a power-law regression value ~ C r^exponent.
struct RateFit {
  double exponent = 0.0;
  double exponent_stderr = 0.0;
  double prefactor = 0.0;  // C in C r^p
  double ci_low = 0.0;
  double ci_high = 0.0;
  double r_min = 0.0;
  double r_max = 0.0;
  double residual_norm = 0.0;  // weighted RMS residual in log space
  int n_points = 0;
  int n_excluded = 0;  // points dropped because value < 2 sigma
  double offset = 0.0;  // additive constant removed before fitting (offset fits only)
  double decay_rate = 0.0;  // co-fitted exponential rate (exp co-fits only)
};

struct FitPoint {
  double r = 0.0;
  double value = 0.0;
  double stderr = 0.0;
};

struct FitWindow {
  double r_min = 0.0;
  double r_max = 0.0;
};

namespace detail {

struct LinearFit {
  std::vector<double> coef;
  std::vector<double> coef_stderr;
  double rms = 0.0;
};

// Weighted least squares with design columns `cols`; weights are 1/sigma^2.
inline LinearFit weighted_lsq(const std::vector<std::vector<double>>& cols,
                              std::span<const double> y, std::span<const double> w) {
  const auto p = static_cast<Eigen::Index>(cols.size());
  const auto n = static_cast<Eigen::Index>(y.size());
  Eigen::MatrixXd X(n, p);
  Eigen::VectorXd Y(n), W(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index a = 0; a < p; ++a) X(i, a) = cols[static_cast<std::size_t>(a)][static_cast<std::size_t>(i)];
    Y(i) = y[static_cast<std::size_t>(i)];
    W(i) = w[static_cast<std::size_t>(i)];
  }
  const Eigen::MatrixXd normal = X.transpose() * W.asDiagonal() * X;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(normal);
  if (!lu.isInvertible()) throw FitError("weighted_lsq: singular design");
  const Eigen::MatrixXd inv = lu.inverse();
  const Eigen::VectorXd coef = inv * (X.transpose() * W.asDiagonal() * Y);
  const Eigen::VectorXd res = Y - X * coef;
  const double chi2 = res.cwiseProduct(res).dot(W);
  const double wsum = W.sum();

  LinearFit fit;
  fit.coef.assign(coef.data(), coef.data() + p);
  fit.rms = wsum > 0 ? std::sqrt(chi2 / wsum) : 0.0;
  const double dof = n > p ? static_cast<double>(n - p) : 1.0;
  const double scale = std::max(1.0, chi2 / dof);
  fit.coef_stderr.resize(static_cast<std::size_t>(p));
  for (Eigen::Index a = 0; a < p; ++a)
    fit.coef_stderr[static_cast<std::size_t>(a)] = std::sqrt(std::max(0.0, inv(a, a) * scale));
  return fit;
}

}  // namespace detail

/// Options for `loglog_fit`.
struct LogLogOptions {
  /// Co-fit value = C r^p exp(-rate r) instead of a pure power law.
  bool cofit_exponential = false;
  /// Parametric bootstrap resamples for the interval (0 disables; normal theory used instead).
  int bootstrap_resamples = 400;
  std::uint64_t seed = 0x5eed;
  /// Drop points with value < 2 stderr before fitting.
  bool exclude_insignificant = true;
};

/// Weighted least squares of log(value) on log(r) over the window.
///
/// Points with value < 2 stderr are dropped first (and counted in
/// `n_excluded`); log-space weights are (value/stderr)^2, or uniform if any
/// stderr is zero. Throws DomainError if the window holds fewer than 5
/// points and FitError if a non-positive value survives or fewer than 5
/// points remain.
inline RateFit loglog_fit(std::span<const FitPoint> points, FitWindow window, const LogLogOptions& opt = {}) {
  std::vector<FitPoint> in;
  for (const auto& p : points)
    if (p.r >= window.r_min && p.r <= window.r_max) in.push_back(p);
  if (in.size() < 5)
    throw DomainError("loglog_fit: window holds " + std::to_string(in.size()) + " points, need >= 5");

  RateFit fit;
  fit.r_min = window.r_min;
  fit.r_max = window.r_max;
  std::vector<FitPoint> kept;
  for (const auto& p : in) {
    if (opt.exclude_insignificant && p.stderr > 0.0 && p.value < 2.0 * p.stderr) {
      ++fit.n_excluded;
      continue;
    }
    if (!(p.value > 0.0) || !std::isfinite(p.value))
      throw FitError("loglog_fit: non-positive value " + std::to_string(p.value) + " at r = " + std::to_string(p.r));
    kept.push_back(p);
  }
  const std::size_t need = opt.cofit_exponential ? 6 : 5;
  if (kept.size() < need)
    throw FitError("loglog_fit: only " + std::to_string(kept.size()) +
                   " points are statistically distinguishable from zero");

  const bool weighted = std::all_of(kept.begin(), kept.end(), [](const FitPoint& p) { return p.stderr > 0.0; });
  const std::size_t n = kept.size();
  std::vector<double> one(n, 1.0), lr(n), rr(n), y(n), w(n), sig(n);
  for (std::size_t i = 0; i < n; ++i) {
    lr[i] = std::log(kept[i].r);
    rr[i] = kept[i].r;
    y[i] = std::log(kept[i].value);
    sig[i] = weighted ? kept[i].stderr / kept[i].value : 0.0;
    w[i] = weighted ? 1.0 / (sig[i] * sig[i]) : 1.0;
  }
  std::vector<std::vector<double>> cols{one, lr};
  if (opt.cofit_exponential) cols.push_back(rr);
  const auto lf = detail::weighted_lsq(cols, y, w);
  fit.exponent = lf.coef[1];
  fit.exponent_stderr = lf.coef_stderr[1];
  fit.prefactor = std::exp(lf.coef[0]);
  fit.decay_rate = opt.cofit_exponential ? -lf.coef[2] : 0.0;
  fit.residual_norm = lf.rms;
  fit.n_points = static_cast<int>(n);

  if (weighted && opt.bootstrap_resamples > 0) {
    std::mt19937_64 gen(opt.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> slopes;
    slopes.reserve(static_cast<std::size_t>(opt.bootstrap_resamples));
    std::vector<double> yb(n);
    for (int b = 0; b < opt.bootstrap_resamples; ++b) {
      for (std::size_t i = 0; i < n; ++i) yb[i] = y[i] + sig[i] * gauss(gen);
      slopes.push_back(detail::weighted_lsq(cols, yb, w).coef[1]);
    }
    std::sort(slopes.begin(), slopes.end());
    fit.ci_low = quantile_sorted(slopes, 0.025);
    fit.ci_high = quantile_sorted(slopes, 0.975);
  } else {
    fit.ci_low = fit.exponent - 1.96 * fit.exponent_stderr;
    fit.ci_high = fit.exponent + 1.96 * fit.exponent_stderr;
  }
  fit.ci_low = std::min(fit.ci_low, fit.exponent);
  fit.ci_high = std::max(fit.ci_high, fit.exponent);
  return fit;
}

/// Power law plus additive constant, value ~ C r^p + B.
///
/// B is found by a golden-section search over the profile residual of the
/// log-log fit of (value - B); used where a finite-volume constant shift
/// (e.g. zero-mode removal on a torus) sits on top of the decay.
inline RateFit offset_loglog_fit(std::span<const FitPoint> points, FitWindow window, const LogLogOptions& opt = {}) {
  std::vector<FitPoint> in;
  for (const auto& p : points)
    if (p.r >= window.r_min && p.r <= window.r_max) in.push_back(p);
  if (in.size() < 6)
    throw DomainError("offset_loglog_fit: window holds " + std::to_string(in.size()) + " points, need >= 6");
  double vmin = in.front().value, vmax = in.front().value;
  for (const auto& p : in) {
    vmin = std::min(vmin, p.value);
    vmax = std::max(vmax, p.value);
  }
  const double span = vmax - vmin;
  if (!(span > 0.0)) throw FitError("offset_loglog_fit: flat profile");

  LogLogOptions quiet = opt;
  quiet.bootstrap_resamples = 0;
  auto shifted = [&](double B) {
    std::vector<FitPoint> s = in;
    for (auto& p : s) p.value -= B;
    return s;
  };
  auto objective = [&](double B) {
    auto s = shifted(B);
    for (const auto& p : s)
      if (!(p.value > 0.0)) return std::numeric_limits<double>::infinity();
    // Residual relative to the spread of log(value - B): a bare residual
    // would reward B -> -infinity, where the profile flattens.
    double m = 0.0, m2 = 0.0;
    for (const auto& p : s) m += std::log(p.value);
    m /= static_cast<double>(s.size());
    for (const auto& p : s) m2 += std::pow(std::log(p.value) - m, 2);
    const double spread = std::sqrt(m2 / static_cast<double>(s.size()));
    if (!(spread > 0.0)) return std::numeric_limits<double>::infinity();
    try {
      return loglog_fit(s, window, quiet).residual_norm / spread;
    } catch (const std::exception&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  // B ranges from well below the data up to just under its minimum.
  double lo = vmin - 10.0 * span, hi = vmin - 1e-6 * span;
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - g * (hi - lo), d = lo + g * (hi - lo);
  double fc = objective(c), fd = objective(d);
  for (int it = 0; it < 200 && hi - lo > 1e-12 * span; ++it) {
    if (fc < fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - g * (hi - lo);
      fc = objective(c);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + g * (hi - lo);
      fd = objective(d);
    }
  }
  const double B = 0.5 * (lo + hi);
  auto fit = loglog_fit(shifted(B), window, opt);
  fit.offset = B;
  return fit;
}

}  // namespace rhl
