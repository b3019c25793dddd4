#pragma once

// Averaged and homogenized Green's functions and their decay fits.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rhl/coeffs.hpp"
#include "rhl/fields.hpp"
#include "rhl/parallel.hpp"
#include "rhl/solver.hpp"
#include "rhl/stats.hpp"

namespace rhl {

/// Periodic Green's function of eta + div*(A grad) with pole at the origin.
inline ScalarField lattice_green(double eta, const Matrix& A, const TorusLattice& lat) {
  if (!(eta > 0.0)) throw DomainError("lattice_green: eta must be > 0");
  return solve_const(eta, A, delta(lat, 0));
}

/// Whole-space Green's function of eta - div(a_hom grad) at x != 0.
///
/// With y = a_hom^{-1/2} x and rho = |y|, G = (2 pi)^{-d/2} (sqrt(eta)/rho)^{d/2-1}
/// K_{d/2-1}(sqrt(eta) rho) / sqrt(det a_hom); in d = 3 this is the Yukawa form.
inline double hom_green_continuum(const Matrix& a_hom, double eta, std::span<const double> x) {
  const auto d = static_cast<int>(a_hom.rows());
  if (static_cast<int>(x.size()) != d) throw DimensionError("hom_green_continuum: point has wrong dimension");
  if (!(eta > 0.0)) throw DomainError("hom_green_continuum: eta must be > 0");
  require_spd(a_hom, "hom_green_continuum");
  const Eigen::Map<const Vector> xv(x.data(), d);
  if (xv.norm() == 0.0) throw DomainError("hom_green_continuum: singular at x = 0");
  const double rho = std::sqrt(xv.dot(a_hom.ldlt().solve(xv)));
  const double sdet = std::sqrt(a_hom.determinant());
  const double k = std::sqrt(eta);
  if (d == 3) return std::exp(-k * rho) / (4.0 * std::numbers::pi * sdet * rho);
  const double nu = 0.5 * d - 1.0;
  const double z = k * rho;
  return std::pow(2.0 * std::numbers::pi, -0.5 * d) * std::pow(k / rho, nu) * std::cyl_bessel_k(std::abs(nu), z) / sdet;
}

inline double hom_green_continuum(const Matrix& a_hom, double eta, std::initializer_list<double> x) {
  return hom_green_continuum(a_hom, eta, std::span<const double>(x.begin(), x.size()));
}

struct GreenOptions {
  CgOptions cg{1e-10, 4000, Preconditioner::midpoint};
  int threads = 1;
  long window = -1;         // half-width of the stored box; -1 means min(L/4 + 2, L/2 - 1)
  std::size_t batches = 40;  // replica batches kept for resampling
  /// Regress every stored quantity on the replica's spatial mean of omega
  /// (expectation 0) and remove the fitted part; see estimate_ahom.
  bool control_variate = false;
  /// Poles per environment, placed on the corners of the half-period grid;
  /// by stationarity G(x + y, y) has the same law for every pole y, so each
  /// environment yields `poles` nearly independent samples. At most 2^d.
  int poles = 1;
};

/// Monte Carlo mean of G_{a,eta}(., 0) with first and second forward differences.
struct GreenEstimate {
  TorusLattice lattice;
  double eta = 0.0;
  std::size_t replicas = 0;  // environments with all solves converged
  int poles = 1;
  std::size_t skipped = 0;   // solves that did not converge
  std::uint64_t seed = 0;
  std::vector<double> mean, stderr;            // per site
  std::vector<double> grad_mean, grad_stderr;  // site * d + i
  std::vector<double> hess_mean, hess_stderr;  // (site * d + i) * d + j, grad_i grad_j G

  // Box |x_i| <= window around the pole, one mean per replica batch.
  long window = 0;
  std::vector<std::size_t> window_sites;
  std::vector<std::vector<double>> batch_means;
  std::vector<std::size_t> batch_counts;
  bool control_variate = false;
  double env_mean = 0.0;  // replica average of the spatial mean of omega

  /// eta * sum_x G, which is 1 in expectation.
  double mass() const {
    double s = 0.0;
    for (double v : mean) s += v;
    return eta * s;
  }
};

namespace detail {

inline long default_window(const TorusLattice& lat) {
  long Lmin = static_cast<long>(lat.side(0));
  for (int i = 1; i < lat.dim(); ++i) Lmin = std::min(Lmin, static_cast<long>(lat.side(i)));
  return std::min(Lmin / 4 + 2, Lmin / 2 - 1);
}

inline std::vector<std::size_t> box_sites(const TorusLattice& lat, long w) {
  const int d = lat.dim();
  std::vector<long> c(static_cast<std::size_t>(d), -w);
  std::vector<std::size_t> out;
  for (;;) {
    out.push_back(lat.index(c));
    int i = d - 1;
    while (i >= 0 && ++c[static_cast<std::size_t>(i)] > w) c[static_cast<std::size_t>(i--)] = -w;
    if (i < 0) break;
  }
  return out;
}

// Pole offsets: the first n corners of {0, L_i/2}^d in binary order.
inline std::vector<std::vector<long>> pole_offsets(const TorusLattice& lat, int n) {
  const int d = lat.dim();
  if (n < 1 || (d < 31 && n > (1 << d))) throw DomainError("averaged_green: poles must lie in [1, 2^d]");
  std::vector<std::vector<long>> out;
  for (int k = 0; k < n; ++k) {
    std::vector<long> y(static_cast<std::size_t>(d), 0);
    for (int i = 0; i < d; ++i)
      if (k >> (d - 1 - i) & 1) y[static_cast<std::size_t>(i)] = static_cast<long>(lat.side(i) / 2);
    out.push_back(y);
  }
  return out;
}

}  // namespace detail

/// Averages the solution of eta G + div*(a grad G) = delta_0 over environments.
///
/// Replicas whose CG solve does not converge are skipped and counted; more
/// than 1% skips is a ConvergenceError.
inline GreenEstimate averaged_green(const EnvironmentSpec& spec, const CoefficientMap& map, double eta,
                                    std::size_t replicas, const GreenOptions& opt = {}) {
  if (!(eta > 0.0)) throw DomainError("averaged_green: eta must be > 0");
  if (replicas < 2) throw DomainError("averaged_green: need at least 2 replicas");
  if (opt.batches < 2) throw DomainError("averaged_green: need at least 2 batches");
  spec.validate();
  const auto& lat = spec.lattice;
  const int d = lat.dim();
  const auto V = lat.volume();
  const auto ud = static_cast<std::size_t>(d);

  GreenEstimate est;
  est.lattice = lat;
  est.eta = eta;
  est.seed = spec.seed;
  est.window = opt.window < 0 ? detail::default_window(lat) : opt.window;
  est.window_sites = detail::box_sites(lat, est.window);
  const std::size_t nb = std::min(opt.batches, replicas);
  est.batch_means.assign(nb, std::vector<double>(est.window_sites.size(), 0.0));
  est.batch_counts.assign(nb, 0);

  ControlledArrayAccumulator g(V), gg(V * ud), hh(V * ud * ud);
  std::vector<double> batch_env(nb, 0.0);
  const ScalarField rhs = delta(lat, 0);
  const auto poles = detail::pole_offsets(lat, opt.poles);
  est.poles = opt.poles;
  std::vector<double> gbuf(V * ud), hbuf(V * ud * ud);
  struct Solve {
    std::optional<ScalarField> G;
    double env_mean;
  };
  ordered_parallel(
      replicas, opt.threads,
      [&](std::size_t r) -> Solve {
        const auto omega = sample_environment(spec, r);
        const double m = opt.control_variate ? mean(omega.values()) : 0.0;
        const auto a = evaluate_map(map, omega);
        try {
          if (poles.size() == 1) return {solve_cg(eta, a, rhs, opt.cg).first, m};
          ScalarField avg(lat);
          const double w = 1.0 / static_cast<double>(poles.size());
          for (const auto& y : poles) {
            const auto G = solve_cg(eta, a, delta(lat, lat.shift(0, y)), opt.cg).first;
            for (std::size_t x = 0; x < V; ++x) avg[x] += w * G[lat.shift(x, y)];
          }
          return {std::move(avg), m};
        } catch (const CgNonConvergence&) {
          return {std::nullopt, m};
        }
      },
      [&](std::size_t r, Solve s) {
        if (!s.G) {
          ++est.skipped;
          return;
        }
        const auto& G = *s.G;
        const auto grad = gradient(G);
        for (std::size_t x = 0; x < V; ++x)
          for (std::size_t i = 0; i < ud; ++i) {
            gbuf[x * ud + i] = grad(x, static_cast<int>(i));
            const std::size_t xi = lat.neighbor(x, static_cast<int>(i), +1);
            for (std::size_t j = 0; j < ud; ++j)
              hbuf[(x * ud + i) * ud + j] = grad(xi, static_cast<int>(j)) - grad(x, static_cast<int>(j));
          }
        g.add(G.values(), s.env_mean);
        gg.add(gbuf, s.env_mean);
        hh.add(hbuf, s.env_mean);
        const std::size_t b = r * nb / replicas;
        auto& bm = est.batch_means[b];
        const double n = static_cast<double>(++est.batch_counts[b]);
        for (std::size_t k = 0; k < bm.size(); ++k) bm[k] += (G[est.window_sites[k]] - bm[k]) / n;
        batch_env[b] += (s.env_mean - batch_env[b]) / n;
      });
  est.replicas = replicas - est.skipped;
  if (est.skipped * 100 > replicas)
    throw ConvergenceError("averaged_green: " + std::to_string(est.skipped) + " of " + std::to_string(replicas) +
                               " solves did not converge",
                           static_cast<int>(est.skipped), 0.0);
  est.control_variate = opt.control_variate;
  est.env_mean = g.control_mean();
  // Without the control the regression slopes are 0 and these are plain means.
  est.mean = g.means();
  est.stderr = g.stderrs();
  est.grad_mean = gg.means();
  est.grad_stderr = gg.stderrs();
  est.hess_mean = hh.means();
  est.hess_stderr = hh.stderrs();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t k = 0; k < est.window_sites.size(); ++k)
      est.batch_means[b][k] -= g.beta(est.window_sites[k]) * batch_env[b];
  return est;
}

/// Radial profiles of |Gbar - G_hom|, |grad(Gbar - G_hom)| and |grad grad(Gbar - G_hom)|.
///
/// Each value is the root mean square over the shell round(|x|) = r, with the
/// Monte Carlo noise variance (estimated from the replica batches) subtracted
/// before the square root. Error bars come from resampling batches.
struct DifferenceTable {
  std::vector<double> radii;  // mean |x| of the shell
  std::vector<std::size_t> counts;
  std::array<std::vector<double>, 3> values;
  std::array<std::vector<double>, 3> stderrs;
  std::array<std::vector<std::vector<double>>, 3> resampled;  // [order][resample][shell]
};

namespace detail {

// Per-site linear quantities (G, grad G, grad grad G) on a sphere inside the box.
struct ShellLayout {
  std::size_t sites = 0;
  int d = 0;
  std::vector<std::size_t> shell;       // per sphere site
  std::vector<double> radius;           // per shell
  std::vector<std::size_t> count;       // per shell
  std::vector<std::size_t> box_index;   // sphere site -> box index
  std::vector<std::size_t> box_stride;  // per axis
};

inline ShellLayout make_shells(int d, long w) {
  ShellLayout s;
  s.d = d;
  const long side = 2 * w + 1;
  s.box_stride.assign(static_cast<std::size_t>(d), 1);
  for (int i = d - 2; i >= 0; --i)
    s.box_stride[static_cast<std::size_t>(i)] = s.box_stride[static_cast<std::size_t>(i + 1)] * static_cast<std::size_t>(side);
  const long reach = w - 2;
  std::vector<long> c(static_cast<std::size_t>(d), -w);
  std::size_t bi = 0;
  for (;;) {
    double r2 = 0.0;
    for (long v : c) r2 += static_cast<double>(v * v);
    const double r = std::sqrt(r2);
    if (r <= static_cast<double>(reach) + 1e-12) {
      const auto sh = static_cast<std::size_t>(std::lround(r));
      if (sh >= s.radius.size()) {
        s.radius.resize(sh + 1, 0.0);
        s.count.resize(sh + 1, 0);
      }
      s.radius[sh] += r;
      ++s.count[sh];
      s.shell.push_back(sh);
      s.box_index.push_back(bi);
    }
    ++bi;
    int i = d - 1;
    while (i >= 0 && ++c[static_cast<std::size_t>(i)] > w) c[static_cast<std::size_t>(i--)] = -w;
    if (i < 0) break;
  }
  for (std::size_t k = 0; k < s.radius.size(); ++k)
    if (s.count[k]) s.radius[k] /= static_cast<double>(s.count[k]);
  s.sites = s.shell.size();
  return s;
}

// Number of linear quantities per sphere site.
inline std::size_t quantities(int d) { return 1 + static_cast<std::size_t>(d) + static_cast<std::size_t>(d * d); }

// q = (G, grad_i G, grad_i grad_j G) at each sphere site from box values.
inline std::vector<double> site_quantities(const ShellLayout& s, std::span<const double> box) {
  const auto ud = static_cast<std::size_t>(s.d);
  const std::size_t nq = quantities(s.d);
  std::vector<double> q(s.sites * nq);
  for (std::size_t k = 0; k < s.sites; ++k) {
    const std::size_t b = s.box_index[k];
    double* out = q.data() + k * nq;
    out[0] = box[b];
    for (std::size_t i = 0; i < ud; ++i) {
      const std::size_t bi = b + s.box_stride[i];
      out[1 + i] = box[bi] - box[b];
      for (std::size_t j = 0; j < ud; ++j) {
        const std::size_t sj = s.box_stride[j];
        out[1 + ud + i * ud + j] = (box[bi + sj] - box[bi]) - (box[b + sj] - box[b]);
      }
    }
  }
  return q;
}

// Shell RMS of the three orders for q_mean - q_hom, noise-debiased.
inline std::array<std::vector<double>, 3> shell_profiles(const ShellLayout& s, std::span<const double> qmean,
                                                          std::span<const double> qhom, std::span<const double> noise) {
  const auto ud = static_cast<std::size_t>(s.d);
  const std::size_t nq = quantities(s.d);
  std::array<std::vector<double>, 3> sum;
  for (auto& v : sum) v.assign(s.radius.size(), 0.0);
  for (std::size_t k = 0; k < s.sites; ++k) {
    const std::size_t sh = s.shell[k];
    for (std::size_t m = 0; m < nq; ++m) {
      const double diff = qmean[k * nq + m] - qhom[k * nq + m];
      const double v = diff * diff - noise[k * nq + m];
      const int order = m == 0 ? 0 : (m <= ud ? 1 : 2);
      sum[static_cast<std::size_t>(order)][sh] += v;
    }
  }
  for (auto& v : sum)
    for (std::size_t k = 0; k < v.size(); ++k)
      v[k] = s.count[k] ? std::sqrt(std::max(0.0, v[k] / static_cast<double>(s.count[k]))) : 0.0;
  return sum;
}

// Weighted batch mean and the noise variance of that mean, per quantity.
inline void batch_moments(const std::vector<std::vector<double>>& q, const std::vector<double>& weight,
                          std::vector<double>& mean, std::vector<double>& noise) {
  const std::size_t n = q.front().size();
  double wsum = 0.0;
  for (double w : weight) wsum += w;
  mean.assign(n, 0.0);
  noise.assign(n, 0.0);
  for (std::size_t b = 0; b < q.size(); ++b) {
    if (weight[b] == 0.0) continue;
    const double f = weight[b] / wsum;
    for (std::size_t k = 0; k < n; ++k) mean[k] += f * q[b][k];
  }
  std::size_t used = 0;
  for (double w : weight) used += w > 0.0 ? 1 : 0;
  if (used < 2) return;
  for (std::size_t b = 0; b < q.size(); ++b) {
    if (weight[b] == 0.0) continue;
    const double f = weight[b] / wsum;
    for (std::size_t k = 0; k < n; ++k) {
      const double dv = q[b][k] - mean[k];
      noise[k] += f * dv * dv;
    }
  }
  const double scale = 1.0 / static_cast<double>(used - 1);
  for (auto& v : noise) v *= scale;
}

}  // namespace detail

/// Difference profiles against a homogenized Green's function given on the same torus.
///
/// With `reflect` the batch means are first averaged with their mirror image:
/// E G_a(x, 0) = E G_a(0, x) = E G_a(-x, 0) by symmetry of the operator and
/// stationarity, so this halves the noise variance at no bias.
inline DifferenceTable difference_table(const GreenEstimate& est, const ScalarField& g_hom, int resamples = 400,
                                        std::uint64_t seed = 0x6b1, bool reflect = true) {
  require_same_lattice(est.lattice, g_hom.lattice(), "difference_table");
  if (est.window < 3) throw DomainError("difference_table: stored window too small");
  const auto s = detail::make_shells(est.lattice.dim(), est.window);

  std::vector<double> hom_box(est.window_sites.size());
  for (std::size_t k = 0; k < hom_box.size(); ++k) hom_box[k] = g_hom[est.window_sites[k]];
  const auto qhom = detail::site_quantities(s, hom_box);

  std::vector<std::vector<double>> qb;
  std::vector<double> weight;
  for (std::size_t b = 0; b < est.batch_means.size(); ++b) {
    auto box = est.batch_means[b];
    if (reflect) {
      // the box is enumerated lexicographically over [-w, w]^d, so -x sits at n - 1 - k
      const std::size_t n = box.size();
      for (std::size_t k = 0; k < n / 2; ++k) box[k] = box[n - 1 - k] = 0.5 * (box[k] + box[n - 1 - k]);
    }
    qb.push_back(detail::site_quantities(s, box));
    weight.push_back(static_cast<double>(est.batch_counts[b]));
  }
  std::vector<double> qmean, noise;
  detail::batch_moments(qb, weight, qmean, noise);

  std::vector<double> noise2(noise.size());
  for (std::size_t k = 0; k < noise.size(); ++k) noise2[k] = 2.0 * noise[k];

  DifferenceTable t;
  const auto base = detail::shell_profiles(s, qmean, qhom, noise);
  std::array<std::vector<Accumulator>, 3> acc;
  for (auto& a : acc) a.resize(s.radius.size());
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::size_t> pick(0, qb.size() - 1);
  std::vector<double> w(qb.size());
  for (int r = 0; r < resamples; ++r) {
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t k = 0; k < qb.size(); ++k) w[pick(gen)] += weight[k];
    std::vector<double> m, nz;
    detail::batch_moments(qb, w, m, nz);
    // A resampled mean carries the sampling noise twice over the truth.
    const auto p = detail::shell_profiles(s, m, qhom, noise2);
    for (std::size_t o = 0; o < 3; ++o) {
      t.resampled[o].push_back(p[o]);
      for (std::size_t k = 0; k < p[o].size(); ++k) acc[o][k].add(p[o][k]);
    }
  }
  for (std::size_t k = 0; k < s.radius.size(); ++k) {
    if (!s.count[k]) continue;
    t.radii.push_back(s.radius[k]);
    t.counts.push_back(s.count[k]);
    for (std::size_t o = 0; o < 3; ++o) {
      t.values[o].push_back(base[o][k]);
      t.stderrs[o].push_back(resamples > 1 ? acc[o][k].stddev() : 0.0);
    }
  }
  // Drop the empty shells from the resampled rows as well.
  for (std::size_t o = 0; o < 3; ++o)
    for (auto& row : t.resampled[o]) {
      std::vector<double> kept;
      for (std::size_t k = 0; k < s.radius.size(); ++k)
        if (s.count[k]) kept.push_back(row[k]);
      row = std::move(kept);
    }
  return t;
}

/// Weighted log-log fit of |value| against |x| + 1 over |x| in the window.
///
/// `radii` are |x|. When `resampled` rows are given the interval is the
/// percentile interval of the refitted exponent over those rows; otherwise
/// the parametric interval of `loglog_fit` is used.
inline RateFit fit_decay(std::span<const double> radii, std::span<const double> values, std::span<const double> stderrs,
                         FitWindow window, const std::vector<std::vector<double>>* resampled = nullptr,
                         const LogLogOptions& opt = {}) {
  if (radii.size() != values.size() || radii.size() != stderrs.size())
    throw DimensionError("fit_decay: table columns differ in length");
  if (!(window.r_min < window.r_max)) throw DomainError("fit_decay: empty window");
  std::vector<FitPoint> pts;
  for (std::size_t i = 0; i < radii.size(); ++i)
    if (radii[i] >= window.r_min && radii[i] <= window.r_max)
      pts.push_back({radii[i] + 1.0, std::abs(values[i]), stderrs[i]});
  const FitWindow shifted{window.r_min + 1.0, window.r_max + 1.0};
  RateFit fit = loglog_fit(pts, shifted, opt);
  if (resampled && !resampled->empty()) {
    // Resamples are fitted on the radii the main fit kept, so the interval
    // reflects the spread of the slope rather than of the exclusion set.
    std::vector<bool> keep(radii.size(), false);
    for (std::size_t i = 0; i < radii.size(); ++i)
      keep[i] = radii[i] >= window.r_min && radii[i] <= window.r_max &&
                !(opt.exclude_insignificant && stderrs[i] > 0.0 && std::abs(values[i]) < 2.0 * stderrs[i]);
    std::vector<double> slopes;
    LogLogOptions quiet = opt;
    quiet.bootstrap_resamples = 0;
    quiet.exclude_insignificant = false;
    std::size_t failed = 0;
    for (const auto& row : *resampled) {
      if (row.size() != radii.size()) throw DimensionError("fit_decay: resampled row has wrong length");
      std::vector<FitPoint> rp;
      for (std::size_t i = 0; i < radii.size(); ++i)
        if (keep[i] && row[i] > 0.0) rp.push_back({radii[i] + 1.0, row[i], stderrs[i]});
      try {
        if (rp.size() < 5) throw FitError("fit_decay: too few positive resampled points");
        slopes.push_back(loglog_fit(rp, shifted, quiet).exponent);
      } catch (const std::exception&) {
        ++failed;
      }
    }
    if (failed * 10 > resampled->size())
      throw FitError("fit_decay: more than 10% of resampled fits are degenerate");
    std::sort(slopes.begin(), slopes.end());
    fit.ci_low = std::min(quantile_sorted(slopes, 0.025), fit.exponent);
    fit.ci_high = std::max(quantile_sorted(slopes, 0.975), fit.exponent);
  }
  fit.r_min = window.r_min;
  fit.r_max = window.r_max;
  return fit;
}

inline RateFit fit_decay(const std::vector<FitPoint>& table, FitWindow window, const LogLogOptions& opt = {}) {
  std::vector<double> r, v, s;
  for (const auto& p : table) {
    r.push_back(p.r);
    v.push_back(p.value);
    s.push_back(p.stderr);
  }
  return fit_decay(r, v, s, window, nullptr, opt);
}

/// Exponent ordering of the function, gradient and second-gradient differences.
struct Hierarchy {
  double gap_first = 0.0;   // exponent(diff) - exponent(grad diff)
  double gap_second = 0.0;  // exponent(grad diff) - exponent(grad grad diff)
  bool ordered = false;
  bool unit_gaps = false;   // both gaps within 1 +- tolerance
  bool ok() const { return ordered && unit_gaps; }
};

inline Hierarchy check_hierarchy(const std::array<RateFit, 3>& fits, double tolerance = 0.4) {
  Hierarchy h;
  h.gap_first = fits[0].exponent - fits[1].exponent;
  h.gap_second = fits[1].exponent - fits[2].exponent;
  h.ordered = fits[2].exponent <= fits[1].exponent && fits[1].exponent <= fits[0].exponent;
  h.unit_gaps = std::abs(h.gap_first - 1.0) <= tolerance && std::abs(h.gap_second - 1.0) <= tolerance;
  return h;
}

}  // namespace rhl
