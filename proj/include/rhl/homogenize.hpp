#pragma once

// Corrector solves and Monte Carlo estimation of the homogenized matrix.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rhl/coeffs.hpp"
#include "rhl/fields.hpp"
#include "rhl/parallel.hpp"
#include "rhl/solver.hpp"
#include "rhl/stats.hpp"

namespace rhl {

enum class CorrectorMethod { cg, richardson };

inline std::string to_string(CorrectorMethod m) { return m == CorrectorMethod::cg ? "cg" : "richardson"; }

struct CorrectorOptions {
  CorrectorMethod method = CorrectorMethod::cg;
  double tol = 1e-10;
  int max_iter = 5000;
};

/// Mean-zero chi_k with eta chi_k + div*(a (grad chi_k + e_k)) = 0.
///
/// CG accepts eta = 0 (the periodic corrector); the Neumann series needs eta > 0.
inline ScalarField solve_corrector(const CoefficientField& a, double eta, int k, const CorrectorOptions& opt = {}) {
  const int d = a.dim();
  if (k < 0 || k >= d) throw DimensionError("solve_corrector: direction out of range");
  if (opt.method == CorrectorMethod::richardson) {
    return solve_richardson(eta, a, Vector::Unit(d, k), opt.tol, opt.max_iter).first;
  }
  if (eta < 0.0) throw DomainError("solve_corrector: eta must be >= 0");
  ScalarField rhs = divergence(coefficient_column(a, k));
  for (auto& v : rhs.values()) v = -v;
  CgOptions cg;
  cg.tol = opt.tol;
  cg.max_iter = opt.max_iter;
  auto u = solve_cg(eta, a, rhs, cg).first;
  remove_mean(u);
  return u;
}

struct CorrectorSet {
  std::vector<ScalarField> chi;  // one per direction
  double eta = 0.0;
  std::uint64_t seed = 0;
  TorusLattice lattice;
};

inline CorrectorSet solve_correctors(const CoefficientField& a, double eta, const CorrectorOptions& opt = {}) {
  CorrectorSet set;
  set.eta = eta;
  set.lattice = a.lattice();
  for (int k = 0; k < a.dim(); ++k) set.chi.push_back(solve_corrector(a, eta, k, opt));
  return set;
}

/// Flux form: A_jk = mean_x [a(x)(e_k + grad chi_k(x))]_j.
inline Matrix flux_matrix(const CoefficientField& a, const CorrectorSet& c) {
  const auto& lat = a.lattice();
  const int d = lat.dim();
  Matrix A = Matrix::Zero(d, d);
  std::vector<double> g(static_cast<std::size_t>(d)), w(static_cast<std::size_t>(d));
  for (int k = 0; k < d; ++k) {
    const auto& chi = c.chi[static_cast<std::size_t>(k)];
    for (std::size_t x = 0; x < lat.volume(); ++x) {
      for (int i = 0; i < d; ++i)
        g[static_cast<std::size_t>(i)] = chi[lat.neighbor(x, i, +1)] - chi[x] + (i == k ? 1.0 : 0.0);
      a.multiply(x, g, w);
      for (int j = 0; j < d; ++j) A(j, k) += w[static_cast<std::size_t>(j)];
    }
  }
  return A / static_cast<double>(lat.volume());
}

/// Energy form: E_jk = mean_x (e_j + grad chi_j) . a (e_k + grad chi_k).
/// For eta > 0 it equals the flux form minus eta mean(chi_j chi_k).
inline Matrix energy_matrix(const CoefficientField& a, const CorrectorSet& c) {
  const auto& lat = a.lattice();
  const int d = lat.dim();
  std::vector<VectorField> grads;
  for (int k = 0; k < d; ++k) {
    auto g = gradient(c.chi[static_cast<std::size_t>(k)]);
    for (std::size_t x = 0; x < lat.volume(); ++x) g(x, k) += 1.0;
    grads.push_back(std::move(g));
  }
  Matrix E = Matrix::Zero(d, d);
  std::vector<double> w(static_cast<std::size_t>(d));
  for (int k = 0; k < d; ++k)
    for (std::size_t x = 0; x < lat.volume(); ++x) {
      a.multiply(x, grads[static_cast<std::size_t>(k)].at(x), w);
      for (int j = 0; j < d; ++j) {
        const auto gj = grads[static_cast<std::size_t>(j)].at(x);
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += gj[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(i)];
        E(j, k) += s;
      }
    }
  return E / static_cast<double>(lat.volume());
}

/// Monte Carlo estimate of a_hom.
struct HomogenizedEstimate {
  Matrix matrix;          // symmetrized flux-form mean
  Matrix stderr;          // per-entry standard errors of the symmetrized entries
  Matrix energy;          // energy-form mean (symmetrized)
  Matrix skew;            // mean of (A - A^T)/2 before symmetrization
  Matrix skew_stderr;
  std::size_t replicas = 0;
  double eta = 0.0;
  std::vector<std::size_t> sides;
  std::uint64_t seed = 0;

  int dim() const { return static_cast<int>(matrix.rows()); }
};

namespace detail {

struct MatrixAccumulator {
  std::vector<Accumulator> acc;
  int d = 0;
  explicit MatrixAccumulator(int dim) : acc(static_cast<std::size_t>(dim * dim)), d(dim) {}
  void add(const Matrix& M) {
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) acc[static_cast<std::size_t>(i * d + j)].add(M(i, j));
  }
  Matrix mean() const {
    Matrix M(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) M(i, j) = acc[static_cast<std::size_t>(i * d + j)].mean();
    return M;
  }
  Matrix stderr() const {
    Matrix M(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) M(i, j) = acc[static_cast<std::size_t>(i * d + j)].stderr_mean();
    return M;
  }
};

}  // namespace detail

/// Effective matrix of one coefficient field (replicas = 1, zero error bars).
inline HomogenizedEstimate estimate_ahom_field(const CoefficientField& a, double eta, const CorrectorOptions& opt = {}) {
  const auto c = solve_correctors(a, eta, opt);
  const Matrix A = flux_matrix(a, c);
  const Matrix E = energy_matrix(a, c);
  HomogenizedEstimate est;
  est.matrix = 0.5 * (A + A.transpose());
  est.energy = 0.5 * (E + E.transpose());
  est.skew = 0.5 * (A - A.transpose());
  est.stderr = Matrix::Zero(a.dim(), a.dim());
  est.skew_stderr = est.stderr;
  est.replicas = 1;
  est.eta = eta;
  est.sides.assign(a.lattice().sides().begin(), a.lattice().sides().end());
  return est;
}

struct AhomOptions {
  CorrectorOptions corrector;
  int threads = 1;
  /// Regress each entry on the replica's spatial mean of omega, whose
  /// expectation is 0, and remove the fitted part. Long-range environments
  /// put most of the replica-to-replica spread of a_hom in that mode.
  bool control_variate = false;
};

namespace detail {

// Mean of y - beta (m - 0) with beta = cov(y, m)/var(m), and its standard error.
inline std::pair<double, double> control_variate_mean(const std::vector<double>& y, const std::vector<double>& m) {
  const auto n = static_cast<double>(y.size());
  double ym = 0.0, mm = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) ym += y[i], mm += m[i];
  ym /= n;
  mm /= n;
  double cov = 0.0, var = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    cov += (y[i] - ym) * (m[i] - mm);
    var += (m[i] - mm) * (m[i] - mm);
  }
  const double beta = var > 0.0 ? cov / var : 0.0;
  Accumulator acc;
  for (std::size_t i = 0; i < y.size(); ++i) acc.add(y[i] - beta * m[i]);
  // one degree of freedom goes to beta
  const double se = y.size() > 2 ? std::sqrt(acc.m2() / (n - 2.0) / n) : acc.stderr_mean();
  return {acc.mean(), se};
}

}  // namespace detail

/// Average over `replicas` environments of the flux-form effective matrix.
inline HomogenizedEstimate estimate_ahom(const EnvironmentSpec& spec, const CoefficientMap& map, double eta,
                                         std::size_t replicas, const AhomOptions& opt = {}) {
  if (replicas < 2) throw DomainError("estimate_ahom: need at least 2 replicas");
  if (!(eta > 0.0)) throw DomainError("estimate_ahom: eta must be > 0");
  if (opt.control_variate && replicas < 3) throw DomainError("estimate_ahom: control variate needs 3 replicas");
  spec.validate();
  const int d = spec.lattice.dim();
  detail::MatrixAccumulator sym(d), skew(d), energy(d);
  std::vector<Matrix> samples;
  std::vector<double> env_means;
  struct Sample {
    Matrix flux, energy;
    double env_mean;
  };
  ordered_parallel(
      replicas, opt.threads,
      [&](std::size_t r) {
        const auto omega = sample_environment(spec, r);
        const auto a = evaluate_map(map, omega);
        const auto c = solve_correctors(a, eta, opt.corrector);
        return Sample{flux_matrix(a, c), energy_matrix(a, c), mean(omega.values())};
      },
      [&](std::size_t, Sample s) {
        const Matrix A = 0.5 * (s.flux + s.flux.transpose());
        sym.add(A);
        skew.add(0.5 * (s.flux - s.flux.transpose()));
        energy.add(0.5 * (s.energy + s.energy.transpose()));
        if (opt.control_variate) {
          samples.push_back(A);
          env_means.push_back(s.env_mean);
        }
      });
  HomogenizedEstimate est;
  est.matrix = sym.mean();
  est.stderr = sym.stderr();
  if (opt.control_variate) {
    std::vector<double> y(samples.size());
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        for (std::size_t r = 0; r < samples.size(); ++r) y[r] = samples[r](i, j);
        const auto [m, se] = detail::control_variate_mean(y, env_means);
        est.matrix(i, j) = m;
        est.stderr(i, j) = se;
      }
  }
  est.matrix = 0.5 * (est.matrix + est.matrix.transpose());
  est.energy = energy.mean();
  est.skew = skew.mean();
  est.skew_stderr = skew.stderr();
  est.replicas = replicas;
  est.eta = eta;
  est.sides.assign(spec.lattice.sides().begin(), spec.lattice.sides().end());
  est.seed = spec.seed;
  return est;
}

/// Extrapolates a sequence of estimates at strictly decreasing eta to eta = 0.
///
/// Each entry is fitted by weighted least squares in eta: linear for three
/// points, quadratic for four or more. The returned error combines the
/// propagated Monte Carlo errors with the fit residual scatter.
inline HomogenizedEstimate extrapolate_eta(const std::vector<HomogenizedEstimate>& ests) {
  if (ests.size() < 3) throw ConfigError("extrapolate_eta: need at least 3 estimates");
  const int d = ests.front().dim();
  for (std::size_t i = 0; i < ests.size(); ++i) {
    if (ests[i].dim() != d) throw DimensionError("extrapolate_eta: mixed dimensions");
    if (!(ests[i].eta > 0.0)) throw ConfigError("extrapolate_eta: eta must be > 0");
    if (i > 0 && !(ests[i].eta < ests[i - 1].eta))
      throw ConfigError("extrapolate_eta: eta sequence must be strictly decreasing");
  }
  const auto n = static_cast<Eigen::Index>(ests.size());
  const Eigen::Index p = n >= 4 ? 3 : 2;
  Eigen::MatrixXd X(n, p);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double e = ests[static_cast<std::size_t>(i)].eta;
    X(i, 0) = 1.0;
    X(i, 1) = e;
    if (p == 3) X(i, 2) = e * e;
  }

  HomogenizedEstimate out = ests.back();
  out.eta = 0.0;
  out.matrix = Matrix::Zero(d, d);
  out.stderr = Matrix::Zero(d, d);
  out.energy = Matrix::Zero(d, d);
  out.skew = Matrix::Zero(d, d);
  out.skew_stderr = Matrix::Zero(d, d);
  for (int j = 0; j < d; ++j)
    for (int k = 0; k < d; ++k) {
      Eigen::VectorXd y(n), s(n), ye(n);
      bool all_equal = true;
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto& e = ests[static_cast<std::size_t>(i)];
        y(i) = e.matrix(j, k);
        ye(i) = e.energy.size() ? e.energy(j, k) : e.matrix(j, k);
        s(i) = e.stderr(j, k);
        all_equal = all_equal && y(i) == y(0);
      }
      if (all_equal) {
        out.matrix(j, k) = y(0);
        out.energy(j, k) = ye(0);
        out.stderr(j, k) = s.maxCoeff();
        continue;
      }
      const bool weighted = (s.array() > 0.0).all();
      Eigen::VectorXd w = weighted ? Eigen::VectorXd(s.array().square().inverse()) : Eigen::VectorXd::Ones(n);
      const Eigen::MatrixXd XtW = X.transpose() * w.asDiagonal();
      const Eigen::MatrixXd H = (XtW * X).ldlt().solve(XtW);  // coefficients = H y
      const Eigen::VectorXd coef = H * y;
      out.matrix(j, k) = coef(0);
      out.energy(j, k) = (H * ye)(0);
      const Eigen::RowVectorXd l = H.row(0);
      double mc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) mc += l(i) * l(i) * s(i) * s(i);
      double fit = 0.0;
      if (n > p) {
        const Eigen::VectorXd res = y - X * coef;
        fit = res.squaredNorm() / static_cast<double>(n - p) * l.squaredNorm();
      }
      out.stderr(j, k) = std::sqrt(mc + fit);
    }
  out.matrix = 0.5 * (out.matrix + out.matrix.transpose());
  out.energy = 0.5 * (out.energy + out.energy.transpose());
  return out;
}

}  // namespace rhl
