#pragma once

// Solvers for eta u + div*(a grad u) = f on the torus.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rhl/coefficient_field.hpp"
#include "rhl/errors.hpp"
#include "rhl/fft.hpp"
#include "rhl/lattice.hpp"

namespace rhl {

/// Exact inverse of eta + div*(A grad) for constant A, applied in Fourier space.
/// With eta == 0 the zero mode is pinned to 0 (mean-zero solutions).
class SpectralSolver {
 public:
  SpectralSolver(const TorusLattice& lat, double eta, const Matrix& A) : lattice_(lat), eta_(eta) {
    if (eta < 0.0) throw DomainError("SpectralSolver: eta must be >= 0");
    require_spd(A, "SpectralSolver");
    inverse_symbol_ = operator_symbol(lat, A);
    for (std::size_t m = 0; m < inverse_symbol_.size(); ++m) {
      const double s = eta + inverse_symbol_[m];
      inverse_symbol_[m] = s > 0.0 ? 1.0 / s : 0.0;
    }
    if (eta == 0.0) inverse_symbol_[0] = 0.0;
  }

  const TorusLattice& lattice() const noexcept { return lattice_; }
  double eta() const noexcept { return eta_; }

  ScalarField apply(const ScalarField& f) const {
    require_same_lattice(lattice_, f.lattice(), "SpectralSolver");
    auto b = to_spectral(f);
    for (std::size_t m = 0; m < b.size(); ++m) b[m] *= inverse_symbol_[m];
    return from_spectral(lattice_, std::move(b));
  }

 private:
  TorusLattice lattice_;
  double eta_;
  std::vector<double> inverse_symbol_;
};

namespace detail {

inline void require_solvable(double eta, const ScalarField& f, const char* where) {
  if (eta > 0.0) return;
  const double m = mean(f.values());
  const double scale = norm2(f.values()) / std::sqrt(static_cast<double>(f.size()));
  if (std::abs(m) > 1e-12 * std::max(scale, 1e-300) && std::abs(m) > 0.0)
    throw DomainError(std::string(where) + ": eta = 0 requires a mean-zero right-hand side (mean = " +
                      std::to_string(m) + ")");
}

}  // namespace detail

/// Exact spectral solve of eta u + div*(A grad u) = f for constant SPD A.
inline ScalarField solve_const(double eta, const Matrix& A, const ScalarField& f) {
  detail::require_solvable(eta, f, "solve_const");
  return SpectralSolver(f.lattice(), eta, A).apply(f);
}

struct SolveReport {
  int iterations = 0;
  double relative_residual = 0.0;
  double tolerance = 0.0;
  std::string method;
};

enum class Preconditioner {
  midpoint,  // constant coefficient ((lambda + Lambda)/2) I
  upper      // constant coefficient Lambda I
};

struct CgOptions {
  double tol = 1e-8;
  int max_iter = 2000;
  Preconditioner preconditioner = Preconditioner::midpoint;
};

/// Thrown when CG exhausts its iterations; carries the best iterate.
class CgNonConvergence : public ConvergenceError {
 public:
  CgNonConvergence(ScalarField best, int iterations, double residual)
      : ConvergenceError("solve_cg: no convergence after " + std::to_string(iterations) +
                             " iterations (relative residual " + std::to_string(residual) + ")",
                         iterations, residual),
        best_(std::move(best)) {}
  const ScalarField& best_iterate() const noexcept { return best_; }

 private:
  ScalarField best_;
};

/// ||eta u + div*(a grad u) - f||_2 / ||f||_2, recomputed from scratch.
inline double relative_residual(double eta, const CoefficientField& a, const ScalarField& u, const ScalarField& f) {
  auto r = apply_operator(eta, a, u);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= f[i];
  const double nf = norm2(f.values());
  return nf > 0.0 ? norm2(r.values()) / nf : norm2(r.values());
}

/// Preconditioned conjugate gradient for eta u + div*(a grad u) = f.
///
/// The preconditioner is the exact constant-coefficient inverse with
/// coefficient (lambda + Lambda)/2 (default) or Lambda. With eta = 0 the
/// iteration runs in the mean-zero subspace and f must have zero mean.
/// Convergence is declared only on the recomputed true residual.
inline std::pair<ScalarField, SolveReport> solve_cg(double eta, const CoefficientField& a, const ScalarField& f,
                                                    const CgOptions& opt = {}) {
  require_same_lattice(a.lattice(), f.lattice(), "solve_cg");
  if (eta < 0.0) throw DomainError("solve_cg: eta must be >= 0");
  if (!(opt.tol > 0.0 && opt.tol < 1.0)) throw DomainError("solve_cg: tol must lie in (0, 1)");
  if (!all_finite(f.values())) throw DataError("solve_cg: non-finite right-hand side");
  detail::require_solvable(eta, f, "solve_cg");
  const auto& lat = f.lattice();
  const int d = lat.dim();

  SolveReport rep;
  rep.tolerance = opt.tol;
  rep.method = opt.preconditioner == Preconditioner::midpoint ? "pcg-midpoint" : "pcg-upper";

  ScalarField rhs = f;
  if (eta == 0.0) remove_mean(rhs);
  ScalarField u(lat);
  const double nf = norm2(rhs.values());
  if (nf == 0.0) return {u, rep};

  const double c = opt.preconditioner == Preconditioner::midpoint ? 0.5 * (a.lambda() + a.Lambda()) : a.Lambda();
  const SpectralSolver precond(lat, eta, c * Matrix::Identity(d, d));

  ScalarField r = rhs;
  ScalarField z = precond.apply(r);
  ScalarField p = z;
  double rz = dot(r.values(), z.values());
  double best_res = 1.0;
  ScalarField best = u;

  int it = 0;
  while (it < opt.max_iter) {
    const ScalarField Ap = apply_operator(eta, a, p);
    const double pAp = dot(p.values(), Ap.values());
    if (!(pAp > 0.0)) break;
    const double alpha = rz / pAp;
    axpy(alpha, p.values(), u.values());
    axpy(-alpha, Ap.values(), r.values());
    ++it;
    double res = norm2(r.values()) / nf;
    if (res <= opt.tol) {
      // Replace the recurrence residual by the true one before accepting.
      r = apply_operator(eta, a, u);
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = rhs[i] - r[i];
      if (eta == 0.0) remove_mean(r);
      res = norm2(r.values()) / nf;
      if (res <= opt.tol) break;
      z = precond.apply(r);
      p = z;
      rz = dot(r.values(), z.values());
      continue;
    }
    if (res < best_res) {
      best_res = res;
      best = u;
    }
    z = precond.apply(r);
    const double rz_new = dot(r.values(), z.values());
    const double beta = rz_new / rz;
    rz = rz_new;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = z[i] + beta * p[i];
  }
  if (eta == 0.0) remove_mean(u);
  const double final_res = relative_residual(eta, a, u, rhs);
  if (final_res > opt.tol) {
    if (final_res < best_res) best = u;
    throw CgNonConvergence(best, it, std::min(final_res, best_res));
  }
  rep.iterations = it;
  rep.relative_residual = final_res;
  return {u, rep};
}

/// Per-term record of the Neumann series solve.
struct RichardsonTrace {
  std::vector<double> grad_norms;  // RMS of |grad F_r| over the torus, r = 2, 3, ...
  std::vector<double> ratios;      // grad_norms[i] / grad_norms[i - 1]
  double contraction_bound = 0.0;  // 1 - lambda / Lambda
  int iterations = 0;              // number of series terms computed
  double tolerance = 0.0;
  ScalarField solution;            // accumulated Phi = sum_r F_r
};

class RichardsonNonConvergence : public ConvergenceError {
 public:
  explicit RichardsonNonConvergence(RichardsonTrace trace)
      : ConvergenceError("solve_richardson: no convergence after " + std::to_string(trace.iterations) + " terms",
                         trace.iterations, trace.grad_norms.empty() ? 0.0 : trace.grad_norms.back()),
        trace_(std::move(trace)) {}
  const RichardsonTrace& trace() const noexcept { return trace_; }

 private:
  RichardsonTrace trace_;
};

inline double rms_norm(const VectorField& g) {
  return norm2(g.values()) / std::sqrt(static_cast<double>(g.lattice().volume()));
}

/// Neumann series for the eta-regularized corrector in direction v.
///
/// With b(x) = I - a(x)/Lambda and S = eta/Lambda + div* grad:
///   S F_2 = P div*[b v],   S F_r = P div*[b grad F_{r-1}]  (r > 2),
/// where P removes the torus mean. Phi = sum_r F_r solves
/// eta Phi + div*(a (grad Phi + v)) = 0 with mean zero, and each step
/// contracts the gradient norm by at most 1 - lambda/Lambda. The series is
/// truncated once the RMS of grad F_r is <= tol |v|.
inline std::pair<ScalarField, RichardsonTrace> solve_richardson(double eta, const CoefficientField& a,
                                                                const Vector& v, double tol = 1e-10,
                                                                int max_iter = 5000) {
  if (!(eta > 0.0)) throw DomainError("solve_richardson: eta must be > 0");
  const auto& lat = a.lattice();
  const int d = lat.dim();
  if (v.size() != d) throw DimensionError("solve_richardson: direction has wrong length");
  const double Lambda = a.Lambda();
  const SpectralSolver S(lat, eta / Lambda, Matrix::Identity(d, d));
  const double vnorm = v.norm();

  RichardsonTrace tr;
  tr.contraction_bound = 1.0 - a.lambda() / Lambda;
  tr.tolerance = tol;
  tr.solution = ScalarField(lat);
  if (vnorm == 0.0) return {tr.solution, tr};

  // b(x) w = w - a(x) w / Lambda, written into `out`.
  VectorField bw(lat);
  std::vector<double> tmp(static_cast<std::size_t>(d));
  auto apply_b = [&](auto&& w_at) {
    for (std::size_t x = 0; x < lat.volume(); ++x) {
      auto w = w_at(x);
      auto out = bw.at(x);
      a.multiply(x, w, tmp);
      for (int i = 0; i < d; ++i) out[static_cast<std::size_t>(i)] = w[static_cast<std::size_t>(i)] - tmp[static_cast<std::size_t>(i)] / Lambda;
    }
  };

  std::vector<double> vv(v.data(), v.data() + d);
  apply_b([&](std::size_t) { return std::span<const double>(vv); });
  for (;;) {
    ScalarField rhs = divergence(bw);
    remove_mean(rhs);
    ScalarField F = S.apply(rhs);
    const VectorField gF = gradient(F);
    const double gn = rms_norm(gF);
    if (!tr.grad_norms.empty()) tr.ratios.push_back(tr.grad_norms.back() > 0.0 ? gn / tr.grad_norms.back() : 0.0);
    tr.grad_norms.push_back(gn);
    ++tr.iterations;
    axpy(1.0, F.values(), tr.solution.values());
    if (gn <= tol * vnorm) break;
    if (tr.iterations >= max_iter) throw RichardsonNonConvergence(std::move(tr));
    apply_b([&](std::size_t x) { return gF.at(x); });
  }
  remove_mean(tr.solution);
  return {tr.solution, tr};
}

}  // namespace rhl
