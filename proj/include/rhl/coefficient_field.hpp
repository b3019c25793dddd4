#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "rhl/errors.hpp"
#include "rhl/lattice.hpp"

namespace rhl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Extreme eigenvalues of a symmetric matrix.
struct SpectralBounds {
  double min = 0.0;
  double max = 0.0;
};

inline SpectralBounds symmetric_bounds(const Matrix& A) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(A, Eigen::EigenvaluesOnly);
  return {es.eigenvalues().minCoeff(), es.eigenvalues().maxCoeff()};
}

inline void require_spd(const Matrix& A, const char* where) {
  if (A.rows() != A.cols() || A.rows() == 0)
    throw DimensionError(std::string(where) + ": matrix must be square");
  if ((A - A.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + A.cwiseAbs().maxCoeff()))
    throw DomainError(std::string(where) + ": matrix must be symmetric");
  if (symmetric_bounds(A).min <= 0.0)
    throw DomainError(std::string(where) + ": matrix must be positive definite");
}

inline std::size_t packed_size(int d) { return static_cast<std::size_t>(d * (d + 1) / 2); }

/// Offset of entry (i, j) in the packed upper triangle (row-major).
inline std::size_t packed_offset(int d, int i, int j) {
  if (i > j) std::swap(i, j);
  return static_cast<std::size_t>(i * d - i * (i - 1) / 2 + (j - i));
}

/// Per-site symmetric d x d matrix a(x) with certified bounds lambda I <= a(x) <= Lambda I.
///
/// a(x) multiplies the forward edges leaving x, so the divergence-form
/// operator is div*(a grad u).
class CoefficientField {
 public:
  CoefficientField() = default;
  CoefficientField(TorusLattice lattice, double lambda, double Lambda)
      : lattice_(std::move(lattice)),
        packed_(lattice_.volume() * packed_size(lattice_.dim()), 0.0),
        lambda_(lambda),
        Lambda_(Lambda) {
    if (!(lambda > 0.0) || Lambda < lambda)
      throw DomainError("CoefficientField: need 0 < lambda <= Lambda");
  }

  /// a(x) = A at every site; the certified bounds are the extreme eigenvalues of A.
  static CoefficientField constant(const TorusLattice& lattice, const Matrix& A) {
    require_spd(A, "CoefficientField::constant");
    if (A.rows() != lattice.dim()) throw DimensionError("CoefficientField::constant: size != d");
    const auto b = symmetric_bounds(A);
    CoefficientField a(lattice, b.min, std::max(b.min, b.max));
    for (std::size_t x = 0; x < lattice.volume(); ++x) a.set(x, A);
    return a;
  }

  static CoefficientField identity(const TorusLattice& lattice) {
    return constant(lattice, Matrix::Identity(lattice.dim(), lattice.dim()));
  }

  const TorusLattice& lattice() const noexcept { return lattice_; }
  int dim() const noexcept { return lattice_.dim(); }
  double lambda() const noexcept { return lambda_; }
  double Lambda() const noexcept { return Lambda_; }

  double operator()(std::size_t x, int i, int j) const {
    return packed_[x * packed_size(dim()) + packed_offset(dim(), i, j)];
  }

  void set(std::size_t x, int i, int j, double v) {
    packed_[x * packed_size(dim()) + packed_offset(dim(), i, j)] = v;
  }

  void set(std::size_t x, const Matrix& A) {
    const int d = dim();
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j) set(x, i, j, A(i, j));
  }

  Matrix matrix(std::size_t x) const {
    const int d = dim();
    Matrix A(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) A(i, j) = (*this)(x, i, j);
    return A;
  }

  /// out = a(x) v
  void multiply(std::size_t x, std::span<const double> v, std::span<double> out) const {
    const int d = dim();
    const double* p = packed_.data() + x * packed_size(d);
    for (int i = 0; i < d; ++i) out[static_cast<std::size_t>(i)] = 0.0;
    for (int i = 0; i < d; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      out[ui] += *p * v[ui];
      ++p;
      for (int j = i + 1; j < d; ++j, ++p) {
        const auto uj = static_cast<std::size_t>(j);
        out[ui] += *p * v[uj];
        out[uj] += *p * v[ui];
      }
    }
  }

  /// Packed upper triangles, d(d+1)/2 values per site.
  std::span<const double> packed() const noexcept { return packed_; }
  std::span<double> packed() noexcept { return packed_; }

 private:
  TorusLattice lattice_;
  std::vector<double> packed_;
  double lambda_ = 1.0;
  double Lambda_ = 1.0;
};

/// Flux a(x) grad u(x).
inline VectorField flux(const CoefficientField& a, const ScalarField& u) {
  require_same_lattice(a.lattice(), u.lattice(), "flux");
  const auto& lat = u.lattice();
  const int d = lat.dim();
  VectorField w(lat);
  std::vector<double> g(static_cast<std::size_t>(d));
  for (std::size_t x = 0; x < lat.volume(); ++x) {
    for (int i = 0; i < d; ++i) g[static_cast<std::size_t>(i)] = u[lat.neighbor(x, i, +1)] - u[x];
    a.multiply(x, g, w.at(x));
  }
  return w;
}

/// eta u + div*(a grad u)
inline ScalarField apply_operator(double eta, const CoefficientField& a, const ScalarField& u) {
  require_same_lattice(a.lattice(), u.lattice(), "apply_operator");
  if (eta < 0.0) throw DomainError("apply_operator: eta must be >= 0");
  ScalarField out = divergence(flux(a, u));
  if (eta != 0.0)
    for (std::size_t x = 0; x < out.size(); ++x) out[x] += eta * u[x];
  return out;
}

/// Column k of a(x) at every site, i.e. the vector field a e_k.
inline VectorField coefficient_column(const CoefficientField& a, int k) {
  const auto& lat = a.lattice();
  VectorField col(lat);
  for (std::size_t x = 0; x < lat.volume(); ++x)
    for (int i = 0; i < lat.dim(); ++i) col(x, i) = a(x, i, k);
  return col;
}

}  // namespace rhl
