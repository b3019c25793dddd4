#pragma once

// Thin RAII layer over FFTW for complex transforms on a torus, plus the
// Fourier symbols of the lattice operators.
//
// Convention: hat u(k) = sum_x u(x) exp(-i theta_k . x), theta_k,j = 2 pi k_j / L_j.
// A forward difference u(x + e_j) - u(x) has symbol z_j = exp(i theta_j) - 1 and
// the divergence div* has symbol conj(z_j). Only FFTW_ESTIMATE plans are used
// so that results do not depend on timing measurements.

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include "rhl/coefficient_field.hpp"
#include "rhl/lattice.hpp"

namespace rhl {

using cplx = std::complex<double>;

/// fftw_malloc-backed buffer of complex values, one per site.
class SpectralBuffer {
 public:
  SpectralBuffer() = default;
  explicit SpectralBuffer(std::size_t n)
      : data_(static_cast<cplx*>(fftw_malloc(sizeof(cplx) * (n ? n : 1)))), size_(n) {
    if (!data_) throw std::bad_alloc();
    for (std::size_t i = 0; i < n; ++i) data_[i] = 0.0;
  }
  SpectralBuffer(const SpectralBuffer& o) : SpectralBuffer(o.size_) {
    std::copy(o.data_, o.data_ + size_, data_);
  }
  SpectralBuffer(SpectralBuffer&& o) noexcept : data_(o.data_), size_(o.size_) {
    o.data_ = nullptr;
    o.size_ = 0;
  }
  SpectralBuffer& operator=(SpectralBuffer o) noexcept {
    std::swap(data_, o.data_);
    std::swap(size_, o.size_);
    return *this;
  }
  ~SpectralBuffer() {
    if (data_) fftw_free(data_);
  }

  cplx* data() noexcept { return data_; }
  const cplx* data() const noexcept { return data_; }
  std::size_t size() const noexcept { return size_; }
  cplx& operator[](std::size_t i) { return data_[i]; }
  const cplx& operator[](std::size_t i) const { return data_[i]; }
  std::span<cplx> span() noexcept { return {data_, size_}; }
  std::span<const cplx> span() const noexcept { return {data_, size_}; }

 private:
  cplx* data_ = nullptr;
  std::size_t size_ = 0;
};

namespace detail {

struct PlanPair {
  fftw_plan forward = nullptr;
  fftw_plan backward = nullptr;
};

// Plans are created once per shape under a lock and then executed through the
// new-array interface, which FFTW documents as thread-safe.
inline PlanPair plans_for(const TorusLattice& lat) {
  static std::mutex mu;
  static std::map<std::vector<std::size_t>, PlanPair> cache;
  std::lock_guard<std::mutex> lock(mu);
  std::vector<std::size_t> key(lat.sides().begin(), lat.sides().end());
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  std::vector<int> n(key.begin(), key.end());
  SpectralBuffer scratch(lat.volume());
  auto* p = reinterpret_cast<fftw_complex*>(scratch.data());
  PlanPair pp;
  pp.forward = fftw_plan_dft(static_cast<int>(n.size()), n.data(), p, p, FFTW_FORWARD, FFTW_ESTIMATE);
  pp.backward = fftw_plan_dft(static_cast<int>(n.size()), n.data(), p, p, FFTW_BACKWARD, FFTW_ESTIMATE);
  cache.emplace(std::move(key), pp);
  return pp;
}

}  // namespace detail

/// In-place forward transform (unnormalized).
inline void fft_forward(const TorusLattice& lat, SpectralBuffer& buf) {
  auto pp = detail::plans_for(lat);
  auto* p = reinterpret_cast<fftw_complex*>(buf.data());
  fftw_execute_dft(pp.forward, p, p);
}

/// In-place inverse transform, normalized by 1/volume.
inline void fft_backward(const TorusLattice& lat, SpectralBuffer& buf) {
  auto pp = detail::plans_for(lat);
  auto* p = reinterpret_cast<fftw_complex*>(buf.data());
  fftw_execute_dft(pp.backward, p, p);
  const double s = 1.0 / static_cast<double>(lat.volume());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] *= s;
}

inline SpectralBuffer to_spectral(const ScalarField& u) {
  SpectralBuffer b(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) b[i] = u[i];
  fft_forward(u.lattice(), b);
  return b;
}

/// Inverse transform; returns the real part and stores the largest |imag| seen.
inline ScalarField from_spectral(const TorusLattice& lat, SpectralBuffer b,
                                 double* imag_residue = nullptr) {
  fft_backward(lat, b);
  ScalarField u(lat);
  double worst = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] = b[i].real();
    worst = std::max(worst, std::abs(b[i].imag()));
  }
  if (imag_residue) *imag_residue = worst;
  return u;
}

/// Angle theta_j of the mode with linear index `k` along `axis`.
inline double mode_angle(const TorusLattice& lat, std::size_t k, int axis) {
  return 2.0 * std::numbers::pi * static_cast<double>(lat.coord(k, axis)) /
         static_cast<double>(lat.side(axis));
}

/// Symbol of the forward difference along each axis at every mode.
inline std::vector<cplx> difference_symbols(const TorusLattice& lat) {
  const int d = lat.dim();
  std::vector<cplx> z(lat.volume() * static_cast<std::size_t>(d));
  for (std::size_t k = 0; k < lat.volume(); ++k)
    for (int j = 0; j < d; ++j)
      z[k * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] =
          std::polar(1.0, mode_angle(lat, k, j)) - 1.0;
  return z;
}

/// Symbol of div*(A grad) for a constant symmetric A:
/// sum_jk A_jk conj(z_j) z_k, which for A = I is sum_j 4 sin^2(theta_j / 2).
inline std::vector<double> operator_symbol(const TorusLattice& lat, const Matrix& A) {
  const int d = lat.dim();
  if (A.rows() != d || A.cols() != d) throw DimensionError("operator_symbol: matrix size != d");
  std::vector<double> s(lat.volume());
  std::vector<cplx> z(static_cast<std::size_t>(d));
  for (std::size_t k = 0; k < lat.volume(); ++k) {
    for (int j = 0; j < d; ++j) z[static_cast<std::size_t>(j)] = std::polar(1.0, mode_angle(lat, k, j)) - 1.0;
    double acc = 0.0;
    for (int j = 0; j < d; ++j) {
      acc += A(j, j) * std::norm(z[static_cast<std::size_t>(j)]);
      for (int l = j + 1; l < d; ++l)
        acc += 2.0 * A(j, l) *
               (std::conj(z[static_cast<std::size_t>(j)]) * z[static_cast<std::size_t>(l)]).real();
    }
    s[k] = acc;
  }
  return s;
}

inline std::vector<double> laplacian_symbol(const TorusLattice& lat) {
  return operator_symbol(lat, Matrix::Identity(lat.dim(), lat.dim()));
}

/// Circular convolution (h * w)(x) = sum_y h(x - y) w(y), computed spectrally.
inline ScalarField circular_convolve(const ScalarField& h, const ScalarField& w,
                                     double* imag_residue = nullptr) {
  require_same_lattice(h.lattice(), w.lattice(), "circular_convolve");
  auto H = to_spectral(h);
  auto W = to_spectral(w);
  for (std::size_t k = 0; k < W.size(); ++k) W[k] *= H[k];
  return from_spectral(w.lattice(), std::move(W), imag_residue);
}

}  // namespace rhl
