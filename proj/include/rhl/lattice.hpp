#pragma once

// Periodic lattice geometry, lattice fields and the discrete vector calculus
// (forward gradient, its adjoint divergence) on a torus.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rhl/errors.hpp"

namespace rhl {

/// Periodic box Q in Z^d with side L_i along axis i.
///
/// Sites are numbered row-major with the last coordinate fastest. Coordinates
/// are taken in [0, L_i); `min_image` maps them to the torus-minimal
/// representative in [-L_i/2, L_i/2).
class TorusLattice {
 public:
  TorusLattice() = default;

  explicit TorusLattice(std::vector<std::size_t> sides) : sides_(std::move(sides)) {
    if (sides_.empty()) throw DimensionError("TorusLattice: dimension must be >= 1");
    for (auto L : sides_) {
      if (L == 0 || L % 2 != 0)
        throw DimensionError("TorusLattice: sides must be positive even integers, got " +
                             std::to_string(L));
    }
    strides_.assign(sides_.size(), 1);
    for (std::size_t i = sides_.size() - 1; i > 0; --i) strides_[i - 1] = strides_[i] * sides_[i];
    volume_ = strides_[0] * sides_[0];
  }

  static TorusLattice cube(int d, std::size_t L) {
    if (d < 1) throw DimensionError("TorusLattice: dimension must be >= 1");
    return TorusLattice(std::vector<std::size_t>(static_cast<std::size_t>(d), L));
  }

  int dim() const noexcept { return static_cast<int>(sides_.size()); }
  std::size_t side(int axis) const { return sides_[static_cast<std::size_t>(axis)]; }
  std::span<const std::size_t> sides() const noexcept { return sides_; }
  std::size_t stride(int axis) const { return strides_[static_cast<std::size_t>(axis)]; }
  std::size_t volume() const noexcept { return volume_; }

  /// Linear index of a site; coordinates are reduced modulo the sides.
  std::size_t index(std::span<const long> coords) const {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < sides_.size(); ++i) {
      const long L = static_cast<long>(sides_[i]);
      long c = coords[i] % L;
      if (c < 0) c += L;
      idx += static_cast<std::size_t>(c) * strides_[i];
    }
    return idx;
  }

  std::size_t index(std::initializer_list<long> coords) const {
    return index(std::span<const long>(coords.begin(), coords.size()));
  }

  /// Coordinate of `idx` along `axis`, in [0, L_axis).
  long coord(std::size_t idx, int axis) const {
    const auto a = static_cast<std::size_t>(axis);
    return static_cast<long>((idx / strides_[a]) % sides_[a]);
  }

  std::vector<long> coords(std::size_t idx) const {
    std::vector<long> c(sides_.size());
    for (std::size_t i = 0; i < sides_.size(); ++i)
      c[i] = static_cast<long>((idx / strides_[i]) % sides_[i]);
    return c;
  }

  /// Torus-minimal representative of the offset from the origin to `idx`.
  std::vector<long> min_image(std::size_t idx) const {
    auto c = coords(idx);
    for (std::size_t i = 0; i < sides_.size(); ++i) {
      const long L = static_cast<long>(sides_[i]);
      if (c[i] >= L / 2) c[i] -= L;
    }
    return c;
  }

  /// Euclidean length of the torus-minimal offset of `idx` from the origin.
  double min_image_norm(std::size_t idx) const {
    double s = 0.0;
    for (std::size_t i = 0; i < sides_.size(); ++i) {
      const long L = static_cast<long>(sides_[i]);
      long c = static_cast<long>((idx / strides_[i]) % sides_[i]);
      if (c >= L / 2) c -= L;
      s += static_cast<double>(c) * static_cast<double>(c);
    }
    return std::sqrt(s);
  }

  /// Site one step from `idx` along `axis`, forward if `step` > 0, backward otherwise.
  std::size_t neighbor(std::size_t idx, int axis, int step) const {
    const auto a = static_cast<std::size_t>(axis);
    const std::size_t c = (idx / strides_[a]) % sides_[a];
    if (step > 0) return c + 1 == sides_[a] ? idx - c * strides_[a] : idx + strides_[a];
    return c == 0 ? idx + (sides_[a] - 1) * strides_[a] : idx - strides_[a];
  }

  /// Site `idx + offset` on the torus.
  std::size_t shift(std::size_t idx, std::span<const long> offset) const {
    std::size_t out = 0;
    for (std::size_t i = 0; i < sides_.size(); ++i) {
      const long L = static_cast<long>(sides_[i]);
      long c = static_cast<long>((idx / strides_[i]) % sides_[i]) + offset[i] % L;
      c %= L;
      if (c < 0) c += L;
      out += static_cast<std::size_t>(c) * strides_[i];
    }
    return out;
  }

  friend bool operator==(const TorusLattice& a, const TorusLattice& b) {
    return a.sides_ == b.sides_;
  }

  std::string describe() const {
    std::string s;
    for (std::size_t i = 0; i < sides_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(sides_[i]);
    }
    return s;
  }

 private:
  std::vector<std::size_t> sides_;
  std::vector<std::size_t> strides_;
  std::size_t volume_ = 0;
};

inline void require_same_lattice(const TorusLattice& a, const TorusLattice& b, const char* where) {
  if (!(a == b))
    throw DimensionError(std::string(where) + ": lattice mismatch (" + a.describe() + " vs " +
                         b.describe() + ")");
}

/// One value per site.
template <class T>
class ScalarFieldT {
 public:
  using value_type = T;

  ScalarFieldT() = default;
  explicit ScalarFieldT(TorusLattice lattice, T fill = T{})
      : lattice_(std::move(lattice)), values_(lattice_.volume(), fill) {}
  ScalarFieldT(TorusLattice lattice, std::vector<T> values)
      : lattice_(std::move(lattice)), values_(std::move(values)) {
    if (values_.size() != lattice_.volume())
      throw DimensionError("ScalarField: value count does not match lattice volume");
  }

  const TorusLattice& lattice() const noexcept { return lattice_; }
  std::size_t size() const noexcept { return values_.size(); }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }

  static constexpr std::size_t components() noexcept { return 1; }

 private:
  TorusLattice lattice_;
  std::vector<T> values_;
};

/// d values per site, stored contiguously per site.
template <class T>
class VectorFieldT {
 public:
  using value_type = T;

  VectorFieldT() = default;
  explicit VectorFieldT(TorusLattice lattice, T fill = T{})
      : lattice_(std::move(lattice)),
        values_(lattice_.volume() * static_cast<std::size_t>(lattice_.dim()), fill) {}
  VectorFieldT(TorusLattice lattice, std::vector<T> values)
      : lattice_(std::move(lattice)), values_(std::move(values)) {
    if (values_.size() != lattice_.volume() * static_cast<std::size_t>(lattice_.dim()))
      throw DimensionError("VectorField: component count does not match d * volume");
  }

  const TorusLattice& lattice() const noexcept { return lattice_; }
  int dim() const noexcept { return lattice_.dim(); }
  std::size_t components() const noexcept { return static_cast<std::size_t>(lattice_.dim()); }

  T& operator()(std::size_t site, int comp) {
    return values_[site * components() + static_cast<std::size_t>(comp)];
  }
  const T& operator()(std::size_t site, int comp) const {
    return values_[site * components() + static_cast<std::size_t>(comp)];
  }

  std::span<T> at(std::size_t site) { return {values_.data() + site * components(), components()}; }
  std::span<const T> at(std::size_t site) const {
    return {values_.data() + site * components(), components()};
  }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }

  /// Component `comp` as a scalar field.
  ScalarFieldT<T> component(int comp) const {
    ScalarFieldT<T> out(lattice_);
    for (std::size_t x = 0; x < lattice_.volume(); ++x) out[x] = (*this)(x, comp);
    return out;
  }

 private:
  TorusLattice lattice_;
  std::vector<T> values_;
};

using ScalarField = ScalarFieldT<double>;
using VectorField = VectorFieldT<double>;
using ComplexScalarField = ScalarFieldT<std::complex<double>>;

/// Forward-difference gradient: (grad u)_i(x) = u(x + e_i) - u(x).
template <class T>
VectorFieldT<T> gradient(const ScalarFieldT<T>& u) {
  const auto& lat = u.lattice();
  VectorFieldT<T> g(lat);
  const int d = lat.dim();
  for (std::size_t x = 0; x < lat.volume(); ++x)
    for (int i = 0; i < d; ++i) g(x, i) = u[lat.neighbor(x, i, +1)] - u[x];
  return g;
}

/// Adjoint of `gradient` under the counting-measure inner product:
/// (div* v)(x) = sum_i [v_i(x - e_i) - v_i(x)].
template <class T>
ScalarFieldT<T> divergence(const VectorFieldT<T>& v) {
  const auto& lat = v.lattice();
  ScalarFieldT<T> out(lat);
  const int d = lat.dim();
  for (std::size_t x = 0; x < lat.volume(); ++x) {
    T s{};
    for (int i = 0; i < d; ++i) s += v(lat.neighbor(x, i, -1), i) - v(x, i);
    out[x] = s;
  }
  return out;
}

/// Real site-wise inner product sum_x u(x) w(x) for any span of equal length.
inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double norm_inf(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

inline double norm1(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += std::abs(v);
  return s;
}

inline double mean(std::span<const double> a) {
  if (a.empty()) return 0.0;
  return std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
}

/// Removes the torus mean (the projection orthogonal to constants).
inline void remove_mean(ScalarField& u) {
  const double m = mean(u.values());
  for (auto& v : u.values()) v -= m;
}

/// Kronecker delta at `site`.
inline ScalarField delta(const TorusLattice& lattice, std::size_t site = 0) {
  ScalarField f(lattice);
  f[site] = 1.0;
  return f;
}

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

// Element-wise helpers used by the solvers.
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline ScalarField linear_combination(double a, const ScalarField& u, double b, const ScalarField& w) {
  require_same_lattice(u.lattice(), w.lattice(), "linear_combination");
  ScalarField out(u.lattice());
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = a * u[i] + b * w[i];
  return out;
}

}  // namespace rhl
