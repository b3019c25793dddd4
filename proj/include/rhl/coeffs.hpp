#pragma once

// Coefficient maps turning a scalar environment into a uniformly elliptic
// symmetric-matrix field, a(x) = map(omega(x)).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rhl/coefficient_field.hpp"
#include "rhl/errors.hpp"
#include "rhl/lattice.hpp"

namespace rhl {

inline double logistic(double s) noexcept {
  return s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
}

enum class MapForm { isotropic_sigmoid, diagonal_sigmoid, custom };

inline std::string to_string(MapForm f) {
  switch (f) {
    case MapForm::isotropic_sigmoid: return "isotropic_sigmoid";
    case MapForm::diagonal_sigmoid: return "diagonal_sigmoid";
    case MapForm::custom: return "custom";
  }
  return "?";
}

/// Scalar shape g: R -> [0, 1] with |g'| <= slope_bound, used by custom maps.
struct ScalarShape {
  std::function<double(double)> g;
  double slope_bound = 0.0;
};

/// a(s) = [lambda + (Lambda - lambda) g(s)] I, or its per-axis diagonal variant.
///
/// isotropic_sigmoid: g is the logistic function, so |Da| <= (Lambda - lambda)/4.
/// diagonal_sigmoid:  a_ii(x) = lo_i + (hi_i - lo_i) logistic(omega(x + shift_i)),
///                    with shift_i = i * axis_shift along axis 0; the certified
///                    bounds are min lo_i and max hi_i.
/// custom:            g supplied by the caller together with its slope bound.
class CoefficientMap {
 public:
  static CoefficientMap isotropic_sigmoid(double lambda, double Lambda) {
    CoefficientMap m(MapForm::isotropic_sigmoid, lambda, Lambda);
    return m;
  }

  static CoefficientMap diagonal_sigmoid(std::vector<double> lo, std::vector<double> hi, long axis_shift = 1) {
    if (lo.empty() || lo.size() != hi.size()) throw DimensionError("diagonal_sigmoid: bound vectors must match");
    double lambda = lo[0], Lambda = hi[0];
    for (std::size_t i = 0; i < lo.size(); ++i) {
      if (!(lo[i] > 0.0) || hi[i] < lo[i]) throw DomainError("diagonal_sigmoid: need 0 < lo_i <= hi_i");
      lambda = std::min(lambda, lo[i]);
      Lambda = std::max(Lambda, hi[i]);
    }
    CoefficientMap m(MapForm::diagonal_sigmoid, lambda, Lambda);
    m.lo_ = std::move(lo);
    m.hi_ = std::move(hi);
    m.axis_shift_ = axis_shift;
    return m;
  }

  static CoefficientMap custom(double lambda, double Lambda, ScalarShape shape) {
    if (!shape.g) throw DomainError("custom map: empty shape");
    CoefficientMap m(MapForm::custom, lambda, Lambda);
    m.shape_ = std::move(shape);
    return m;
  }

  MapForm form() const noexcept { return form_; }
  double lambda() const noexcept { return lambda_; }
  double Lambda() const noexcept { return Lambda_; }
  std::span<const double> lower() const noexcept { return lo_; }
  std::span<const double> upper() const noexcept { return hi_; }
  long axis_shift() const noexcept { return axis_shift_; }

  /// sup |D a~| over all inputs (entrywise).
  double derivative_bound() const {
    switch (form_) {
      case MapForm::isotropic_sigmoid: return (Lambda_ - lambda_) / 4.0;
      case MapForm::diagonal_sigmoid: {
        double b = 0.0;
        for (std::size_t i = 0; i < lo_.size(); ++i) b = std::max(b, (hi_[i] - lo_[i]) / 4.0);
        return b;
      }
      case MapForm::custom: return (Lambda_ - lambda_) * shape_.slope_bound;
    }
    return 0.0;
  }

  /// Scalar profile lambda + (Lambda - lambda) g(s) for the isotropic forms.
  double scalar(double s) const {
    const double g = form_ == MapForm::custom ? std::clamp(shape_.g(s), 0.0, 1.0) : logistic(s);
    return lambda_ + (Lambda_ - lambda_) * g;
  }

  /// Diagonal entry i for the diagonal form.
  double diagonal(int i, double s) const {
    const auto ui = static_cast<std::size_t>(i);
    return lo_[ui] + (hi_[ui] - lo_[ui]) * logistic(s);
  }

 private:
  CoefficientMap(MapForm form, double lambda, double Lambda) : form_(form), lambda_(lambda), Lambda_(Lambda) {
    if (!(lambda > 0.0) || !(Lambda >= lambda))
      throw DomainError("CoefficientMap: need 0 < lambda <= Lambda");
  }

  MapForm form_;
  double lambda_;
  double Lambda_;
  std::vector<double> lo_, hi_;
  long axis_shift_ = 1;
  ScalarShape shape_;
};

/// Site-wise a(x) = map(omega(x)) with the map's certified bounds.
inline CoefficientField evaluate_map(const CoefficientMap& map, const ScalarField& omega) {
  if (!all_finite(omega.values())) throw DataError("evaluate_map: non-finite environment");
  const auto& lat = omega.lattice();
  const int d = lat.dim();
  CoefficientField a(lat, map.lambda(), map.Lambda());
  if (map.form() == MapForm::diagonal_sigmoid) {
    if (static_cast<int>(map.lower().size()) != d)
      throw DimensionError("evaluate_map: diagonal map has wrong number of axes");
    std::vector<long> off(static_cast<std::size_t>(d), 0);
    for (int i = 0; i < d; ++i) {
      off[0] = static_cast<long>(i) * map.axis_shift();
      for (std::size_t x = 0; x < lat.volume(); ++x) a.set(x, i, i, map.diagonal(i, omega[lat.shift(x, off)]));
    }
    return a;
  }
  for (std::size_t x = 0; x < lat.volume(); ++x) {
    const double v = map.scalar(omega[x]);
    for (int i = 0; i < d; ++i) a.set(x, i, i, v);
  }
  return a;
}

/// Certified contrast Lambda / lambda.
inline double contrast_ratio(const CoefficientField& a) { return a.Lambda() / a.lambda(); }

/// Laminate: a(x) = diag(p_1(t), ..., p_d(t)) with t = x_axis, the coordinate
/// along the lamination axis. Deterministic; used as an oracle for a_hom.
inline CoefficientField laminate(const TorusLattice& lat, int axis,
                                 const std::vector<std::function<double(long)>>& profiles) {
  const int d = lat.dim();
  if (static_cast<int>(profiles.size()) != d) throw DimensionError("laminate: need one profile per axis");
  if (axis < 0 || axis >= d) throw DimensionError("laminate: bad axis");
  double lambda = std::numeric_limits<double>::infinity(), Lambda = 0.0;
  for (long t = 0; t < static_cast<long>(lat.side(axis)); ++t)
    for (const auto& p : profiles) {
      const double v = p(t);
      if (!(v > 0.0)) throw DomainError("laminate: profiles must be positive");
      lambda = std::min(lambda, v);
      Lambda = std::max(Lambda, v);
    }
  CoefficientField a(lat, lambda, Lambda);
  for (std::size_t x = 0; x < lat.volume(); ++x) {
    const long t = lat.coord(x, axis);
    for (int i = 0; i < d; ++i) a.set(x, i, i, profiles[static_cast<std::size_t>(i)](t));
  }
  return a;
}

/// Two-phase isotropic laminate: a(x) = low I on the first half of the axis, high I on the second.
inline CoefficientField two_phase_laminate(const TorusLattice& lat, int axis, double low, double high) {
  const long half = static_cast<long>(lat.side(axis)) / 2;
  auto profile = [=](long t) { return t < half ? low : high; };
  return laminate(lat, axis, std::vector<std::function<double(long)>>(static_cast<std::size_t>(lat.dim()), profile));
}

}  // namespace rhl
