#pragma once

// Exact Gaussian samplers (white noise, massive and massless free fields),
// convolution environments omega = h * base, and spectral estimation of the
// two-point function.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "rhl/coefficient_field.hpp"
#include "rhl/errors.hpp"
#include "rhl/fft.hpp"
#include "rhl/lattice.hpp"
#include "rhl/parallel.hpp"
#include "rhl/rng.hpp"
#include "rhl/stats.hpp"

namespace rhl {

enum class KernelFamily { power_law, grad_green, custom };

inline std::string to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::power_law: return "power_law";
    case KernelFamily::grad_green: return "grad_green";
    case KernelFamily::custom: return "custom";
  }
  return "?";
}

/// Convolution kernel realized on the torus.
///
/// Scalar kernels have one component; grad_green has d components and
/// contracts against a vector-valued base field.
struct Kernel {
  KernelFamily family = KernelFamily::power_law;
  double epsilon = 0.0;          // power_law tail parameter
  double support_radius = 0.0;   // largest torus-minimal distance carrying weight
  std::vector<ScalarField> components;

  const TorusLattice& lattice() const { return components.front().lattice(); }
  bool is_vector() const noexcept { return components.size() > 1 || family == KernelFamily::grad_green; }

  /// (sum_x |h(x)|^q)^{1/q} with |h(x)| the Euclidean norm over components.
  double lq_norm(double q) const {
    const auto& lat = lattice();
    double s = 0.0;
    for (std::size_t x = 0; x < lat.volume(); ++x) {
      double m2 = 0.0;
      for (const auto& c : components) m2 += c[x] * c[x];
      s += std::pow(std::sqrt(m2), q);
    }
    return std::pow(s, 1.0 / q);
  }
};

struct KernelParams {
  double epsilon = 0.5;
  /// Truncate to |z| <= radius; default keeps the whole torus.
  std::optional<double> support_radius;
  /// Values for the custom family.
  std::optional<ScalarField> values;
};

namespace detail {

inline double max_min_image_norm(const TorusLattice& lat) {
  double s = 0.0;
  for (auto L : lat.sides()) s += 0.25 * static_cast<double>(L) * static_cast<double>(L);
  return std::sqrt(s);
}

}  // namespace detail

/// power_law: h(z) = 1 / (1 + |z|^{d/2 + epsilon}) at the torus-minimal z.
/// grad_green: h_j(z) = (grad_j G_0)(-z) with G_0 the zero-mode-removed
///   inverse lattice Laplacian, so that sum_j h_j * grad_j phi = phi - mean(phi).
/// custom: caller-provided values.
inline Kernel build_kernel(const TorusLattice& lat, KernelFamily family, const KernelParams& params = {}) {
  Kernel k;
  k.family = family;
  const int d = lat.dim();
  const double full_radius = detail::max_min_image_norm(lat);
  switch (family) {
    case KernelFamily::power_law: {
      if (!(params.epsilon > 0.0)) throw DomainError("build_kernel: power_law needs epsilon > 0");
      k.epsilon = params.epsilon;
      const double radius = params.support_radius.value_or(full_radius);
      const double power = 0.5 * d + params.epsilon;
      ScalarField h(lat);
      for (std::size_t x = 0; x < lat.volume(); ++x) {
        const double r = lat.min_image_norm(x);
        h[x] = r <= radius ? 1.0 / (1.0 + std::pow(r, power)) : 0.0;
      }
      k.support_radius = std::min(radius, full_radius);
      k.components.push_back(std::move(h));
      break;
    }
    case KernelFamily::grad_green: {
      if (d < 3) throw DomainError("build_kernel: grad_green requires d >= 3 (G_0 does not exist for d <= 2)");
      const auto sym = laplacian_symbol(lat);
      const auto z = difference_symbols(lat);
      for (int j = 0; j < d; ++j) {
        SpectralBuffer b(lat.volume());
        for (std::size_t m = 1; m < lat.volume(); ++m)
          b[m] = std::conj(z[m * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)]) / sym[m];
        k.components.push_back(from_spectral(lat, std::move(b)));
      }
      k.support_radius = full_radius;
      break;
    }
    case KernelFamily::custom: {
      if (!params.values) throw DomainError("build_kernel: custom kernel needs values");
      require_same_lattice(lat, params.values->lattice(), "build_kernel");
      if (!all_finite(params.values->values())) throw DataError("build_kernel: non-finite kernel values");
      k.components.push_back(*params.values);
      double radius = 0.0;
      for (std::size_t x = 0; x < lat.volume(); ++x)
        if ((*params.values)[x] != 0.0) radius = std::max(radius, lat.min_image_norm(x));
      k.support_radius = radius;
      break;
    }
  }
  return k;
}

/// omega = h * base for a scalar kernel.
inline ScalarField convolve_env(const Kernel& kernel, const ScalarField& base, double* imag_residue = nullptr) {
  require_same_lattice(kernel.lattice(), base.lattice(), "convolve_env");
  if (kernel.is_vector()) throw DimensionError("convolve_env: vector kernel needs a vector base");
  return circular_convolve(kernel.components.front(), base, imag_residue);
}

/// omega = sum_j h_j * base_j for a vector kernel.
inline ScalarField convolve_env(const Kernel& kernel, const VectorField& base, double* imag_residue = nullptr) {
  require_same_lattice(kernel.lattice(), base.lattice(), "convolve_env");
  const auto& lat = base.lattice();
  if (kernel.components.size() != base.components())
    throw DimensionError("convolve_env: kernel has " + std::to_string(kernel.components.size()) +
                         " components, base has " + std::to_string(base.components()));
  SpectralBuffer acc(lat.volume());
  for (std::size_t j = 0; j < kernel.components.size(); ++j) {
    auto H = to_spectral(kernel.components[j]);
    auto W = to_spectral(base.component(static_cast<int>(j)));
    for (std::size_t m = 0; m < acc.size(); ++m) acc[m] += H[m] * W[m];
  }
  return from_spectral(lat, std::move(acc), imag_residue);
}

/// i.i.d. standard normals; value at site x depends only on (seed, stream, x).
inline ScalarField sample_white_noise(const TorusLattice& lat, std::uint64_t seed, std::uint64_t stream = 0) {
  const CounterRng rng(seed, stream);
  ScalarField w(lat);
  for (std::size_t x = 0; x < lat.volume(); ++x) w[x] = rng.normal(x);
  return w;
}

inline VectorField sample_white_noise_vector(const TorusLattice& lat, std::uint64_t seed, std::uint64_t stream = 0) {
  const CounterRng rng(seed, derive_key(stream, 0x7665630aULL));
  VectorField w(lat);
  for (std::size_t i = 0; i < w.values().size(); ++i) w.values()[i] = rng.normal(i);
  return w;
}

namespace detail {

// Colors white noise by the spectral multiplier `amp` (one real value per mode).
inline ScalarField color_noise(const TorusLattice& lat, const std::vector<double>& amp, std::uint64_t seed,
                               std::uint64_t stream, double* imag_residue) {
  auto b = to_spectral(sample_white_noise(lat, seed, stream));
  for (std::size_t m = 0; m < b.size(); ++m) b[m] *= amp[m];
  return from_spectral(lat, std::move(b), imag_residue);
}

}  // namespace detail

/// Gaussian field with covariance (mass2 + div* A grad)^{-1} on the torus.
///
/// Site-space white noise is transformed, each mode scaled by symbol^{-1/2}
/// and transformed back; the transform of real noise is conjugate-symmetric,
/// so the output is real up to rounding (reported through `imag_residue`).
inline ScalarField sample_massive_gff(const TorusLattice& lat, double mass2, const Matrix& A, std::uint64_t seed,
                                      std::uint64_t stream = 0, double* imag_residue = nullptr) {
  if (!(mass2 > 0.0)) throw DomainError("sample_massive_gff: mass^2 must be > 0");
  require_spd(A, "sample_massive_gff");
  auto sym = operator_symbol(lat, A);
  for (auto& s : sym) s = 1.0 / std::sqrt(mass2 + s);
  return detail::color_noise(lat, sym, seed, stream, imag_residue);
}

enum class MasslessRegularization {
  zero_mode,     // covariance symbol^{-1} on nonzero modes, 0 on the zero mode
  mass_1_over_L2 // covariance (1/L^2 + symbol)^{-1}, L the smallest side
};

/// Massless free field, d >= 3.
inline ScalarField sample_massless_gff(const TorusLattice& lat, std::uint64_t seed, std::uint64_t stream = 0,
                                       MasslessRegularization reg = MasslessRegularization::zero_mode,
                                       double* imag_residue = nullptr) {
  if (lat.dim() < 3)
    throw DomainError("sample_massless_gff: the massless field exists only for d >= 3 (got d = " +
                      std::to_string(lat.dim()) + ")");
  auto sym = laplacian_symbol(lat);
  if (reg == MasslessRegularization::zero_mode) {
    sym[0] = 0.0;
    for (std::size_t m = 1; m < sym.size(); ++m) sym[m] = 1.0 / std::sqrt(sym[m]);
    auto phi = detail::color_noise(lat, sym, seed, stream, imag_residue);
    remove_mean(phi);  // zero mode is exactly absent; this clears rounding
    return phi;
  }
  double Lmin = static_cast<double>(*std::min_element(lat.sides().begin(), lat.sides().end()));
  const double eta = 1.0 / (Lmin * Lmin);
  for (auto& s : sym) s = 1.0 / std::sqrt(eta + s);
  return detail::color_noise(lat, sym, seed, stream, imag_residue);
}

enum class BaseMeasure { white_noise, massive_gff, massless_gff };

inline std::string to_string(BaseMeasure b) {
  switch (b) {
    case BaseMeasure::white_noise: return "white_noise";
    case BaseMeasure::massive_gff: return "massive_gff";
    case BaseMeasure::massless_gff: return "massless_gff";
  }
  return "?";
}

/// Recipe for sampling an environment: a base measure plus an optional kernel.
struct EnvironmentSpec {
  TorusLattice lattice;
  BaseMeasure base = BaseMeasure::white_noise;
  double mass2 = 1.0;
  Matrix stiffness;  // V'' for the Gaussian bases; identity when empty
  MasslessRegularization massless_regularization = MasslessRegularization::zero_mode;
  std::optional<Kernel> kernel;
  std::uint64_t seed = 0;

  Matrix stiffness_or_identity() const {
    return stiffness.size() ? stiffness : Matrix::Identity(lattice.dim(), lattice.dim());
  }

  void validate() const {
    if (lattice.volume() == 0) throw ConfigError("EnvironmentSpec: empty lattice");
    if (base == BaseMeasure::massive_gff) {
      if (!(mass2 > 0.0)) throw DomainError("EnvironmentSpec: massive_gff requires mass^2 > 0");
      require_spd(stiffness_or_identity(), "EnvironmentSpec");
    }
    if (base == BaseMeasure::massless_gff && lattice.dim() < 3)
      throw DomainError("EnvironmentSpec: massless_gff requires d >= 3");
    if (kernel) {
      require_same_lattice(lattice, kernel->lattice(), "EnvironmentSpec");
      if (kernel->is_vector() && base == BaseMeasure::massless_gff)
        throw ConfigError("EnvironmentSpec: grad_green pairs with white_noise or massive_gff bases");
    }
  }
};

/// Base field of replica `replica`.
inline ScalarField sample_base(const EnvironmentSpec& spec, std::uint64_t replica, double* imag_residue = nullptr) {
  switch (spec.base) {
    case BaseMeasure::white_noise: return sample_white_noise(spec.lattice, spec.seed, replica);
    case BaseMeasure::massive_gff:
      return sample_massive_gff(spec.lattice, spec.mass2, spec.stiffness_or_identity(), spec.seed, replica,
                                imag_residue);
    case BaseMeasure::massless_gff:
      return sample_massless_gff(spec.lattice, spec.seed, replica, spec.massless_regularization, imag_residue);
  }
  return {};
}

/// Environment omega of replica `replica`: the base field, convolved with the
/// kernel when one is present. A grad_green kernel contracts against vector
/// white noise (white_noise base) or against grad phi (massive_gff base).
inline ScalarField sample_environment(const EnvironmentSpec& spec, std::uint64_t replica,
                                      double* imag_residue = nullptr) {
  if (!spec.kernel) return sample_base(spec, replica, imag_residue);
  if (spec.kernel->is_vector()) {
    if (spec.base == BaseMeasure::white_noise)
      return convolve_env(*spec.kernel, sample_white_noise_vector(spec.lattice, spec.seed, replica), imag_residue);
    return convolve_env(*spec.kernel, gradient(sample_base(spec, replica)), imag_residue);
  }
  return convolve_env(*spec.kernel, sample_base(spec, replica), imag_residue);
}

/// Radially binned two-point function <omega(x) omega(0)>.
struct CorrelationProfile {
  std::vector<double> radii;    // mean |x| of the sites in each bin
  std::vector<double> means;
  std::vector<double> stderrs;  // replica-to-replica standard error
  std::vector<std::size_t> counts;  // sites per bin
  std::size_t replicas = 0;
  /// Per-site estimate (translation-averaged), indexed like the lattice.
  std::vector<double> site_means;
  std::vector<double> site_stderrs;

  std::vector<FitPoint> fit_points() const {
    std::vector<FitPoint> p;
    for (std::size_t b = 0; b < radii.size(); ++b) p.push_back({radii[b], means[b], stderrs[b]});
    return p;
  }
};

/// Integer radial bins: bin b holds the sites with round(|x|) == b.
struct RadialBins {
  std::vector<std::size_t> bin_of_site;
  std::vector<double> radius;
  std::vector<std::size_t> count;

  explicit RadialBins(const TorusLattice& lat) : bin_of_site(lat.volume()) {
    std::size_t nb = 0;
    for (std::size_t x = 0; x < lat.volume(); ++x) {
      const auto b = static_cast<std::size_t>(std::lround(lat.min_image_norm(x)));
      bin_of_site[x] = b;
      nb = std::max(nb, b + 1);
    }
    radius.assign(nb, 0.0);
    count.assign(nb, 0);
    for (std::size_t x = 0; x < lat.volume(); ++x) {
      radius[bin_of_site[x]] += lat.min_image_norm(x);
      ++count[bin_of_site[x]];
    }
    for (std::size_t b = 0; b < nb; ++b)
      if (count[b]) radius[b] /= static_cast<double>(count[b]);
  }

  std::vector<double> average(std::span<const double> site_values) const {
    std::vector<double> s(radius.size(), 0.0);
    for (std::size_t x = 0; x < site_values.size(); ++x) s[bin_of_site[x]] += site_values[x];
    for (std::size_t b = 0; b < s.size(); ++b)
      if (count[b]) s[b] /= static_cast<double>(count[b]);
    return s;
  }
};

/// Empirical circular autocorrelation (1/V) sum_y omega(y) omega(y + x).
inline std::vector<double> circular_autocorrelation(const ScalarField& omega) {
  auto b = to_spectral(omega);
  for (std::size_t m = 0; m < b.size(); ++m) b[m] = std::norm(b[m]);
  auto c = from_spectral(omega.lattice(), std::move(b));
  const double inv = 1.0 / static_cast<double>(omega.size());
  std::vector<double> out(c.size());
  for (std::size_t x = 0; x < c.size(); ++x) out[x] = c[x] * inv;
  return out;
}

/// Translation-averaged two-point function over `replicas` independent
/// environments, with replica-to-replica error bars.
inline CorrelationProfile estimate_correlation(const EnvironmentSpec& spec, std::size_t replicas, int threads = 1) {
  if (replicas < 2) throw DomainError("estimate_correlation: need at least 2 replicas for error bars");
  spec.validate();
  const auto& lat = spec.lattice;
  const RadialBins bins(lat);
  std::vector<Accumulator> per_bin(bins.radius.size());
  ArrayAccumulator per_site(lat.volume());
  ordered_parallel(
      replicas, threads, [&](std::size_t r) { return circular_autocorrelation(sample_environment(spec, r)); },
      [&](std::size_t, std::vector<double> c) {
        const auto b = bins.average(c);
        for (std::size_t i = 0; i < b.size(); ++i)
          if (bins.count[i]) per_bin[i].add(b[i]);
        per_site.add(c);
      });
  CorrelationProfile prof;
  prof.replicas = replicas;
  for (std::size_t i = 0; i < per_bin.size(); ++i) {
    if (!bins.count[i]) continue;
    prof.radii.push_back(bins.radius[i]);
    prof.means.push_back(per_bin[i].mean());
    prof.stderrs.push_back(per_bin[i].stderr_mean());
    prof.counts.push_back(bins.count[i]);
  }
  prof.site_means.assign(per_site.means().begin(), per_site.means().end());
  prof.site_stderrs = per_site.stderrs();
  return prof;
}

}  // namespace rhl
