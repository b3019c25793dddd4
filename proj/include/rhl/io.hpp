#pragma once

// Field dumps ("RHL1") and CSV / JSON / two-column exports.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "rhl/coefficient_field.hpp"
#include "rhl/errors.hpp"
#include "rhl/fields.hpp"
#include "rhl/greens.hpp"
#include "rhl/homogenize.hpp"
#include "rhl/lattice.hpp"
#include "rhl/solver.hpp"
#include "rhl/stats.hpp"

namespace rhl {

using json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "rhl-1.0.0";

/// Raw contents of an RHL1 dump.
struct FieldDump {
  std::vector<std::size_t> sides;
  std::uint32_t components = 1;
  std::vector<double> values;  // site-major, components contiguous

  TorusLattice lattice() const { return TorusLattice(sides); }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("RHL1: truncated header");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline std::ofstream open_out(const std::filesystem::path& path, bool binary = false) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  return os;
}

}  // namespace detail

inline void write_rhl1(const std::filesystem::path& path, const TorusLattice& lat, std::uint32_t components,
                       std::span<const double> values) {
  if (values.size() != lat.volume() * components) throw DimensionError("write_rhl1: value count mismatch");
  auto os = detail::open_out(path, true);
  os.write("RHL1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(lat.dim()));
  for (auto L : lat.sides()) detail::put_u32(os, static_cast<std::uint32_t>(L));
  detail::put_u32(os, components);
  for (double v : values) detail::put_f64(os, v);
  if (!os) throw DataError("write_rhl1: write failed for " + path.string());
}

inline FieldDump read_rhl1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "RHL1") throw DataError("RHL1: bad magic in " + path.string());
  FieldDump f;
  const auto d = detail::get_u32(is);
  if (d == 0 || d > 16) throw DataError("RHL1: implausible dimension");
  std::size_t volume = 1;
  for (std::uint32_t i = 0; i < d; ++i) {
    f.sides.push_back(detail::get_u32(is));
    volume *= f.sides.back();
  }
  f.components = detail::get_u32(is);
  f.values.resize(volume * f.components);
  std::vector<unsigned char> buf(f.values.size() * 8);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw DataError("RHL1: truncated payload in " + path.string());
  for (std::size_t k = 0; k < f.values.size(); ++k) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[k * 8 + static_cast<std::size_t>(i)]) << (8 * i);
    f.values[k] = std::bit_cast<double>(v);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("RHL1: trailing bytes in " + path.string());
  return f;
}

inline void save_field(const std::filesystem::path& path, const ScalarField& u) {
  write_rhl1(path, u.lattice(), 1, u.values());
}

inline void save_field(const std::filesystem::path& path, const VectorField& v) {
  write_rhl1(path, v.lattice(), static_cast<std::uint32_t>(v.lattice().dim()), v.values());
}

inline void save_field(const std::filesystem::path& path, const CoefficientField& a) {
  write_rhl1(path, a.lattice(), static_cast<std::uint32_t>(packed_size(a.dim())), a.packed());
}

inline ScalarField load_scalar_field(const std::filesystem::path& path) {
  auto f = read_rhl1(path);
  if (f.components != 1) throw DimensionError("load_scalar_field: dump has " + std::to_string(f.components) + " components");
  ScalarField u(f.lattice());
  std::copy(f.values.begin(), f.values.end(), u.values().begin());
  return u;
}

inline VectorField load_vector_field(const std::filesystem::path& path) {
  auto f = read_rhl1(path);
  if (f.components != f.sides.size()) throw DimensionError("load_vector_field: component count != d");
  VectorField v(f.lattice());
  std::copy(f.values.begin(), f.values.end(), v.values().begin());
  return v;
}

/// Reads a packed coefficient dump; the certified bounds are the extreme site eigenvalues.
inline CoefficientField load_coefficients(const std::filesystem::path& path) {
  auto f = read_rhl1(path);
  const int d = static_cast<int>(f.sides.size());
  if (f.components != packed_size(d)) throw DimensionError("load_coefficients: component count != d(d+1)/2");
  const auto lat = f.lattice();
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  std::vector<Matrix> site(lat.volume(), Matrix(d, d));
  for (std::size_t x = 0; x < lat.volume(); ++x) {
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j) site[x](i, j) = site[x](j, i) = f.values[x * f.components + packed_offset(d, i, j)];
    const auto b = symmetric_bounds(site[x]);
    lo = std::min(lo, b.min);
    hi = std::max(hi, b.max);
  }
  CoefficientField a(lat, lo, hi);
  for (std::size_t x = 0; x < lat.volume(); ++x) a.set(x, site[x]);
  return a;
}

// ---------------------------------------------------------------- text output

/// Shortest round-trip representation.
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  /// `preamble` lines are written first, each prefixed with "# ".
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header,
            const std::vector<std::string>& preamble = {})
      : os_(detail::open_out(path)), columns_(header.size()) {
    for (const auto& line : preamble) os_ << "# " << line << '\n';
    for (std::size_t i = 0; i < header.size(); ++i) os_ << (i ? "," : "") << header[i];
    os_ << '\n';
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_) throw DimensionError("CsvWriter: wrong number of cells");
    for (std::size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
    os_ << '\n';
  }

  void row(const std::vector<double>& cells) {
    std::vector<std::string> s;
    for (double v : cells) s.push_back(fmt(v));
    row(s);
  }

 private:
  std::ofstream os_;
  std::size_t columns_;
};

/// gnuplot-friendly two-column file with a comment header.
inline void write_dat(const std::filesystem::path& path, const std::vector<std::string>& comments,
                      std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("write_dat: column lengths differ");
  auto os = detail::open_out(path);
  for (const auto& line : comments) os << "# " << line << '\n';
  for (std::size_t i = 0; i < x.size(); ++i) os << fmt(x[i]) << ' ' << fmt(y[i]) << '\n';
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  auto os = detail::open_out(path);
  os << j.dump(2) << '\n';
}

inline json matrix_json(const Matrix& M) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < M.cols(); ++j) r.push_back(M(i, j));
    rows.push_back(r);
  }
  return rows;
}

inline json to_json(const SolveReport& r) {
  return {{"method", r.method}, {"iterations", r.iterations}, {"residual", r.relative_residual}, {"tolerance", r.tolerance}};
}

inline json to_json(const RichardsonTrace& t) {
  return {{"method", "richardson"},
          {"iterations", t.iterations},
          {"tolerance", t.tolerance},
          {"contraction_bound", t.contraction_bound},
          {"grad_norms", t.grad_norms},
          {"ratios", t.ratios}};
}

inline json to_json(const HomogenizedEstimate& e) {
  return {{"matrix", matrix_json(e.matrix)},
          {"stderr", matrix_json(e.stderr)},
          {"energy_matrix", matrix_json(e.energy)},
          {"skew", matrix_json(e.skew)},
          {"eta", e.eta},
          {"L", e.sides},
          {"replicas", e.replicas},
          {"seed", e.seed}};
}

inline json to_json(const RateFit& f) {
  return {{"exponent", f.exponent},
          {"ci_low", f.ci_low},
          {"ci_high", f.ci_high},
          {"window", {f.r_min, f.r_max}},
          {"n_points", f.n_points},
          {"n_excluded", f.n_excluded},
          {"exponent_stderr", f.exponent_stderr},
          {"prefactor", f.prefactor},
          {"residual_norm", f.residual_norm},
          {"offset", f.offset},
          {"decay_rate", f.decay_rate}};
}

inline void write_correlation_csv(const std::filesystem::path& path, const CorrelationProfile& p,
                                  const std::vector<std::string>& preamble = {}) {
  CsvWriter w(path, {"r", "mean", "stderr", "count"}, preamble);
  for (std::size_t i = 0; i < p.radii.size(); ++i)
    w.row({fmt(p.radii[i]), fmt(p.means[i]), fmt(p.stderrs[i]), std::to_string(p.counts[i])});
}

/// Site table over the stored window: offsets x0..x{d-1}, mean, stderr.
inline void write_green_csv(const std::filesystem::path& path, const GreenEstimate& g,
                            const std::vector<std::string>& preamble = {}) {
  const auto& lat = g.lattice;
  std::vector<std::string> header;
  for (int i = 0; i < lat.dim(); ++i) header.push_back("x" + std::to_string(i));
  header.push_back("mean");
  header.push_back("stderr");
  CsvWriter w(path, header, preamble);
  for (std::size_t site : g.window_sites) {
    std::vector<std::string> row;
    for (long c : lat.min_image(site)) row.push_back(std::to_string(c));
    row.push_back(fmt(g.mean[site]));
    row.push_back(fmt(g.stderr[site]));
    w.row(row);
  }
}

inline void write_difference_csv(const std::filesystem::path& path, const DifferenceTable& t,
                                 const std::vector<std::string>& preamble = {}) {
  CsvWriter w(path, {"r", "count", "diff", "diff_stderr", "grad_diff", "grad_diff_stderr", "hess_diff",
                     "hess_diff_stderr"}, preamble);
  for (std::size_t i = 0; i < t.radii.size(); ++i)
    w.row({fmt(t.radii[i]), std::to_string(t.counts[i]), fmt(t.values[0][i]), fmt(t.stderrs[0][i]),
           fmt(t.values[1][i]), fmt(t.stderrs[1][i]), fmt(t.values[2][i]), fmt(t.stderrs[2][i])});
}

}  // namespace rhl
