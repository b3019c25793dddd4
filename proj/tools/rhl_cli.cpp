// rhl: command-line driver for the experiments.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>

#include "CLI11.hpp"

#include "rhl/experiments.hpp"

using namespace rhl;

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, no_convergence = 3, degenerate_fit = 4 };

std::filesystem::path out_dir(const ExperimentConfig& c) { return c.out; }

int sample_field(const ExperimentConfig& c) {
  const auto lat = c.lattice();
  const auto spec = make_environment(c, lat, c.seed);
  double imag = 0.0;
  const auto omega = sample_environment(spec, c.replica, &imag);
  const auto a = evaluate_map(make_map(c), omega);
  save_field(out_dir(c) / "omega.rhl1", omega);
  save_field(out_dir(c) / "coefficients.rhl1", a);
  const auto [lo, hi] = std::minmax_element(omega.values().begin(), omega.values().end());
  Accumulator acc;
  for (double v : omega.values()) acc.add(v);
  json j = metadata(c);
  j["omega"] = {{"mean", acc.mean()}, {"variance", acc.variance()}, {"min", *lo}, {"max", *hi}, {"imag_residue", imag}};
  j["coefficients"] = {{"lambda", a.lambda()}, {"Lambda", a.Lambda()}, {"contrast", contrast_ratio(a)}};
  j["files"] = {"omega.rhl1", "coefficients.rhl1"};
  write_json(out_dir(c) / "sample_field.json", j);
  std::printf("omega mean %.6g variance %.6g, imag residue %.2e\n", acc.mean(), acc.variance(), imag);
  return ok;
}

int green_const(const ExperimentConfig& c) {
  const auto lat = c.lattice();
  const int d = c.dim;
  Matrix A = Matrix::Zero(d, d);
  for (int i = 0; i < d; ++i) A(i, i) = c.A[static_cast<std::size_t>(i)];
  const double eta = c.eta0();
  const auto G = lattice_green(eta, A, lat);
  double mass = 0.0;
  for (double v : G.values()) mass += v;
  mass *= eta;

  std::vector<double> t, g;
  CsvWriter w(out_dir(c) / "green_const.csv", {"x", "lattice", "continuum"}, preamble(c));
  std::vector<long> coord(static_cast<std::size_t>(d), 0);
  std::vector<double> xc(static_cast<std::size_t>(d), 0.0);
  for (long s = 1; s <= static_cast<long>(lat.side(0) / 2); ++s) {
    coord[0] = s;
    xc[0] = static_cast<double>(s);
    const double gl = G[lat.index(coord)];
    w.row({fmt(static_cast<double>(s)), fmt(gl), fmt(hom_green_continuum(A, eta, xc))});
    t.push_back(static_cast<double>(s));
    g.push_back(gl);
  }
  auto comments = preamble(c);
  comments.push_back("x along axis 0  G");
  write_dat(out_dir(c) / "green_const.dat", comments, t, g);

  const RadialBins bins(lat);
  const auto prof = bins.average(G.values());
  std::vector<FitPoint> pts;
  for (std::size_t b = 0; b < prof.size(); ++b)
    if (bins.count[b]) pts.push_back({bins.radius[b], prof[b], 0.0});
  json j = metadata(c);
  j["mass"] = mass;
  j["origin"] = G[0];
  const FitWindow win = c.window.r_max > 0.0 ? c.window : FitWindow{2.0, static_cast<double>(lat.side(0)) / 4.0};
  const auto fit = loglog_fit(pts, win);
  j["fit"] = to_json(fit);
  write_json(out_dir(c) / "green_const.json", j);
  std::printf("eta sum G = %.15f, radial exponent %.4f\n", mass, fit.exponent);
  return ok;
}

int corrector(const ExperimentConfig& c) {
  const auto lat = c.lattice();
  const auto a = evaluate_map(make_map(c), sample_environment(make_environment(c, lat, c.seed), c.replica));
  const double eta = c.eta0();
  const int k = c.direction;
  json j = metadata(c);
  ScalarField chi;
  if (c.method == "richardson") {
    auto [u, tr] = solve_richardson(eta, a, Vector::Unit(c.dim, k), c.tol);
    chi = std::move(u);
    j["report"] = to_json(tr);
    std::vector<double> r;
    for (std::size_t i = 0; i < tr.ratios.size(); ++i) r.push_back(static_cast<double>(i + 3));
    auto comments = preamble(c);
    comments.push_back("term r  |grad F_r| / |grad F_{r-1}|");
    write_dat(out_dir(c) / "richardson_ratios.dat", comments, r, tr.ratios);
    double worst = 0.0;
    for (double q : tr.ratios) worst = std::max(worst, q);
    j["max_ratio"] = worst;
    std::printf("richardson: %d terms, max ratio %.6f (bound %.6f)\n", tr.iterations, worst, tr.contraction_bound);
  } else {
    ScalarField rhs = divergence(coefficient_column(a, k));
    for (auto& v : rhs.values()) v = -v;
    CgOptions cg;
    cg.tol = c.tol;
    cg.max_iter = 20000;
    auto [u, rep] = solve_cg(eta, a, rhs, cg);
    remove_mean(u);
    chi = std::move(u);
    j["report"] = to_json(rep);
    std::printf("cg: %d iterations, residual %.3e\n", rep.iterations, rep.relative_residual);
  }
  save_field(out_dir(c) / "corrector.rhl1", chi);
  CorrectorOptions co;
  co.method = c.method == "richardson" ? CorrectorMethod::richardson : CorrectorMethod::cg;
  co.tol = c.tol;
  j["a_hom_this_field"] = to_json(estimate_ahom_field(a, eta, co));
  write_json(out_dir(c) / "corrector.json", j);
  return ok;
}

int ahom(const ExperimentConfig& c) {
  const auto lat = c.lattice();
  const auto map = make_map(c);
  AhomOptions opt;
  opt.threads = c.threads;
  opt.control_variate = c.replicas >= 3;
  std::vector<HomogenizedEstimate> ests;
  json list = json::array();
  for (std::size_t i = 0; i < c.eta.size(); ++i) {
    ests.push_back(estimate_ahom(make_environment(c, lat, derive_key(c.seed, i)), map, c.eta[i], c.replicas, opt));
    list.push_back(to_json(ests.back()));
    std::printf("eta %.4g  a_hom(0,0) %.6f +- %.6f\n", c.eta[i], ests.back().matrix(0, 0), ests.back().stderr(0, 0));
  }
  json j = metadata(c);
  j["estimates"] = list;
  if (ests.size() >= 3) {
    const auto x = extrapolate_eta(ests);
    j["extrapolated"] = to_json(x);
    std::printf("extrapolated a_hom(0,0) %.6f +- %.6f\n", x.matrix(0, 0), x.stderr(0, 0));
  }
  write_json(out_dir(c) / "ahom.json", j);
  return ok;
}

int avg_green(const ExperimentConfig& c) {
  const auto lat = c.lattice();
  GreenOptions go;
  go.threads = c.threads;
  go.cg.tol = 1e-9;
  go.poles = c.poles;
  const auto est = averaged_green(make_environment(c, lat, c.seed), make_map(c), c.eta0(), c.replicas, go);
  write_green_csv(out_dir(c) / "green_mean.csv", est, preamble(c));
  std::vector<double> t, g;
  std::vector<long> coord(static_cast<std::size_t>(c.dim), 0);
  for (long s = 0; s <= static_cast<long>(lat.side(0) / 2); ++s) {
    coord[0] = s;
    t.push_back(static_cast<double>(s));
    g.push_back(est.mean[lat.index(coord)]);
  }
  auto comments = preamble(c);
  comments.push_back("x along axis 0  mean G");
  write_dat(out_dir(c) / "avg_green_axis.dat", comments, t, g);
  json j = metadata(c);
  j["replicas"] = est.replicas;
  j["skipped"] = est.skipped;
  j["mass"] = est.mass();
  j["window"] = est.window;
  write_json(out_dir(c) / "avg_green.json", j);
  std::printf("averaged G over %zu replicas (%zu skipped), eta sum G = %.10f\n", est.replicas, est.skipped, est.mass());
  return ok;
}

int corr_decay(const ExperimentConfig& c) {
  const auto r = run_corr_experiment(c);
  write_outputs(c, r);
  if (!r.power_error.empty()) {
    std::printf("power-law fit failed: %s (exponential rate %.4f)\n", r.power_error.c_str(), r.exp_rate);
    return r.exponential ? ok : degenerate_fit;
  }
  std::printf("exponent %.4f [%.4f, %.4f]%s; exponential residual %.3g vs power %.3g -> %s\n", r.power.exponent,
              r.power.ci_low, r.power.ci_high, r.offset_fit ? " (offset fit)" : "", r.exp_residual,
              r.power.residual_norm, r.exponential ? "exponential" : "power law");
  return ok;
}

int green_rates(const ExperimentConfig& c) {
  const auto r = run_green_experiment(c);
  write_outputs(c, r);
  const char* names[3] = {"diff", "grad diff", "hess diff"};
  bool degenerate = false;
  for (int o = 0; o < 3; ++o) {
    if (!r.fit_ok(o)) {
      std::printf("%-9s fit failed: %s\n", names[o], r.fit_errors[static_cast<std::size_t>(o)].c_str());
      degenerate = true;
      continue;
    }
    const auto& f = r.fits[static_cast<std::size_t>(o)];
    std::printf("%-9s exponent %.3f [%.3f, %.3f] over %d points\n", names[o], f.exponent, f.ci_low, f.ci_high,
                f.n_points);
  }
  std::printf("a_hom(0,0) %.6f +- %.6f; gaps %.3f %.3f; steeper than -(d-2): %s\n", r.a_hom.matrix(0, 0),
              r.a_hom.stderr(0, 0), r.hierarchy.gap_first, r.hierarchy.gap_second,
              r.steeper_than_hom ? "yes" : "no");
  return degenerate ? degenerate_fit : ok;
}

int homog_rate(const ExperimentConfig& c) {
  const auto r = run_rate_experiment(c);
  write_outputs(c, r);
  for (const auto& row : r.rows)
    std::printf("eps %.5f L %zu: mse %.4e +- %.1e, control %.2e, interpolation %.1e\n", row.eps, row.side, row.mse,
                row.mse_stderr, row.control_error, row.interpolation_error);
  std::printf("alpha %.3f [%.3f, %.3f], monotone %s\n", r.alpha.exponent, r.alpha.ci_low, r.alpha.ci_high,
              r.monotone ? "yes" : "no");
  return ok;
}

int poincare(const ExperimentConfig& c) {
  const auto r = run_poincare_check(c);
  write_outputs(c, r);
  for (const auto& f : r.checks) {
    std::printf("%-10s Var %.5g +- %.2g  bound %.5g +- %.2g  %s", f.name.c_str(), f.variance, f.variance_stderr,
                f.bound, f.bound_stderr, f.pass ? "pass" : "FAIL");
    if (f.exact_variance) std::printf("  exact %.5g %s", *f.exact_variance, f.exact_match ? "match" : "MISMATCH");
    std::printf("\n");
  }
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Random-coefficient lattice homogenization experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  struct Common {
    std::string config, out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> replicas;
    std::optional<int> threads;
  };
  std::map<std::string, Common> common;
  const std::map<std::string, std::string> help{
      {"sample-field", "draw one environment and its coefficient field (RHL1 dumps)"},
      {"corr-decay", "two-point function of the environment and its decay fit"},
      {"green-const", "constant-coefficient lattice Green's function"},
      {"corrector", "solve one corrector by CG or the Neumann series"},
      {"ahom", "Monte Carlo homogenized matrix over an eta sweep"},
      {"avg-green", "environment-averaged Green's function"},
      {"green-rates", "decay of averaged minus homogenized Green's function and its differences"},
      {"homog-rate", "homogenization error over an eps sweep"},
      {"poincare", "Monte Carlo spectral-gap check for Gaussian environments"}};
  for (const auto& name : experiment_names()) {
    auto* sub = app.add_subcommand(name, help.at(name));
    auto& o = common[name];
    sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "64-bit seed");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--replicas", o.replicas, "number of environments");
    sub->add_option("--threads", o.threads, "worker threads");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ok : config_error;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  const auto& o = common[name];
  try {
    auto cfg = defaults_for(name);
    if (!o.config.empty()) apply_json(cfg, load_json_file(o.config));
    if (o.seed) cfg.seed = *o.seed;
    if (o.replicas) cfg.replicas = *o.replicas;
    if (o.threads) cfg.threads = *o.threads;
    if (!o.out.empty()) cfg.out = o.out;
    cfg.validate();

    const auto t0 = std::chrono::steady_clock::now();
    int rc = ok;
    if (name == "sample-field") rc = sample_field(cfg);
    else if (name == "corr-decay") rc = corr_decay(cfg);
    else if (name == "green-const") rc = green_const(cfg);
    else if (name == "corrector") rc = corrector(cfg);
    else if (name == "ahom") rc = ahom(cfg);
    else if (name == "avg-green") rc = avg_green(cfg);
    else if (name == "green-rates") rc = green_rates(cfg);
    else if (name == "homog-rate") rc = homog_rate(cfg);
    else if (name == "poincare") rc = poincare(cfg);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s: wall time %.1f s, outputs in %s\n", name.c_str(), secs, cfg.out.c_str());
    return rc;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return config_error;
  } catch (const DomainError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return config_error;
  } catch (const DimensionError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return config_error;
  } catch (const ConvergenceError& e) {
    std::cerr << "no convergence: " << e.what() << '\n';
    return no_convergence;
  } catch (const FitError& e) {
    std::cerr << "degenerate fit: " << e.what() << '\n';
    return degenerate_fit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return failure;
  }
}
