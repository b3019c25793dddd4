#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include "rhl/experiments.hpp"

using namespace rhl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::path(::testing::TempDir()) / "rhl_exp" / name;
  fs::remove_all(dir);
  return dir;
}

std::map<std::string, std::string> read_dir(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::ifstream is(e.path(), std::ios::binary);
    out[e.path().filename().string()] = {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  }
  return out;
}

ExperimentConfig small(const std::string& name, const json& j) {
  auto c = defaults_for(name);
  apply_json(c, j);
  c.validate();
  return c;
}

template <class Run>
void expect_thread_invariant(ExperimentConfig c, const std::string& tag, Run run) {
  std::map<std::string, std::string> files[2];
  int k = 0;
  for (int t : {1, 3}) {
    c.threads = t;
    c.out = scratch(tag + std::to_string(t)).string();
    write_outputs(c, run(c));
    files[k++] = read_dir(c.out);
  }
  ASSERT_FALSE(files[0].empty());
  EXPECT_EQ(files[0], files[1]) << tag;
}

}  // namespace

TEST(Config, DefaultsValidate) {
  for (const auto& name : experiment_names()) EXPECT_NO_THROW(defaults_for(name).validate()) << name;
  EXPECT_THROW(defaults_for("nope"), ConfigError);
}

TEST(Config, JsonOverrides) {
  auto c = small("corr-decay", {{"L", 16}, {"dim", 2}, {"eta", {1.0}}, {"environment", {{"base", "white_noise"}}},
                                {"map", {{"Lambda", 3.0}}}, {"fit_window", {1, 4}}});
  EXPECT_EQ(c.sides, (std::vector<std::size_t>{16, 16}));
  EXPECT_EQ(c.env.base, "white_noise");
  EXPECT_EQ(c.Lambda, 3.0);
  EXPECT_EQ(c.window.r_max, 4.0);

  auto g = small("green-rates", {{"poles", 4}});
  EXPECT_EQ(g.poles, 4);
  EXPECT_EQ(g.echo()["poles"], 4);
  EXPECT_EQ(defaults_for("avg-green").poles, 1);

  auto r = defaults_for("homog-rate");
  apply_json(r, {{"eps", {0.5, 0.25}}, {"L", 40}});
  EXPECT_EQ(r.sides, (std::vector<std::size_t>{40, 40}));
}

TEST(Config, RejectsBadInput) {
  auto c = defaults_for("ahom");
  EXPECT_THROW(apply_json(c, {{"bogus", 1}}), ConfigError);
  EXPECT_THROW(apply_json(c, {{"environment", {{"colour", "red"}}}}), ConfigError);
  EXPECT_THROW(apply_json(c, {{"replicas", "many"}}), ConfigError);
  EXPECT_THROW(apply_json(c, {{"experiment", "poincare"}}), ConfigError);
  EXPECT_THROW(apply_json(c, {{"fit_window", {1}}}), ConfigError);
  EXPECT_THROW(apply_json(c, json::array()), ConfigError);

  auto bad = [](const std::string& name, const json& j) {
    auto x = defaults_for(name);
    apply_json(x, j);
    EXPECT_THROW(x.validate(), ConfigError) << j.dump();
  };
  bad("ahom", {{"eta", {0.01, 0.02}}});
  bad("ahom", {{"eta", -1.0}});
  bad("ahom", {{"L", 15}});
  bad("ahom", {{"replicas", 1}});
  bad("ahom", {{"map", {{"lambda", 2.0}, {"Lambda", 1.0}}}});
  bad("ahom", {{"fit_window", {2, 20}}});
  bad("corr-decay", {{"environment", {{"base", "levy"}}}});
  bad("corr-decay", {{"dim", 2}, {"environment", {{"base", "massless_gff"}, {"kernel", "none"}}}});
  bad("homog-rate", {{"eps", {0.25, 0.5}}});
  bad("homog-rate", {{"eps", {0.25}}});
  bad("poincare", {{"environment", {{"base", "white_noise"}}}});
  bad("poincare", {{"functionals", {"cubic"}}});
  bad("corrector", {{"method", "jacobi"}});
  bad("corrector", {{"direction", 3}});
  bad("green-rates", {{"poles", 9}});
}

TEST(Config, EchoLeavesOutRunPlumbing) {
  auto a = defaults_for("poincare");
  auto b = a;
  b.threads = 7;
  b.out = "elsewhere";
  EXPECT_EQ(a.echo(), b.echo());
  b.seed = 99;
  EXPECT_NE(a.echo(), b.echo());
  const auto m = metadata(a);
  EXPECT_EQ(m["version"], kVersion);
  EXPECT_EQ(m["config"]["experiment"], "poincare");
}

TEST(RateExperiment, MinimalSides) {
  EXPECT_EQ(rate_min_side(0.25, 4.0, 6.0), 32u);
  EXPECT_EQ(rate_min_side(0.125, 4.0, 6.0), 64u);
  EXPECT_EQ(rate_min_side(0.0625, 4.0, 6.0), 128u);
  EXPECT_EQ(rate_min_side(0.5, 1.0, 1.0) % 2, 0u);
}

TEST(RateExperiment, BumpSupport) {
  const std::vector<double> o{0.0, 0.0}, edge{0.6, 0.8}, out{1.0, 0.5};
  EXPECT_NEAR(bump(o), std::exp(-1.0), 1e-15);
  EXPECT_EQ(bump(edge), 0.0);
  EXPECT_EQ(bump(out), 0.0);
}

TEST(RateExperiment, ContinuumSolutionSatisfiesEquation) {
  // finite-difference residual of the spectral solution shrinks like h^2
  Matrix a(2, 2);
  a << 1.5, 0.2, 0.2, 1.0;
  const double eta = 2.0, period = 8.0;
  std::vector<double> res;
  for (std::size_t N : {64u, 128u, 256u}) {
    const auto u = continuum_hom_solution(a, eta, period, N);
    const auto& g = u.lattice();
    const double h = period / static_cast<double>(N);
    double worst = 0.0;
    std::vector<double> x(2);
    for (std::size_t s = 0; s < g.volume(); ++s) {
      auto at = [&](long di, long dj) {
        const std::vector<long> off{di, dj};
        return u[g.shift(s, off)];
      };
      const double uxx = (at(1, 0) - 2 * at(0, 0) + at(-1, 0)) / (h * h);
      const double uyy = (at(0, 1) - 2 * at(0, 0) + at(0, -1)) / (h * h);
      const double uxy = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * h * h);
      const auto c = g.min_image(s);
      x[0] = h * static_cast<double>(c[0]);
      x[1] = h * static_cast<double>(c[1]);
      const double r = eta * u[s] - (a(0, 0) * uxx + 2 * a(0, 1) * uxy + a(1, 1) * uyy) - bump(x);
      worst = std::max(worst, std::abs(r));
    }
    res.push_back(worst);
  }
  EXPECT_LT(res[2], 1e-3);
  EXPECT_GT(res[0] / res[1], 2.5);
  EXPECT_GT(res[1] / res[2], 3.5);
}

TEST(RateExperiment, ZeroContrastErrorIsDiscretizationOnly) {
  auto c = small("homog-rate", {{"dim", 2}, {"eps", {0.5, 0.25}}, {"map", {{"lambda", 2.0}, {"Lambda", 2.0}}},
                                {"replicas", 2}, {"ahom", {{"side", 8}, {"replicas", 2}}}, {"resamples", 50}});
  const auto r = run_rate_experiment(c);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.a_hom.matrix, 2.0 * Matrix::Identity(2, 2));
  for (const auto& row : r.rows) {
    EXPECT_NEAR(row.mse, row.control_error, 1e-15);
    EXPECT_EQ(row.mse_stderr, 0.0);
  }
  // squared lattice-vs-continuum error falls like eps^4
  const double ratio = r.rows[0].control_error / r.rows[1].control_error;
  EXPECT_GT(ratio, 8.0);
  EXPECT_LT(ratio, 32.0);
}

TEST(RateExperiment, RejectsSmallTorus) {
  auto c = small("homog-rate", {{"dim", 2}, {"eps", {0.5, 0.25}}, {"sides", {8, 8}},
                                {"ahom", {{"side", 8}, {"replicas", 2}}}});
  EXPECT_THROW(run_rate_experiment(c), ConfigError);
}

TEST(GreenExperiment, ZeroContrastHasNoDifference) {
  auto c = small("green-rates", {{"L", 24}, {"eta", 0.05}, {"map", {{"lambda", 1.5}, {"Lambda", 1.5}}},
                                 {"replicas", 4}, {"ahom", {{"replicas", 3}}}, {"fit_window", {2, 6}},
                                 {"resamples", 20}});
  const auto r = run_green_experiment(c);
  EXPECT_EQ(r.a_hom.matrix, 1.5 * Matrix::Identity(3, 3));
  for (std::size_t o = 0; o < 3; ++o) {
    for (double v : r.table.values[o]) EXPECT_LT(v, 1e-10);
    EXPECT_FALSE(r.fit_ok(static_cast<int>(o)));
  }
  EXPECT_NEAR(r.green.mass(), 1.0, 1e-7);
}

TEST(CorrExperiment, MassiveFieldLooksExponential) {
  auto c = small("corr-decay", {{"L", 32}, {"replicas", 40}, {"environment", {{"kernel", "none"}, {"mass2", 0.5}}},
                                {"fit_window", {1, 8}}, {"resamples", 50}});
  const auto r = run_corr_experiment(c);
  EXPECT_FALSE(r.offset_fit);
  EXPECT_TRUE(r.exponential);
  EXPECT_GT(r.exp_rate, 0.0);
  EXPECT_EQ(r.profile.replicas, 40u);
}

TEST(Poincare, SmallRunPasses) {
  auto c = small("poincare", {{"L", 8}, {"replicas", 2000}});
  const auto rep = run_poincare_check(c);
  ASSERT_EQ(rep.checks.size(), 4u);
  EXPECT_TRUE(rep.ok());
  EXPECT_EQ(rep.checks[3].variance, 0.0);
  ASSERT_TRUE(rep.checks[0].exact_variance.has_value());
}

TEST(Reproducibility, OutputsIndependentOfThreadCount) {
  expect_thread_invariant(small("corr-decay", {{"L", 32}, {"replicas", 6}, {"fit_window", {2, 8}}, {"resamples", 20}}), "corr",
                          [](const ExperimentConfig& c) { return run_corr_experiment(c); });
  expect_thread_invariant(small("poincare", {{"L", 8}, {"replicas", 50}}), "poincare",
                          [](const ExperimentConfig& c) { return run_poincare_check(c); });
  expect_thread_invariant(small("green-rates", {{"L", 24}, {"eta", 0.05}, {"replicas", 5}, {"ahom", {{"replicas", 3}}},
                                                {"fit_window", {2, 6}}, {"resamples", 20}}),
                          "green", [](const ExperimentConfig& c) { return run_green_experiment(c); });
  expect_thread_invariant(small("homog-rate", {{"dim", 2}, {"eps", {0.5, 0.25}}, {"replicas", 3},
                                               {"ahom", {{"side", 8}, {"replicas", 2}}}, {"resamples", 20}}),
                          "rate", [](const ExperimentConfig& c) { return run_rate_experiment(c); });
}
