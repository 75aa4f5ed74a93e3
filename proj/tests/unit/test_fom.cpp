#include "thermorom/fom.hpp"
#include "thermorom/io.hpp"

#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

namespace trom {
namespace {

using big = boost::multiprecision::cpp_bin_float_50;

// The same formulas evaluated in 50-digit arithmetic.
std::array<big, 4> gas_oracle(double qd, double pd, double s1d, double s2d, bool verbatim) {
  const big q = qd, p = pd, S1 = s1d, S2 = s2d;
  const big two_thirds = big(2) / 3;
  const big v1 = q, v2 = q + 2 * (1 - q);
  const big E1 = exp(two_thirds * S1) / exp(two_thirds * log(v1));
  const big E2 = exp(two_thirds * S2) / exp(two_thirds * log(v2));
  const big T1 = two_thirds * E1, T2 = two_thirds * E2;
  const big gap = 1 / T1 - 1 / T2;
  const big dS1 = 10 / T1 * gap;
  const big dS2 = verbatim ? big(-10 / T1 * gap) : big(-10 / T2 * gap);
  return {p, two_thirds * (E1 / q - E2 / (2 - q)), dS1, dS2};
}

TEST(Gas, SymmetricFixedPoint) {
  const auto d = gas_rhs({1.0, 0.4, 1.7, 1.7});
  EXPECT_EQ(d[0], 0.4);
  EXPECT_EQ(d[1], 0.0);
  EXPECT_EQ(d[2], 0.0);
  EXPECT_EQ(d[3], 0.0);
  const auto e = gas_rhs({1.0, 0.0, 2.0, 2.0});
  for (double v : e) EXPECT_EQ(v, 0.0);
}

TEST(Gas, MatchesHighPrecisionOracle) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> uq(0.05, 1.95), up(-2.0, 2.0), us(0.5, 3.5);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const GasState s{uq(rng), up(rng), us(rng), us(rng)};
    for (bool verbatim : {true, false}) {
      const auto d = gas_rhs(s, verbatim ? GasEntropyForm::verbatim : GasEntropyForm::symmetric);
      const auto ref = gas_oracle(s.q, s.p, s.S1, s.S2, verbatim);
      // max-norm relative error of the derivative vector
      double scale = 0.0, diff = 0.0;
      for (int k = 0; k < 4; ++k) {
        const double r = ref[static_cast<std::size_t>(k)].convert_to<double>();
        scale = std::max(scale, std::abs(r));
        diff = std::max(diff, std::abs(d[static_cast<std::size_t>(k)] - r));
      }
      worst = std::max(worst, diff / scale);
    }
  }
  EXPECT_LE(worst, 1e-13);
}

TEST(Gas, HandPointAgainstOracle) {
  const auto d = gas_rhs({0.5, 0.3, 1.2, 2.1});
  const auto ref = gas_oracle(0.5, 0.3, 1.2, 2.1, true);
  for (int k = 0; k < 4; ++k)
    EXPECT_NEAR(d[static_cast<std::size_t>(k)], ref[static_cast<std::size_t>(k)].convert_to<double>(),
                1e-14 * std::max(1.0, std::abs(d[static_cast<std::size_t>(k)])));
}

TEST(Gas, OutsideDomainThrows) {
  EXPECT_THROW((void)gas_rhs({0.0, 0.0, 1.0, 1.0}), std::domain_error);
  EXPECT_THROW((void)gas_rhs({2.0, 0.0, 1.0, 1.0}), std::domain_error);
  EXPECT_THROW((void)parse_gas_form("skewed"), std::invalid_argument);
}

TEST(Gas, GenerateLayoutAndTimes) {
  GasConfig cfg;
  cfg.count = 3;
  cfg.seed = 5;
  const SnapshotSet s = gas_generate(cfg);
  EXPECT_EQ(s.full_dim(), 12);
  EXPECT_EQ(s.steps(), 393);
  EXPECT_DOUBLE_EQ(s.times[392], 7.84);
  EXPECT_DOUBLE_EQ(s.dt(), 0.02);
  for (int i = 0; i < 3; ++i) {
    EXPECT_GE(s.states(0, i), 0.2);
    EXPECT_LE(s.states(0, i), 1.8);
    EXPECT_GE(s.states(0, 3 + i), -1.0);
    EXPECT_LE(s.states(0, 3 + i), 1.0);
  }
  // the p block is the derivative of the q block
  const double qdot = (s.states(101, 0) - s.states(99, 0)) / 0.04;
  EXPECT_NEAR(qdot, s.states(100, 3), 1e-3);
}

TEST(Gas, HundredContainersGiveN400) {
  GasConfig cfg;
  cfg.count = 100;
  EXPECT_EQ(gas_generate(cfg).full_dim(), 400);
}

TEST(Gas, EquilibriumStartStaysConstant) {
  GasConfig cfg;
  cfg.count = 1;
  cfg.box = {{{1.0, 1.0}, {0.0, 0.0}, {2.0, 2.0}, {2.0, 2.0}}};
  cfg.t_end = 1.0;
  const SnapshotSet s = gas_generate(cfg);
  for (Eigen::Index k = 0; k < s.steps(); ++k) EXPECT_EQ(s.states.row(k), s.states.row(0));
}

TEST(Gas, SymmetricFormConservesEnergy) {
  GasConfig cfg;
  cfg.count = 5;
  cfg.form = GasEntropyForm::symmetric;
  cfg.seed = 17;
  const SnapshotSet s = gas_generate(cfg);
  double drift = 0.0;
  for (int i = 0; i < 5; ++i) {
    auto energy = [&](Eigen::Index k) {
      return gas_total_energy({s.states(k, i), s.states(k, 5 + i), s.states(k, 10 + i), s.states(k, 15 + i)});
    };
    for (Eigen::Index k = 0; k < s.steps(); ++k) drift = std::max(drift, std::abs(energy(k) - energy(0)));
  }
  EXPECT_LE(drift, 1e-6);
}

TEST(Gas, VerbatimFormChangesEnergy) {
  GasConfig cfg;
  cfg.count = 5;
  cfg.seed = 17;
  const SnapshotSet s = gas_generate(cfg);
  double drift = 0.0;
  for (int i = 0; i < 5; ++i) {
    auto energy = [&](Eigen::Index k) {
      return gas_total_energy({s.states(k, i), s.states(k, 5 + i), s.states(k, 10 + i), s.states(k, 15 + i)});
    };
    drift = std::max(drift, std::abs(energy(s.steps() - 1) - energy(0)));
  }
  EXPECT_GT(drift, 1e-3);
}

TEST(Gas, GenerationIsDeterministic) {
  GasConfig cfg;
  cfg.count = 4;
  cfg.seed = 3;
  EXPECT_EQ(gas_generate(cfg).states, gas_generate(cfg).states);
}

PdeGrid small_grid(int nx, int nt, double t_end = 2.0) {
  PdeGrid g;
  g.nx = nx;
  g.nt = nt;
  g.t_end = t_end;
  return g;
}

TEST(Burgers, ConstantStateIsExact) {
  const PdeGrid g = small_grid(101, 51);
  const Matrix u = burgers_solve_profile(Vector::Constant(100, 0.6), g);
  EXPECT_LE((u.array() - 0.6).abs().maxCoeff(), 1e-12);
}

TEST(Burgers, ZeroAmplitudeIsZero) {
  const SnapshotSet s = burgers_solve({0.0, 1.0}, small_grid(101, 51));
  EXPECT_EQ(s.states.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Burgers, LayoutAndInitialCondition) {
  const SnapshotSet s = burgers_solve({0.75, 1.0}, small_grid(201, 201));
  EXPECT_EQ(s.full_dim(), 201);
  EXPECT_EQ(s.steps(), 201);
  EXPECT_EQ(s.mu[0], 0.75);
  EXPECT_EQ(s.mu[1], 1.0);
  EXPECT_DOUBLE_EQ(s.grid.dx, 6.0 / 200);
  for (Eigen::Index k = 0; k < s.steps(); ++k) EXPECT_EQ(s.states(k, 0), s.states(k, 200));
  EXPECT_NEAR(s.states(0, 100), 0.75, 1e-15);
  EXPECT_NEAR(s.states(0, 50), 0.75 * std::exp(-1.5 * 1.5 / 2.0), 1e-15);
}

TEST(Burgers, SolverResidualAtNewtonTolerance) {
  const PdeGrid g = small_grid(201, 101);
  const SnapshotSet s = burgers_solve({0.8, 0.9}, g);
  double worst = 0.0;
  for (Eigen::Index k = 1; k < s.steps(); ++k) {
    const Vector r = burgers_residual(s.states.row(k).head(200).transpose(), s.states.row(k - 1).head(200).transpose(),
                                      g.dt(), g.dx());
    worst = std::max(worst, r.cwiseAbs().maxCoeff());
  }
  EXPECT_LE(worst, 1e-8);
}

TEST(Burgers, FirstOrderUnderRefinement) {
  // same ratio dt/dx on each grid; errors measured against the finest solve at t = 1
  auto solve = [](int cells) { return burgers_solve({0.75, 1.0}, small_grid(cells + 1, cells / 2 + 1, 1.0)); };
  const SnapshotSet a = solve(200), b = solve(400), c = solve(1600);
  auto err = [&](const SnapshotSet& s, int stride) {
    const Eigen::Index last = s.steps() - 1, lastc = c.steps() - 1;
    double e = 0.0;
    for (Eigen::Index j = 0; j < s.full_dim(); ++j) e = std::max(e, std::abs(s.states(last, j) - c.states(lastc, j * stride)));
    return e;
  };
  const double ea = err(a, 8), eb = err(b, 4);
  // for a first-order method (h - h/8) / (h/2 - h/8) = 7/3
  const double ratio = ea / eb;
  EXPECT_GT(ratio, 1.8);
  EXPECT_LT(ratio, 3.0);
}

TEST(Heat, ConstantStateIsExact) {
  const Matrix u = heat_solve_profile(Vector::Constant(80, -0.3), small_grid(81, 41));
  EXPECT_LE((u.array() + 0.3).abs().maxCoeff(), 1e-13);
}

TEST(Heat, MassConservedAndMaxNormDecays) {
  const PdeGrid g = small_grid(201, 201);
  const SnapshotSet s = heat_solve({0.75, 0.95}, g);
  const Matrix u = s.states.leftCols(200);
  const double m0 = u.row(0).sum();
  double prev = u.row(0).cwiseAbs().maxCoeff();
  for (Eigen::Index k = 1; k < u.rows(); ++k) {
    EXPECT_NEAR(u.row(k).sum(), m0, 1e-12 * std::abs(m0));
    const double mx = u.row(k).cwiseAbs().maxCoeff();
    EXPECT_LT(mx, prev);
    prev = mx;
  }
  double worst = 0.0;
  for (Eigen::Index k = 1; k < u.rows(); ++k)
    worst = std::max(worst, heat_residual(u.row(k).transpose(), u.row(k - 1).transpose(), g.dt(), g.dx())
                                .cwiseAbs()
                                .maxCoeff());
  EXPECT_LE(worst, 1e-9);
}

TEST(CyclicTridiagonal, MatchesDenseSolve) {
  const int m = 7;
  Vector lo = Vector::Random(m), up = Vector::Random(m), di = Vector::Random(m).array() + 4.0, rhs = Vector::Random(m);
  Matrix A = Matrix::Zero(m, m);
  for (int i = 0; i < m; ++i) {
    A(i, (i + m - 1) % m) += lo[i];
    A(i, i) += di[i];
    A(i, (i + 1) % m) += up[i];
  }
  const Vector x = solve_cyclic_tridiagonal(lo, di, up, rhs);
  EXPECT_LE((A * x - rhs).cwiseAbs().maxCoeff(), 1e-13);
}

SnapshotSet signal(int steps, double dt, const std::function<double(double, int)>& f, int dims = 2) {
  SnapshotSet s;
  s.times.resize(steps);
  s.states.resize(steps, dims);
  for (int k = 0; k < steps; ++k) {
    s.times[k] = k * dt;
    for (int j = 0; j < dims; ++j) s.states(k, j) = f(k * dt, j);
  }
  return s;
}

TEST(FdDerivatives, LinearAndConstantSignals) {
  const SnapshotSet lin = signal(9, 0.5, [](double t, int j) { return (j + 1.0) * t / 0.5; });
  for (FdScheme sc : {FdScheme::central, FdScheme::backward}) {
    const SnapshotSet d = fd_derivatives(lin, sc);
    for (Eigen::Index k = 0; k < 9; ++k) {
      EXPECT_NEAR(d.derivatives(k, 0), 2.0, 1e-13);
      EXPECT_NEAR(d.derivatives(k, 1), 4.0, 1e-13);
    }
  }
  const SnapshotSet c = fd_derivatives(signal(5, 0.1, [](double, int j) { return j - 3.0; }));
  EXPECT_EQ(c.derivatives.cwiseAbs().maxCoeff(), 0.0);
}

TEST(FdDerivatives, SineInteriorAccuracyAndOrders) {
  auto errors = [](double dt) {
    const int steps = static_cast<int>(std::lround(1.0 / dt)) + 1;
    const SnapshotSet d = fd_derivatives(signal(steps, dt, [](double t, int) { return std::sin(t + 0.5); }, 1));
    double interior = 0.0;
    for (int k = 1; k < steps - 1; ++k)
      interior = std::max(interior, std::abs(d.derivatives(k, 0) - std::cos(k * dt + 0.5)));
    const double end = std::abs(d.derivatives(0, 0) - std::cos(0.5));
    return std::pair{interior, end};
  };
  const auto [i1, e1] = errors(0.01);
  const auto [i2, e2] = errors(0.005);
  EXPECT_LE(i1, 2e-5);
  EXPECT_NEAR(std::log2(i1 / i2), 2.0, 0.1);
  EXPECT_NEAR(std::log2(e1 / e2), 1.0, 0.1);
  EXPECT_THROW((void)fd_derivatives(signal(2, 0.1, [](double t, int) { return t; })), std::invalid_argument);
}

TEST(Subsample, IdentityAndStrideFive) {
  const SnapshotSet s = burgers_solve({0.75, 1.0}, small_grid(1001, 1001));
  const SnapshotSet same = subsample(s, 1, 1);
  EXPECT_EQ(same.states, s.states);
  const SnapshotSet sub = subsample(fd_derivatives(s, FdScheme::backward), 5, 5);
  EXPECT_EQ(sub.full_dim(), 201);
  EXPECT_EQ(sub.steps(), 201);
  EXPECT_NEAR(sub.dt(), 2.0 / 200, 1e-15);
  EXPECT_NEAR(sub.grid.dx, 6.0 / 200, 1e-15);
  EXPECT_EQ(sub.states(7, 3), s.states(35, 15));
  EXPECT_EQ(sub.derivatives.rows(), 201);
  EXPECT_THROW((void)subsample(s, 3, 1), std::invalid_argument);
  EXPECT_THROW((void)subsample(s, 1, 7), std::invalid_argument);
}

TEST(Dataset, RoundTripIsBitIdentical) {
  std::vector<SnapshotSet> sets;
  sets.push_back(fd_derivatives(burgers_solve({0.7, 0.9}, small_grid(41, 21))));
  SnapshotSet plain;
  plain.times = Vector::LinSpaced(150, 0.0, 149.0 / 150.0);
  plain.states = Matrix::Random(150, 400);
  sets.push_back(plain);
  const auto path = std::filesystem::temp_directory_path() / "trom_dataset_roundtrip.bin";
  dataset_write(sets, path);
  const auto back = dataset_read(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].states, sets[0].states);
  EXPECT_EQ(back[0].derivatives, sets[0].derivatives);
  EXPECT_EQ(back[0].mu, sets[0].mu);
  EXPECT_EQ(back[0].times, sets[0].times);
  EXPECT_EQ(back[0].grid.dx, sets[0].grid.dx);
  EXPECT_EQ(back[1].states, plain.states);
  EXPECT_FALSE(back[1].has_derivatives());
  EXPECT_EQ(back[1].full_dim(), 400);
  EXPECT_EQ(back[1].steps(), 150);
}

TEST(Dataset, MalformedFilesRejected) {
  const auto path = std::filesystem::temp_directory_path() / "trom_dataset_bad.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTADATAFILE";
  }
  EXPECT_THROW((void)dataset_read(path), FormatError);
  SnapshotSet s;
  s.times = Vector::LinSpaced(4, 0.0, 3.0);
  s.states = Matrix::Random(4, 3);
  dataset_write({s}, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  EXPECT_THROW((void)dataset_read(path), FormatError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace trom
