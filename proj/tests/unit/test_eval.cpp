#include "thermorom/eval.hpp"

#include <gtest/gtest.h>

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>

namespace trom {
namespace {

std::size_t seg(const ParamVector& p, const std::string& name) {
  const auto* s = p.find(name);
  EXPECT_NE(s, nullptr) << name;
  return static_cast<std::size_t>(s - p.segments().data());
}

// Identity autoencoder with linear latent dynamics z' = A z.
Model linear_model(const Matrix& A) {
  const int n = static_cast<int>(A.rows());
  ModelSpec s;
  s.encoder = {{n, n}, Activation::identity};
  s.decoder = {{n, n}, Activation::identity};
  s.dynamics.kind = DynamicsKind::fnn;
  s.dynamics.latent = n;
  s.dynamics.activation = Activation::identity;
  Model m(s, 0);
  m.params().values().setZero();
  m.params().set_block(seg(m.params(), "enc.W1"), Matrix::Identity(n, n));
  m.params().set_block(seg(m.params(), "dec.W1"), Matrix::Identity(n, n));
  m.params().set_block(seg(m.params(), "dyn.F.W1"), A);
  return m;
}

SnapshotSet linear_truth(const Matrix& A, const Vector& x0, int steps, double dt) {
  SnapshotSet s;
  s.times = Vector::LinSpaced(steps, 0.0, (steps - 1) * dt);
  s.states.resize(steps, A.rows());
  s.derivatives.resize(steps, A.rows());
  for (int k = 0; k < steps; ++k) {
    const Vector x = (A * s.times[k]).exp() * x0;
    s.states.row(k) = x.transpose();
    s.derivatives.row(k) = (A * x).transpose();
  }
  return s;
}

Matrix test_matrix() {
  Matrix A(3, 3);
  A << -0.5, 1.0, 0.0, -1.0, -0.2, 0.3, 0.0, -0.3, -0.1;
  return A;
}

TEST(RomPredict, ZeroDynamicsReturnsReconstruction) {
  ModelSpec s;
  s.encoder = {{5, 4, 2}, Activation::tanh};
  s.decoder = {{2, 4, 5}, Activation::tanh};
  s.dynamics.kind = DynamicsKind::fnn;
  s.dynamics.latent = 2;
  s.dynamics.hidden = {3};
  Model m(s, 4);
  m.params().set_block(seg(m.params(), "dyn.F.W2"), Matrix::Zero(2, 3));
  m.params().set_block(seg(m.params(), "dyn.F.b2"), Matrix::Zero(1, 2));
  const Vector x0 = Vector::Random(5);
  const auto p = rom_predict(m, x0, {0.0, 0.5, 1.0}, IntegratorSpec{Scheme::rk4, 0.1});
  const Matrix rec = m.ae().reconstruct(m.params(), x0.transpose());
  for (Eigen::Index k = 0; k < 3; ++k) EXPECT_LE((p.states.row(k) - rec).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(RomPredict, LinearSystemMatchesMatrixExponential) {
  const Matrix A = test_matrix();
  const Model m = linear_model(A);
  Vector x0(3);
  x0 << 1.0, -0.5, 2.0;
  const std::vector<double> times{0.0, 0.4, 1.1, 2.0};
  const auto p = rom_predict(m, x0, times, IntegratorSpec{Scheme::rkf45, 0.1, 1e-11, 1e-13});
  for (std::size_t k = 0; k < times.size(); ++k) {
    const Vector expect = (A * times[k]).exp() * x0;
    EXPECT_LE((p.states.row(static_cast<Eigen::Index>(k)).transpose() - expect).cwiseAbs().maxCoeff(), 1e-9);
  }
  EXPECT_THROW((void)rom_predict(m, Vector::Zero(4), times, IntegratorSpec{}), DimensionError);
}

TEST(Metrics, TrivialCases) {
  const Matrix x = Matrix::Random(6, 4);
  EXPECT_EQ(extrap_error(x, x), 0.0);
  EXPECT_EQ(max_rel_error(x, x), 0.0);
  EXPECT_NEAR(extrap_error(x, 2.0 * x), 1.0, 1e-15);
  EXPECT_NEAR(max_rel_error(x, 2.0 * x), 100.0, 1e-13);
}

TEST(Metrics, HandComputedTwoSnapshots) {
  Matrix x(2, 2), y(2, 2);
  x << 3, 4, 1, 0;
  y << 3, 3, 1, 0.5;
  // row errors 1/5 and 0.5/1
  EXPECT_NEAR(extrap_error(x, y), 0.35, 1e-15);
  EXPECT_NEAR(max_rel_error(x, y), 50.0, 1e-13);
}

TEST(Metrics, SingleCorruptedSnapshotDominatesMax) {
  const Matrix x = Matrix::Random(10, 3).array() + 2.0;
  Matrix y = x;
  y.row(6) *= 1.3;
  EXPECT_NEAR(max_rel_error(x, y), 30.0, 1e-12);
  EXPECT_NEAR(extrap_error(x, y), 0.03, 1e-14);
}

TEST(Metrics, ScaleInvariant) {
  const Matrix x = Matrix::Random(8, 5), y = x + 0.1 * Matrix::Random(8, 5);
  for (double c : {-3.0, 1e-4, 7e5}) {
    EXPECT_NEAR(extrap_error(c * x, c * y), extrap_error(x, y), 1e-12);
    EXPECT_NEAR(max_rel_error(c * x, c * y), max_rel_error(x, y), 1e-10);
  }
}

TEST(Metrics, Errors) {
  Matrix x = Matrix::Random(3, 2);
  x.row(1).setZero();
  EXPECT_THROW((void)extrap_error(x, x), std::invalid_argument);
  EXPECT_THROW((void)max_rel_error(Matrix::Ones(2, 2), Matrix::Ones(3, 2)), DimensionError);
}

TEST(ErrorComponents, PerfectModelComponentsVanish) {
  const Matrix A = test_matrix();
  const Model m = linear_model(A);
  Vector x0(3);
  x0 << 0.3, 1.0, -0.7;
  const SnapshotSet truth = linear_truth(A, x0, 51, 0.04);
  const ErrorReport r = error_components(m, truth, Matrix(), IntegratorSpec{Scheme::rkf45, 0.01, 1e-11, 1e-13});
  ASSERT_TRUE(r.has_derivative_terms());
  EXPECT_LE(r.eps_int.maxCoeff(), 1e-9);
  EXPECT_LE(r.eps_rec.maxCoeff(), 1e-15);
  EXPECT_LE(r.eps_jac.maxCoeff(), 1e-15);
  EXPECT_LE(r.eps_mod.maxCoeff(), 1e-9);
  EXPECT_LE(r.measured.maxCoeff(), 1e-9);
  EXPECT_LE(r.e_l2, 1e-9);
}

TEST(ErrorComponents, FrozenDynamicsAccumulateIntegrationError) {
  const Matrix A = test_matrix();
  const Model m = linear_model(Matrix::Zero(3, 3));
  Vector x0(3);
  x0 << 0.3, 1.0, -0.7;
  const ErrorReport r = error_components(m, linear_truth(A, x0, 21, 0.05), Matrix());
  EXPECT_EQ(r.eps_int[0], 0.0);
  for (Eigen::Index k = 1; k < r.t.size(); ++k) EXPECT_GT(r.eps_int[k], r.eps_int[k - 1]);
  EXPECT_GT(r.measured[20], 0.0);
  // measured error of a frozen state is bounded by the time integral of ||x'||
  for (Eigen::Index k = 0; k < r.t.size(); ++k) EXPECT_LE(r.measured[k], r.bound()[k] + 1e-12);
}

TEST(ErrorComponents, WithoutDerivativesOnlyTwoComponents) {
  const Model m = linear_model(test_matrix());
  SnapshotSet truth = linear_truth(test_matrix(), Vector::Ones(3), 5, 0.1);
  truth.derivatives.resize(0, 0);
  const ErrorReport r = error_components(m, truth, Matrix());
  EXPECT_FALSE(r.has_derivative_terms());
  EXPECT_EQ(r.bound().size(), 5);
}

Matrix random_symmetric(std::mt19937_64& rng, int N) {
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(N));
  Matrix A(N, N);
  for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = nd(rng);
  return 0.5 * (A + A.transpose());
}

TEST(LinearCase, FullRankHasNoError) {
  std::mt19937_64 rng(1);
  const Matrix M = random_symmetric(rng, 6);
  const auto c = linear_rom_case(M, 6, Vector::Random(6), Vector::LinSpaced(11, 0.0, 1.0));
  EXPECT_LE(c.measured.maxCoeff(), 1e-14);
  EXPECT_EQ(c.bound.maxCoeff(), 0.0);
}

TEST(LinearCase, InvariantSubspaceHasNoError) {
  Matrix M = Matrix::Zero(4, 4);
  M.diagonal() << -2.0, -1.0, 0.5, 1.0;
  Vector x0(4);
  x0 << 0.0, 0.0, 1.0, -2.0;
  const auto c = linear_rom_case(M, 2, x0, Vector::LinSpaced(11, 0.0, 1.0));
  EXPECT_LE(c.measured.maxCoeff(), 1e-15);
  EXPECT_LE(c.bound.maxCoeff(), 1e-15);
}

TEST(LinearCase, RandomSystemsAgainstMatrixExponential) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix M = random_symmetric(rng, 10);
    std::normal_distribution<double> nd;
    Vector x0(10);
    for (int i = 0; i < 10; ++i) x0[i] = nd(rng);
    const Vector t = Vector::LinSpaced(101, 0.0, 1.0);
    const auto c = linear_rom_case(M, 3, x0, t);
    EXPECT_LE(c.identity_residual, 1e-10);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(M);
    const Matrix Q = eig.eigenvectors().rightCols(3);
    const Matrix Mr = Q.transpose() * M * Q;
    for (Eigen::Index k = 0; k < t.size(); ++k) {
      const Vector x = (M * t[k]).exp() * x0;
      const Vector xr = Q * ((Mr * t[k]).exp() * (Q.transpose() * x0));
      EXPECT_NEAR(c.measured[k], (x - xr).norm(), 1e-10);
      EXPECT_LE(c.measured[k], c.bound[k] * (1.0 + 1e-12));  // equal at t = 0
    }
    EXPECT_LE(c.constant, 1.0 + 1e-12);
    EXPECT_GT(c.constant, 0.0);
  }
  EXPECT_THROW((void)linear_rom_case(Matrix::Random(3, 3) + 5.0 * Matrix::Identity(3, 3), 1, Vector::Ones(3),
                                     Vector::LinSpaced(3, 0.0, 1.0)),
               std::invalid_argument);
}

TEST(ResidualScore, ExactSolveAndZeroPrediction) {
  PdeGrid fine;
  fine.nx = 101;
  fine.nt = 51;
  const SnapshotSet s = burgers_solve({0.75, 0.95}, fine);
  const ResidualProblem prob = burgers_problem(fine, IntegratorSpec{});
  Vector mu(2);
  mu << 0.75, 0.95;
  const Vector u0 = prob.initial(mu);
  EXPECT_EQ(u0, s.states.row(0).transpose());
  EXPECT_LE(residual_score(s.states, u0, prob), 1e-18);
  const double zero = residual_score(Matrix::Zero(s.steps(), s.full_dim()), u0, prob);
  EXPECT_NEAR(zero, u0.head(100).squaredNorm() / (51.0 * 100.0), 1e-15);
  EXPECT_GT(zero, 0.0);

  const SnapshotSet h = heat_solve({0.75, 0.95}, fine);
  EXPECT_LE(residual_score(h.states, u0, heat_problem(fine, IntegratorSpec{})), 1e-18);
}

TEST(ParameterGrid, LayoutCornersAndBoundary) {
  ParameterGrid g({0.7, 0.9}, {0.8, 1.0}, {5, 5});
  EXPECT_EQ(g.size(), 25u);
  EXPECT_NEAR(g.point(1)[1], 0.925, 1e-15);
  EXPECT_NEAR(g.point(5)[0], 0.725, 1e-15);
  const auto c = g.corners();
  ASSERT_EQ(c.size(), 4u);
  EXPECT_EQ(c[0], 0u);
  EXPECT_EQ(c[1], 4u);
  EXPECT_EQ(c[2], 20u);
  EXPECT_EQ(c[3], 24u);
  int boundary = 0;
  for (std::size_t i = 0; i < g.size(); ++i) boundary += g.on_boundary(i) ? 1 : 0;
  EXPECT_EQ(boundary, 16);
  Vector mu(2);
  mu << 0.75, 0.95;
  EXPECT_EQ(g.find(mu), 12);
  EXPECT_THROW(ParameterGrid({0.0}, {1.0}, {1}), std::invalid_argument);
}

struct FakeProblem {
  std::vector<Vector> solved;
  int score_calls = 0;
  long trained = 0;
  GreedyHooks hooks() {
    GreedyHooks h;
    h.solve = [this](const Vector& mu) {
      solved.push_back(mu);
      SnapshotSet s;
      s.mu = mu;
      s.times = Vector::LinSpaced(3, 0.0, 1.0);
      s.states = Matrix::Ones(3, 2);
      return s;
    };
    h.set_data = [](const std::vector<SnapshotSet>&) {};
    h.train = [this](long it) { trained += it; };
    h.score = [this](const Vector& mu) {
      ++score_calls;
      return std::sin(13.0 * mu[0]) + std::cos(7.0 * mu[1]);
    };
    return h;
  }
};

TEST(Greedy, TargetFourReturnsCornersWithoutScoring) {
  ParameterGrid g({0.7, 0.9}, {0.8, 1.0}, {5, 5});
  FakeProblem f;
  const auto r = greedy_sample(g, GreedySchedule{4, 100, {}}, f.hooks());
  EXPECT_EQ(r.selected, g.corners());
  EXPECT_EQ(f.score_calls, 0);
  EXPECT_EQ(f.trained, 0);
  EXPECT_EQ(g.training_count(), 4u);
}

TEST(Greedy, DeterministicAndNeverRepeats) {
  std::vector<std::size_t> first;
  for (int run = 0; run < 2; ++run) {
    ParameterGrid g({0.7, 0.9}, {0.8, 1.0}, {5, 5});
    FakeProblem f;
    const auto r = greedy_sample(g, GreedySchedule{9, 10, {}}, f.hooks(), run + 1);
    ASSERT_EQ(r.selected.size(), 9u);
    std::vector<std::size_t> sorted = r.selected;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(std::unique(sorted.begin(), sorted.end()), sorted.end());
    EXPECT_EQ(f.trained, 50);
    EXPECT_EQ(r.scores.size(), 5u);
    for (std::size_t round = 0; round < r.scores.size(); ++round) {
      // the pick is the best-scoring non-training point
      const std::size_t pick = r.selected[4 + round];
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!std::isnan(r.scores[round][i])) EXPECT_LE(r.scores[round][i], r.scores[round][pick]);
    }
    if (run == 0) first = r.selected;
    else EXPECT_EQ(first, r.selected);
  }
}

TEST(Greedy, ExhaustedGridAndBadTargets) {
  ParameterGrid g({0.0, 0.0}, {1.0, 1.0}, {2, 2});
  FakeProblem f;
  EXPECT_THROW((void)greedy_sample(g, GreedySchedule{5, 1, {}}, f.hooks()), std::invalid_argument);
  ParameterGrid g2({0.0, 0.0}, {1.0, 1.0}, {2, 2});
  EXPECT_THROW((void)greedy_sample(g2, GreedySchedule{3, 1, {}}, f.hooks()), std::invalid_argument);
}

ModelSpec gfinn_spec() {
  ModelSpec s;
  s.encoder = {{4, 3, 2}, Activation::tanh};
  s.decoder = {{2, 3, 4}, Activation::tanh};
  s.dynamics.latent = 2;
  s.dynamics.hidden = {5, 5};
  return s;
}

TEST(EntropyReport, ZeroWeightsGiveZeroSeries) {
  Model m(gfinn_spec(), 1);
  m.params().values().setZero();
  const auto r = entropy_report(m, {Vector(), Vector()}, {Vector::Ones(4), Vector::Zero(4)}, {0.0, 0.5, 1.0},
                                IntegratorSpec{Scheme::rk4, 0.1});
  EXPECT_EQ(r.S.norm() + r.dSdt.norm() + r.S_mean.norm() + r.dSdt_std.norm(), 0.0);
}

TEST(EntropyReport, GfinnRatesNonNegativeAndStats) {
  Model m(gfinn_spec(), 2);
  std::vector<Vector> mus(4), x0s;
  for (int i = 0; i < 4; ++i) x0s.push_back(Vector::Random(4));
  std::vector<double> times;
  for (int k = 0; k <= 20; ++k) times.push_back(0.1 * k);
  const auto r = entropy_report(m, mus, x0s, times, IntegratorSpec{Scheme::rk23, 0.05, 1e-8, 1e-10}, 2);
  EXPECT_GE(r.dSdt.minCoeff(), -1e-12);
  EXPECT_NEAR(r.S_mean[7], r.S.col(7).mean(), 1e-15);
  const double var = (r.S.col(7).array() - r.S.col(7).mean()).square().mean();
  EXPECT_NEAR(r.S_std[7], std::sqrt(var), 1e-15);
  // S is non-decreasing along each GFINN rollout
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index k = 1; k < r.S.cols(); ++k) EXPECT_GE(r.S(i, k), r.S(i, k - 1) - 1e-9);
}

TEST(EntropyReport, RejectsFnn) {
  ModelSpec s = gfinn_spec();
  s.dynamics.kind = DynamicsKind::fnn;
  Model m(s, 1);
  EXPECT_THROW((void)entropy_report(m, {Vector()}, {Vector::Ones(4)}, {0.0, 1.0}, IntegratorSpec{}),
               std::invalid_argument);
}

TEST(ParallelFor, CoversEveryIndexOnce) {
  std::vector<int> hits(100, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw std::runtime_error("x"); }),
               std::runtime_error);
}

}  // namespace
}  // namespace trom
