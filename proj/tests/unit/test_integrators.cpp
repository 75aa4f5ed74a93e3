#include "thermorom/integrators.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace trom {
namespace {

const BatchRhs decay = [](double, const Matrix& z) { return Matrix(-z); };

double rk4_endpoint_error(double dt) {
  IntegratorSpec s{Scheme::rk4, dt};
  const auto traj = integrate(decay, Matrix::Ones(1, 1), 0.0, 1.0, s);
  return std::abs(traj.z.back()(0, 0) - std::exp(-1.0));
}

TEST(Step, ZeroRhsLeavesStateUnchanged) {
  const BatchRhs zero = [](double, const Matrix& z) { return Matrix(Matrix::Zero(z.rows(), z.cols())); };
  const Matrix z = Matrix::Random(3, 4);
  for (Scheme s : {Scheme::rk4, Scheme::rkf45, Scheme::rk23}) EXPECT_EQ(step(zero, z, 0.0, 0.1, s), z);
}

TEST(Step, ConstantRhsIsExact) {
  Matrix c(1, 3);
  c << 1.5, -0.25, 2.0;
  const BatchRhs f = [&](double, const Matrix& z) { return Matrix(c.replicate(z.rows(), 1)); };
  const Matrix z = Matrix::Random(2, 3);
  for (Scheme s : {Scheme::rk4, Scheme::rkf45, Scheme::rk23}) {
    const Matrix expect = z + 0.125 * c.replicate(2, 1);
    EXPECT_LE((step(f, z, 0.0, 0.125, s) - expect).cwiseAbs().maxCoeff(), 1e-15) << scheme_name(s);
  }
}

TEST(Step, Rk4OneStepDecay) {
  const Matrix z1 = step(decay, Matrix::Ones(1, 1), 0.0, 0.1, Scheme::rk4);
  EXPECT_LE(std::abs(z1(0, 0) - std::exp(-0.1)), 1e-7);
}

TEST(Step, NonFiniteStageReportsBlowUp) {
  const BatchRhs bad = [](double t, const Matrix& z) {
    return Matrix(t > 0.0 ? Matrix::Constant(z.rows(), z.cols(), std::nan("")) : Matrix(z));
  };
  try {
    (void)step(bad, Matrix::Ones(1, 1), 0.0, 0.1, Scheme::rk4);
    FAIL() << "expected a blow-up";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("integration blow-up at t="), std::string::npos);
  }
}

TEST(Integrate, ZeroRhsGivesConstantTrajectory) {
  const BatchRhs zero = [](double, const Matrix& z) { return Matrix(Matrix::Zero(z.rows(), z.cols())); };
  const Matrix z0 = Matrix::Random(1, 3);
  const auto traj = integrate(zero, z0, 0.0, 1.0, IntegratorSpec{Scheme::rk4, 0.1});
  EXPECT_EQ(traj.t.front(), 0.0);
  EXPECT_DOUBLE_EQ(traj.t.back(), 1.0);
  for (const auto& z : traj.z) EXPECT_EQ(z, z0);
}

TEST(Integrate, Rk4DecayAccuracyAndOrder) {
  const double e1 = rk4_endpoint_error(0.01), e2 = rk4_endpoint_error(0.005);
  EXPECT_LE(e1, 1e-9);
  EXPECT_GE(std::log2(e1 / e2), 3.9);
  const double ratio = e1 / e2;
  EXPECT_GT(ratio, 14.0);
  EXPECT_LT(ratio, 18.0);
}

TEST(Integrate, Rk4OrderOnNonlinearScalar) {
  // z' = z^2 from z(0) = 0.5: z(t) = 0.5 / (1 - 0.5 t)
  const BatchRhs sq = [](double, const Matrix& z) { return Matrix(z.array().square()); };
  auto err = [&](double dt) {
    const auto traj = integrate(sq, Matrix::Constant(1, 1, 0.5), 0.0, 1.0, IntegratorSpec{Scheme::rk4, dt});
    return std::abs(traj.z.back()(0, 0) - 1.0);
  };
  EXPECT_GE(std::log2(err(0.05) / err(0.025)), 3.9);
}

TEST(Integrate, AdaptiveStepsRespectTolerance) {
  const BatchRhs osc = [](double, const Matrix& z) {
    Matrix d(z.rows(), 2);
    d.col(0) = z.col(1);
    d.col(1) = -z.col(0) - 0.1 * z.col(1) * z.col(0).squaredNorm();
    return d;
  };
  for (Scheme s : {Scheme::rkf45, Scheme::rk23}) {
    IntegratorSpec spec{s, 0.1, 1e-6, 1e-9};
    Matrix z0(1, 2);
    z0 << 1.0, 0.0;
    const auto traj = integrate(osc, z0, 0.0, 5.0, spec);
    EXPECT_DOUBLE_EQ(traj.t.back(), 5.0);
    for (std::size_t k = 1; k < traj.t.size(); ++k) {
      // replay the accepted step and check its embedded error estimate
      Matrix err;
      const double h = traj.t[k] - traj.t[k - 1];
      const Matrix next = step(osc, traj.z[k - 1], traj.t[k - 1], h, s, &err);
      EXPECT_LE((next - traj.z[k]).cwiseAbs().maxCoeff(), 1e-12);
      const double allowed = std::max(spec.rtol * traj.z[k - 1].norm(), spec.atol);
      EXPECT_LE(err.norm(), allowed * (1.0 + 1e-12)) << scheme_name(s) << " step " << k;
    }
  }
}

TEST(Integrate, AdaptiveAccuracyOnDecay) {
  IntegratorSpec spec{Scheme::rkf45, 0.1, 1e-10, 1e-12};
  const auto traj = integrate(decay, Matrix::Ones(1, 1), 0.0, 2.0, spec);
  EXPECT_NEAR(traj.z.back()(0, 0), std::exp(-2.0), 1e-9);
}

TEST(Integrate, StepCountExceeded) {
  IntegratorSpec spec{Scheme::rk4, 0.01};
  spec.max_steps = 10;
  EXPECT_THROW((void)integrate(decay, Matrix::Ones(1, 1), 0.0, 1.0, spec), NumericalError);
}

TEST(Integrate, BadArgumentsRejected) {
  EXPECT_THROW((void)integrate(decay, Matrix::Ones(1, 1), 1.0, 1.0, IntegratorSpec{}), std::invalid_argument);
  EXPECT_THROW((IntegratorSpec{Scheme::rk4, -1.0}.validate()), std::invalid_argument);
  EXPECT_THROW((IntegratorSpec{Scheme::rk4, 0.1, 0.0}.validate()), std::invalid_argument);
  EXPECT_THROW((void)parse_scheme("euler"), std::invalid_argument);
}

TEST(Integrate, FixedStepIsBitReproducible) {
  const BatchRhs f = [](double t, const Matrix& z) { return Matrix(z.array().sin() * std::cos(t)); };
  const Matrix z0 = Matrix::Random(3, 5);
  const auto a = integrate(f, z0, 0.0, 1.3, IntegratorSpec{Scheme::rk4, 0.07});
  const auto b = integrate(f, z0, 0.0, 1.3, IntegratorSpec{Scheme::rk4, 0.07});
  ASSERT_EQ(a.z.size(), b.z.size());
  for (std::size_t k = 0; k < a.z.size(); ++k) EXPECT_EQ(a.z[k], b.z[k]);
}

TEST(IntegrateAt, SamplesRequestedTimes) {
  const std::vector<double> times{0.0, 0.3, 0.35, 1.0};
  for (Scheme s : {Scheme::rk4, Scheme::rkf45, Scheme::rk23}) {
    const auto zs = integrate_at(decay, Matrix::Ones(1, 1), times, IntegratorSpec{s, 0.01, 1e-9, 1e-12});
    ASSERT_EQ(zs.size(), times.size());
    for (std::size_t k = 0; k < times.size(); ++k) EXPECT_NEAR(zs[k](0, 0), std::exp(-times[k]), 1e-7);
  }
  EXPECT_THROW((void)integrate_at(decay, Matrix::Ones(1, 1), {0.0, 0.0}, IntegratorSpec{}), std::invalid_argument);
}

TEST(Rk4Graph, MatchesNumericStep) {
  const Matrix z0 = Matrix::Random(2, 3);
  ad::Graph g(ad::Graph::Mode::primal);
  const ad::Var z = g.input(z0, false);
  auto F = [&](ad::Var v) { return g.activation(v, ad::Activation::sine); };
  const Matrix out = g.value(rk4_graph(g, F, z, 0.2, 2));
  const BatchRhs f = [](double, const Matrix& v) { return Matrix(v.array().sin()); };
  const Matrix expect = step(f, step(f, z0, 0.0, 0.1, Scheme::rk4), 0.1, 0.1, Scheme::rk4);
  EXPECT_LE((out - expect).cwiseAbs().maxCoeff(), 1e-15);
}

}  // namespace
}  // namespace trom
