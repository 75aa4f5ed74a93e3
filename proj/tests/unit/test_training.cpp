#include "thermorom/training.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace trom {
namespace {

ModelSpec toy_spec(DynamicsKind kind = DynamicsKind::gfinn, bool hyper = false) {
  ModelSpec s;
  s.encoder = {{6, 5, 2}, Activation::tanh};
  s.decoder = {{2, 5, 6}, Activation::tanh};
  s.dynamics.kind = kind;
  s.dynamics.latent = 2;
  s.dynamics.K = 2;
  s.dynamics.hidden = {4, 4};
  s.dynamics.activation = Activation::tanh;
  if (hyper) {
    s.hyper = true;
    s.hyper_net = {{2, 4, 0}, Activation::tanh};
  }
  return s;
}

// Smooth toy trajectories with exact time derivatives.
std::vector<SnapshotSet> toy_data(int sets, int steps, double dt, bool mu = false) {
  std::vector<SnapshotSet> out;
  for (int s = 0; s < sets; ++s) {
    SnapshotSet set;
    if (mu) {
      set.mu = Vector(2);
      set.mu << 0.7 + 0.1 * s, 0.9 + 0.05 * s;
    }
    set.times.resize(steps);
    set.states.resize(steps, 6);
    set.derivatives.resize(steps, 6);
    for (int k = 0; k < steps; ++k) {
      const double t = k * dt;
      set.times[k] = t;
      for (int j = 0; j < 6; ++j) {
        const double w = 0.5 + 0.3 * j + 0.2 * s;
        set.states(k, j) = 0.8 * std::sin(w * t + j) + 0.1 * s;
        set.derivatives(k, j) = 0.8 * w * std::cos(w * t + j);
      }
    }
    out.push_back(std::move(set));
  }
  return out;
}

double relative_fd_error(const Model& m0, const Batch& b, const LossOptions& opt) {
  Model m = m0;
  Vector grad;
  total_loss(m, b, opt, &grad);
  const Vector theta = m.params().values();
  auto f = [&](const Vector& th) {
    m.params().values() = th;
    return total_loss(m, b, opt).total;
  };
  const double err = ad::fd_check(f, grad, theta, 1e-5);
  m.params().values() = theta;
  return err;
}

TEST(TotalLoss, GradientMatchesFiniteDifferencesAllTerms) {
  Model m(toy_spec(), 3);
  const Batch b = full_batch(toy_data(1, 6, 0.1));
  LossOptions opt;
  opt.weights = {1.0, 0.5, 0.3, 0.2, 0.0, 1e-3};
  EXPECT_LE(relative_fd_error(m, b, opt), 1e-4);
}

TEST(TotalLoss, GradientFrobeniusVariant) {
  Model m(toy_spec(), 4);
  const Batch b = full_batch(toy_data(1, 4, 0.1));
  LossOptions opt;
  opt.weights = {1.0, 0.5, 0.3, 0.0, 0.0, 0.0};
  opt.jac = JacVariant::frobenius;
  EXPECT_LE(relative_fd_error(m, b, opt), 1e-4);
}

TEST(TotalLoss, GradientSpnnWithDegeneracy) {
  Model m(toy_spec(DynamicsKind::spnn), 5);
  const Batch b = full_batch(toy_data(1, 5, 0.1));
  LossOptions opt;
  opt.weights = {1.0, 0.5, 0.3, 0.2, 0.7, 0.0};
  EXPECT_LE(relative_fd_error(m, b, opt), 1e-4);
}

TEST(TotalLoss, GradientHyperAutoencoderTwoGroups) {
  Model m(toy_spec(DynamicsKind::gfinn, true), 6);
  const Batch b = full_batch(toy_data(2, 4, 0.1, true));
  LossOptions opt;
  opt.weights = {1.0, 0.5, 0.3, 0.2, 0.0, 0.0};
  EXPECT_LE(relative_fd_error(m, b, opt), 1e-4);
}


std::size_t seg(const ParamVector& p, const std::string& name) {
  const auto* s = p.find(name);
  EXPECT_NE(s, nullptr) << name;
  return static_cast<std::size_t>(s - p.segments().data());
}

void zero_prefix(ParamVector& p, const std::string& prefix) {
  for (const auto& s : p.segments())
    if (s.name.rfind(prefix, 0) == 0) p.values().segment(s.offset, s.rows * s.cols).setZero();
}

// Identity autoencoder (N = n) with FNN latent dynamics.
Model identity_model(int n, std::uint64_t seed, std::vector<int> hidden = {3}) {
  ModelSpec s;
  s.encoder = {{n, n}, Activation::identity};
  s.decoder = {{n, n}, Activation::identity};
  s.dynamics.kind = DynamicsKind::fnn;
  s.dynamics.latent = n;
  s.dynamics.hidden = std::move(hidden);
  Model m(s, seed);
  m.params().set_block(seg(m.params(), "enc.W1"), Matrix::Identity(n, n));
  m.params().set_block(seg(m.params(), "enc.b1"), Matrix::Zero(1, n));
  m.params().set_block(seg(m.params(), "dec.W1"), Matrix::Identity(n, n));
  m.params().set_block(seg(m.params(), "dec.b1"), Matrix::Zero(1, n));
  return m;
}

ModelSpec small_ae_spec() {
  ModelSpec s;
  s.encoder = {{4, 3, 2}, Activation::tanh};
  s.decoder = {{2, 3, 4}, Activation::tanh};
  s.dynamics.kind = DynamicsKind::gfinn;
  s.dynamics.latent = 2;
  s.dynamics.hidden = {4};
  return s;
}

SnapshotSet small_set(int N, int steps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  SnapshotSet s;
  s.times = Vector::LinSpaced(steps, 0.0, 0.1 * (steps - 1));
  s.states.resize(steps, N);
  s.derivatives.resize(steps, N);
  for (Eigen::Index i = 0; i < s.states.size(); ++i) {
    s.states.data()[i] = 0.5 * nd(rng);
    s.derivatives.data()[i] = nd(rng);
  }
  return s;
}

// Central-difference Jacobian of a map R^a -> R^b.
Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x) {
  const double h = 1e-6;
  const Vector f0 = f(x);
  Matrix J(f0.size(), x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vector e = Vector::Zero(x.size());
    e[j] = h;
    J.col(j) = (f(x + e) - f(x - e)) / (2 * h);
  }
  return J;
}

TEST(LossInt, HandRk4Step) {
  const Model m = identity_model(2, 7);
  SnapshotSet s;
  s.times = Vector::LinSpaced(2, 0.0, 0.1);
  s.states.resize(2, 2);
  s.states << 0.3, -0.4, 0.5, 0.1;
  const Batch b = full_batch({s});
  auto f = [&](const Vector& z) { return Vector(m.dyn().rhs(m.params(), z.transpose()).row(0).transpose()); };
  const double h = 0.1;
  const Vector z0 = s.states.row(0).transpose();
  const Vector k1 = f(z0), k2 = f(z0 + 0.5 * h * k1), k3 = f(z0 + 0.5 * h * k2), k4 = f(z0 + h * k3);
  const Vector z1 = z0 + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
  const double expect = (s.states.row(1).transpose() - z1).squaredNorm();
  EXPECT_NEAR(loss_int(m, b), expect, 1e-12 * std::max(1.0, expect));
}

TEST(LossInt, ZeroRhsOnConstantSnapshots) {
  Model m = identity_model(3, 1);
  zero_prefix(m.params(), "dyn.");
  SnapshotSet s;
  s.times = Vector::LinSpaced(4, 0.0, 0.3);
  s.states = Vector::Constant(3, 0.7).transpose().replicate(4, 1);
  EXPECT_EQ(loss_int(m, full_batch({s})), 0.0);
}

TEST(LossInt, IndependentOfDecoder) {
  Model m(small_ae_spec(), 2);
  const Batch b = full_batch({small_set(4, 5, 3)});
  const double before = loss_int(m, b);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  for (const auto& s : m.params().segments())
    if (s.name.rfind("dec.", 0) == 0)
      for (Eigen::Index i = 0; i < s.rows * s.cols; ++i) m.params().values()[s.offset + i] += nd(rng);
  EXPECT_EQ(loss_int(m, b), before);
}

TEST(LossRec, IdentityZeroDecoderAndRecomputation) {
  const Batch b1 = full_batch({small_set(3, 4, 1)});
  EXPECT_LE(loss_rec(identity_model(3, 1), b1), 1e-28);

  Model m(small_ae_spec(), 5);
  const SnapshotSet s = small_set(4, 5, 2);
  const Batch b = full_batch({s});
  // pairs cover rows 0..K-2 as x^k
  const Matrix xs = s.states.topRows(4);
  const double expect = (xs - m.ae().reconstruct(m.params(), xs)).squaredNorm();
  EXPECT_NEAR(loss_rec(m, b), expect, 1e-12 * expect);

  zero_prefix(m.params(), "dec.");
  EXPECT_NEAR(loss_rec(m, b), xs.squaredNorm(), 1e-12 * xs.squaredNorm());
}

TEST(LossJac, IdentityAndZeroDerivative) {
  const Model id = identity_model(3, 2);
  const Batch b = full_batch({small_set(3, 4, 5)});
  EXPECT_LE(loss_jac(id, b, JacVariant::derivative), 1e-28);
  EXPECT_LE(loss_jac(id, b, JacVariant::frobenius), 1e-28);

  const Model m(small_ae_spec(), 3);
  SnapshotSet s = small_set(4, 4, 6);
  s.derivatives.setZero();
  EXPECT_EQ(loss_jac(m, full_batch({s}), JacVariant::derivative), 0.0);
  s.derivatives.resize(0, 0);
  EXPECT_THROW((void)loss_jac(m, full_batch({s}), JacVariant::derivative), std::invalid_argument);
}

TEST(LossJacMod, MatchFiniteDifferenceJacobians) {
  const Model m(small_ae_spec(), 4);
  const SnapshotSet s = small_set(4, 4, 8);
  const Batch b = full_batch({s});
  auto enc = [&](const Vector& x) { return Vector(m.ae().encode(m.params(), x.transpose()).row(0).transpose()); };
  auto dec = [&](const Vector& z) { return Vector(m.ae().decode(m.params(), z.transpose()).row(0).transpose()); };
  double jac = 0.0, mod = 0.0, frob = 0.0;
  for (Eigen::Index k = 0; k + 1 < s.steps(); ++k) {
    const Vector x = s.states.row(k).transpose(), dx = s.derivatives.row(k).transpose();
    const Vector z = enc(x);
    const Matrix Je = fd_jacobian(enc, x), Jd = fd_jacobian(dec, z);
    const Vector F = m.dyn().rhs(m.params(), z.transpose()).row(0).transpose();
    jac += (dx - Jd * Je * dx).squaredNorm();
    frob += (Matrix::Identity(4, 4) - Jd * Je).squaredNorm();
    mod += (Je * dx - F).squaredNorm() + (dx - Jd * F).squaredNorm();
  }
  EXPECT_NEAR(loss_jac(m, b, JacVariant::derivative), jac, 1e-6 * jac);
  EXPECT_NEAR(loss_jac(m, b, JacVariant::frobenius), frob, 1e-6 * frob);
  EXPECT_NEAR(loss_mod(m, b), mod, 1e-6 * mod);
}

TEST(LossMod, ZeroDynamicsAndDerivatives) {
  Model m(small_ae_spec(), 4);
  zero_prefix(m.params(), "dyn.");
  SnapshotSet s = small_set(4, 3, 1);
  s.derivatives.setZero();
  EXPECT_EQ(loss_mod(m, full_batch({s})), 0.0);
}

TEST(LossDeg, SpnnAndGfinn) {
  ModelSpec spec = small_ae_spec();
  spec.dynamics.kind = DynamicsKind::spnn;
  const Batch b = full_batch({small_set(4, 5, 2)});
  int positive = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) positive += loss_deg(Model(spec, seed), b) > 0.0 ? 1 : 0;
  EXPECT_EQ(positive, 5);

  Model zero(spec, 1);
  zero_prefix(zero.params(), "dyn.L");
  zero_prefix(zero.params(), "dyn.D");
  EXPECT_EQ(loss_deg(zero, b), 0.0);

  const Model gfinn(small_ae_spec(), 1);
  EXPECT_THROW((void)loss_deg(gfinn, b), std::invalid_argument);
  EXPECT_LE(degeneracy_residual(gfinn, b), 1e-24);
}

TEST(TotalLoss, WeightsSelectComponents) {
  const Model m(small_ae_spec(), 6);
  const Batch b = full_batch({small_set(4, 5, 3)});
  LossOptions opt;
  opt.weights = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  EXPECT_EQ(total_loss(m, b, opt).total, 0.0);
  const double parts[4] = {loss_int(m, b), loss_rec(m, b), loss_jac(m, b, JacVariant::derivative), loss_mod(m, b)};
  for (int i = 0; i < 4; ++i) {
    LossOptions one;
    one.weights = {i == 0 ? 1.0 : 0.0, i == 1 ? 1.0 : 0.0, i == 2 ? 1.0 : 0.0, i == 3 ? 1.0 : 0.0, 0.0, 0.0};
    EXPECT_NEAR(total_loss(m, b, one).total, parts[i], 1e-13 * parts[i]) << i;
  }
  LossOptions bad;
  bad.weights.reconstruction = -1.0;
  EXPECT_THROW((void)total_loss(m, b, bad), std::invalid_argument);
}

TEST(Adam, ZeroGradientAndQuadratic) {
  Adam adam(2);
  Vector theta(2);
  theta << 1.0, -2.0;
  const Vector start = theta;
  adam.step(theta, Vector::Zero(2), 0.1);
  EXPECT_EQ(theta, start);

  // minimize (x - 3)^2 from 0
  Adam a(1);
  Vector x = Vector::Zero(1);
  for (int it = 0; it < 100; ++it) {
    const Vector g = Vector::Constant(1, 2.0 * (x[0] - 3.0));
    a.step(x, g, 0.5 * std::pow(0.97, it));
  }
  EXPECT_NEAR(x[0], 3.0, 1e-3);
  EXPECT_EQ(a.steps(), 100);
}

TEST(LrSchedule, DecayAndFloor) {
  TrainSpec s;
  s.lr = 1e-3;
  s.decay = 0.01;
  s.decay_period = 1000;
  s.lr_floor = 1e-4;
  EXPECT_EQ(lr_schedule(0, s), 1e-3);
  EXPECT_EQ(lr_schedule(999, s), 1e-3);
  EXPECT_DOUBLE_EQ(lr_schedule(1000, s), 1e-3 * 0.99);
  EXPECT_DOUBLE_EQ(lr_schedule(2500, s), 1e-3 * 0.99 * 0.99);
  EXPECT_EQ(lr_schedule(10000000, s), 1e-4);
  s.decay = 1.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TrainSpec quick_spec(long iterations) {
  TrainSpec t;
  t.iterations = iterations;
  t.batch_size = 3;
  t.lr = 1e-2;
  t.checkpoint_every = 5;
  t.seed = 4;
  return t;
}

TEST(Train, ZeroIterationsLeavesModelUnchanged) {
  Model m(small_ae_spec(), 2);
  const Vector before = m.params().values();
  const auto h = train(m, {small_set(4, 6, 1)}, LossWeights{}, quick_spec(0));
  EXPECT_EQ(m.params().values(), before);
  EXPECT_TRUE(h.rows.empty());
}

TEST(Train, BitReproducibleAndIncreasingHistory) {
  LossWeights w;
  w.jacobian = 1e-2;
  w.model = 1e-3;
  Model a(small_ae_spec(), 3), b(small_ae_spec(), 3);
  const auto ha = train(a, {small_set(4, 8, 2)}, w, quick_spec(20));
  const auto hb = train(b, {small_set(4, 8, 2)}, w, quick_spec(20));
  EXPECT_EQ(a.params().values(), b.params().values());
  ASSERT_EQ(ha.rows.size(), 4u);
  for (std::size_t i = 0; i < ha.rows.size(); ++i) {
    EXPECT_EQ(ha.rows[i].loss.total, hb.rows[i].loss.total);
    if (i) EXPECT_GT(ha.rows[i].iteration, ha.rows[i - 1].iteration);
  }
  EXPECT_FALSE(ha.aborted);
}

TEST(Train, NonFiniteLossRestoresLastCheckpoint) {
  Model m(small_ae_spec(), 3);
  Trainer t(m, LossWeights{}, quick_spec(0));
  t.set_data({small_set(4, 8, 2)});
  t.run(5);
  const Vector good = m.params().values();
  // a poisoned snapshot makes every later loss non-finite
  auto data = t.data();
  data[0].states.setConstant(std::numeric_limits<double>::infinity());
  t.set_data(data);
  t.run(5);
  EXPECT_TRUE(t.history().aborted);
  EXPECT_FALSE(t.history().abort_reason.empty());
  EXPECT_EQ(m.params().values(), good);
}

TEST(Train, MissingDerivativesSwitchToFrobenius) {
  Model m(small_ae_spec(), 3);
  LossWeights w;
  w.jacobian = 1e-2;
  w.model = 1e-3;
  Trainer t(m, w, quick_spec(0));
  SnapshotSet s = small_set(4, 6, 1);
  t.set_data({s});
  EXPECT_EQ(t.options().jac, JacVariant::derivative);
  EXPECT_EQ(t.options().weights.model, 1e-3);
  s.derivatives.resize(0, 0);
  t.set_data({s});
  EXPECT_EQ(t.options().jac, JacVariant::frobenius);
  EXPECT_EQ(t.options().weights.model, 0.0);
}

TEST(Train, DegeneracyWeightNeedsSpnn) {
  Model m(small_ae_spec(), 3);
  LossWeights w;
  w.degeneracy = 1.0;
  EXPECT_THROW(Trainer(m, w, quick_spec(1)), std::invalid_argument);
}

}  // namespace
}  // namespace trom
