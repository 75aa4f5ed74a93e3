#include "thermorom/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

namespace trom {

namespace {

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector relative_errors(const Matrix& truth, const Matrix& prediction) {
  require_dims(truth.rows() == prediction.rows() && truth.cols() == prediction.cols(), "truth vs prediction");
  if (truth.rows() == 0) throw std::invalid_argument("empty trajectory");
  Vector r(truth.rows());
  for (Eigen::Index k = 0; k < truth.rows(); ++k) {
    const double nx = truth.row(k).norm();
    if (nx == 0.0) throw std::invalid_argument("zero-norm truth snapshot at row " + std::to_string(k));
    r[k] = (truth.row(k) - prediction.row(k)).norm() / nx;
  }
  return r;
}

// Running trapezoid integral of f sampled at t.
Vector cumulative_trapezoid(const Vector& t, const Vector& f) {
  Vector out = Vector::Zero(t.size());
  for (Eigen::Index k = 1; k < t.size(); ++k) out[k] = out[k - 1] + 0.5 * (t[k] - t[k - 1]) * (f[k] + f[k - 1]);
  return out;
}

}  // namespace

Prediction rom_predict(const Model& m, const Vector& x0, const std::vector<double>& times,
                       const IntegratorSpec& integrator, const Vector& mu) {
  require_dims(x0.size() == m.full_dim(), "rom_predict initial state");
  if (times.empty()) throw std::invalid_argument("rom_predict needs at least one time");
  const auto& ae = m.ae();
  const Matrix z0 = ae.encode(m.params(), x0.transpose(), mu);
  const auto zs = integrate_at(m.latent_rhs(), z0, times, integrator);
  Prediction p;
  p.latent.resize(static_cast<Eigen::Index>(zs.size()), m.latent_dim());
  for (std::size_t k = 0; k < zs.size(); ++k) p.latent.row(static_cast<Eigen::Index>(k)) = zs[k].row(0);
  p.states = ae.decode(m.params(), p.latent, mu);
  return p;
}

double extrap_error(const Matrix& truth, const Matrix& prediction) {
  return relative_errors(truth, prediction).mean();
}

double max_rel_error(const Matrix& truth, const Matrix& prediction) {
  return 100.0 * relative_errors(truth, prediction).maxCoeff();
}

Vector ErrorReport::bound() const {
  Vector b = eps_int + eps_rec;
  if (has_derivative_terms()) b += eps_jac + eps_mod;
  return b;
}

void ErrorReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "t,eps_int,eps_rec,eps_jac,eps_mod,bound,measured\n";
  const Vector b = bound();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (Eigen::Index k = 0; k < t.size(); ++k) {
    out << t[k] << ',' << eps_int[k] << ',' << eps_rec[k] << ',' << (has_derivative_terms() ? eps_jac[k] : nan)
        << ',' << (has_derivative_terms() ? eps_mod[k] : nan) << ',' << b[k] << ',' << measured[k] << '\n';
  }
}

ErrorReport error_components(const Model& m, const SnapshotSet& truth, const Matrix& latent,
                                const IntegratorSpec& integrator) {
  truth.validate();
  require_dims(truth.full_dim() == m.full_dim(), "truth state dimension");
  const Eigen::Index K = truth.steps();
  Matrix Z = latent;
  if (Z.size() == 0)
    Z = rom_predict(m, truth.states.row(0).transpose(), to_std(truth.times), integrator, truth.mu).latent;
  require_dims(Z.rows() == K && Z.cols() == m.latent_dim(), "latent trajectory");

  const auto& ae = m.ae();
  const Matrix Fz = m.dyn().rhs(m.params(), Z);

  Graph g(Graph::Mode::primal);
  const auto bound = m.params().bind(g, false);
  const auto w = ae.hyper_weights(g, bound, truth.mu);
  const Var X = g.input(truth.states, false);
  const Var enc = ae.encode(g, bound, w, X);
  const Var rec = ae.decode(g, bound, w, enc);
  const Var Zv = g.input(Z, false);
  const Var dec = ae.decode(g, bound, w, Zv);

  ErrorReport r;
  r.t = truth.times;
  const Matrix& x = truth.states;
  const Vector int_rate = (g.value(enc) - Z).rowwise().norm();
  r.eps_int = cumulative_trapezoid(r.t, int_rate);
  const Vector rec_err = (x - g.value(rec)).rowwise().norm();
  r.eps_rec = rec_err.array() + rec_err[0];
  r.measured = (x - g.value(dec)).rowwise().norm();

  if (truth.has_derivatives()) {
    const Matrix& xd = truth.derivatives;
    const Var xdv = g.constant(xd);
    const Var je = g.tangent(enc, X, xdv);
    const Var jj = g.tangent(rec, X, xdv);
    const Var jd = g.tangent(dec, Zv, g.constant(Fz));
    const Matrix JeXd = je.valid() ? g.value(je) : Matrix::Zero(K, m.latent_dim());
    const Matrix JXd = jj.valid() ? g.value(jj) : Matrix::Zero(K, m.full_dim());
    const Matrix JdF = jd.valid() ? g.value(jd) : Matrix::Zero(K, m.full_dim());
    const Vector jac_rate = (xd - JXd).rowwise().norm();
    const Vector mod_rate = (JeXd - Fz).rowwise().norm() + (xd - JdF).rowwise().norm();
    r.eps_jac = cumulative_trapezoid(r.t, jac_rate);
    r.eps_mod = cumulative_trapezoid(r.t, mod_rate);
  }
  const Matrix pred = g.value(dec);
  r.e_l2 = extrap_error(x, pred);
  r.e_max = max_rel_error(x, pred);
  return r;
}

LinearCase linear_rom_case(const Matrix& M, int n, const Vector& x0, const Vector& times) {
  const Eigen::Index N = M.rows();
  require_dims(M.cols() == N && x0.size() == N, "linear case system");
  if (n < 1 || n > N) throw std::invalid_argument("linear case: need 1 <= n <= N");
  if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, M.cwiseAbs().maxCoeff()))
    throw std::invalid_argument("linear case: M must be symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(M);
  if (eig.info() != Eigen::Success) throw NumericalError("eigensolve failed");
  const Vector lam = eig.eigenvalues();  // ascending
  const Matrix& V = eig.eigenvectors();
  const Eigen::Index m = N - n;
  // Leading pairs are the n algebraically largest eigenvalues.
  const Matrix Q = V.rightCols(n), Qt = V.leftCols(m);
  const Vector sig = lam.tail(n), sigt = lam.head(m);

  LinearCase c;
  c.t = times;
  const Eigen::Index K = times.size();
  c.measured.resize(K);
  Vector rate(K);
  const Vector y0 = V.transpose() * x0;
  const Vector w0 = Q.transpose() * x0;
  const Matrix J = Q * Q.transpose();  // J_d J_e for the linear autoencoder
  const Matrix I = Matrix::Identity(N, N);
  for (Eigen::Index k = 0; k < K; ++k) {
    const double t = times[k] - times[0];
    const Vector x = V * (lam.array() * t).exp().matrix().cwiseProduct(y0);
    const Vector z = (sig.array() * t).exp().matrix().cwiseProduct(w0);
    const Vector xd = M * x;
    const Vector Fr = sig.cwiseProduct(z);
    const Vector tail = Qt * sigt.cwiseProduct(Qt.transpose() * x);
    const Vector gap = Q.transpose() * x - z;
    const double res[] = {
        ((I - J) * xd - tail).cwiseAbs().maxCoeff(),
        (xd - Q * Fr - (Q * sig.cwiseProduct(gap) + tail)).cwiseAbs().maxCoeff(),
        (Q.transpose() * xd - Fr - sig.cwiseProduct(gap)).cwiseAbs().maxCoeff(),
        gap.cwiseAbs().maxCoeff(),
    };
    for (double v : res) c.identity_residual = std::max(c.identity_residual, v);
    c.measured[k] = (x - Q * z).norm();
    rate[k] = tail.norm();
  }
  c.bound = cumulative_trapezoid(times, rate).array() + (Qt * (Qt.transpose() * x0)).norm();
  c.constant = 0.0;
  // measured and bound coincide at t0
  for (Eigen::Index k = 1; k < K; ++k)
    if (c.bound[k] > 0.0) c.constant = std::max(c.constant, c.measured[k] / c.bound[k]);
  return c;
}

namespace {

ResidualProblem pde_problem(const PdeGrid& grid, const IntegratorSpec& integrator,
                            Vector (*op)(const Vector&, const Vector&, double, double)) {
  grid.validate();
  ResidualProblem p;
  p.times = to_std(Vector::LinSpaced(grid.nt, 0.0, grid.t_end));
  p.integrator = integrator;
  p.initial = [grid](const Vector& mu) {
    require_dims(mu.size() == 2, "Gaussian parameters (alpha, omega)");
    return gaussian_profile(GaussianIC{mu[0], mu[1]}, grid, true);
  };
  const double dt = grid.dt(), dx = grid.dx();
  const int unique = grid.nx - 1;
  p.residual = [=](const Vector& u_new, const Vector& u_old) {
    require_dims(u_new.size() == unique + 1 && u_old.size() == unique + 1, "residual state");
    return op(u_new.head(unique), u_old.head(unique), dt, dx);
  };
  return p;
}

}  // namespace

ResidualProblem burgers_problem(const PdeGrid& data_grid, const IntegratorSpec& integrator) {
  return pde_problem(data_grid, integrator, &burgers_residual);
}

ResidualProblem heat_problem(const PdeGrid& data_grid, const IntegratorSpec& integrator) {
  return pde_problem(data_grid, integrator, &heat_residual);
}

double residual_indicator(const Model& m, const Vector& mu, const ResidualProblem& problem) {
  const Vector u0 = problem.initial(mu);
  return residual_score(rom_predict(m, u0, problem.times, problem.integrator, mu).states, u0, problem);
}

double residual_score(const Matrix& states, const Vector& u0, const ResidualProblem& problem) {
  require_dims(states.cols() == u0.size() && states.rows() == static_cast<Eigen::Index>(problem.times.size()),
               "residual trajectory");
  const Eigen::Index K = states.rows();
  const Eigen::Index unique = u0.size() - 1;
  double sum = (states.row(0).transpose() - u0).head(unique).squaredNorm();
  for (Eigen::Index k = 1; k < K; ++k)
    sum += problem.residual(states.row(k).transpose(), states.row(k - 1).transpose()).squaredNorm();
  const double score = sum / static_cast<double>(K * unique);
  if (!std::isfinite(score)) throw NumericalError("non-finite residual indicator");
  return score;
}

// ---------------------------------------------------------------------------

ParameterGrid::ParameterGrid(std::vector<double> lo, std::vector<double> hi, std::vector<int> counts)
    : lo_(std::move(lo)), hi_(std::move(hi)), counts_(std::move(counts)) {
  if (counts_.empty() || lo_.size() != counts_.size() || hi_.size() != counts_.size())
    throw std::invalid_argument("parameter grid: ranges and counts must have one entry per axis");
  std::size_t total = 1;
  for (std::size_t a = 0; a < counts_.size(); ++a) {
    if (counts_[a] < 2) throw std::invalid_argument("parameter grid: at least 2 points per axis");
    if (!(hi_[a] > lo_[a])) throw std::invalid_argument("parameter grid: empty range");
    total *= static_cast<std::size_t>(counts_[a]);
  }
  std::vector<int> idx(counts_.size(), 0);
  for (std::size_t i = 0; i < total; ++i) {
    Vector p(axes());
    for (int a = 0; a < axes(); ++a)
      p[a] = lo_[a] + (hi_[a] - lo_[a]) * idx[a] / (counts_[a] - 1);
    points_.push_back(p);
    index_.push_back(idx);
    for (int a = axes() - 1; a >= 0; --a) {
      if (++idx[a] < counts_[a]) break;
      idx[a] = 0;
    }
  }
  training_.assign(total, 0);
}

std::size_t ParameterGrid::training_count() const {
  return static_cast<std::size_t>(std::count(training_.begin(), training_.end(), 1));
}

long ParameterGrid::find(const Vector& mu) const {
  if (mu.size() != axes()) return -1;
  for (std::size_t i = 0; i < points_.size(); ++i)
    if ((points_[i] - mu).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, mu.cwiseAbs().maxCoeff()))
      return static_cast<long>(i);
  return -1;
}

std::vector<std::size_t> ParameterGrid::corners() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < points_.size(); ++i) {
    bool corner = true;
    for (int a = 0; a < axes(); ++a) corner = corner && (index_[i][a] == 0 || index_[i][a] == counts_[a] - 1);
    if (corner) out.push_back(i);
  }
  return out;
}

bool ParameterGrid::on_boundary(std::size_t i) const {
  for (int a = 0; a < axes(); ++a)
    if (index_.at(i)[a] == 0 || index_[i][a] == counts_[a] - 1) return true;
  return false;
}

void ParameterGrid::mark(std::size_t i, bool on) { training_.at(i) = on ? 1 : 0; }

void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < count;) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  // lowest index first, so the reported failure does not depend on scheduling
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

GreedyResult greedy_sample(ParameterGrid& grid, const GreedySchedule& schedule, const GreedyHooks& hooks,
                           int threads) {
  if (!hooks.solve || !hooks.set_data || !hooks.train || !hooks.score)
    throw std::invalid_argument("greedy sampling: all hooks are required");
  if (schedule.period < 0) throw std::invalid_argument("greedy sampling: negative period");
  const std::vector<std::size_t> initial = schedule.initial.empty() ? grid.corners() : schedule.initial;
  if (initial.size() > schedule.target) throw std::invalid_argument("greedy sampling: more initial points than target");
  if (schedule.target > grid.size()) throw std::invalid_argument("greedy sampling: target exceeds the grid size");

  GreedyResult r;
  auto add = [&](std::size_t i) {
    if (grid.training(i)) throw std::invalid_argument("greedy sampling: duplicate training point");
    grid.mark(i);
    r.selected.push_back(i);
    r.data.push_back(hooks.solve(grid.point(i)));
  };
  for (std::size_t i : initial) add(i);
  hooks.set_data(r.data);

  while (r.selected.size() < schedule.target) {
    hooks.train(schedule.period);
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < grid.size(); ++i)
      if (!grid.training(i)) candidates.push_back(i);
    if (candidates.empty()) throw std::runtime_error("parameter grid exhausted");
    std::vector<double> scores(grid.size(), std::numeric_limits<double>::quiet_NaN());
    parallel_for(candidates.size(), threads, [&](std::size_t c) {
      const std::size_t i = candidates[c];
      try {
        scores[i] = hooks.score(grid.point(i));
      } catch (const NumericalError&) {
        // a prediction that blows up is the worst possible candidate
        scores[i] = std::numeric_limits<double>::infinity();
      }
    });
    std::size_t best = candidates.front();
    for (std::size_t i : candidates)
      if (scores[i] > scores[best]) best = i;
    r.scores.push_back(std::move(scores));
    add(best);
    hooks.set_data(r.data);
  }
  return r;
}

// ---------------------------------------------------------------------------

void EntropyReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  const Eigen::Index p = mu.empty() ? 0 : mu.front().size();
  for (Eigen::Index a = 0; a < p; ++a) out << "mu_" << (a + 1) << ',';
  out << "t,S,dSdt\n";
  for (std::size_t i = 0; i < mu.size(); ++i)
    for (Eigen::Index k = 0; k < t.size(); ++k) {
      for (Eigen::Index a = 0; a < p; ++a) out << mu[i][a] << ',';
      out << t[k] << ',' << S(static_cast<Eigen::Index>(i), k) << ',' << dSdt(static_cast<Eigen::Index>(i), k) << '\n';
    }
}

void EntropyReport::write_summary_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "t,S_mean,S_std,dSdt_mean,dSdt_std\n";
  for (Eigen::Index k = 0; k < t.size(); ++k)
    out << t[k] << ',' << S_mean[k] << ',' << S_std[k] << ',' << dSdt_mean[k] << ',' << dSdt_std[k] << '\n';
}

EntropyReport entropy_report(const Model& m, const std::vector<Vector>& mus, const std::vector<Vector>& x0s,
                             const std::vector<double>& times, const IntegratorSpec& integrator, int threads) {
  if (m.dyn().spec().kind == DynamicsKind::fnn)
    throw std::invalid_argument("entropy report needs thermodynamic latent dynamics");
  require_dims(mus.size() == x0s.size(), "entropy report: one initial state per parameter");
  if (mus.empty()) throw std::invalid_argument("entropy report: no parameters");
  EntropyReport r;
  r.mu = mus;
  r.t = Vector::Map(times.data(), static_cast<Eigen::Index>(times.size()));
  const auto n = static_cast<Eigen::Index>(mus.size());
  r.S.resize(n, r.t.size());
  r.dSdt.resize(n, r.t.size());
  parallel_for(mus.size(), threads, [&](std::size_t i) {
    const Prediction p = rom_predict(m, x0s[i], times, integrator, mus[i]);
    const ThermoTrace tr = thermo_trace(m.dyn(), m.params(), p.latent);
    r.S.row(static_cast<Eigen::Index>(i)) = tr.S.transpose();
    r.dSdt.row(static_cast<Eigen::Index>(i)) = tr.dSdt.transpose();
  });
  auto stats = [&](const Matrix& a, Vector& mean, Vector& sd) {
    mean = a.colwise().mean().transpose();
    sd = ((a.rowwise() - mean.transpose()).array().square().colwise().sum() / static_cast<double>(n)).sqrt().transpose();
  };
  stats(r.S, r.S_mean, r.S_std);
  stats(r.dSdt, r.dSdt_mean, r.dSdt_std);
  return r;
}

void write_heatmap_csv(const ParameterGrid& grid, const std::vector<double>& e_max, const std::filesystem::path& path) {
  require_dims(e_max.size() == grid.size(), "heatmap values");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "mu_1,mu_2,e_max_percent,is_training_point\n";
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Vector& p = grid.point(i);
    out << p[0] << ',' << (p.size() > 1 ? p[1] : 0.0) << ',' << e_max[i] << ',' << (grid.training(i) ? 1 : 0) << '\n';
  }
}

}  // namespace trom
