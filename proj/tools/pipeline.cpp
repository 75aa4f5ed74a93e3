#include "pipeline.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace trom::app {

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

std::vector<double> as_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector mu_vector(const std::vector<double>& v) { return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())); }

SplitData split_set(const SnapshotSet& full, Eigen::Index split) {
  if (split < 2 || split > full.steps()) throw ConfigError("training window needs 2 to " + std::to_string(full.steps()) + " rows");
  SplitData d;
  d.full = full;
  d.split = split;
  d.train = slice_times(full, 0, split);
  if (!d.train.has_derivatives()) d.train = fd_derivatives(d.train, FdScheme::central);
  return d;
}

std::string fmt_mu(const Vector& mu) {
  std::ostringstream s;
  s << '(';
  for (Eigen::Index i = 0; i < mu.size(); ++i) s << (i ? ", " : "") << mu[i];
  s << ')';
  return s.str();
}

}  // namespace

SplitData gas_data(const RunConfig& cfg, const Logger& log) {
  GasConfig g;
  g.count = cfg.gas.count;
  g.t_end = cfg.gas.T + cfg.gas.delta;
  g.dt = cfg.gas.dt;
  g.form = cfg.gas.form;
  g.seed = cfg.gas.data_seed;
  SnapshotSet full;
  if (cfg.dataset.empty()) {
    full = gas_generate(g, log);
  } else {
    const auto sets = dataset_read(cfg.dataset);
    if (sets.size() != 1) throw ConfigError("gas datasets hold exactly one trajectory set");
    full = sets.front();
  }
  // the central-difference estimate is taken on the training window only
  full.derivatives.resize(0, 0);
  return split_set(full, static_cast<Eigen::Index>(std::llround(cfg.gas.T / cfg.gas.dt)) + 1);
}

SplitData import_data(const RunConfig& cfg) {
  const auto sets = dataset_read(cfg.imported.path.empty() ? cfg.dataset : cfg.imported.path);
  if (sets.empty()) throw ConfigError("imported dataset is empty");
  const SnapshotSet& s = sets.front();
  const Eigen::Index split = cfg.imported.train_steps > 0 ? cfg.imported.train_steps : s.steps() - cfg.imported.test_steps;
  if (split + cfg.imported.test_steps > s.steps()) throw ConfigError("import: train_steps + test_steps exceed the dataset");
  return split_set(s, split);
}

SnapshotSet pde_solve(const RunConfig& cfg, const Vector& mu) {
  if (mu.size() != 2) throw DimensionError("PDE parameters are (alpha, omega)");
  const GaussianIC ic{mu[0], mu[1]};
  SnapshotSet s;
  try {
    s = cfg.problem == Problem::burgers ? burgers_solve(ic, cfg.pde.fine) : heat_solve(ic, cfg.pde.fine);
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(problem_name(cfg.problem)) + " solve failed at mu=" + fmt_mu(mu) + ": " + e.what());
  }
  s.mu = mu;
  return subsample(fd_derivatives(s, FdScheme::backward), cfg.pde.space_stride, cfg.pde.time_stride);
}

ResidualProblem pde_problem(const RunConfig& cfg) {
  return cfg.problem == Problem::burgers ? burgers_problem(cfg.pde.data_grid(), cfg.integrator)
                                         : heat_problem(cfg.pde.data_grid(), cfg.integrator);
}

TrainResult run_training(const RunConfig& cfg, const Logger& log) {
  const bool pde = cfg.problem == Problem::burgers || cfg.problem == Problem::heat;
  std::vector<SnapshotSet> data;
  SplitData split;
  ParameterGrid grid;
  if (cfg.problem == Problem::gas) {
    split = gas_data(cfg, log);
    data = {split.train};
  } else if (cfg.problem == Problem::import) {
    split = import_data(cfg);
    data = {split.train};
  } else if (!cfg.dataset.empty()) {
    data = dataset_read(cfg.dataset);
  }
  if (pde) grid = cfg.pde.grid();

  const int N = pde ? cfg.pde.data_grid().nx : static_cast<int>(data.empty() ? 0 : data.front().full_dim());
  if (N < 1) throw ConfigError("no training data");
  Model model(cfg.model_spec(N, pde ? 2 : 0), cfg.seed);
  Trainer trainer(model, cfg.loss, cfg.train_spec());
  if (split.split > 0) {
    const IntegratorSpec integ = cfg.integrator;
    trainer.validation = [&split, integ](const Model& m) {
      try {
        return extrapolate(m, split, integ).e_l2;
      } catch (const NumericalError&) {
        return std::numeric_limits<double>::infinity();
      }
    };
  }

  TrainResult r{model, {}, grid, {}, {}};
  if (pde && cfg.greedy.enabled && cfg.dataset.empty()) {
    const ResidualProblem problem = pde_problem(cfg);
    GreedyHooks hooks;
    hooks.solve = [&](const Vector& mu) {
      say(log, "solving full-order model at mu=" + fmt_mu(mu));
      return pde_solve(cfg, mu);
    };
    hooks.set_data = [&](const std::vector<SnapshotSet>& d) { trainer.set_data(d); };
    hooks.train = [&](long it) {
      trainer.run(it);
      if (trainer.history().aborted) throw NumericalError(trainer.history().abort_reason);
      if (!trainer.history().rows.empty())
        say(log, "iteration " + std::to_string(trainer.iteration()) + " loss " +
                     std::to_string(trainer.history().rows.back().loss.total));
    };
    hooks.score = [&](const Vector& mu) { return residual_indicator(model, mu, problem); };
    GreedySchedule sched{cfg.greedy.target, cfg.greedy.period, {}};
    GreedyResult g = greedy_sample(r.grid, sched, hooks, cfg.threads);
    trainer.run(cfg.greedy.final_iterations);
    r.selected = g.selected;
    r.data = std::move(g.data);
  } else {
    if (pde && data.empty())
      for (const auto& mu : cfg.pde.mu) data.push_back(pde_solve(cfg, mu_vector(mu)));
    if (pde)
      for (const auto& s : data) {
        const long i = r.grid.find(s.mu);
        if (i >= 0) {
          r.grid.mark(static_cast<std::size_t>(i));
          r.selected.push_back(static_cast<std::size_t>(i));
        }
      }
    trainer.set_data(data);
    trainer.run(cfg.train.iterations);
    r.data = std::move(data);
  }
  r.history = trainer.history();
  r.model = model;
  return r;
}

Extrapolation extrapolate(const Model& m, const SplitData& data, const IntegratorSpec& integrator) {
  const Eigen::Index s = data.split, total = data.full.steps();
  Extrapolation e;
  if (s >= total) return e;
  std::vector<double> times(data.full.times.data() + s - 1, data.full.times.data() + total);
  const Vector x0 = data.full.states.row(s - 1).transpose();
  const Prediction p = rom_predict(m, x0, times, integrator, data.full.mu);
  const Matrix truth = data.full.states.bottomRows(total - s);
  const Matrix pred = p.states.bottomRows(total - s);
  e.t = data.full.times.tail(total - s);
  e.rel_error = (truth - pred).rowwise().norm().cwiseQuotient(truth.rowwise().norm());
  e.e_l2 = extrap_error(truth, pred);
  e.e_max = max_rel_error(truth, pred);
  return e;
}

PdeEvaluation pde_evaluate(const Model& m, const RunConfig& cfg, const ParameterGrid& grid) {
  PdeEvaluation ev;
  ev.e_max.assign(grid.size(), 0.0);
  const ResidualProblem problem = pde_problem(cfg);
  parallel_for(grid.size(), cfg.threads, [&](std::size_t i) {
    const SnapshotSet truth = pde_solve(cfg, grid.point(i));
    try {
      const Prediction p = rom_predict(m, truth.states.row(0).transpose(), as_std(truth.times), cfg.integrator,
                                       grid.point(i));
      ev.e_max[i] = max_rel_error(truth.states, p.states);
    } catch (const NumericalError&) {
      ev.e_max[i] = std::numeric_limits<double>::infinity();
    }
  });
  for (double e : ev.e_max) ev.worst = std::max(ev.worst, e);
  if (m.dyn().kind() != DynamicsKind::fnn) {
    std::vector<Vector> x0s;
    for (const auto& mu : grid.points()) x0s.push_back(problem.initial(mu));
    ev.entropy = entropy_report(m, grid.points(), x0s, problem.times, cfg.integrator, cfg.threads);
  }
  return ev;
}

std::pair<double, double> entropy_trend(const EntropyReport& r, double fraction) {
  const Eigen::Index n = r.dSdt_mean.size();
  if (n < 2) throw std::invalid_argument("entropy trend needs at least two time samples");
  const Eigen::Index k = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::floor(fraction * n)));
  return {r.dSdt_mean.head(k).mean(), r.dSdt_mean.tail(k).mean()};
}

namespace {

double empirical_constant(const ErrorReport& r) {
  const Vector b = r.bound();
  double c = 0.0;
  // at t0 both sides reduce to the reconstruction error, so start after it
  for (Eigen::Index k = 1; k < b.size(); ++k)
    if (b[k] > 0.0) c = std::max(c, r.measured[k] / b[k]);
  return c;
}

}  // namespace

ErrorEstimateCheck error_estimate_check(const Model& m, const SnapshotSet& truth, const IntegratorSpec& integrator) {
  ErrorEstimateCheck c;
  c.report = error_components(m, truth, Matrix(), integrator);
  c.constant = empirical_constant(c.report);
  const Eigen::Index rows = truth.steps() - (truth.steps() - 1) % 2;
  if (rows >= 3) {
    const SnapshotSet half = subsample(slice_times(truth, 0, rows), 1, 2);
    c.constant_half = empirical_constant(error_components(m, half, Matrix(), integrator));
  }
  return c;
}

LossWeights ablation_weights(const LossWeights& base, const std::string& name) {
  LossWeights w = base;
  if (name == "standard" || name == "model") w.jacobian = 0.0;
  if (name == "standard" || name == "jacobian") w.model = 0.0;
  return w;
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const Logger& log) {
  if (cfg.problem != Problem::gas && cfg.problem != Problem::import)
    throw ConfigError("ablate runs on extrapolation problems (gas, import)");
  const SplitData data = cfg.problem == Problem::gas ? gas_data(cfg, log) : import_data(cfg);
  std::vector<AblationRow> rows;
  for (int s = 0; s < cfg.ablate.seeds; ++s) {
    for (const auto& name : cfg.ablate.configurations) {
      RunConfig run = cfg;
      run.seed = cfg.seed + static_cast<std::uint64_t>(s);
      run.loss = ablation_weights(cfg.loss, name);
      Model model(run.model_spec(static_cast<int>(data.train.full_dim()), 0), run.seed);
      Trainer trainer(model, run.loss, run.train_spec());
      trainer.set_data({data.train});
      trainer.run(run.train.iterations);
      if (trainer.history().aborted) throw NumericalError(trainer.history().abort_reason);
      AblationRow row{name, run.seed, extrapolate(model, data, run.integrator).e_l2};
      say(log, name + " seed " + std::to_string(run.seed) + " e_l2 " + std::to_string(row.e_l2));
      rows.push_back(row);
    }
  }
  return rows;
}

namespace {

// Reference gas-containers ablation values (mean, std).
const std::map<std::string, std::pair<double, double>> gas_reference{{"standard", {1.79e-2, 6.05e-3}},
                                                                      {"jacobian", {5.52e-3, 7.54e-4}},
                                                                      {"model", {7.29e-3, 8.26e-4}},
                                                                      {"full", {5.52e-3, 8.13e-4}}};

}  // namespace

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& table,
                        const std::filesystem::path& summary, bool with_reference) {
  std::ofstream t(table);
  if (!t) throw std::runtime_error("cannot write " + table.string());
  t.precision(10);
  t << "configuration,seed,e_l2\n";
  for (const auto& r : rows) t << r.configuration << ',' << r.seed << ',' << r.e_l2 << '\n';

  std::ofstream s(summary);
  if (!s) throw std::runtime_error("cannot write " + summary.string());
  s.precision(6);
  s << "configuration,seeds,mean,std,reference_mean,reference_std\n";
  std::vector<std::string> order;
  for (const auto& r : rows)
    if (std::find(order.begin(), order.end(), r.configuration) == order.end()) order.push_back(r.configuration);
  for (const auto& name : order) {
    std::vector<double> v;
    for (const auto& r : rows)
      if (r.configuration == name) v.push_back(r.e_l2);
    const Vector e = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
    const double mean = e.mean();
    const double sd = std::sqrt((e.array() - mean).square().mean());
    s << name << ',' << v.size() << ',' << mean << ',' << sd << ',';
    if (auto it = gas_reference.find(name); with_reference && it != gas_reference.end())
      s << it->second.first << ',' << it->second.second;
    else
      s << ',';
    s << '\n';
  }
}

void write_extrapolation_csv(const Extrapolation& e, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(12);
  out << "t,relative_error\n";
  for (Eigen::Index k = 0; k < e.t.size(); ++k) out << e.t[k] << ',' << e.rel_error[k] << '\n';
}

}  // namespace trom::app
