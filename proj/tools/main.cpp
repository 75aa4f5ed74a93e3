// trom: command-line driver for data generation, training and evaluation.
#include "pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace trom;
using namespace trom::app;

namespace {

constexpr int exit_config = 2;
constexpr int exit_numerical = 3;

const auto start_time = std::chrono::steady_clock::now();

void log_line(const std::string& msg) {
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  std::cerr << "[" << std::fixed << std::setprecision(1) << s << "s] " << msg << '\n';
  std::cerr.unsetf(std::ios::floatfield);
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

fs::path checkpoint_path(const RunConfig& cfg) {
  const fs::path p = cfg.checkpoint.empty() ? cfg.out / "model.ckpt" : cfg.checkpoint;
  if (!fs::exists(p)) throw ConfigError("checkpoint not found: " + p.string() + " (run train first)");
  return p;
}

bool parametric(const RunConfig& cfg) { return cfg.problem == Problem::burgers || cfg.problem == Problem::heat; }

void write_training_points(const ParameterGrid& grid, const std::vector<std::size_t>& selected, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "order,grid_index,mu_1,mu_2\n";
  for (std::size_t k = 0; k < selected.size(); ++k)
    out << k << ',' << selected[k] << ',' << grid.point(selected[k])[0] << ',' << grid.point(selected[k])[1] << '\n';
}

// Training marks next to the checkpoint, or the configured parameters.
std::vector<std::size_t> training_points(const RunConfig& cfg, const ParameterGrid& grid, const fs::path& ckpt) {
  std::vector<std::size_t> idx;
  std::ifstream in(ckpt.parent_path() / "training_points.csv");
  if (in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto a = line.find(','), b = line.find(',', a + 1);
      if (a == std::string::npos || b == std::string::npos) continue;
      idx.push_back(std::stoul(line.substr(a + 1, b - a - 1)));
    }
    for (std::size_t i : idx)
      if (i >= grid.size()) throw ConfigError("training_points.csv does not match the parameter grid");
    return idx;
  }
  for (const auto& mu : cfg.pde.mu) {
    const long i = grid.find(Eigen::Map<const Vector>(mu.data(), 2));
    if (i >= 0) idx.push_back(static_cast<std::size_t>(i));
  }
  return idx;
}

Model load_model(const RunConfig& cfg, const fs::path& ckpt, int N) {
  Model m = Model::load(ckpt);
  if (m.full_dim() != N)
    throw DimensionError("checkpoint expects N=" + std::to_string(m.full_dim()) + " but the problem has N=" +
                         std::to_string(N));
  if (parametric(cfg) && m.spec().hyper && m.ae().param_dim() != 2)
    throw DimensionError("checkpoint hypernetwork does not take (alpha, omega)");
  return m;
}

int cmd_generate(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  std::vector<SnapshotSet> sets;
  switch (cfg.problem) {
    case Problem::gas: {
      GasConfig g;
      g.count = cfg.gas.count;
      g.t_end = cfg.gas.T + cfg.gas.delta;
      g.dt = cfg.gas.dt;
      g.form = cfg.gas.form;
      g.seed = cfg.gas.data_seed;
      sets.push_back(fd_derivatives(gas_generate(g, log_line), FdScheme::central));
      break;
    }
    case Problem::burgers:
    case Problem::heat: {
      std::vector<Vector> mus;
      for (const auto& mu : cfg.pde.mu) mus.push_back(Eigen::Map<const Vector>(mu.data(), 2));
      if (mus.empty()) {
        const ParameterGrid grid = cfg.pde.grid();
        for (std::size_t i : grid.corners()) mus.push_back(grid.point(i));
      }
      for (const auto& mu : mus) {
        log_line("solving " + std::string(problem_name(cfg.problem)) + " at alpha=" + std::to_string(mu[0]) +
                 " omega=" + std::to_string(mu[1]));
        sets.push_back(pde_solve(cfg, mu));
      }
      break;
    }
    case Problem::import:
      sets = dataset_read(cfg.imported.path.empty() ? cfg.dataset : cfg.imported.path);
      for (const auto& s : sets) s.validate();
      break;
  }
  dataset_write(sets, cfg.out / "dataset.bin");
  const auto& s = sets.front();
  log_line("wrote " + std::to_string(sets.size()) + " set(s), " + std::to_string(s.steps()) + " x " +
           std::to_string(s.full_dim()) + " each, to " + (cfg.out / "dataset.bin").string());
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  write_json(cfg.to_json(), cfg.out / "config.json");
  TrainResult r = run_training(cfg, log_line);
  r.model.save(cfg.out / "model.ckpt");
  r.history.write_csv(cfg.out / "history.csv");
  if (parametric(cfg)) write_training_points(r.grid, r.selected, cfg.out / "training_points.csv");
  if (r.history.aborted) {
    std::cerr << "training aborted: " << r.history.abort_reason << " (last good parameters saved)\n";
    return exit_numerical;
  }
  if (!r.history.rows.empty())
    log_line("done: " + std::to_string(r.history.rows.back().iteration) + " iterations, loss " +
             std::to_string(r.history.rows.back().loss.total));
  else
    log_line("wrote initialized checkpoint");
  return 0;
}

json error_estimate_json(const ErrorEstimateCheck& c) {
  return {{"constant", c.constant},
          {"constant_half_grid", c.constant_half},
          {"ratio_change", c.constant > 0.0 ? std::abs(c.constant_half / c.constant - 1.0) : 0.0},
          {"e_l2", c.report.e_l2},
          {"e_max_percent", c.report.e_max}};
}

// Trajectory used for the error-component report.
SnapshotSet diagnostic_truth(const RunConfig& cfg, const ParameterGrid& grid, const fs::path& ckpt) {
  if (cfg.problem == Problem::gas) return gas_data(cfg, log_line).train;
  if (cfg.problem == Problem::import) return import_data(cfg).train;
  const auto idx = training_points(cfg, grid, ckpt);
  return pde_solve(cfg, grid.point(idx.empty() ? 0 : idx.front()));
}

int cmd_evaluate(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  const fs::path ckpt = checkpoint_path(cfg);
  json metrics;
  if (parametric(cfg)) {
    ParameterGrid grid = cfg.pde.grid();
    for (std::size_t i : training_points(cfg, grid, ckpt)) grid.mark(i);
    const Model m = load_model(cfg, ckpt, cfg.pde.data_grid().nx);
    const PdeEvaluation ev = pde_evaluate(m, cfg, grid);
    write_heatmap_csv(grid, ev.e_max, cfg.out / "heatmap.csv");
    metrics["worst_e_max_percent"] = ev.worst;
    metrics["mean_e_max_percent"] = Eigen::Map<const Vector>(ev.e_max.data(), static_cast<Eigen::Index>(ev.e_max.size())).mean();
    if (ev.entropy.t.size() > 0) {
      ev.entropy.write_csv(cfg.out / "entropy.csv");
      ev.entropy.write_summary_csv(cfg.out / "entropy_summary.csv");
      const auto [first, last] = entropy_trend(ev.entropy);
      metrics["dSdt_first_10pct"] = first;
      metrics["dSdt_last_10pct"] = last;
    }
    const ErrorEstimateCheck c = error_estimate_check(m, diagnostic_truth(cfg, grid, ckpt), cfg.integrator);
    c.report.write_csv(cfg.out / "error_estimate.csv");
    metrics["error_estimate"] = error_estimate_json(c);
    log_line("worst e_max " + std::to_string(ev.worst) + "%");
  } else {
    const SplitData data = cfg.problem == Problem::gas ? gas_data(cfg, log_line) : import_data(cfg);
    const Model m = load_model(cfg, ckpt, static_cast<int>(data.full.full_dim()));
    const Extrapolation e = extrapolate(m, data, cfg.integrator);
    write_extrapolation_csv(e, cfg.out / "extrapolation.csv");
    metrics["e_l2"] = e.e_l2;
    metrics["e_max_percent"] = e.e_max;
    metrics["window"] = {data.full.times[data.split - 1], data.full.times[data.full.steps() - 1]};
    const ErrorEstimateCheck c = error_estimate_check(m, data.train, cfg.integrator);
    c.report.write_csv(cfg.out / "error_estimate.csv");
    metrics["error_estimate"] = error_estimate_json(c);
    if (m.dyn().kind() != DynamicsKind::fnn) {
      const auto ev = entropy_report(m, {data.full.mu}, {data.full.states.row(0).transpose()},
                                     std::vector<double>(data.full.times.data(), data.full.times.data() + data.full.steps()),
                                     cfg.integrator);
      ev.write_csv(cfg.out / "entropy.csv");
    }
    log_line("extrapolation e_l2 " + std::to_string(e.e_l2));
  }
  write_json(metrics, cfg.out / "metrics.json");
  return 0;
}

int cmd_diagnose(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  const fs::path ckpt = checkpoint_path(cfg);
  const ParameterGrid grid = parametric(cfg) ? cfg.pde.grid() : ParameterGrid();
  const SnapshotSet truth = diagnostic_truth(cfg, grid, ckpt);
  const Model m = load_model(cfg, ckpt, static_cast<int>(truth.full_dim()));
  const ErrorEstimateCheck c = error_estimate_check(m, truth, cfg.integrator);
  c.report.write_csv(cfg.out / "error_estimate.csv");
  write_json(error_estimate_json(c), cfg.out / "error_estimate_summary.json");
  log_line("empirical constant " + std::to_string(c.constant) + ", half grid " + std::to_string(c.constant_half));
  return 0;
}

int cmd_ablate(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  const auto rows = run_ablation(cfg, log_line);
  write_ablation_csv(rows, cfg.out / "ablation.csv", cfg.out / "ablation_summary.csv", cfg.problem == Problem::gas);
  return 0;
}

int cmd_linear_check(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> nd;
  const int N = cfg.linear.N;
  std::ofstream out(cfg.out / "linear_check.csv");
  if (!out) throw std::runtime_error("cannot write linear_check.csv");
  out.precision(10);
  out << "system,identity_residual,constant,constant_half,ratio_change,max_excess\n";
  bool ok = true;
  for (int s = 0; s < cfg.linear.systems; ++s) {
    Matrix A(N, N);
    for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = nd(rng) / std::sqrt(static_cast<double>(N));
    const Matrix M = 0.5 * (A + A.transpose());
    Vector x0(N);
    for (int i = 0; i < N; ++i) x0[i] = nd(rng);
    const auto c = linear_rom_case(M, cfg.linear.n, x0, Vector::LinSpaced(cfg.linear.points, 0.0, cfg.linear.t_end));
    const auto h =
        linear_rom_case(M, cfg.linear.n, x0, Vector::LinSpaced((cfg.linear.points - 1) / 2 + 1, 0.0, cfg.linear.t_end));
    const double excess = (c.measured - c.bound).maxCoeff();
    const double change = c.constant > 0.0 ? std::abs(h.constant / c.constant - 1.0) : 0.0;
    out << s << ',' << c.identity_residual << ',' << c.constant << ',' << h.constant << ',' << change << ','
        << excess << '\n';
    ok = ok && c.identity_residual <= 1e-10 && change <= 0.2;
  }
  log_line(ok ? "linear case: identities and ratio stability hold" : "linear case: check failed");
  return ok ? 0 : exit_numerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Thermodynamics-informed latent-space reduced-order models"};
  app.require_subcommand(1);
  std::string config_path, out;
  std::int64_t seed = -1;
  int threads = 0;
  const std::vector<std::string> names{"generate", "train", "evaluate", "ablate", "diagnose", "linear-check"};
  for (const auto& name : names) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the config seed")->check(CLI::NonNegativeNumber);
    sub->add_option("--out", out, "output directory");
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    if (name != "linear-check") sub->get_option("--config")->required();
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_config;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = load_config(config_path);
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (!out.empty()) cfg.out = out;
    if (threads > 0) cfg.threads = threads;
    cfg.validate();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_config;
  }

  try {
    if (cmd == "generate") return cmd_generate(cfg);
    if (cmd == "train") return cmd_train(cfg);
    if (cmd == "evaluate") return cmd_evaluate(cfg);
    if (cmd == "ablate") return cmd_ablate(cfg);
    if (cmd == "diagnose") return cmd_diagnose(cfg);
    return cmd_linear_check(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const DimensionError& e) {
    std::cerr << "dimension mismatch: " << e.what() << '\n';
    return exit_config;
  } catch (const FormatError& e) {
    std::cerr << "bad input file: " << e.what() << '\n';
    return exit_config;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return exit_numerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
