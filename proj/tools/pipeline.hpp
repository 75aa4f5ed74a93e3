// Data generation, training and evaluation pipelines behind the CLI commands.
#pragma once

#include "run_config.hpp"

#include <functional>
#include <map>

namespace trom::app {

using Logger = std::function<void(const std::string&)>;

/// A trajectory split into a training window and a held-out tail.
struct SplitData {
  SnapshotSet full;
  SnapshotSet train;   // first `split` rows, with derivative estimates
  Eigen::Index split;  // rows in the training window
};

/// Gas containers on [0, T + delta]; training rows are t <= T.
SplitData gas_data(const RunConfig& cfg, const Logger& log = {});
/// First set of an imported dataset, split by train_steps / test_steps.
SplitData import_data(const RunConfig& cfg);

/// Full-order PDE solve at mu on the generation grid, backward-difference
/// derivatives, then subsampled to the data grid.
SnapshotSet pde_solve(const RunConfig& cfg, const Vector& mu);
ResidualProblem pde_problem(const RunConfig& cfg);

struct TrainResult {
  Model model;
  TrainHistory history;
  ParameterGrid grid;                 // parametric problems only
  std::vector<std::size_t> selected;  // grid indices of the training parameters
  std::vector<SnapshotSet> data;
};

/// Builds the model from cfg and trains it (with greedy sampling when enabled).
TrainResult run_training(const RunConfig& cfg, const Logger& log = {});

struct Extrapolation {
  Vector t;
  Vector rel_error;  // per held-out snapshot
  double e_l2 = 0.0, e_max = 0.0;
};

/// Prediction from the last training snapshot over the held-out rows.
Extrapolation extrapolate(const Model& m, const SplitData& data, const IntegratorSpec& integrator);

struct PdeEvaluation {
  std::vector<double> e_max;  // per grid point, percent
  EntropyReport entropy;      // empty for FNN dynamics
  double worst = 0.0;
};

PdeEvaluation pde_evaluate(const Model& m, const RunConfig& cfg, const ParameterGrid& grid);

/// Mean dS/dt over the first and last `fraction` of the time samples.
std::pair<double, double> entropy_trend(const EntropyReport& r, double fraction = 0.1);

struct ErrorEstimateCheck {
  ErrorReport report;
  double constant = 0.0;       // max measured / bound on the snapshot grid
  double constant_half = 0.0;  // the same with every other snapshot
};

/// Error components along `truth` plus the empirical constant under grid halving.
ErrorEstimateCheck error_estimate_check(const Model& m, const SnapshotSet& truth, const IntegratorSpec& integrator);

/// Weights for the named ablation configuration derived from the configured ones.
LossWeights ablation_weights(const LossWeights& base, const std::string& name);

struct AblationRow {
  std::string configuration;
  std::uint64_t seed = 0;
  double e_l2 = 0.0;
};

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const Logger& log = {});

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& table,
                        const std::filesystem::path& summary, bool gas_reference);
void write_extrapolation_csv(const Extrapolation& e, const std::filesystem::path& path);

}  // namespace trom::app
