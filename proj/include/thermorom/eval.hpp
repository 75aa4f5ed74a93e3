// ROM rollout, error metrics, error-bound diagnostics, residual indicator and
// greedy parameter sampling.
#pragma once

#include "thermorom/fom.hpp"
#include "thermorom/model.hpp"

#include <functional>

namespace trom {

struct Prediction {
  Matrix latent;  // n_t x n
  Matrix states;  // n_t x N
};

/// Encodes x0, integrates the latent dynamics to every requested time and decodes.
Prediction rom_predict(const Model& m, const Vector& x0, const std::vector<double>& times,
                       const IntegratorSpec& integrator, const Vector& mu = {});

/// mean_k ||x^k - x~^k|| / ||x^k|| over rows.
double extrap_error(const Matrix& truth, const Matrix& prediction);
/// 100 max_k ||x^k - x~^k|| / ||x^k||.
double max_rel_error(const Matrix& truth, const Matrix& prediction);

/// Error components accumulated from the first snapshot; each series has one
/// entry per snapshot. eps_jac and eps_mod are empty without derivative data.
struct ErrorReport {
  Vector t;
  Vector eps_int, eps_rec, eps_jac, eps_mod;
  Vector measured;  // ||x(t) - decode(z(t))||
  double e_l2 = 0.0, e_max = 0.0;

  [[nodiscard]] bool has_derivative_terms() const { return eps_jac.size() > 0; }
  /// eps_int + eps_rec (+ eps_jac + eps_mod when present).
  [[nodiscard]] Vector bound() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Trapezoid quadrature on the snapshot grid. `latent` holds z(t_k) as rows;
/// pass an empty matrix to integrate it from encode(x(t_0)).
ErrorReport error_components(const Model& m, const SnapshotSet& truth, const Matrix& latent,
                                const IntegratorSpec& integrator = {});

/// Linear FOM x' = Mx with a projection ROM on the leading n eigenvectors of M.
struct LinearCase {
  Vector t;
  Vector measured;  // ||x(t) - Q z(t)||
  Vector bound;     // ||Q~Q~^T x0|| + int ||Q~ S~ Q~^T x|| ds (trapezoid)
  double identity_residual = 0.0;  // max violation of the four component identities
  double constant = 0.0;           // max over t > t0 of measured / bound
};

LinearCase linear_rom_case(const Matrix& M, int n, const Vector& x0, const Vector& times);

/// Discrete PDE residual operator at the data resolution.
struct ResidualProblem {
  std::function<Vector(const Vector& mu)> initial;  // on the N data points
  std::function<Vector(const Vector& u_new, const Vector& u_old)> residual;
  std::vector<double> times;
  IntegratorSpec integrator;
};

/// Burgers / heat problems on the data grid (nx = N points with the periodic duplicate).
ResidualProblem burgers_problem(const PdeGrid& data_grid, const IntegratorSpec& integrator);
ResidualProblem heat_problem(const PdeGrid& data_grid, const IntegratorSpec& integrator);

/// Mean squared residual of the ROM prediction over space-time; row 0 is the
/// initial-condition mismatch.
double residual_indicator(const Model& m, const Vector& mu, const ResidualProblem& problem);
/// The same score for a given trajectory (rows on the data grid) and initial condition.
double residual_score(const Matrix& states, const Vector& u0, const ResidualProblem& problem);

class ParameterGrid {
 public:
  ParameterGrid() = default;
  /// Row-major over axes (the last axis varies fastest).
  ParameterGrid(std::vector<double> lo, std::vector<double> hi, std::vector<int> counts);

  [[nodiscard]] std::size_t size() const { return points_.size(); }
  [[nodiscard]] int axes() const { return static_cast<int>(counts_.size()); }
  [[nodiscard]] const Vector& point(std::size_t i) const { return points_.at(i); }
  [[nodiscard]] const std::vector<Vector>& points() const { return points_; }
  [[nodiscard]] bool training(std::size_t i) const { return training_.at(i) != 0; }
  [[nodiscard]] std::size_t training_count() const;
  /// Index of the grid point equal to mu (to 1e-12 relative), or -1.
  [[nodiscard]] long find(const Vector& mu) const;
  /// Corners in row-major order.
  [[nodiscard]] std::vector<std::size_t> corners() const;
  /// True when some coordinate sits on the domain edge.
  [[nodiscard]] bool on_boundary(std::size_t i) const;
  void mark(std::size_t i, bool on = true);

 private:
  std::vector<double> lo_, hi_;
  std::vector<int> counts_;
  std::vector<Vector> points_;
  std::vector<std::vector<int>> index_;
  std::vector<char> training_;
};

struct GreedySchedule {
  std::size_t target = 25;
  long period = 2000;                 // iterations between selections
  std::vector<std::size_t> initial;   // empty: the grid corners
};

struct GreedyHooks {
  std::function<SnapshotSet(const Vector& mu)> solve;
  std::function<void(const std::vector<SnapshotSet>&)> set_data;
  std::function<void(long iterations)> train;
  std::function<double(const Vector& mu)> score;
};

struct GreedyResult {
  std::vector<std::size_t> selected;  // grid indices in selection order
  std::vector<SnapshotSet> data;
  std::vector<std::vector<double>> scores;  // per round, NaN for training points
};

/// Adds the initial points, then alternates training for one period with
/// adding the highest-scoring non-training point until the target is met.
/// Training after the last selection is left to the caller.
GreedyResult greedy_sample(ParameterGrid& grid, const GreedySchedule& schedule, const GreedyHooks& hooks,
                           int threads = 1);

/// Runs fn(i) for i in [0, count) on up to `threads` workers.
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn);

struct EntropyReport {
  std::vector<Vector> mu;
  Vector t;
  Matrix S, dSdt;  // one row per mu
  Vector S_mean, S_std, dSdt_mean, dSdt_std;

  void write_csv(const std::filesystem::path& path) const;
  void write_summary_csv(const std::filesystem::path& path) const;
};

/// Entropy and its rate along predicted latent trajectories (x0s[i] at mus[i]).
EntropyReport entropy_report(const Model& m, const std::vector<Vector>& mus, const std::vector<Vector>& x0s,
                             const std::vector<double>& times, const IntegratorSpec& integrator, int threads = 1);

/// Heatmap rows (mu_1, mu_2, e_max_percent, is_training_point).
void write_heatmap_csv(const ParameterGrid& grid, const std::vector<double>& e_max, const std::filesystem::path& path);

}  // namespace trom
