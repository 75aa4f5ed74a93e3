// Full-order data: gas containers ODE, 1D Burgers and heat solvers, derivative
// estimation, subsampling and dataset files.
#pragma once

#include "thermorom/integrators.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace trom {

struct GridInfo {
  double dx = 0.0;
  double x0 = 0.0, x1 = 0.0;  // spatial domain, PDE data only
};

/// One trajectory: states are rows (time-major).
struct SnapshotSet {
  Vector mu;
  Vector times;
  Matrix states;       // n_t x N
  Matrix derivatives;  // n_t x N, or empty
  GridInfo grid;

  [[nodiscard]] Eigen::Index full_dim() const { return states.cols(); }
  [[nodiscard]] Eigen::Index steps() const { return states.rows(); }
  [[nodiscard]] bool has_derivatives() const { return derivatives.size() > 0; }
  [[nodiscard]] double dt() const;
  void validate() const;
};

// ---------------------------------------------------------------------------
// Gas containers

struct GasState {
  double q = 1.0, p = 0.0, S1 = 0.0, S2 = 0.0;
};

/// verbatim: dS2/dt = -(10/T1)(1/T1 - 1/T2), the default.
/// symmetric: dS2/dt = -(10/T2)(1/T1 - 1/T2), which conserves E1 + E2 + p^2/2.
enum class GasEntropyForm : std::uint8_t { verbatim, symmetric };

GasEntropyForm parse_gas_form(std::string_view name);

/// (dq, dp, dS1, dS2). Throws std::domain_error when q is outside (0, 2).
std::array<double, 4> gas_rhs(const GasState& s, GasEntropyForm form = GasEntropyForm::verbatim);
/// Internal energies (E1, E2); T_j = (2/3) E_j.
std::array<double, 2> gas_energies(const GasState& s);
double gas_total_energy(const GasState& s);

struct GasConfig {
  int count = 100;
  std::array<std::array<double, 2>, 4> box{{{0.2, 1.8}, {-1.0, 1.0}, {1.0, 3.0}, {1.0, 3.0}}};
  double t_end = 7.84;
  double dt = 0.02;
  IntegratorSpec integrator{Scheme::rkf45, 1e-3, 1e-10, 1e-12, 1000000};
  GasEntropyForm form = GasEntropyForm::verbatim;
  std::uint64_t seed = 0;
  int max_resamples = 1000;
};

/// Full state x = [q; p; S1; S2] over all trajectories (N = 4 count), sampled
/// every dt on [0, t_end]. Failed initial conditions are resampled and reported
/// through `log` when given.
SnapshotSet gas_generate(const GasConfig& cfg, const std::function<void(const std::string&)>& log = {});

// ---------------------------------------------------------------------------
// 1D PDEs on (x0, x1) x (0, t_end], periodic

struct PdeGrid {
  double x0 = -3.0, x1 = 3.0;
  double t_end = 2.0;
  int nx = 1001;  // grid points including the periodic duplicate endpoint
  int nt = 1001;  // time levels including t = 0
  void validate() const;
  [[nodiscard]] double dx() const { return (x1 - x0) / (nx - 1); }
  [[nodiscard]] double dt() const { return t_end / (nt - 1); }
};

struct GaussianIC {
  double alpha = 0.75, omega = 1.0;
};

/// u_t + u u_x = 0, implicit Euler with first-order upwind flux, Newton per step.
SnapshotSet burgers_solve(const GaussianIC& ic, const PdeGrid& grid = {});
/// Same solver from an arbitrary initial profile on the unique points (nx - 1 values).
Matrix burgers_solve_profile(const Vector& u0, const PdeGrid& grid);
/// One implicit-Euler upwind residual: (u_new - u_old)/dt + upwind(u_new u_x).
Vector burgers_residual(const Vector& u_new, const Vector& u_old, double dt, double dx);

/// u_t = u_xx, implicit Euler with the periodic central Laplacian.
SnapshotSet heat_solve(const GaussianIC& ic, const PdeGrid& grid = {});
Matrix heat_solve_profile(const Vector& u0, const PdeGrid& grid);
Vector heat_residual(const Vector& u_new, const Vector& u_old, double dt, double dx);

Vector gaussian_profile(const GaussianIC& ic, const PdeGrid& grid, bool include_endpoint);

/// Solves the periodic tridiagonal system with constant or varying bands:
/// lower[i] u[i-1] + diag[i] u[i] + upper[i] u[i+1] = rhs[i] (indices mod m).
Vector solve_cyclic_tridiagonal(const Vector& lower, const Vector& diag, const Vector& upper, const Vector& rhs);

// ---------------------------------------------------------------------------

enum class FdScheme : std::uint8_t { central, backward };

/// central: (x^{k+1} - x^{k-1}) / 2dt inside, one-sided at both ends.
/// backward: (x^k - x^{k-1}) / dt, forward difference at k = 0.
SnapshotSet fd_derivatives(const SnapshotSet& s, FdScheme scheme = FdScheme::central);

SnapshotSet subsample(const SnapshotSet& s, int space_stride, int time_stride);
/// Time window [begin, end) of the snapshot rows.
SnapshotSet slice_times(const SnapshotSet& s, Eigen::Index begin, Eigen::Index end);

void dataset_write(const std::vector<SnapshotSet>& sets, const std::filesystem::path& path);
std::vector<SnapshotSet> dataset_read(const std::filesystem::path& path);
void dataset_write_csv(const std::vector<SnapshotSet>& sets, const std::filesystem::path& path);

}  // namespace trom
