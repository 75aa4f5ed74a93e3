// Explicit Runge-Kutta integration of latent ODEs.
#pragma once

#include "thermorom/autodiff.hpp"

#include <functional>
#include <vector>

namespace trom {

enum class Scheme : std::uint8_t { rk4, rkf45, rk23 };

Scheme parse_scheme(std::string_view name);
std::string_view scheme_name(Scheme s);

struct IntegratorSpec {
  Scheme scheme = Scheme::rk4;
  double dt = 1e-2;  // fixed step, and the initial trial step for adaptive schemes
  double rtol = 1e-6;
  double atol = 1e-9;
  int max_steps = 1000000;

  void validate() const;
};

/// Right-hand side on a batch of states: rows are independent systems.
using BatchRhs = std::function<Matrix(double t, const Matrix& z)>;
using Rhs = std::function<Vector(double t, const Vector& z)>;

/// One explicit step of the scheme; for embedded pairs `err` receives the
/// difference between the two solutions (may be null).
Matrix step(const BatchRhs& f, const Matrix& z, double t, double h, Scheme scheme, Matrix* err = nullptr);
Vector step(const Rhs& f, const Vector& z, double t, double h, Scheme scheme);

struct Trajectory {
  std::vector<double> t;
  std::vector<Matrix> z;  // z[k] is the batch state at t[k]
};

/// Integrates from t0 to t1 recording every accepted step (both endpoints included).
Trajectory integrate(const BatchRhs& f, const Matrix& z0, double t0, double t1, const IntegratorSpec& spec);
Trajectory integrate(const Rhs& f, const Vector& z0, double t0, double t1, const IntegratorSpec& spec);

/// States at the requested (increasing) times; times[0] is the initial time.
/// Fixed-step rk4 takes ceil(interval/dt) equal steps per interval.
std::vector<Matrix> integrate_at(const BatchRhs& f, const Matrix& z0, const std::vector<double>& times,
                                 const IntegratorSpec& spec);

/// RK4 steps recorded on the tape (differentiable in everything F depends on).
ad::Var rk4_graph(ad::Graph& g, const std::function<ad::Var(ad::Var)>& F, ad::Var z, double h, int substeps = 1);

}  // namespace trom
