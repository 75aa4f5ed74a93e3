#include "thermorom/integrators.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace trom {

Scheme parse_scheme(std::string_view name) {
  if (name == "rk4" || name == "rk4_fixed") return Scheme::rk4;
  if (name == "rkf45" || name == "rk45" || name == "rkf45_adaptive") return Scheme::rkf45;
  if (name == "rk23" || name == "rk23_adaptive") return Scheme::rk23;
  throw std::invalid_argument("unknown integrator '" + std::string(name) + "'");
}

std::string_view scheme_name(Scheme s) {
  switch (s) {
    case Scheme::rk4: return "rk4";
    case Scheme::rkf45: return "rkf45";
    case Scheme::rk23: return "rk23";
  }
  return "rk4";
}

void IntegratorSpec::validate() const {
  if (!(dt > 0.0)) throw std::invalid_argument("integrator step must be positive");
  if (!(rtol > 0.0) || !(atol > 0.0)) throw std::invalid_argument("integrator tolerances must be positive");
  if (max_steps <= 0) throw std::invalid_argument("integrator max_steps must be positive");
}

namespace {

[[noreturn]] void blow_up(double t) {
  std::ostringstream os;
  os << "integration blow-up at t=" << t;
  throw NumericalError(os.str());
}

Matrix eval(const BatchRhs& f, double t, const Matrix& z) {
  Matrix k;
  try {
    k = f(t, z);
  } catch (const NumericalError&) {
    blow_up(t);
  }
  if (k.rows() != z.rows() || k.cols() != z.cols()) throw DimensionError("dimension mismatch: rhs output");
  if (!k.allFinite()) blow_up(t);
  return k;
}

int order(Scheme s) { return s == Scheme::rk4 ? 4 : (s == Scheme::rkf45 ? 4 : 3); }

// Largest per-row ratio of error to tolerance; <= 1 means accept.
double error_ratio(const Matrix& err, const Matrix& z, double rtol, double atol) {
  double worst = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double tol = std::max(rtol * z.row(r).norm(), atol);
    worst = std::max(worst, err.row(r).norm() / tol);
  }
  return worst;
}

BatchRhs lift(const Rhs& f) {
  return [&f](double t, const Matrix& z) { return Matrix(f(t, z.row(0).transpose()).transpose()); };
}

}  // namespace

Matrix step(const BatchRhs& f, const Matrix& z, double t, double h, Scheme scheme, Matrix* err) {
  switch (scheme) {
    case Scheme::rk4: {
      const Matrix k1 = eval(f, t, z);
      const Matrix k2 = eval(f, t + 0.5 * h, z + 0.5 * h * k1);
      const Matrix k3 = eval(f, t + 0.5 * h, z + 0.5 * h * k2);
      const Matrix k4 = eval(f, t + h, z + h * k3);
      Matrix out = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      if (err) err->setZero(z.rows(), z.cols());
      if (!out.allFinite()) blow_up(t + h);
      return out;
    }
    case Scheme::rkf45: {
      const Matrix k1 = eval(f, t, z);
      const Matrix k2 = eval(f, t + h / 4.0, z + h * (k1 / 4.0));
      const Matrix k3 = eval(f, t + 3.0 * h / 8.0, z + h * (3.0 / 32.0 * k1 + 9.0 / 32.0 * k2));
      const Matrix k4 = eval(f, t + 12.0 * h / 13.0,
                             z + h * (1932.0 / 2197.0 * k1 - 7200.0 / 2197.0 * k2 + 7296.0 / 2197.0 * k3));
      const Matrix k5 = eval(f, t + h,
                             z + h * (439.0 / 216.0 * k1 - 8.0 * k2 + 3680.0 / 513.0 * k3 - 845.0 / 4104.0 * k4));
      const Matrix k6 = eval(f, t + h / 2.0,
                             z + h * (-8.0 / 27.0 * k1 + 2.0 * k2 - 3544.0 / 2565.0 * k3 + 1859.0 / 4104.0 * k4 -
                                      11.0 / 40.0 * k5));
      Matrix y4 = z + h * (25.0 / 216.0 * k1 + 1408.0 / 2565.0 * k3 + 2197.0 / 4104.0 * k4 - k5 / 5.0);
      if (err) {
        const Matrix y5 = z + h * (16.0 / 135.0 * k1 + 6656.0 / 12825.0 * k3 + 28561.0 / 56430.0 * k4 -
                                   9.0 / 50.0 * k5 + 2.0 / 55.0 * k6);
        *err = y5 - y4;
      }
      if (!y4.allFinite()) blow_up(t + h);
      return y4;
    }
    case Scheme::rk23: {
      const Matrix k1 = eval(f, t, z);
      const Matrix k2 = eval(f, t + 0.5 * h, z + 0.5 * h * k1);
      const Matrix k3 = eval(f, t + 0.75 * h, z + 0.75 * h * k2);
      Matrix y3 = z + h * (2.0 / 9.0 * k1 + 1.0 / 3.0 * k2 + 4.0 / 9.0 * k3);
      if (err) {
        const Matrix k4 = eval(f, t + h, y3);
        const Matrix y2 = z + h * (7.0 / 24.0 * k1 + 0.25 * k2 + 1.0 / 3.0 * k3 + 0.125 * k4);
        *err = y3 - y2;
      }
      if (!y3.allFinite()) blow_up(t + h);
      return y3;
    }
  }
  return z;
}

Vector step(const Rhs& f, const Vector& z, double t, double h, Scheme scheme) {
  return step(lift(f), Matrix(z.transpose()), t, h, scheme).row(0).transpose();
}

namespace {

// Advances `z` from t to t_end; calls `record` after each accepted step.
// `h` carries the adaptive step size between calls.
template <class Record>
void advance(const BatchRhs& f, Matrix& z, double t, double t_end, double& h, const IntegratorSpec& spec,
             int& steps, Record&& record) {
  const double span = t_end - t;
  if (span <= 0.0) return;
  if (spec.scheme == Scheme::rk4) {
    const auto count = static_cast<long>(std::ceil(span / spec.dt * (1.0 - 1e-12)));
    const double hh = span / static_cast<double>(std::max(1L, count));
    for (long i = 0; i < std::max(1L, count); ++i) {
      if (++steps > spec.max_steps) throw NumericalError("integration step count exceeded");
      const double ti = t + static_cast<double>(i) * hh;
      z = step(f, z, ti, hh, Scheme::rk4);
      record(i + 1 == std::max(1L, count) ? t_end : ti + hh, z);
    }
    return;
  }
  const double p = order(spec.scheme);
  Matrix err;
  while (t < t_end) {
    if (++steps > spec.max_steps) throw NumericalError("integration step count exceeded");
    const bool last = t + h >= t_end - 1e-12 * std::max(1.0, std::abs(t_end));
    const double hh = last ? t_end - t : h;
    if (hh <= 1e-14 * std::max(1.0, std::abs(t))) {
      std::ostringstream os;
      os << "integration step size underflow at t=" << t;
      throw NumericalError(os.str());
    }
    Matrix next;
    double ratio;
    try {
      next = step(f, z, t, hh, spec.scheme, &err);
      ratio = error_ratio(err, z, spec.rtol, spec.atol);
    } catch (const NumericalError&) {
      // A blown-up trial step is retried smaller before giving up.
      h = 0.25 * hh;
      if (h <= 1e-14 * std::max(1.0, std::abs(t))) blow_up(t);
      continue;
    }
    const double factor = ratio == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(ratio, -1.0 / (p + 1.0)), 0.2, 5.0);
    if (ratio <= 1.0) {
      t = last ? t_end : t + hh;
      z = std::move(next);
      record(t, z);
      if (!last || factor < 1.0) h = hh * factor;
    } else {
      h = hh * factor;
    }
  }
}

}  // namespace

Trajectory integrate(const BatchRhs& f, const Matrix& z0, double t0, double t1, const IntegratorSpec& spec) {
  spec.validate();
  if (!(t1 > t0)) throw std::invalid_argument("integrate: t1 must exceed t0");
  Trajectory out;
  out.t.push_back(t0);
  out.z.push_back(z0);
  Matrix z = z0;
  double h = spec.dt;
  int steps = 0;
  advance(f, z, t0, t1, h, spec, steps, [&](double t, const Matrix& zz) {
    out.t.push_back(t);
    out.z.push_back(zz);
  });
  return out;
}

Trajectory integrate(const Rhs& f, const Vector& z0, double t0, double t1, const IntegratorSpec& spec) {
  return integrate(lift(f), Matrix(z0.transpose()), t0, t1, spec);
}

std::vector<Matrix> integrate_at(const BatchRhs& f, const Matrix& z0, const std::vector<double>& times,
                                 const IntegratorSpec& spec) {
  spec.validate();
  if (times.empty()) throw std::invalid_argument("integrate_at: no output times");
  std::vector<Matrix> out{z0};
  Matrix z = z0;
  double h = spec.dt;
  int steps = 0;
  for (std::size_t k = 1; k < times.size(); ++k) {
    if (!(times[k] > times[k - 1])) throw std::invalid_argument("integrate_at: times must increase");
    advance(f, z, times[k - 1], times[k], h, spec, steps, [](double, const Matrix&) {});
    out.push_back(z);
  }
  return out;
}

ad::Var rk4_graph(ad::Graph& g, const std::function<ad::Var(ad::Var)>& F, ad::Var z, double h, int substeps) {
  if (substeps < 1) throw std::invalid_argument("rk4 substeps must be positive");
  const double hs = h / substeps;
  for (int s = 0; s < substeps; ++s) {
    const ad::Var k1 = F(z);
    const ad::Var k2 = F(g.add(z, g.scale(k1, 0.5 * hs)));
    const ad::Var k3 = F(g.add(z, g.scale(k2, 0.5 * hs)));
    const ad::Var k4 = F(g.add(z, g.scale(k3, hs)));
    const ad::Var incr = g.add(g.add(k1, k4), g.scale(g.add(k2, k3), 2.0));
    z = g.add(z, g.scale(incr, hs / 6.0));
  }
  return z;
}

}  // namespace trom
