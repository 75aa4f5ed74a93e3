#include "thermorom/fom.hpp"

#include "thermorom/io.hpp"

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

namespace trom {

double SnapshotSet::dt() const {
  if (times.size() < 2) throw std::invalid_argument("snapshot set has fewer than two times");
  return times[1] - times[0];
}

void SnapshotSet::validate() const {
  require_dims(times.size() == states.rows(), "snapshot times vs states");
  if (has_derivatives())
    require_dims(derivatives.rows() == states.rows() && derivatives.cols() == states.cols(),
                 "snapshot derivatives vs states");
  for (Eigen::Index k = 1; k < times.size(); ++k)
    if (!(times[k] > times[k - 1])) throw std::invalid_argument("snapshot times must increase");
}

// ---------------------------------------------------------------------------
// Gas containers

GasEntropyForm parse_gas_form(std::string_view name) {
  if (name == "verbatim") return GasEntropyForm::verbatim;
  if (name == "symmetric") return GasEntropyForm::symmetric;
  throw std::invalid_argument("unknown gas entropy form '" + std::string(name) + "'");
}

std::array<double, 2> gas_energies(const GasState& s) {
  if (!(s.q > 0.0 && s.q < 2.0)) throw std::domain_error("gas containers: wall position outside (0, 2)");
  // E_j = exp(2 S_j / 3) / (q + 2(j-1)(1-q))^{2/3}; the second volume is 2 - q.
  const double E1 = std::exp(2.0 * s.S1 / 3.0) / std::cbrt(s.q * s.q);
  const double v2 = 2.0 - s.q;
  const double E2 = std::exp(2.0 * s.S2 / 3.0) / std::cbrt(v2 * v2);
  return {E1, E2};
}

double gas_total_energy(const GasState& s) {
  const auto [E1, E2] = gas_energies(s);
  return E1 + E2 + 0.5 * s.p * s.p;
}

std::array<double, 4> gas_rhs(const GasState& s, GasEntropyForm form) {
  const auto [E1, E2] = gas_energies(s);
  const double T1 = 2.0 * E1 / 3.0;
  const double T2 = 2.0 * E2 / 3.0;
  const double dp = 2.0 / 3.0 * (E1 / s.q - E2 / (2.0 - s.q));
  const double gap = 1.0 / T1 - 1.0 / T2;
  const double dS1 = 10.0 / T1 * gap;
  const double dS2 = form == GasEntropyForm::verbatim ? -10.0 / T1 * gap : -10.0 / T2 * gap;
  return {s.p, dp, dS1, dS2};
}

SnapshotSet gas_generate(const GasConfig& cfg, const std::function<void(const std::string&)>& log) {
  if (cfg.count <= 0) throw std::invalid_argument("gas_generate: count must be positive");
  if (!(cfg.dt > 0.0) || !(cfg.t_end > 0.0)) throw std::invalid_argument("gas_generate: bad time grid");
  for (const auto& b : cfg.box)
    if (!(b[1] >= b[0])) throw std::invalid_argument("gas_generate: invalid initial box");
  const auto steps = static_cast<Eigen::Index>(std::llround(cfg.t_end / cfg.dt));
  if (std::abs(static_cast<double>(steps) * cfg.dt - cfg.t_end) > 1e-9 * cfg.t_end)
    throw std::invalid_argument("gas_generate: t_end is not a multiple of dt");

  SnapshotSet out;
  out.times.resize(steps + 1);
  for (Eigen::Index k = 0; k <= steps; ++k) out.times[k] = static_cast<double>(k) * cfg.dt;
  std::vector<double> times(out.times.data(), out.times.data() + out.times.size());
  const Eigen::Index c = cfg.count;
  out.states.resize(steps + 1, 4 * c);

  std::mt19937_64 rng(cfg.seed);
  const BatchRhs f = [&cfg](double, const Matrix& z) {
    Matrix dz(z.rows(), 4);
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      try {
        const auto d = gas_rhs({z(r, 0), z(r, 1), z(r, 2), z(r, 3)}, cfg.form);
        for (int i = 0; i < 4; ++i) dz(r, i) = d[static_cast<std::size_t>(i)];
      } catch (const std::domain_error&) {
        throw NumericalError("gas state left the physical domain");
      }
    }
    return dz;
  };
  int resamples = 0;
  for (Eigen::Index i = 0; i < c; ++i) {
    for (;;) {
      Matrix z0(1, 4);
      for (int d = 0; d < 4; ++d) {
        std::uniform_real_distribution<double> u(cfg.box[static_cast<std::size_t>(d)][0],
                                                  cfg.box[static_cast<std::size_t>(d)][1]);
        z0(0, d) = u(rng);
      }
      try {
        const auto traj = integrate_at(f, z0, times, cfg.integrator);
        for (Eigen::Index k = 0; k <= steps; ++k)
          for (int d = 0; d < 4; ++d) out.states(k, d * c + i) = traj[static_cast<std::size_t>(k)](0, d);
        break;
      } catch (const NumericalError& e) {
        if (++resamples > cfg.max_resamples) throw NumericalError("gas_generate: too many failed initial conditions");
        if (log) {
          std::ostringstream os;
          os << "gas trajectory " << i << " resampled: " << e.what() << " (q0=" << z0(0, 0) << ", p0=" << z0(0, 1)
             << ")";
          log(os.str());
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Periodic 1D solvers

void PdeGrid::validate() const {
  if (nx < 4 || nt < 2) throw std::invalid_argument("PDE grid needs nx >= 4 and nt >= 2");
  if (!(x1 > x0) || !(t_end > 0.0)) throw std::invalid_argument("PDE grid has an empty domain");
}

Vector gaussian_profile(const GaussianIC& ic, const PdeGrid& grid, bool include_endpoint) {
  const int m = include_endpoint ? grid.nx : grid.nx - 1;
  Vector u(m);
  const double dx = grid.dx();
  for (int j = 0; j < m; ++j) {
    const double x = grid.x0 + j * dx;
    u[j] = ic.alpha * std::exp(-x * x / (2.0 * ic.omega * ic.omega));
  }
  return u;
}

Vector solve_cyclic_tridiagonal(const Vector& lower, const Vector& diag, const Vector& upper, const Vector& rhs) {
  const Eigen::Index m = diag.size();
  require_dims(lower.size() == m && upper.size() == m && rhs.size() == m && m >= 3, "cyclic tridiagonal");
  // Sherman-Morrison on top of the Thomas algorithm.
  const double alpha = upper[m - 1];  // couples row m-1 to u[0]
  const double beta = lower[0];       // couples row 0 to u[m-1]
  const double gamma = -diag[0];
  Vector b = diag;
  b[0] -= gamma;
  b[m - 1] -= alpha * beta / gamma;

  auto thomas = [&](const Vector& r) {
    Vector c(m), d(m), x(m);
    c[0] = upper[0] / b[0];
    d[0] = r[0] / b[0];
    for (Eigen::Index i = 1; i < m; ++i) {
      const double den = b[i] - lower[i] * c[i - 1];
      c[i] = i + 1 < m ? upper[i] / den : 0.0;
      d[i] = (r[i] - lower[i] * d[i - 1]) / den;
    }
    x[m - 1] = d[m - 1];
    for (Eigen::Index i = m - 2; i >= 0; --i) x[i] = d[i] - c[i] * x[i + 1];
    return x;
  };
  Vector x = thomas(rhs);
  Vector u = Vector::Zero(m);
  u[0] = gamma;
  u[m - 1] = alpha;
  const Vector z = thomas(u);
  const double fact = (x[0] + beta * x[m - 1] / gamma) / (1.0 + z[0] + beta * z[m - 1] / gamma);
  x -= fact * z;
  if (!x.allFinite()) throw NumericalError("singular periodic system");
  return x;
}

namespace {

// Upwind convective term u u_x on the unique periodic points.
Vector upwind_flux(const Vector& u, double dx) {
  const Eigen::Index m = u.size();
  Vector f(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double um = u[(j + m - 1) % m], up = u[(j + 1) % m];
    f[j] = u[j] >= 0.0 ? u[j] * (u[j] - um) / dx : u[j] * (up - u[j]) / dx;
  }
  return f;
}

// One implicit Euler step; false when Newton does not converge.
bool burgers_step(const Vector& u_old, double dt, double dx, Vector& u) {
  const Eigen::Index m = u_old.size();
  const double c = dt / dx;
  u = u_old;
  Vector lo(m), di(m), up(m);
  for (int it = 0; it < 50; ++it) {
    const Vector R = (u - u_old) + dt * upwind_flux(u, dx);
    if (!R.allFinite()) return false;
    if (R.cwiseAbs().maxCoeff() <= 1e-10) return true;
    for (Eigen::Index j = 0; j < m; ++j) {
      const double um = u[(j + m - 1) % m], uu = u[(j + 1) % m];
      if (u[j] >= 0.0) {
        di[j] = 1.0 + c * (2.0 * u[j] - um);
        lo[j] = -c * u[j];
        up[j] = 0.0;
      } else {
        di[j] = 1.0 + c * (uu - 2.0 * u[j]);
        lo[j] = 0.0;
        up[j] = c * u[j];
      }
    }
    try {
      u -= solve_cyclic_tridiagonal(lo, di, up, R);
    } catch (const NumericalError&) {
      return false;
    }
  }
  const Vector R = (u - u_old) + dt * upwind_flux(u, dx);
  return R.allFinite() && R.cwiseAbs().maxCoeff() <= 1e-10;
}

void burgers_advance(const Vector& u_old, double dt, double dx, double t, int depth, Vector& u) {
  if (burgers_step(u_old, dt, dx, u)) return;
  if (depth >= 8) {
    std::ostringstream os;
    os << "Burgers Newton iteration failed at t=" << t;
    throw NumericalError(os.str());
  }
  Vector mid;
  burgers_advance(u_old, 0.5 * dt, dx, t, depth + 1, mid);
  burgers_advance(mid, 0.5 * dt, dx, t + 0.5 * dt, depth + 1, u);
}

SnapshotSet wrap_profile(const Matrix& unique, const PdeGrid& grid, const GaussianIC& ic) {
  SnapshotSet s;
  s.mu = Vector(2);
  s.mu << ic.alpha, ic.omega;
  s.times = Vector::LinSpaced(grid.nt, 0.0, grid.t_end);
  s.states.resize(unique.rows(), unique.cols() + 1);
  s.states.leftCols(unique.cols()) = unique;
  s.states.col(unique.cols()) = unique.col(0);
  s.grid = GridInfo{grid.dx(), grid.x0, grid.x1};
  return s;
}

}  // namespace

Vector burgers_residual(const Vector& u_new, const Vector& u_old, double dt, double dx) {
  require_dims(u_new.size() == u_old.size(), "burgers residual");
  return (u_new - u_old) / dt + upwind_flux(u_new, dx);
}

Matrix burgers_solve_profile(const Vector& u0, const PdeGrid& grid) {
  grid.validate();
  require_dims(u0.size() == grid.nx - 1, "burgers initial profile");
  Matrix out(grid.nt, u0.size());
  out.row(0) = u0.transpose();
  Vector u = u0, next;
  const double dt = grid.dt(), dx = grid.dx();
  for (int k = 1; k < grid.nt; ++k) {
    burgers_advance(u, dt, dx, (k - 1) * dt, 0, next);
    u.swap(next);
    out.row(k) = u.transpose();
  }
  return out;
}

SnapshotSet burgers_solve(const GaussianIC& ic, const PdeGrid& grid) {
  return wrap_profile(burgers_solve_profile(gaussian_profile(ic, grid, false), grid), grid, ic);
}

Vector heat_residual(const Vector& u_new, const Vector& u_old, double dt, double dx) {
  require_dims(u_new.size() == u_old.size(), "heat residual");
  const Eigen::Index m = u_new.size();
  Vector r(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double lap = (u_new[(j + m - 1) % m] - 2.0 * u_new[j] + u_new[(j + 1) % m]) / (dx * dx);
    r[j] = (u_new[j] - u_old[j]) / dt - lap;
  }
  return r;
}

Matrix heat_solve_profile(const Vector& u0, const PdeGrid& grid) {
  grid.validate();
  require_dims(u0.size() == grid.nx - 1, "heat initial profile");
  const Eigen::Index m = u0.size();
  const double r = grid.dt() / (grid.dx() * grid.dx());
  const Vector off = Vector::Constant(m, -r), diag = Vector::Constant(m, 1.0 + 2.0 * r);
  Matrix out(grid.nt, m);
  out.row(0) = u0.transpose();
  Vector u = u0;
  for (int k = 1; k < grid.nt; ++k) {
    u = solve_cyclic_tridiagonal(off, diag, off, u);
    out.row(k) = u.transpose();
  }
  return out;
}

SnapshotSet heat_solve(const GaussianIC& ic, const PdeGrid& grid) {
  return wrap_profile(heat_solve_profile(gaussian_profile(ic, grid, false), grid), grid, ic);
}

// ---------------------------------------------------------------------------

SnapshotSet fd_derivatives(const SnapshotSet& s, FdScheme scheme) {
  s.validate();
  const Eigen::Index K = s.steps();
  if (K < 3) throw std::invalid_argument("fd_derivatives needs at least 3 snapshots");
  const double dt = s.dt();
  for (Eigen::Index k = 1; k < K; ++k)
    if (std::abs((s.times[k] - s.times[k - 1]) - dt) > 1e-9 * std::max(1.0, std::abs(dt)))
      throw std::invalid_argument("fd_derivatives needs a uniform time grid");
  SnapshotSet out = s;
  out.derivatives.resize(K, s.full_dim());
  if (scheme == FdScheme::central) {
    out.derivatives.row(0) = (s.states.row(1) - s.states.row(0)) / dt;
    for (Eigen::Index k = 1; k + 1 < K; ++k)
      out.derivatives.row(k) = (s.states.row(k + 1) - s.states.row(k - 1)) / (2.0 * dt);
    out.derivatives.row(K - 1) = (s.states.row(K - 1) - s.states.row(K - 2)) / dt;
  } else {
    out.derivatives.row(0) = (s.states.row(1) - s.states.row(0)) / dt;
    for (Eigen::Index k = 1; k < K; ++k) out.derivatives.row(k) = (s.states.row(k) - s.states.row(k - 1)) / dt;
  }
  return out;
}

SnapshotSet subsample(const SnapshotSet& s, int space_stride, int time_stride) {
  s.validate();
  if (space_stride < 1 || time_stride < 1) throw std::invalid_argument("subsample strides must be positive");
  if ((s.full_dim() - 1) % space_stride != 0) throw std::invalid_argument("space stride does not divide the grid");
  if ((s.steps() - 1) % time_stride != 0) throw std::invalid_argument("time stride does not divide the time grid");
  const Eigen::Index nx = (s.full_dim() - 1) / space_stride + 1;
  const Eigen::Index nt = (s.steps() - 1) / time_stride + 1;
  SnapshotSet out;
  out.mu = s.mu;
  out.grid = s.grid;
  out.grid.dx = s.grid.dx * space_stride;
  out.times.resize(nt);
  out.states.resize(nt, nx);
  if (s.has_derivatives()) out.derivatives.resize(nt, nx);
  for (Eigen::Index k = 0; k < nt; ++k) {
    out.times[k] = s.times[k * time_stride];
    for (Eigen::Index j = 0; j < nx; ++j) {
      out.states(k, j) = s.states(k * time_stride, j * space_stride);
      if (s.has_derivatives()) out.derivatives(k, j) = s.derivatives(k * time_stride, j * space_stride);
    }
  }
  return out;
}

SnapshotSet slice_times(const SnapshotSet& s, Eigen::Index begin, Eigen::Index end) {
  if (begin < 0 || end > s.steps() || begin >= end) throw std::invalid_argument("slice_times: bad range");
  SnapshotSet out;
  out.mu = s.mu;
  out.grid = s.grid;
  out.times = s.times.segment(begin, end - begin);
  out.states = s.states.middleRows(begin, end - begin);
  if (s.has_derivatives()) out.derivatives = s.derivatives.middleRows(begin, end - begin);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset file: "TROMDATA", u32 version, u64 set count, then per set
// u64 N, u64 n_t, u64 p, u8 flags (bit 0: derivatives), f64 dx, x0, x1,
// followed by mu, times, states (row-major, time-major) and derivatives.

namespace {
constexpr char kDataMagic[8] = {'T', 'R', 'O', 'M', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kDataVersion = 1;
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}  // namespace

void dataset_write(const std::vector<SnapshotSet>& sets, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.bytes(kDataMagic, sizeof kDataMagic);
  w.u32(kDataVersion);
  w.u64(sets.size());
  for (const SnapshotSet& s : sets) {
    s.validate();
    w.u64(static_cast<std::uint64_t>(s.full_dim()));
    w.u64(static_cast<std::uint64_t>(s.steps()));
    w.u64(static_cast<std::uint64_t>(s.mu.size()));
    w.pod<std::uint8_t>(s.has_derivatives() ? 1 : 0);
    w.f64(s.grid.dx);
    w.f64(s.grid.x0);
    w.f64(s.grid.x1);
    w.f64s(s.mu.data(), static_cast<std::size_t>(s.mu.size()));
    w.f64s(s.times.data(), static_cast<std::size_t>(s.times.size()));
    const RowMajor st = s.states;
    w.f64s(st.data(), static_cast<std::size_t>(st.size()));
    if (s.has_derivatives()) {
      const RowMajor d = s.derivatives;
      w.f64s(d.data(), static_cast<std::size_t>(d.size()));
    }
  }
  w.close();
}

std::vector<SnapshotSet> dataset_read(const std::filesystem::path& path) {
  BinaryReader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kDataMagic, sizeof magic) != 0) throw FormatError("malformed header: not a dataset file");
  if (r.u32() != kDataVersion) throw FormatError("malformed header: unsupported dataset version");
  const std::uint64_t count = r.u64();
  std::vector<SnapshotSet> sets;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t N = r.u64(), nt = r.u64(), p = r.u64();
    const auto flags = r.pod<std::uint8_t>();
    if (flags > 1) throw FormatError("malformed header: unknown dataset flags");
    const std::uint64_t blocks = p + nt + nt * N * (flags ? 2 : 1);
    if (N == 0 || nt == 0 || (N > 0 && nt > (~0ULL) / 16 / N)) throw FormatError("shape mismatch in dataset header");
    r.expect_remaining(3 * sizeof(double) + blocks * sizeof(double));
    SnapshotSet s;
    s.grid.dx = r.f64();
    s.grid.x0 = r.f64();
    s.grid.x1 = r.f64();
    s.mu.resize(static_cast<Eigen::Index>(p));
    r.f64s(s.mu.data(), p);
    s.times.resize(static_cast<Eigen::Index>(nt));
    r.f64s(s.times.data(), nt);
    RowMajor st(static_cast<Eigen::Index>(nt), static_cast<Eigen::Index>(N));
    r.f64s(st.data(), nt * N);
    s.states = st;
    if (flags) {
      r.f64s(st.data(), nt * N);
      s.derivatives = st;
    }
    s.validate();
    sets.push_back(std::move(s));
  }
  if (!r.at_end()) throw FormatError("shape mismatch: trailing bytes in dataset");
  return sets;
}

void dataset_write_csv(const std::vector<SnapshotSet>& sets, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  if (sets.empty()) return;
  const Eigen::Index N = sets[0].full_dim(), p = sets[0].mu.size();
  out << "set,kind,k,t";
  for (Eigen::Index i = 0; i < p; ++i) out << ",mu" << i;
  for (Eigen::Index j = 0; j < N; ++j) out << ",x" << j;
  out << '\n';
  out.precision(17);
  for (std::size_t s = 0; s < sets.size(); ++s) {
    const SnapshotSet& set = sets[s];
    require_dims(set.full_dim() == N && set.mu.size() == p, "csv export needs congruent sets");
    auto rows = [&](const char* kind, const Matrix& m) {
      for (Eigen::Index k = 0; k < m.rows(); ++k) {
        out << s << ',' << kind << ',' << k << ',' << set.times[k];
        for (Eigen::Index i = 0; i < p; ++i) out << ',' << set.mu[i];
        for (Eigen::Index j = 0; j < N; ++j) out << ',' << m(k, j);
        out << '\n';
      }
    };
    rows("state", set.states);
    if (set.has_derivatives()) rows("derivative", set.derivatives);
  }
}

}  // namespace trom
