#include "thermorom/dynamics.hpp"

#include <cmath>

namespace trom {

DynamicsKind parse_dynamics_kind(std::string_view name) {
  if (name == "gfinn" || name == "tlasdi-gfinn" || name == "tlasdi") return DynamicsKind::gfinn;
  if (name == "spnn") return DynamicsKind::spnn;
  if (name == "fnn" || name == "vanilla-fnn") return DynamicsKind::fnn;
  throw std::invalid_argument("unknown dynamics model '" + std::string(name) + "'");
}

std::string_view dynamics_kind_name(DynamicsKind kind) {
  switch (kind) {
    case DynamicsKind::gfinn: return "gfinn";
    case DynamicsKind::spnn: return "spnn";
    case DynamicsKind::fnn: return "fnn";
  }
  return "gfinn";
}

Matrix q_matrix(const Vector& grad_g, const std::vector<Matrix>& A) {
  const Eigen::Index n = grad_g.size();
  Matrix Q(static_cast<Eigen::Index>(A.size()), n);
  for (std::size_t j = 0; j < A.size(); ++j) {
    require_dims(A[j].rows() == n && A[j].cols() == n, "q_matrix basis");
    Q.row(static_cast<Eigen::Index>(j)) = (A[j] * grad_g).transpose();
  }
  return Q;
}

std::vector<Matrix> skew_basis(const std::vector<Matrix>& B) {
  std::vector<Matrix> A;
  A.reserve(B.size());
  for (const Matrix& b : B) A.emplace_back(b - b.transpose());
  return A;
}

// Index maps for the batched small-matrix products. Rows of every operand are
// samples; per-sample matrices are stored row-major in the columns.
struct Dynamics::Indices {
  using Ptr = std::shared_ptr<const std::vector<int>>;
  Ptr kn_col, kn_row;  // j*n+a -> a, j*n+a -> j
  Ptr mm_col, mm_row;  // j*m+k -> k, j*m+k -> j
  Ptr mm_T;            // j*m+k -> k*m+j
  Ptr basis_T;         // per-block transpose of the K x n x n stack
};

namespace {

std::shared_ptr<const std::vector<int>> make_index(int size, const std::function<int(int)>& f) {
  auto v = std::make_shared<std::vector<int>>(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) (*v)[static_cast<std::size_t>(i)] = f(i);
  return v;
}

MlpSpec net_spec(int in, const std::vector<int>& hidden, int out, Activation act) {
  MlpSpec s;
  s.widths.push_back(in);
  s.widths.insert(s.widths.end(), hidden.begin(), hidden.end());
  s.widths.push_back(out);
  s.activation = act;
  return s;
}

}  // namespace

Dynamics::Dynamics(DynamicsSpec spec, ParamVector& params) : spec_(std::move(spec)) {
  const int n = spec_.latent;
  if (n <= 0) throw std::invalid_argument("latent dimension must be positive");
  const int K = spec_.basis_size();
  offset_ = params.size();
  const Activation act = spec_.activation;
  switch (spec_.kind) {
    case DynamicsKind::gfinn:
      energy_ = Mlp(net_spec(n, spec_.hidden, 1, act), params, "dyn.E");
      entropy_ = Mlp(net_spec(n, spec_.hidden, 1, act), params, "dyn.S");
      mat_a_ = Mlp(net_spec(n, spec_.hidden, K * K, act), params, "dyn.U");
      mat_b_ = Mlp(net_spec(n, spec_.hidden, K * K, act), params, "dyn.D");
      basis_l_ = static_cast<int>(params.add_segment("dyn.BL", static_cast<Eigen::Index>(K) * n, n));
      basis_m_ = spec_.shared_basis
                     ? basis_l_
                     : static_cast<int>(params.add_segment("dyn.BM", static_cast<Eigen::Index>(K) * n, n));
      break;
    case DynamicsKind::spnn:
      energy_ = Mlp(net_spec(n, spec_.hidden, 1, act), params, "dyn.E");
      entropy_ = Mlp(net_spec(n, spec_.hidden, 1, act), params, "dyn.S");
      mat_a_ = Mlp(net_spec(n, spec_.hidden, n * n, act), params, "dyn.L");
      mat_b_ = Mlp(net_spec(n, spec_.hidden, n * n, act), params, "dyn.D");
      break;
    case DynamicsKind::fnn:
      fnn_ = Mlp(net_spec(n, spec_.hidden, n, act), params, "dyn.F");
      break;
  }
  size_ = params.size() - offset_;

  const int m = spec_.kind == DynamicsKind::gfinn ? K : n;
  auto idx = std::make_shared<Indices>();
  idx->kn_col = make_index(K * n, [n](int i) { return i % n; });
  idx->kn_row = make_index(K * n, [n](int i) { return i / n; });
  idx->mm_col = make_index(m * m, [m](int i) { return i % m; });
  idx->mm_row = make_index(m * m, [m](int i) { return i / m; });
  idx->mm_T = make_index(m * m, [m](int i) { return (i % m) * m + i / m; });
  idx->basis_T = make_index(K * n * n, [n](int i) {
    const int j = i / (n * n), a = (i / n) % n, b = i % n;
    return (j * n + b) * n + a;
  });
  idx_ = std::move(idx);
}

void Dynamics::init(ParamVector& params, std::mt19937_64& rng) const {
  for (const Mlp* net : {&energy_, &entropy_, &mat_a_, &mat_b_, &fnn_})
    if (net->registered()) net->init(params, rng);
  if (spec_.kind == DynamicsKind::gfinn) {
    std::uniform_real_distribution<double> u(-1.0 / std::sqrt(spec_.latent), 1.0 / std::sqrt(spec_.latent));
    for (int seg : {basis_l_, basis_m_}) {
      const auto& s = params.segments()[static_cast<std::size_t>(seg)];
      for (Eigen::Index k = 0; k < s.size(); ++k) params.values()[s.offset + k] = u(rng);
      if (spec_.shared_basis) break;
    }
  }
}

Var Dynamics::skew_stack(Graph& g, Var B) const {
  const Eigen::Index rows = B.rows(), cols = B.cols();
  const Var flat = g.reshape(B, 1, rows * cols);
  return g.sub(B, g.reshape(g.gather_cols(flat, idx_->basis_T), rows, cols));
}

Var Dynamics::qv(Graph& g, Var P, Var v) const {
  return g.scatter_cols(g.mul(P, g.gather_cols(v, idx_->kn_col)), idx_->kn_row, spec_.basis_size());
}

Var Dynamics::qtw(Graph& g, Var P, Var w) const {
  return g.scatter_cols(g.mul(P, g.gather_cols(w, idx_->kn_row)), idx_->kn_col, spec_.latent);
}

Var Dynamics::bmv(Graph& g, Var mat, Var v, int m) const {
  return g.scatter_cols(g.mul(mat, g.gather_cols(v, idx_->mm_col)), idx_->mm_row, m);
}

Var Dynamics::bmtv(Graph& g, Var mat, Var v, int m) const {
  return g.scatter_cols(g.mul(mat, g.gather_cols(v, idx_->mm_row)), idx_->mm_col, m);
}

Var Dynamics::skew_part(Graph& g, Var mat, int) const { return g.sub(mat, g.gather_cols(mat, idx_->mm_T)); }

Dynamics::Terms Dynamics::terms(Graph& g, std::span<const Var> bound, Var z, bool degeneracy) const {
  require_dims(z.cols() == spec_.latent, "latent state");
  Terms t;
  if (spec_.kind == DynamicsKind::fnn) {
    t.F = fnn_.forward(g, bound, z);
    return t;
  }
  t.E = energy_.forward(g, bound, z);
  t.S = entropy_.forward(g, bound, z);
  const Var wrt[] = {z};
  // Rows are independent samples, so the gradient of the column sum is the
  // per-row gradient.
  t.gradE = g.grad_graph(g.sum_all(t.E), wrt)[0];
  t.gradS = g.grad_graph(g.sum_all(t.S), wrt)[0];

  if (spec_.kind == DynamicsKind::gfinn) {
    const int K = spec_.basis_size();
    const Var AL = skew_stack(g, bound[static_cast<std::size_t>(basis_l_)]);
    const Var AM = spec_.shared_basis ? AL : skew_stack(g, bound[static_cast<std::size_t>(basis_m_)]);
    const Var QS = g.matmul_nt(t.gradS, AL);  // B x (K n), row i = Q_S(z_i) row-major
    const Var QE = g.matmul_nt(t.gradE, AM);
    const Var U = skew_part(g, mat_a_.forward(g, bound, z), K);
    const Var D = mat_b_.forward(g, bound, z);
    // L gradE = Q_S^T U Q_S gradE ; M gradS = Q_E^T D D^T Q_E gradS
    const Var Lterm = qtw(g, QS, bmv(g, U, qv(g, QS, t.gradE), K));
    const Var Mterm = qtw(g, QE, bmv(g, D, bmtv(g, D, qv(g, QE, t.gradS), K), K));
    t.F = g.add(Lterm, Mterm);
    if (degeneracy) {
      t.LgradS = qtw(g, QS, bmv(g, U, qv(g, QS, t.gradS), K));
      t.MgradE = qtw(g, QE, bmv(g, D, bmtv(g, D, qv(g, QE, t.gradE), K), K));
    }
  } else {
    const int n = spec_.latent;
    const Var L = skew_part(g, mat_a_.forward(g, bound, z), n);
    const Var D = mat_b_.forward(g, bound, z);
    t.F = g.add(bmv(g, L, t.gradE, n), bmv(g, D, bmtv(g, D, t.gradS, n), n));
    if (degeneracy) {
      t.LgradS = bmv(g, L, t.gradS, n);
      t.MgradE = bmv(g, D, bmtv(g, D, t.gradE, n), n);
    }
  }
  return t;
}

Matrix Dynamics::rhs(const ParamVector& params, const Matrix& z) const {
  Graph g(Graph::Mode::primal);
  const auto bound = params.bind(g, false);
  const Var zv = g.input(z, false);
  Matrix F = g.value(rhs(g, bound, zv));
  if (!F.allFinite()) throw NumericalError("non-finite latent right-hand side");
  return F;
}

std::vector<Matrix> Dynamics::basis(const ParamVector& params, int segment) const {
  if (spec_.kind != DynamicsKind::gfinn) throw std::logic_error("skew basis requested for non-GFINN dynamics");
  const Matrix stack = params.block(static_cast<std::size_t>(segment));
  const int n = spec_.latent;
  std::vector<Matrix> B;
  for (int j = 0; j < spec_.basis_size(); ++j) B.emplace_back(stack.middleRows(static_cast<Eigen::Index>(j) * n, n));
  return skew_basis(B);
}

std::vector<Matrix> Dynamics::basis_L(const ParamVector& params) const { return basis(params, basis_l_); }
std::vector<Matrix> Dynamics::basis_M(const ParamVector& params) const { return basis(params, basis_m_); }

Dynamics::Point Dynamics::evaluate(const ParamVector& params, const Vector& z) const {
  require_dims(z.size() == spec_.latent, "latent state");
  Point p;
  const int n = spec_.latent;
  if (spec_.kind == DynamicsKind::fnn) {
    p.F = fnn_.eval(params, z.transpose()).transpose();
    return p;
  }
  Graph g(Graph::Mode::primal);
  const auto bound = params.bind(g, false);
  const Var zv = g.input(z.transpose(), false);
  const Terms t = terms(g, bound, zv);
  p.E = g.value(t.E)(0, 0);
  p.S = g.value(t.S)(0, 0);
  p.gradE = g.value(t.gradE).transpose();
  p.gradS = g.value(t.gradS).transpose();

  auto square = [](const Matrix& row, Eigen::Index m) {
    Matrix out(m, m);
    for (Eigen::Index j = 0; j < m; ++j)
      for (Eigen::Index k = 0; k < m; ++k) out(j, k) = row(0, j * m + k);
    return out;
  };
  const Matrix z_row = z.transpose();
  if (spec_.kind == DynamicsKind::gfinn) {
    const Eigen::Index K = spec_.basis_size();
    p.QS = q_matrix(p.gradS, basis_L(params));
    p.QE = q_matrix(p.gradE, basis_M(params));
    const Matrix Uraw = square(mat_a_.eval(params, z_row), K);
    const Matrix D = square(mat_b_.eval(params, z_row), K);
    const Matrix U = Uraw - Uraw.transpose();
    const Matrix L = p.QS.transpose() * U * p.QS;
    const Matrix M = p.QE.transpose() * (D * D.transpose()) * p.QE;
    // Rounding in the triple products can break the symmetry by an ulp.
    p.L = 0.5 * (L - L.transpose());
    p.M = 0.5 * (M + M.transpose());
  } else {
    const Matrix Lraw = square(mat_a_.eval(params, z_row), n);
    const Matrix D = square(mat_b_.eval(params, z_row), n);
    p.L = Lraw - Lraw.transpose();
    const Matrix M = D * D.transpose();
    p.M = 0.5 * (M + M.transpose());
  }
  p.F = p.L * p.gradE + p.M * p.gradS;
  if (!p.F.allFinite() || !p.L.allFinite() || !p.M.allFinite())
    throw NumericalError("non-finite GENERIC operator");
  return p;
}

ThermoTrace thermo_trace(const Dynamics& dyn, const ParamVector& params, const Matrix& trajectory) {
  if (!dyn.thermodynamic()) throw std::invalid_argument("thermo_trace needs GFINN or SPNN dynamics");
  Graph g(Graph::Mode::primal);
  const auto bound = params.bind(g, false);
  const Var z = g.input(trajectory, false);
  const auto t = dyn.terms(g, bound, z);
  const Matrix F = g.value(t.F);
  ThermoTrace out;
  out.E = g.value(t.E).col(0);
  out.S = g.value(t.S).col(0);
  out.dEdt = g.value(t.gradE).cwiseProduct(F).rowwise().sum();
  out.dSdt = g.value(t.gradS).cwiseProduct(F).rowwise().sum();
  return out;
}

}  // namespace trom
