#include "thermorom/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace trom {

void require_dims(bool ok, std::string_view what) {
  if (!ok) throw DimensionError("dimension mismatch: " + std::string(what));
}

namespace ad {

namespace {

[[noreturn]] void non_differentiable() { throw std::logic_error("non-differentiable operation"); }

// Row-major reinterpretation of a matrix as rows x cols.
Matrix reshape_row_major(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  Matrix out(rows, cols);
  const Eigen::Index in_cols = m.cols();
  const Eigen::Index total = rows * cols;
  for (Eigen::Index k = 0; k < total; ++k) out(k / cols, k % cols) = m(k / in_cols, k % in_cols);
  return out;
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "identity" || name == "linear") return Activation::identity;
  if (name == "tanh") return Activation::tanh;
  if (name == "relu" || name == "ReLU") return Activation::relu;
  if (name == "sin" || name == "sine") return Activation::sine;
  if (name == "sigmoid") return Activation::sigmoid;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation act) {
  switch (act) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::sine: return "sine";
    case Activation::sigmoid: return "sigmoid";
  }
  return "identity";
}

void activation_derivative(Activation act, int order, const Matrix& in, Matrix& out) {
  if (order < 0 || order > 4) non_differentiable();
  out.resize(in.rows(), in.cols());
  switch (act) {
    case Activation::identity:
      if (order == 0) out = in;
      else if (order == 1) out.setOnes();
      else out.setZero();
      return;
    case Activation::relu:
      if (order == 0) out = in.cwiseMax(0.0);
      else if (order == 1) out = (in.array() > 0.0).cast<double>().matrix();
      else out.setZero();
      return;
    case Activation::sine:
      switch (order % 4) {
        case 0: out = in.array().sin().matrix(); break;
        case 1: out = in.array().cos().matrix(); break;
        case 2: out = (-in.array().sin()).matrix(); break;
        default: out = (-in.array().cos()).matrix(); break;
      }
      return;
    case Activation::tanh: {
      const auto t = in.array().tanh().eval();
      if (order == 0) {
        out = t.matrix();
        return;
      }
      const auto d1 = (1.0 - t.square()).eval();
      switch (order) {
        case 1: out = d1.matrix(); break;
        case 2: out = (-2.0 * t * d1).matrix(); break;
        case 3: out = (-2.0 * d1 * (d1 - 2.0 * t.square())).matrix(); break;
        default: out = (16.0 * t * d1.square() - 8.0 * t.cube() * d1).matrix(); break;
      }
      return;
    }
    case Activation::sigmoid: {
      const auto s = (1.0 / (1.0 + (-in.array()).exp())).eval();
      if (order == 0) {
        out = s.matrix();
        return;
      }
      const auto d1 = (s * (1.0 - s)).eval();
      switch (order) {
        case 1: out = d1.matrix(); break;
        case 2: out = (d1 * (1.0 - 2.0 * s)).matrix(); break;
        case 3: out = (d1 * (1.0 - 6.0 * s + 6.0 * s.square())).matrix(); break;
        default: out = (d1 * (1.0 - 2.0 * s) * (1.0 - 12.0 * s + 12.0 * s.square())).matrix(); break;
      }
      return;
    }
  }
}

const Matrix& Var::value() const { return graph->value(*this); }
Eigen::Index Var::rows() const { return value().rows(); }
Eigen::Index Var::cols() const { return value().cols(); }

// ---------------------------------------------------------------------------
// Node construction

void Graph::clear() {
  nodes_.clear();
  adjoint_.clear();
  has_adjoint_.clear();
  consumed_ = false;
}

void Graph::check_owner(Var v) const {
  if (v.graph != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    non_differentiable();
}

const Graph::Node& Graph::node(Var v) const {
  check_owner(v);
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Matrix& Graph::value(Var v) const { return node(v).value; }

Var Graph::push(Node&& n) {
  if (!n.value.allFinite()) throw NumericalError("numerical overflow in tape");
  if (mode_ == Mode::primal) {
    n.needs_grad = false;
  } else if (n.kind != OpKind::leaf) {
    n.needs_grad = needs(n.a) || needs(n.b) ||
                   std::any_of(n.list.begin(), n.list.end(), [this](int i) { return needs(i); });
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::input(Matrix value, bool requires_grad) {
  Node n;
  n.kind = OpKind::leaf;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  return push(std::move(n));
}

Var Graph::constant(Matrix value) {
  Node n;
  n.kind = OpKind::constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::zeros(Eigen::Index rows, Eigen::Index cols) { return constant(Matrix::Zero(rows, cols)); }

Var Graph::matmul(Var a, Var b) {
  const Matrix& A = node(a).value;
  const Matrix& B = node(b).value;
  require_dims(A.cols() == B.rows(), "matmul");
  Node n;
  n.kind = OpKind::matmul;
  n.a = a.id;
  n.b = b.id;
  n.value.noalias() = A * B;
  return push(std::move(n));
}

Var Graph::matmul_nt(Var a, Var b) {
  const Matrix& A = node(a).value;
  const Matrix& B = node(b).value;
  require_dims(A.cols() == B.cols(), "matmul_nt");
  Node n;
  n.kind = OpKind::matmul_nt;
  n.a = a.id;
  n.b = b.id;
  n.value.noalias() = A * B.transpose();
  return push(std::move(n));
}

Var Graph::matmul_tn(Var a, Var b) {
  const Matrix& A = node(a).value;
  const Matrix& B = node(b).value;
  require_dims(A.rows() == B.rows(), "matmul_tn");
  Node n;
  n.kind = OpKind::matmul_tn;
  n.a = a.id;
  n.b = b.id;
  n.value.noalias() = A.transpose() * B;
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
  const Matrix& A = node(a).value;
  const Matrix& B = node(b).value;
  require_dims(A.rows() == B.rows() && A.cols() == B.cols(), "add");
  Node n;
  n.kind = OpKind::add;
  n.a = a.id;
  n.b = b.id;
  n.value = A + B;
  return push(std::move(n));
}

Var Graph::sub(Var a, Var b) {
  const Matrix& A = node(a).value;
  const Matrix& B = node(b).value;
  require_dims(A.rows() == B.rows() && A.cols() == B.cols(), "sub");
  Node n;
  n.kind = OpKind::sub;
  n.a = a.id;
  n.b = b.id;
  n.value = A - B;
  return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  const Matrix& A = node(a).value;
  const Matrix& B = node(b).value;
  require_dims(A.rows() == B.rows() && A.cols() == B.cols(), "mul");
  Node n;
  n.kind = OpKind::mul;
  n.a = a.id;
  n.b = b.id;
  n.value = A.cwiseProduct(B);
  return push(std::move(n));
}

Var Graph::scale(Var a, double alpha) {
  Node n;
  n.kind = OpKind::scale;
  n.a = a.id;
  n.alpha = alpha;
  n.value = alpha * node(a).value;
  return push(std::move(n));
}

Var Graph::add_row(Var a, Var row) {
  const Matrix& A = node(a).value;
  const Matrix& R = node(row).value;
  require_dims(R.rows() == 1 && R.cols() == A.cols(), "add_row");
  Node n;
  n.kind = OpKind::add_row;
  n.a = a.id;
  n.b = row.id;
  n.value = A.rowwise() + R.row(0);
  return push(std::move(n));
}

Var Graph::broadcast_rows(Var row, Eigen::Index rows) {
  const Matrix& R = node(row).value;
  require_dims(R.rows() == 1, "broadcast_rows");
  Node n;
  n.kind = OpKind::broadcast_rows;
  n.a = row.id;
  n.p0 = rows;
  n.value = R.replicate(rows, 1);
  return push(std::move(n));
}

Var Graph::sum_rows(Var a) {
  Node n;
  n.kind = OpKind::sum_rows;
  n.a = a.id;
  n.value = node(a).value.colwise().sum();
  return push(std::move(n));
}

Var Graph::broadcast_cols(Var col, Eigen::Index cols) {
  const Matrix& C = node(col).value;
  require_dims(C.cols() == 1, "broadcast_cols");
  Node n;
  n.kind = OpKind::broadcast_cols;
  n.a = col.id;
  n.p0 = cols;
  n.value = C.replicate(1, cols);
  return push(std::move(n));
}

Var Graph::sum_cols(Var a) {
  Node n;
  n.kind = OpKind::sum_cols;
  n.a = a.id;
  n.value = node(a).value.rowwise().sum();
  return push(std::move(n));
}

Var Graph::sum_all(Var a) {
  Node n;
  n.kind = OpKind::sum_all;
  n.a = a.id;
  n.value = Matrix::Constant(1, 1, node(a).value.sum());
  return push(std::move(n));
}

Var Graph::sum_squares(Var a) {
  Node n;
  n.kind = OpKind::sum_squares;
  n.a = a.id;
  n.value = Matrix::Constant(1, 1, node(a).value.squaredNorm());
  return push(std::move(n));
}

Var Graph::scalar_mul(Var a, Var s) {
  const Matrix& S = node(s).value;
  require_dims(S.rows() == 1 && S.cols() == 1, "scalar_mul");
  Node n;
  n.kind = OpKind::scalar_mul;
  n.a = a.id;
  n.b = s.id;
  n.value = S(0, 0) * node(a).value;
  return push(std::move(n));
}

Var Graph::activation(Var a, Activation act, int order) {
  Node n;
  n.kind = OpKind::activation;
  n.a = a.id;
  n.act = act;
  n.order = order;
  activation_derivative(act, order, node(a).value, n.value);
  return push(std::move(n));
}

Var Graph::slice_cols(Var a, Eigen::Index offset, Eigen::Index count) {
  const Matrix& A = node(a).value;
  require_dims(offset >= 0 && count >= 0 && offset + count <= A.cols(), "slice_cols");
  Node n;
  n.kind = OpKind::slice_cols;
  n.a = a.id;
  n.p0 = offset;
  n.p1 = count;
  n.value = A.middleCols(offset, count);
  return push(std::move(n));
}

Var Graph::pad_cols(Var a, Eigen::Index offset, Eigen::Index total) {
  const Matrix& A = node(a).value;
  require_dims(offset >= 0 && offset + A.cols() <= total, "pad_cols");
  Node n;
  n.kind = OpKind::pad_cols;
  n.a = a.id;
  n.p0 = offset;
  n.p1 = total;
  n.value = Matrix::Zero(A.rows(), total);
  n.value.middleCols(offset, A.cols()) = A;
  return push(std::move(n));
}

Var Graph::concat_cols(std::span<const Var> parts) {
  require_dims(!parts.empty(), "concat_cols of nothing");
  const Eigen::Index rows = node(parts[0]).value.rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    require_dims(node(p).value.rows() == rows, "concat_cols");
    cols += node(p).value.cols();
  }
  Node n;
  n.kind = OpKind::concat_cols;
  n.value.resize(rows, cols);
  Eigen::Index off = 0;
  for (Var p : parts) {
    const Matrix& P = node(p).value;
    n.value.middleCols(off, P.cols()) = P;
    off += P.cols();
    n.list.push_back(p.id);
  }
  return push(std::move(n));
}

Var Graph::slice_rows(Var a, Eigen::Index offset, Eigen::Index count) {
  const Matrix& A = node(a).value;
  require_dims(offset >= 0 && count >= 0 && offset + count <= A.rows(), "slice_rows");
  Node n;
  n.kind = OpKind::slice_rows;
  n.a = a.id;
  n.p0 = offset;
  n.p1 = count;
  n.value = A.middleRows(offset, count);
  return push(std::move(n));
}

Var Graph::pad_rows(Var a, Eigen::Index offset, Eigen::Index total) {
  const Matrix& A = node(a).value;
  require_dims(offset >= 0 && offset + A.rows() <= total, "pad_rows");
  Node n;
  n.kind = OpKind::pad_rows;
  n.a = a.id;
  n.p0 = offset;
  n.p1 = total;
  n.value = Matrix::Zero(total, A.cols());
  n.value.middleRows(offset, A.rows()) = A;
  return push(std::move(n));
}

Var Graph::concat_rows(std::span<const Var> parts) {
  require_dims(!parts.empty(), "concat_rows of nothing");
  const Eigen::Index cols = node(parts[0]).value.cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    require_dims(node(p).value.cols() == cols, "concat_rows");
    rows += node(p).value.rows();
  }
  Node n;
  n.kind = OpKind::concat_rows;
  n.value.resize(rows, cols);
  Eigen::Index off = 0;
  for (Var p : parts) {
    const Matrix& P = node(p).value;
    n.value.middleRows(off, P.rows()) = P;
    off += P.rows();
    n.list.push_back(p.id);
  }
  return push(std::move(n));
}

Var Graph::gather_cols(Var a, std::shared_ptr<const std::vector<int>> index) {
  const Matrix& A = node(a).value;
  Node n;
  n.kind = OpKind::gather_cols;
  n.a = a.id;
  n.value.resize(A.rows(), static_cast<Eigen::Index>(index->size()));
  for (std::size_t j = 0; j < index->size(); ++j) {
    const int src = (*index)[j];
    require_dims(src >= 0 && src < A.cols(), "gather_cols index");
    n.value.col(static_cast<Eigen::Index>(j)) = A.col(src);
  }
  n.index = std::move(index);
  return push(std::move(n));
}

Var Graph::scatter_cols(Var a, std::shared_ptr<const std::vector<int>> index, Eigen::Index total) {
  const Matrix& A = node(a).value;
  require_dims(static_cast<Eigen::Index>(index->size()) == A.cols(), "scatter_cols");
  Node n;
  n.kind = OpKind::scatter_cols;
  n.a = a.id;
  n.p0 = total;
  n.value = Matrix::Zero(A.rows(), total);
  for (std::size_t j = 0; j < index->size(); ++j) {
    const int dst = (*index)[j];
    require_dims(dst >= 0 && dst < total, "scatter_cols index");
    n.value.col(dst) += A.col(static_cast<Eigen::Index>(j));
  }
  n.index = std::move(index);
  return push(std::move(n));
}

Var Graph::reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& A = node(a).value;
  require_dims(rows * cols == A.size(), "reshape");
  Node n;
  n.kind = OpKind::reshape;
  n.a = a.id;
  n.value = reshape_row_major(A, rows, cols);
  return push(std::move(n));
}

Var Graph::transpose(Var a) {
  Node n;
  n.kind = OpKind::transpose;
  n.a = a.id;
  n.value = node(a).value.transpose();
  return push(std::move(n));
}

Var Graph::opaque(Var a, const std::function<Matrix(const Matrix&)>& fn) {
  Node n;
  n.kind = OpKind::opaque;
  n.a = a.id;
  n.value = fn(node(a).value);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Numeric reverse sweep

template <class Expr>
void Graph::accumulate_expr(int id, const Expr& g) {
  if (!needs(id)) return;
  const auto k = static_cast<std::size_t>(id);
  if (has_adjoint_[k]) {
    adjoint_[k] += g;
  } else {
    adjoint_[k] = g;
    has_adjoint_[k] = 1;
  }
}

void Graph::accumulate(int id, const Matrix& g) { accumulate_expr(id, g); }

void Graph::backward(Var scalar) {
  if (mode_ == Mode::primal) throw std::logic_error("backward() on a primal-mode graph");
  if (consumed_) throw std::logic_error("differentiation context already consumed");
  const Matrix& out = node(scalar).value;
  require_dims(out.rows() == 1 && out.cols() == 1, "backward() needs a scalar output");
  consumed_ = true;
  adjoint_.assign(nodes_.size(), Matrix());
  has_adjoint_.assign(nodes_.size(), 0);
  if (!needs(scalar.id)) return;
  adjoint_[static_cast<std::size_t>(scalar.id)] = Matrix::Ones(1, 1);
  has_adjoint_[static_cast<std::size_t>(scalar.id)] = 1;
  for (int id = scalar.id; id >= 0; --id) {
    const auto k = static_cast<std::size_t>(id);
    if (!has_adjoint_[k] || !nodes_[k].needs_grad) continue;
    const OpKind kind = nodes_[k].kind;
    if (kind == OpKind::leaf || kind == OpKind::constant) continue;
    if (!adjoint_[k].allFinite()) throw NumericalError("numerical overflow in tape");
    backward_node(id, adjoint_[k]);
    if (nodes_[k].kind != OpKind::leaf) adjoint_[k].resize(0, 0);  // release intermediates
  }
}

void Graph::backward_node(int id, const Matrix& G) {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  auto val = [this](int i) -> const Matrix& { return nodes_[static_cast<std::size_t>(i)].value; };
  switch (n.kind) {
    case OpKind::leaf:
    case OpKind::constant: return;
    case OpKind::matmul:
      if (needs(n.a)) accumulate(n.a, G * val(n.b).transpose());
      if (needs(n.b)) accumulate(n.b, val(n.a).transpose() * G);
      return;
    case OpKind::matmul_nt:
      if (needs(n.a)) accumulate(n.a, G * val(n.b));
      if (needs(n.b)) accumulate(n.b, G.transpose() * val(n.a));
      return;
    case OpKind::matmul_tn:
      if (needs(n.a)) accumulate(n.a, val(n.b) * G.transpose());
      if (needs(n.b)) accumulate(n.b, val(n.a) * G);
      return;
    case OpKind::add:
      accumulate(n.a, G);
      accumulate(n.b, G);
      return;
    case OpKind::sub:
      accumulate(n.a, G);
      accumulate_expr(n.b, -G);
      return;
    case OpKind::mul:
      accumulate_expr(n.a, G.cwiseProduct(val(n.b)));
      accumulate_expr(n.b, G.cwiseProduct(val(n.a)));
      return;
    case OpKind::scale: accumulate_expr(n.a, n.alpha * G); return;
    case OpKind::add_row:
      accumulate(n.a, G);
      accumulate_expr(n.b, G.colwise().sum());
      return;
    case OpKind::broadcast_rows: accumulate_expr(n.a, G.colwise().sum()); return;
    case OpKind::sum_rows: accumulate_expr(n.a, G.replicate(val(n.a).rows(), 1)); return;
    case OpKind::broadcast_cols: accumulate_expr(n.a, G.rowwise().sum()); return;
    case OpKind::sum_cols: accumulate_expr(n.a, G.replicate(1, val(n.a).cols())); return;
    case OpKind::sum_all: {
      const Matrix& A = val(n.a);
      accumulate_expr(n.a, Matrix::Constant(A.rows(), A.cols(), G(0, 0)));
      return;
    }
    case OpKind::sum_squares: accumulate_expr(n.a, (2.0 * G(0, 0)) * val(n.a)); return;
    case OpKind::scalar_mul: {
      const double s = val(n.b)(0, 0);
      accumulate_expr(n.a, s * G);
      if (needs(n.b)) accumulate(n.b, Matrix::Constant(1, 1, G.cwiseProduct(val(n.a)).sum()));
      return;
    }
    case OpKind::activation: {
      if (!needs(n.a)) return;
      Matrix d;
      activation_derivative(n.act, n.order + 1, val(n.a), d);
      accumulate_expr(n.a, G.cwiseProduct(d));
      return;
    }
    case OpKind::slice_cols: {
      if (!needs(n.a)) return;
      const Matrix& A = val(n.a);
      Matrix g = Matrix::Zero(A.rows(), A.cols());
      g.middleCols(n.p0, n.p1) = G;
      accumulate(n.a, g);
      return;
    }
    case OpKind::pad_cols: accumulate_expr(n.a, G.middleCols(n.p0, val(n.a).cols())); return;
    case OpKind::concat_cols: {
      Eigen::Index off = 0;
      for (int part : n.list) {
        const Eigen::Index c = val(part).cols();
        accumulate_expr(part, G.middleCols(off, c));
        off += c;
      }
      return;
    }
    case OpKind::slice_rows: {
      if (!needs(n.a)) return;
      const Matrix& A = val(n.a);
      Matrix g = Matrix::Zero(A.rows(), A.cols());
      g.middleRows(n.p0, n.p1) = G;
      accumulate(n.a, g);
      return;
    }
    case OpKind::pad_rows: accumulate_expr(n.a, G.middleRows(n.p0, val(n.a).rows())); return;
    case OpKind::concat_rows: {
      Eigen::Index off = 0;
      for (int part : n.list) {
        const Eigen::Index r = val(part).rows();
        accumulate_expr(part, G.middleRows(off, r));
        off += r;
      }
      return;
    }
    case OpKind::gather_cols: {
      if (!needs(n.a)) return;
      const Matrix& A = val(n.a);
      Matrix g = Matrix::Zero(A.rows(), A.cols());
      for (std::size_t j = 0; j < n.index->size(); ++j)
        g.col((*n.index)[j]) += G.col(static_cast<Eigen::Index>(j));
      accumulate(n.a, g);
      return;
    }
    case OpKind::scatter_cols: {
      if (!needs(n.a)) return;
      Matrix g(G.rows(), static_cast<Eigen::Index>(n.index->size()));
      for (std::size_t j = 0; j < n.index->size(); ++j)
        g.col(static_cast<Eigen::Index>(j)) = G.col((*n.index)[j]);
      accumulate(n.a, g);
      return;
    }
    case OpKind::reshape: {
      const Matrix& A = val(n.a);
      accumulate(n.a, reshape_row_major(G, A.rows(), A.cols()));
      return;
    }
    case OpKind::transpose: accumulate_expr(n.a, G.transpose()); return;
    case OpKind::opaque: non_differentiable();
  }
}

Matrix Graph::grad(Var v) const {
  check_owner(v);
  const auto k = static_cast<std::size_t>(v.id);
  if (k < has_adjoint_.size() && has_adjoint_[k]) return adjoint_[k];
  const Matrix& val = nodes_[k].value;
  return Matrix::Zero(val.rows(), val.cols());
}

// ---------------------------------------------------------------------------
// Recorded derivatives

Var Graph::accumulate_var(Var existing, Var g) {
  if (!existing.valid()) return g;
  return add(existing, g);
}

Var Graph::tangent(Var out, Var seed, Var seed_tangent) {
  check_owner(out);
  check_owner(seed);
  const Matrix& sv = node(seed).value;
  const Matrix& tv = node(seed_tangent).value;
  require_dims(sv.rows() == tv.rows() && sv.cols() == tv.cols(), "tangent seed shape");
  if (out.id < seed.id) return Var{};

  // Restrict to nodes on a path seed -> out.
  const int lo = seed.id;
  const int hi = out.id;
  const auto span_len = static_cast<std::size_t>(hi - lo + 1);
  std::vector<char> reaches(span_len, 0);
  reaches[span_len - 1] = 1;
  auto mark = [&](int i) {
    if (i >= lo) reaches[static_cast<std::size_t>(i - lo)] = 1;
  };
  for (int id = hi; id > lo; --id) {
    if (!reaches[static_cast<std::size_t>(id - lo)]) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    mark(n.a);
    mark(n.b);
    for (int i : n.list) mark(i);
  }

  std::vector<int> tangent(span_len, -1);
  tangent[0] = seed_tangent.id;
  auto tan_of = [&](int i) { return i >= lo ? tangent[static_cast<std::size_t>(i - lo)] : -1; };
  for (int id = lo + 1; id <= hi; ++id) {
    const auto k = static_cast<std::size_t>(id - lo);
    if (!reaches[k]) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    bool any = tan_of(n.a) >= 0 || tan_of(n.b) >= 0;
    for (int i : n.list) any = any || tan_of(i) >= 0;
    if (!any) continue;
    std::vector<int> inputs;
    if (n.kind == OpKind::concat_cols || n.kind == OpKind::concat_rows) {
      for (int i : n.list) inputs.push_back(tan_of(i));
    } else {
      inputs = {tan_of(n.a), tan_of(n.b)};
    }
    tangent[k] = tangent_rule(id, inputs).id;
  }
  const int t = tangent[span_len - 1];
  return t >= 0 ? Var{this, t} : Var{};
}

Var Graph::tangent_rule(int id, const std::vector<int>& tangent) {
  // Copy what we need: pushing new nodes may reallocate nodes_.
  const Node& ref = nodes_[static_cast<std::size_t>(id)];
  const OpKind kind = ref.kind;
  const Var A{this, ref.a};
  const Var B{this, ref.b};
  const double alpha = ref.alpha;
  const Eigen::Index p0 = ref.p0;
  const Eigen::Index p1 = ref.p1;
  const Activation act = ref.act;
  const int order = ref.order;
  const auto index = ref.index;
  const std::vector<int> list = ref.list;
  const Eigen::Index out_rows = ref.value.rows();
  const Eigen::Index out_cols = ref.value.cols();

  const Var ta{this, tangent.size() > 0 ? tangent[0] : -1};
  const Var tb{this, tangent.size() > 1 ? tangent[1] : -1};
  auto sum = [this](Var x, Var y) {
    if (!x.valid()) return y;
    if (!y.valid()) return x;
    return add(x, y);
  };

  switch (kind) {
    case OpKind::leaf:
    case OpKind::constant: return Var{};
    case OpKind::matmul:
      return sum(ta.valid() ? matmul(ta, B) : Var{}, tb.valid() ? matmul(A, tb) : Var{});
    case OpKind::matmul_nt:
      return sum(ta.valid() ? matmul_nt(ta, B) : Var{}, tb.valid() ? matmul_nt(A, tb) : Var{});
    case OpKind::matmul_tn:
      return sum(ta.valid() ? matmul_tn(ta, B) : Var{}, tb.valid() ? matmul_tn(A, tb) : Var{});
    case OpKind::add: return sum(ta, tb);
    case OpKind::sub:
      if (ta.valid() && tb.valid()) return sub(ta, tb);
      return ta.valid() ? ta : scale(tb, -1.0);
    case OpKind::mul: return sum(ta.valid() ? mul(ta, B) : Var{}, tb.valid() ? mul(A, tb) : Var{});
    case OpKind::scale: return scale(ta, alpha);
    case OpKind::add_row:
      if (ta.valid() && tb.valid()) return add_row(ta, tb);
      return ta.valid() ? ta : broadcast_rows(tb, out_rows);
    case OpKind::broadcast_rows: return broadcast_rows(ta, p0);
    case OpKind::sum_rows: return sum_rows(ta);
    case OpKind::broadcast_cols: return broadcast_cols(ta, p0);
    case OpKind::sum_cols: return sum_cols(ta);
    case OpKind::sum_all: return sum_all(ta);
    case OpKind::sum_squares: return scale(sum_all(mul(A, ta)), 2.0);
    case OpKind::scalar_mul:
      return sum(ta.valid() ? scalar_mul(ta, B) : Var{}, tb.valid() ? scalar_mul(A, tb) : Var{});
    case OpKind::activation: return mul(activation(A, act, order + 1), ta);
    case OpKind::slice_cols: return slice_cols(ta, p0, p1);
    case OpKind::pad_cols: return pad_cols(ta, p0, p1);
    case OpKind::slice_rows: return slice_rows(ta, p0, p1);
    case OpKind::pad_rows: return pad_rows(ta, p0, p1);
    case OpKind::concat_cols:
    case OpKind::concat_rows: {
      std::vector<Var> parts;
      for (std::size_t i = 0; i < list.size(); ++i) {
        if (tangent[i] >= 0) {
          parts.push_back(Var{this, tangent[i]});
        } else {
          const Matrix& v = nodes_[static_cast<std::size_t>(list[i])].value;
          parts.push_back(zeros(v.rows(), v.cols()));
        }
      }
      return kind == OpKind::concat_cols ? concat_cols(parts) : concat_rows(parts);
    }
    case OpKind::gather_cols: return gather_cols(ta, index);
    case OpKind::scatter_cols: return scatter_cols(ta, index, p0);
    case OpKind::reshape: return reshape(ta, out_rows, out_cols);
    case OpKind::transpose: return transpose(ta);
    case OpKind::opaque: non_differentiable();
  }
  return Var{};
}

std::vector<Var> Graph::grad_graph(Var scalar, std::span<const Var> wrt) {
  check_owner(scalar);
  require_dims(node(scalar).value.size() == 1, "grad_graph needs a scalar output");
  std::vector<Var> result;
  if (wrt.empty()) return result;
  int lo = scalar.id;
  for (Var w : wrt) {
    check_owner(w);
    lo = std::min(lo, w.id);
  }
  const int hi = scalar.id;
  const auto span_len = static_cast<std::size_t>(hi - lo + 1);

  // depends[i]: node i is downstream of some wrt node.
  std::vector<char> depends(span_len, 0);
  for (Var w : wrt) depends[static_cast<std::size_t>(w.id - lo)] = 1;
  auto dep = [&](int i) { return i >= lo && depends[static_cast<std::size_t>(i - lo)]; };
  for (int id = lo; id <= hi; ++id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    bool d = dep(n.a) || dep(n.b);
    for (int i : n.list) d = d || dep(i);
    if (d) depends[static_cast<std::size_t>(id - lo)] = 1;
  }

  std::vector<int> adjoint(span_len, -1);
  if (dep(hi)) adjoint[span_len - 1] = constant(Matrix::Ones(1, 1)).id;
  for (int id = hi; id > lo; --id) {
    const auto k = static_cast<std::size_t>(id - lo);
    if (adjoint[k] < 0 || !depends[k]) continue;
    const OpKind kind = nodes_[static_cast<std::size_t>(id)].kind;
    if (kind == OpKind::leaf || kind == OpKind::constant) continue;
    vjp_rule(id, Var{this, adjoint[k]}, lo, depends, adjoint);
  }
  for (Var w : wrt) {
    const int a = adjoint[static_cast<std::size_t>(w.id - lo)];
    if (a >= 0) {
      result.push_back(Var{this, a});
    } else {
      const Matrix& v = node(w).value;
      result.push_back(zeros(v.rows(), v.cols()));
    }
  }
  return result;
}

void Graph::vjp_rule(int id, Var G, int lo, const std::vector<char>& depends,
                     std::vector<int>& adjoint) {
  const Node& ref = nodes_[static_cast<std::size_t>(id)];
  const OpKind kind = ref.kind;
  const int ia = ref.a;
  const int ib = ref.b;
  const double alpha = ref.alpha;
  const Eigen::Index p0 = ref.p0;
  const Activation act = ref.act;
  const int order = ref.order;
  const auto index = ref.index;
  const std::vector<int> list = ref.list;
  const Var A{this, ia};
  const Var B{this, ib};

  auto in_window = [&](int i) { return i >= lo && depends[static_cast<std::size_t>(i - lo)] != 0; };
  auto acc = [&](int input, Var g) {
    if (!in_window(input)) return;
    int& s = adjoint[static_cast<std::size_t>(input - lo)];
    s = accumulate_var(Var{this, s}, g).id;
  };

  switch (kind) {
    case OpKind::leaf:
    case OpKind::constant: return;
    case OpKind::matmul:
      if (in_window(ia)) acc(ia, matmul_nt(G, B));
      if (in_window(ib)) acc(ib, matmul_tn(A, G));
      return;
    case OpKind::matmul_nt:
      if (in_window(ia)) acc(ia, matmul(G, B));
      if (in_window(ib)) acc(ib, matmul_tn(G, A));
      return;
    case OpKind::matmul_tn:
      if (in_window(ia)) acc(ia, matmul_nt(B, G));
      if (in_window(ib)) acc(ib, matmul(A, G));
      return;
    case OpKind::add:
      acc(ia, G);
      acc(ib, G);
      return;
    case OpKind::sub:
      acc(ia, G);
      if (in_window(ib)) acc(ib, scale(G, -1.0));
      return;
    case OpKind::mul:
      if (in_window(ia)) acc(ia, mul(G, B));
      if (in_window(ib)) acc(ib, mul(G, A));
      return;
    case OpKind::scale: acc(ia, scale(G, alpha)); return;
    case OpKind::add_row:
      acc(ia, G);
      if (in_window(ib)) acc(ib, sum_rows(G));
      return;
    case OpKind::broadcast_rows: acc(ia, sum_rows(G)); return;
    case OpKind::sum_rows: acc(ia, broadcast_rows(G, A.rows())); return;
    case OpKind::broadcast_cols: acc(ia, sum_cols(G)); return;
    case OpKind::sum_cols: acc(ia, broadcast_cols(G, A.cols())); return;
    case OpKind::sum_all:
      acc(ia, scalar_mul(constant(Matrix::Ones(A.rows(), A.cols())), G));
      return;
    case OpKind::sum_squares: acc(ia, scale(scalar_mul(A, G), 2.0)); return;
    case OpKind::scalar_mul:
      if (in_window(ia)) acc(ia, scalar_mul(G, B));
      if (in_window(ib)) acc(ib, sum_all(mul(G, A)));
      return;
    case OpKind::activation:
      if (in_window(ia)) acc(ia, mul(G, activation(A, act, order + 1)));
      return;
    case OpKind::slice_cols: acc(ia, pad_cols(G, p0, A.cols())); return;
    case OpKind::pad_cols: acc(ia, slice_cols(G, p0, A.cols())); return;
    case OpKind::slice_rows: acc(ia, pad_rows(G, p0, A.rows())); return;
    case OpKind::pad_rows: acc(ia, slice_rows(G, p0, A.rows())); return;
    case OpKind::concat_cols: {
      Eigen::Index off = 0;
      for (int part : list) {
        const Eigen::Index c = nodes_[static_cast<std::size_t>(part)].value.cols();
        if (in_window(part)) acc(part, slice_cols(G, off, c));
        off += c;
      }
      return;
    }
    case OpKind::concat_rows: {
      Eigen::Index off = 0;
      for (int part : list) {
        const Eigen::Index r = nodes_[static_cast<std::size_t>(part)].value.rows();
        if (in_window(part)) acc(part, slice_rows(G, off, r));
        off += r;
      }
      return;
    }
    case OpKind::gather_cols: acc(ia, scatter_cols(G, index, A.cols())); return;
    case OpKind::scatter_cols: acc(ia, gather_cols(G, index)); return;
    case OpKind::reshape: acc(ia, reshape(G, A.rows(), A.cols())); return;
    case OpKind::transpose: acc(ia, transpose(G)); return;
    case OpKind::opaque: non_differentiable();
  }
}

// ---------------------------------------------------------------------------
// Parameter layout

std::size_t ParamVector::add_segment(std::string name, Eigen::Index rows, Eigen::Index cols) {
  Segment seg{std::move(name), values_.size(), rows, cols};
  const Eigen::Index old = values_.size();
  values_.conservativeResize(old + rows * cols);
  values_.segment(old, rows * cols).setZero();
  segments_.push_back(std::move(seg));
  return segments_.size() - 1;
}

void ParamVector::append(const ParamVector& other, std::string_view prefix) {
  const Eigen::Index old = values_.size();
  for (const Segment& s : other.segments_) {
    segments_.push_back(Segment{std::string(prefix) + s.name, old + s.offset, s.rows, s.cols});
  }
  values_.conservativeResize(old + other.values_.size());
  values_.tail(other.values_.size()) = other.values_;
}

const ParamVector::Segment* ParamVector::find(std::string_view name) const {
  for (const Segment& s : segments_)
    if (s.name == name) return &s;
  return nullptr;
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const Segment& a = segments_[i];
    const Segment& b = other.segments_[i];
    if (a.name != b.name || a.offset != b.offset || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

Matrix ParamVector::block(std::size_t segment) const {
  const Segment& s = segments_.at(segment);
  Matrix m(s.rows, s.cols);
  for (Eigen::Index r = 0; r < s.rows; ++r)
    for (Eigen::Index c = 0; c < s.cols; ++c) m(r, c) = values_[s.offset + r * s.cols + c];
  return m;
}

void ParamVector::set_block(std::size_t segment, const Matrix& m) {
  const Segment& s = segments_.at(segment);
  require_dims(m.rows() == s.rows && m.cols() == s.cols, "ParamVector::set_block");
  for (Eigen::Index r = 0; r < s.rows; ++r)
    for (Eigen::Index c = 0; c < s.cols; ++c) values_[s.offset + r * s.cols + c] = m(r, c);
}

std::vector<Var> ParamVector::bind(Graph& g, bool requires_grad) const {
  std::vector<Var> out;
  out.reserve(segments_.size());
  for (std::size_t i = 0; i < segments_.size(); ++i) out.push_back(g.input(block(i), requires_grad));
  return out;
}

Vector ParamVector::gather_grad(const Graph& g, std::span<const Var> bound) const {
  require_dims(bound.size() == segments_.size(), "gather_grad");
  Vector out(values_.size());
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const Segment& s = segments_[i];
    const Matrix gm = g.grad(bound[i]);
    for (Eigen::Index r = 0; r < s.rows; ++r)
      for (Eigen::Index c = 0; c < s.cols; ++c) out[s.offset + r * s.cols + c] = gm(r, c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convenience entry points

Vector grad(const ScalarFn& scalar_fn, const Vector& theta) {
  Graph g;
  const Var th = g.input(theta.transpose());
  const Var out = scalar_fn(g, th);
  g.backward(out);
  return g.grad(th).transpose();
}

std::pair<Vector, Vector> jvp(const VectorFn& fn, const Vector& x, const Vector& v) {
  require_dims(x.size() == v.size(), "jvp: dim(v) != dim(x)");
  Graph g(Graph::Mode::primal);
  const Var xv = g.input(x.transpose(), false);
  const Var y = fn(g, xv);
  const Var t = g.tangent(y, xv, g.constant(v.transpose()));
  Vector value = g.value(y).transpose();
  Vector tan = t.valid() ? Vector(g.value(t).transpose()) : Vector::Zero(value.size());
  if (!tan.allFinite()) throw NumericalError("non-finite tangent");
  return {std::move(value), std::move(tan)};
}

Vector input_grad(const VectorFn& scalar_net, const Vector& z) {
  Graph g(Graph::Mode::primal);
  const Var zv = g.input(z.transpose(), false);
  const Var s = scalar_net(g, zv);
  if (g.value(s).size() != 1) throw DimensionError("input_grad: non-scalar output");
  const Var wrt[] = {zv};
  const auto grads = g.grad_graph(s, wrt);
  return g.value(grads[0]).transpose();
}

double fd_check(const std::function<double(const Vector&)>& fn, const Vector& gradient,
                const Vector& point, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("fd_check: step must be positive");
  require_dims(gradient.size() == point.size(), "fd_check");
  const double floor = std::max(1e-3 * gradient.cwiseAbs().maxCoeff(), 1e-12);
  double worst = 0.0;
  Vector p = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    p[i] = point[i] + h;
    const double fp = fn(p);
    p[i] = point[i] - h;
    const double fm = fn(p);
    p[i] = point[i];
    const double fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(gradient[i]), floor});
    worst = std::max(worst, std::abs(fd - gradient[i]) / denom);
  }
  return worst;
}

}  // namespace ad
}  // namespace trom
