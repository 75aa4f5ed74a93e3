// Dense kernels and a matrix-level differentiation tape.
//
// Every tape node holds a dense matrix whose rows are independent batch
// samples. Three kinds of derivative are available on one tape:
//   - backward():   numeric reverse sweep, used for d(loss)/d(theta);
//   - tangent():    forward-mode propagation emitted as new tape nodes, so the
//                   resulting Jacobian-vector product is itself differentiable;
//   - grad_graph(): reverse sweep emitted as new tape nodes (input gradients
//                   such as grad_z E(z) that later get differentiated in theta).
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace trom {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Raised when a computation produces a non-finite value or fails to converge.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on any shape or dimension mismatch.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void require_dims(bool ok, std::string_view what);

namespace ad {

enum class Activation : std::uint8_t { identity, tanh, relu, sine, sigmoid };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation act);

/// Elementwise k-th derivative of the activation (k = 0 is the activation itself).
/// Orders up to 4 are supported; higher orders raise "non-differentiable operation".
void activation_derivative(Activation act, int order, const Matrix& in, Matrix& out);

class Graph;

/// Handle to a tape node. Cheap to copy; only valid while its graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  [[nodiscard]] bool valid() const { return graph != nullptr && id >= 0; }
  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Eigen::Index rows() const;
  [[nodiscard]] Eigen::Index cols() const;
};

enum class OpKind : std::uint8_t {
  leaf,
  constant,
  matmul,     // A B
  matmul_nt,  // A B^T
  matmul_tn,  // A^T B
  add,
  sub,
  mul,             // elementwise
  scale,           // alpha * A
  add_row,         // A + 1 b, b is 1 x c
  broadcast_rows,  // 1 x c -> r x c
  sum_rows,        // r x c -> 1 x c
  broadcast_cols,  // r x 1 -> r x c
  sum_cols,        // r x c -> r x 1
  sum_all,         // -> 1 x 1
  sum_squares,     // -> 1 x 1
  scalar_mul,      // s * A, s is a 1 x 1 node
  activation,
  slice_cols,
  pad_cols,
  concat_cols,
  slice_rows,
  pad_rows,
  concat_rows,
  gather_cols,   // out(:, j) = A(:, idx[j])
  scatter_cols,  // out(:, idx[j]) += A(:, j)
  reshape,       // row-major reinterpretation
  transpose,
  opaque,  // value-only, not differentiable
};

class Graph {
 public:
  enum class Mode : std::uint8_t { primal, reverse };

  explicit Graph(Mode mode = Mode::reverse) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  [[nodiscard]] Mode mode() const { return mode_; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  /// Drops all nodes but keeps allocations; the context may be consumed again.
  void clear();

  Var input(Matrix value, bool requires_grad = true);
  Var constant(Matrix value);
  Var zeros(Eigen::Index rows, Eigen::Index cols);

  [[nodiscard]] const Matrix& value(Var v) const;

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var matmul_tn(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double alpha);
  Var add_row(Var a, Var row);
  Var broadcast_rows(Var row, Eigen::Index rows);
  Var sum_rows(Var a);
  Var broadcast_cols(Var col, Eigen::Index cols);
  Var sum_cols(Var a);
  Var sum_all(Var a);
  Var sum_squares(Var a);
  Var scalar_mul(Var a, Var s);
  Var activation(Var a, Activation act, int order = 0);
  Var slice_cols(Var a, Eigen::Index offset, Eigen::Index count);
  Var pad_cols(Var a, Eigen::Index offset, Eigen::Index total);
  Var concat_cols(std::span<const Var> parts);
  Var slice_rows(Var a, Eigen::Index offset, Eigen::Index count);
  Var pad_rows(Var a, Eigen::Index offset, Eigen::Index total);
  Var concat_rows(std::span<const Var> parts);
  Var gather_cols(Var a, std::shared_ptr<const std::vector<int>> index);
  Var scatter_cols(Var a, std::shared_ptr<const std::vector<int>> index, Eigen::Index total);
  Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
  Var transpose(Var a);
  /// Records an arbitrary value-only transform. Differentiating through it
  /// raises "non-differentiable operation".
  Var opaque(Var a, const std::function<Matrix(const Matrix&)>& fn);

  /// Numeric reverse sweep from a 1x1 node. A graph is consumed by one call.
  void backward(Var scalar);
  /// Adjoint of v after backward(); zeros if v does not influence the output.
  [[nodiscard]] Matrix grad(Var v) const;

  /// Reverse sweep recorded as tape nodes: returns d(scalar)/d(wrt_i) as
  /// differentiable nodes (zero constants where there is no dependence).
  std::vector<Var> grad_graph(Var scalar, std::span<const Var> wrt);
  /// Forward tangent of `out` along `seed` -> `seed_tangent`, recorded as tape
  /// nodes. Returns an invalid Var when out does not depend on seed.
  Var tangent(Var out, Var seed, Var seed_tangent);

 private:
  struct Node {
    OpKind kind = OpKind::constant;
    int a = -1;
    int b = -1;
    std::vector<int> list;
    Matrix value;
    double alpha = 0.0;
    Eigen::Index p0 = 0;
    Eigen::Index p1 = 0;
    Activation act = Activation::identity;
    int order = 0;
    std::shared_ptr<const std::vector<int>> index;
    bool needs_grad = false;
  };

  Var push(Node&& node);
  const Node& node(Var v) const;
  void check_owner(Var v) const;
  bool needs(int id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad; }

  void backward_node(int id, const Matrix& g);
  void accumulate(int id, const Matrix& g);
  template <class Expr>
  void accumulate_expr(int id, const Expr& g);

  Var tangent_rule(int id, const std::vector<int>& tangent);
  void vjp_rule(int id, Var g, int lo, const std::vector<char>& depends, std::vector<int>& adjoint);
  Var accumulate_var(Var existing, Var g);

  Mode mode_;
  std::vector<Node> nodes_;
  std::vector<Matrix> adjoint_;
  std::vector<char> has_adjoint_;
  bool consumed_ = false;
};

// Operator sugar for the common elementwise kernels.
inline Var operator+(Var a, Var b) { return a.graph->add(a, b); }
inline Var operator-(Var a, Var b) { return a.graph->sub(a, b); }
inline Var operator*(double s, Var a) { return a.graph->scale(a, s); }

/// Flat parameter array with a named segment layout.
class ParamVector {
 public:
  struct Segment {
    std::string name;
    Eigen::Index offset = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    [[nodiscard]] Eigen::Index size() const { return rows * cols; }
  };

  ParamVector() = default;

  /// Appends a rows x cols block (row-major) and returns its segment index.
  std::size_t add_segment(std::string name, Eigen::Index rows, Eigen::Index cols);
  /// Appends all segments of another vector, prefixing names.
  void append(const ParamVector& other, std::string_view prefix);

  [[nodiscard]] Eigen::Index size() const { return values_.size(); }
  [[nodiscard]] const std::vector<Segment>& segments() const { return segments_; }
  [[nodiscard]] const Segment* find(std::string_view name) const;
  [[nodiscard]] bool same_layout(const ParamVector& other) const;

  [[nodiscard]] Vector& values() { return values_; }
  [[nodiscard]] const Vector& values() const { return values_; }

  /// Segment contents as a rows x cols matrix (row-major layout).
  [[nodiscard]] Matrix block(std::size_t segment) const;
  void set_block(std::size_t segment, const Matrix& m);

  /// Creates one leaf per segment on the tape.
  [[nodiscard]] std::vector<Var> bind(Graph& g, bool requires_grad = true) const;
  /// Gathers the adjoints of bound leaves into a flat vector with this layout.
  [[nodiscard]] Vector gather_grad(const Graph& g, std::span<const Var> bound) const;

 private:
  std::vector<Segment> segments_;
  Vector values_;
};

using ScalarFn = std::function<Var(Graph&, Var)>;
using VectorFn = std::function<Var(Graph&, Var)>;

/// Reverse-mode gradient of a scalar function of a 1 x P parameter row.
Vector grad(const ScalarFn& scalar_fn, const Vector& theta);

/// (fn(x), J_fn(x) v) through forward tangent propagation.
std::pair<Vector, Vector> jvp(const VectorFn& fn, const Vector& x, const Vector& v);

/// Gradient of a scalar-valued map with respect to its input.
Vector input_grad(const VectorFn& scalar_net, const Vector& z);

/// Central-difference check of `gradient` against `fn` at `point`.
/// Per-component relative error, with the denominator floored at 1e-3 of the
/// gradient's max-norm so that near-zero components are judged on scale.
double fd_check(const std::function<double(const Vector&)>& fn, const Vector& gradient,
                const Vector& point, double h);

}  // namespace ad
}  // namespace trom
