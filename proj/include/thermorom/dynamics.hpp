// Latent right-hand sides: GFINN (exact GENERIC degeneracy), SPNN (penalty), plain FNN.
#pragma once

#include "thermorom/networks.hpp"

#include <memory>
#include <optional>

namespace trom {

enum class DynamicsKind : std::uint8_t { gfinn, spnn, fnn };

DynamicsKind parse_dynamics_kind(std::string_view name);
std::string_view dynamics_kind_name(DynamicsKind kind);

struct DynamicsSpec {
  DynamicsKind kind = DynamicsKind::gfinn;
  int latent = 2;
  int K = 0;                // rows of the Q matrices; 0 means latent
  std::vector<int> hidden;  // hidden widths shared by every sub-network
  Activation activation = Activation::tanh;
  bool shared_basis = false;

  [[nodiscard]] int basis_size() const { return K > 0 ? K : latent; }
};

/// Q with rows (A_j grad_g)^T. A is the K x n x n stack, one skew matrix per entry.
Matrix q_matrix(const Vector& grad_g, const std::vector<Matrix>& A);

/// Skew-symmetric A_j = B_j - B_j^T from unconstrained B_j.
std::vector<Matrix> skew_basis(const std::vector<Matrix>& B);

class Dynamics {
 public:
  Dynamics() = default;
  /// Registers segments dyn.* at the end of `params`.
  Dynamics(DynamicsSpec spec, ParamVector& params);

  [[nodiscard]] const DynamicsSpec& spec() const { return spec_; }
  [[nodiscard]] DynamicsKind kind() const { return spec_.kind; }
  [[nodiscard]] bool thermodynamic() const { return spec_.kind != DynamicsKind::fnn; }
  [[nodiscard]] int latent() const { return spec_.latent; }
  /// Contiguous parameter range owned by the dynamics (for weight decay).
  [[nodiscard]] Eigen::Index offset() const { return offset_; }
  [[nodiscard]] Eigen::Index size() const { return size_; }

  void init(ParamVector& params, std::mt19937_64& rng) const;

  struct Terms {
    Var F;            // B x n
    Var E, S;         // B x 1 (invalid for fnn)
    Var gradE, gradS; // B x n
    Var LgradS, MgradE;
  };
  /// Batched graph evaluation; rows of z are latent states. The degeneracy
  /// residuals are only built when requested.
  Terms terms(Graph& g, std::span<const Var> bound, Var z, bool degeneracy = false) const;
  Var rhs(Graph& g, std::span<const Var> bound, Var z) const { return terms(g, bound, z).F; }

  /// Numeric batched right-hand side.
  [[nodiscard]] Matrix rhs(const ParamVector& params, const Matrix& z) const;

  /// Everything at a single latent point, with L and M assembled explicitly.
  struct Point {
    double E = 0.0, S = 0.0;
    Vector gradE, gradS, F;
    Matrix L, M;
    Matrix QS, QE;  // gfinn only
  };
  [[nodiscard]] Point evaluate(const ParamVector& params, const Vector& z) const;

  /// Skew bases realized from the current parameters (gfinn only).
  [[nodiscard]] std::vector<Matrix> basis_L(const ParamVector& params) const;
  [[nodiscard]] std::vector<Matrix> basis_M(const ParamVector& params) const;

 private:
  struct Indices;
  Var skew_stack(Graph& g, Var B) const;
  Var qv(Graph& g, Var P, Var v) const;
  Var qtw(Graph& g, Var P, Var w) const;
  Var bmv(Graph& g, Var mat, Var v, int m) const;
  Var bmtv(Graph& g, Var mat, Var v, int m) const;
  Var skew_part(Graph& g, Var mat, int m) const;
  std::vector<Matrix> basis(const ParamVector& params, int segment) const;

  DynamicsSpec spec_;
  Mlp energy_, entropy_, mat_a_, mat_b_, fnn_;
  int basis_l_ = -1, basis_m_ = -1;  // segment indices
  Eigen::Index offset_ = 0, size_ = 0;
  std::shared_ptr<const Indices> idx_;
};

struct ThermoTrace {
  Vector E, S, dEdt, dSdt;
};

/// E, S and their rates dE/dt = grad E . F, dS/dt = grad S . F along a latent trajectory (rows).
ThermoTrace thermo_trace(const Dynamics& dyn, const ParamVector& params, const Matrix& trajectory);

}  // namespace trom
