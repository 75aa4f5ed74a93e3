// Feed-forward networks, autoencoders and hypernetworks.
#pragma once

#include "thermorom/autodiff.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace trom {

using ad::Activation;
using ad::Graph;
using ad::ParamVector;
using ad::Var;

struct MlpSpec {
  std::vector<int> widths;  // n_0 .. n_L
  Activation activation = Activation::tanh;

  [[nodiscard]] int in_dim() const { return widths.front(); }
  [[nodiscard]] int out_dim() const { return widths.back(); }
  [[nodiscard]] int layers() const { return static_cast<int>(widths.size()) - 1; }
  /// sum_l (n_l n_{l-1} + n_l)
  [[nodiscard]] Eigen::Index param_count() const;
  void validate() const;
};

/// f^1(x) = W^1 x + b^1, f^l(x) = W^l sigma(f^{l-1}(x)) + b^l, linear output.
/// Weights live in a ParamVector as segments prefix.W{l} (n_l x n_{l-1}) and
/// prefix.b{l} (1 x n_l); the same flat layout is used for hypernet outputs.
class Mlp {
 public:
  Mlp() = default;
  /// Declares the layout without registering parameters (hypernet templates).
  explicit Mlp(MlpSpec spec);
  /// Registers this net's segments at the end of `params`.
  Mlp(MlpSpec spec, ParamVector& params, const std::string& prefix);

  [[nodiscard]] const MlpSpec& spec() const { return spec_; }
  [[nodiscard]] Eigen::Index param_count() const { return spec_.param_count(); }
  [[nodiscard]] bool registered() const { return first_segment_ >= 0; }
  [[nodiscard]] Eigen::Index offset() const { return offset_; }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
  void init(ParamVector& params, std::mt19937_64& rng) const;
  /// Same scheme on a flat parameter array with this net's layout.
  void init_flat(Eigen::Ref<Vector> flat, std::mt19937_64& rng) const;

  /// Batched forward pass on the tape; rows of x are samples.
  Var forward(Graph& g, std::span<const Var> bound, Var x) const;
  /// Forward pass with weights sliced out of a 1 x P row.
  Var forward_flat(Graph& g, Var flat, Var x) const;

  /// Plain numeric evaluation, rows of x are samples.
  [[nodiscard]] Matrix eval(const ParamVector& params, const Matrix& x) const;
  [[nodiscard]] Matrix eval_flat(const double* flat, const Matrix& x) const;

 private:
  MlpSpec spec_;
  int first_segment_ = -1;
  Eigen::Index offset_ = 0;
};

/// Encoder N -> n and decoder n -> N; with hypernets enabled both get their
/// parameters from mu through two independent hypernetworks.
class Autoencoder {
 public:
  Autoencoder() = default;
  Autoencoder(const MlpSpec& encoder, const MlpSpec& decoder, ParamVector& params);
  /// Hyper-autoencoder: `hyper` gives the hidden part of both hypernets
  /// (input width = dim mu, output width is filled in).
  Autoencoder(const MlpSpec& encoder, const MlpSpec& decoder, const MlpSpec& hyper, ParamVector& params);

  [[nodiscard]] bool hyper() const { return hyper_; }
  [[nodiscard]] int full_dim() const { return enc_.spec().in_dim(); }
  [[nodiscard]] int latent_dim() const { return enc_.spec().out_dim(); }
  [[nodiscard]] int param_dim() const { return hyper_ ? henc_.spec().in_dim() : 0; }
  [[nodiscard]] const Mlp& encoder() const { return enc_; }
  [[nodiscard]] const Mlp& decoder() const { return dec_; }
  [[nodiscard]] const Mlp& hyper_encoder() const { return henc_; }
  [[nodiscard]] const Mlp& hyper_decoder() const { return hdec_; }

  void init(ParamVector& params, std::mt19937_64& rng) const;

  /// Per-mu weights; empty for plain autoencoders. Build once per mu and reuse.
  struct Weights {
    Var enc;
    Var dec;
  };
  Weights hyper_weights(Graph& g, std::span<const Var> bound, const Vector& mu) const;

  Var encode(Graph& g, std::span<const Var> bound, const Weights& w, Var x) const;
  Var decode(Graph& g, std::span<const Var> bound, const Weights& w, Var z) const;

  /// (theta_e(mu), theta_d(mu)).
  [[nodiscard]] std::pair<Vector, Vector> hyper_params(const ParamVector& params, const Vector& mu) const;
  [[nodiscard]] Matrix encode(const ParamVector& params, const Matrix& x, const Vector& mu = {}) const;
  [[nodiscard]] Matrix decode(const ParamVector& params, const Matrix& z, const Vector& mu = {}) const;
  [[nodiscard]] Matrix reconstruct(const ParamVector& params, const Matrix& x, const Vector& mu = {}) const;

 private:
  void check_mu(const Vector& mu) const;

  Mlp enc_, dec_;
  bool hyper_ = false;
  Mlp henc_, hdec_;
};

}  // namespace trom
