// A reduced-order model: (hyper-)autoencoder plus latent dynamics over one
// flat parameter vector.
#pragma once

#include "thermorom/dynamics.hpp"
#include "thermorom/integrators.hpp"
#include "thermorom/io.hpp"

namespace trom {

struct ModelSpec {
  MlpSpec encoder;
  MlpSpec decoder;
  bool hyper = false;
  MlpSpec hyper_net;  // widths [p, hidden..., ignored]; output width is filled in
  DynamicsSpec dynamics;

  void validate() const;
};

class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed);

  [[nodiscard]] const ModelSpec& spec() const { return spec_; }
  [[nodiscard]] ParamVector& params() { return params_; }
  [[nodiscard]] const ParamVector& params() const { return params_; }
  [[nodiscard]] const Autoencoder& ae() const { return ae_; }
  [[nodiscard]] const Dynamics& dyn() const { return dyn_; }
  [[nodiscard]] int full_dim() const { return ae_.full_dim(); }
  [[nodiscard]] int latent_dim() const { return ae_.latent_dim(); }

  /// Latent right-hand side on rows of z (autonomous).
  [[nodiscard]] BatchRhs latent_rhs() const;

  void save(const std::filesystem::path& path) const;
  void store(Checkpoint& c) const;
  static Model load(const std::filesystem::path& path);
  static Model restore(const Checkpoint& c);

 private:
  ModelSpec spec_;
  ParamVector params_;
  Autoencoder ae_;
  Dynamics dyn_;
};

}  // namespace trom
