#include "thermorom/model.hpp"

namespace trom {

void ModelSpec::validate() const {
  encoder.validate();
  decoder.validate();
  if (encoder.in_dim() != decoder.out_dim() || encoder.out_dim() != decoder.in_dim())
    throw std::invalid_argument("encoder and decoder dimensions do not match");
  if (dynamics.latent != encoder.out_dim()) throw std::invalid_argument("dynamics latent dimension != encoder output");
  if (hyper) {
    if (hyper_net.widths.size() < 2) throw std::invalid_argument("hypernetwork needs widths");
    MlpSpec h = hyper_net;
    h.widths.back() = 1;  // filled in from the template
    h.validate();
  }
}

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  ae_ = spec_.hyper ? Autoencoder(spec_.encoder, spec_.decoder, spec_.hyper_net, params_)
                    : Autoencoder(spec_.encoder, spec_.decoder, params_);
  dyn_ = Dynamics(spec_.dynamics, params_);
  std::mt19937_64 rng(seed);
  ae_.init(params_, rng);
  dyn_.init(params_, rng);
}

BatchRhs Model::latent_rhs() const {
  return [this](double, const Matrix& z) { return dyn_.rhs(params_, z); };
}

namespace {

std::vector<std::int64_t> widths_of(const MlpSpec& s) { return {s.widths.begin(), s.widths.end()}; }

MlpSpec mlp_from(const Checkpoint& c, const std::string& name) {
  MlpSpec s;
  for (auto w : c.ints(name + ".widths")) s.widths.push_back(static_cast<int>(w));
  s.activation = ad::parse_activation(c.string(name + ".activation"));
  return s;
}

}  // namespace

void Model::store(Checkpoint& c) const {
  auto mlp = [&](const std::string& name, const MlpSpec& s) {
    c.put_ints(name + ".widths", widths_of(s));
    c.put_strings(name + ".activation", {std::string(ad::activation_name(s.activation))});
  };
  mlp("encoder", spec_.encoder);
  mlp("decoder", spec_.decoder);
  c.put_ints("hyper", {spec_.hyper ? 1 : 0});
  if (spec_.hyper) mlp("hyper_net", spec_.hyper_net);
  const DynamicsSpec& d = spec_.dynamics;
  c.put_strings("dynamics.kind", {std::string(dynamics_kind_name(d.kind))});
  c.put_ints("dynamics.dims", {d.latent, d.K, d.shared_basis ? 1 : 0});
  c.put_ints("dynamics.hidden", {d.hidden.begin(), d.hidden.end()});
  c.put_strings("dynamics.activation", {std::string(ad::activation_name(d.activation))});
  std::vector<std::string> names;
  for (const auto& s : params_.segments()) names.push_back(s.name);
  c.put_strings("params.names", std::move(names));
  c.put("params.values", params_.values());
}

void Model::save(const std::filesystem::path& path) const {
  Checkpoint c;
  store(c);
  c.write(path);
}

Model Model::restore(const Checkpoint& c) {
  ModelSpec spec;
  spec.encoder = mlp_from(c, "encoder");
  spec.decoder = mlp_from(c, "decoder");
  spec.hyper = c.ints("hyper").at(0) != 0;
  if (spec.hyper) spec.hyper_net = mlp_from(c, "hyper_net");
  spec.dynamics.kind = parse_dynamics_kind(c.string("dynamics.kind"));
  const auto& dims = c.ints("dynamics.dims");
  if (dims.size() != 3) throw FormatError("checkpoint dynamics.dims malformed");
  spec.dynamics.latent = static_cast<int>(dims[0]);
  spec.dynamics.K = static_cast<int>(dims[1]);
  spec.dynamics.shared_basis = dims[2] != 0;
  for (auto h : c.ints("dynamics.hidden")) spec.dynamics.hidden.push_back(static_cast<int>(h));
  spec.dynamics.activation = ad::parse_activation(c.string("dynamics.activation"));
  Model m(std::move(spec), 0);
  const Vector values = c.vector("params.values");
  const auto& names = c.strings("params.names");
  if (values.size() != m.params_.size() || names.size() != m.params_.segments().size())
    throw FormatError("checkpoint parameter layout does not match its architecture");
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] != m.params_.segments()[i].name) throw FormatError("checkpoint segment name mismatch: " + names[i]);
  m.params_.values() = values;
  return m;
}

Model Model::load(const std::filesystem::path& path) { return restore(Checkpoint::read(path)); }

}  // namespace trom
