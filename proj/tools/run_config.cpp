#include "run_config.hpp"

#include <fstream>
#include <set>

namespace trom::app {

using nlohmann::json;

namespace {

// Reads keys of one JSON object and rejects anything it did not ask for.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
  }
  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }
  template <class T, class Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string s;
    get(key, s);
    if (s.empty()) return;
    try {
      out = parse(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }
  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  Section sub(const char* key) {
    seen_.insert(key);
    return {j_.at(key), name_ + "." + key};
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(name_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

Problem parse_problem(std::string_view s) {
  if (s == "gas") return Problem::gas;
  if (s == "burgers") return Problem::burgers;
  if (s == "heat") return Problem::heat;
  if (s == "import") return Problem::import;
  throw std::invalid_argument("unknown problem '" + std::string(s) + "'");
}

DynamicsKind parse_model(std::string_view s) {
  if (s == "tlasdi-gfinn") return DynamicsKind::gfinn;
  if (s == "spnn") return DynamicsKind::spnn;
  if (s == "vanilla-fnn") return DynamicsKind::fnn;
  throw std::invalid_argument("unknown model '" + std::string(s) + "'");
}

JacVariant parse_jac(std::string_view s) {
  if (s == "derivative") return JacVariant::derivative;
  if (s == "frobenius") return JacVariant::frobenius;
  throw std::invalid_argument("unknown jacobian variant '" + std::string(s) + "'");
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return {};
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

void check_widths(const std::vector<int>& w, const std::string& what) {
  for (int v : w)
    if (v < 1) throw ConfigError(what + ": widths must be positive");
}

}  // namespace

std::string_view problem_name(Problem p) {
  switch (p) {
    case Problem::gas: return "gas";
    case Problem::burgers: return "burgers";
    case Problem::heat: return "heat";
    case Problem::import: return "import";
  }
  return "?";
}

std::string_view model_name(DynamicsKind k) {
  switch (k) {
    case DynamicsKind::gfinn: return "tlasdi-gfinn";
    case DynamicsKind::spnn: return "spnn";
    case DynamicsKind::fnn: return "vanilla-fnn";
  }
  return "?";
}

PdeGrid PdeBlock::data_grid() const {
  PdeGrid g = fine;
  g.nx = (fine.nx - 1) / space_stride + 1;
  g.nt = (fine.nt - 1) / time_stride + 1;
  return g;
}

RunConfig parse_config(const json& j, const std::filesystem::path& base) {
  RunConfig c;
  Section top(j, "config");
  top.get_enum("problem", c.problem, parse_problem);
  top.get_enum("model", c.model, parse_model);
  top.get("seed", c.seed);
  top.get("threads", c.threads);
  std::string out = c.out.string(), dataset, checkpoint;
  top.get("out", out);
  top.get("dataset", dataset);
  top.get("checkpoint", checkpoint);
  c.out = resolve(base, out);
  c.dataset = resolve(base, dataset);
  c.checkpoint = resolve(base, checkpoint);

  if (top.has("architecture")) {
    Section a = top.sub("architecture");
    a.get("encoder_hidden", c.arch.encoder_hidden);
    a.get("latent", c.arch.latent);
    a.get_enum("activation", c.arch.activation, ad::parse_activation);
    a.get("dynamics_hidden", c.arch.dynamics_hidden);
    a.get_enum("dynamics_activation", c.arch.dynamics_activation, ad::parse_activation);
    a.get("K", c.arch.K);
    a.get("shared_basis", c.arch.shared_basis);
    a.get("hyper", c.arch.hyper);
    a.get("hyper_hidden", c.arch.hyper_hidden);
    a.get_enum("hyper_activation", c.arch.hyper_activation, ad::parse_activation);
    a.finish();
  }
  if (top.has("loss")) {
    Section l = top.sub("loss");
    l.get("integration", c.loss.integration);
    l.get("reconstruction", c.loss.reconstruction);
    l.get("jacobian", c.loss.jacobian);
    l.get("model", c.loss.model);
    l.get("degeneracy", c.loss.degeneracy);
    l.get("regularization", c.loss.regularization);
    l.get_enum("jacobian_variant", c.jac, parse_jac);
    l.finish();
  }
  if (top.has("train")) {
    Section t = top.sub("train");
    t.get("iterations", c.train.iterations);
    t.get("batches", c.train.batches);
    t.get("batch_size", c.train.batch_size);
    t.get("lr", c.train.lr);
    t.get("decay", c.train.decay);
    t.get("decay_period", c.train.decay_period);
    t.get("lr_floor", c.train.lr_floor);
    t.get("substeps", c.train.substeps);
    t.get("checkpoint_every", c.train.checkpoint_every);
    t.finish();
  }
  if (top.has("integrator")) {
    Section s = top.sub("integrator");
    s.get_enum("scheme", c.integrator.scheme, parse_scheme);
    s.get("dt", c.integrator.dt);
    s.get("rtol", c.integrator.rtol);
    s.get("atol", c.integrator.atol);
    s.get("max_steps", c.integrator.max_steps);
    s.finish();
  }
  if (top.has("gas")) {
    Section g = top.sub("gas");
    g.get("count", c.gas.count);
    g.get("T", c.gas.T);
    g.get("delta", c.gas.delta);
    g.get("dt", c.gas.dt);
    g.get_enum("form", c.gas.form, parse_gas_form);
    g.get("data_seed", c.gas.data_seed);
    g.finish();
  }
  if (top.has("pde")) {
    Section p = top.sub("pde");
    p.get("x0", c.pde.fine.x0);
    p.get("x1", c.pde.fine.x1);
    p.get("t_end", c.pde.fine.t_end);
    p.get("nx", c.pde.fine.nx);
    p.get("nt", c.pde.fine.nt);
    p.get("space_stride", c.pde.space_stride);
    p.get("time_stride", c.pde.time_stride);
    p.get("mu_lo", c.pde.mu_lo);
    p.get("mu_hi", c.pde.mu_hi);
    p.get("counts", c.pde.counts);
    p.get("mu", c.pde.mu);
    p.finish();
  }
  if (top.has("greedy")) {
    Section g = top.sub("greedy");
    g.get("enabled", c.greedy.enabled);
    g.get("target", c.greedy.target);
    g.get("period", c.greedy.period);
    g.get("final_iterations", c.greedy.final_iterations);
    g.finish();
  }
  if (top.has("import")) {
    Section i = top.sub("import");
    std::string path;
    i.get("path", path);
    c.imported.path = resolve(base, path);
    i.get("train_steps", c.imported.train_steps);
    i.get("test_steps", c.imported.test_steps);
    i.finish();
  }
  if (top.has("ablate")) {
    Section a = top.sub("ablate");
    a.get("seeds", c.ablate.seeds);
    a.get("configurations", c.ablate.configurations);
    a.finish();
  }
  if (top.has("linear")) {
    Section l = top.sub("linear");
    l.get("systems", c.linear.systems);
    l.get("N", c.linear.N);
    l.get("n", c.linear.n);
    l.get("points", c.linear.points);
    l.get("t_end", c.linear.t_end);
    l.finish();
  }
  top.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j, path.parent_path());
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  try {
    loss.validate();
    train.validate();
    integrator.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (threads < 1) fail("threads must be positive");
  if (arch.latent < 1) fail("architecture.latent must be positive");
  check_widths(arch.encoder_hidden, "architecture.encoder_hidden");
  check_widths(arch.dynamics_hidden, "architecture.dynamics_hidden");
  check_widths(arch.hyper_hidden, "architecture.hyper_hidden");
  if (arch.K < 0) fail("architecture.K must be nonnegative");
  if (loss.degeneracy > 0.0 && model != DynamicsKind::spnn) fail("loss.degeneracy applies to spnn models only");
  if (!dataset.empty() && !std::filesystem::exists(dataset)) fail("dataset not found: " + dataset.string());
  if (!checkpoint.empty() && !std::filesystem::exists(checkpoint))
    fail("checkpoint not found: " + checkpoint.string());

  const bool parametric = problem == Problem::burgers || problem == Problem::heat;
  if (arch.hyper && !parametric) fail("hypernetworks need a parametric problem");
  switch (problem) {
    case Problem::gas: {
      if (gas.count < 1) fail("gas.count must be positive");
      if (!(gas.dt > 0.0) || !(gas.T > 0.0) || !(gas.delta >= 0.0)) fail("gas: T, delta and dt must be positive");
      const double steps = gas.T / gas.dt, extra = gas.delta / gas.dt;
      if (std::abs(steps - std::round(steps)) > 1e-9 || std::abs(extra - std::round(extra)) > 1e-9)
        fail("gas: T and delta must be multiples of dt");
      break;
    }
    case Problem::burgers:
    case Problem::heat: {
      try {
        pde.fine.validate();
      } catch (const std::invalid_argument& e) {
        fail(std::string("pde: ") + e.what());
      }
      if (pde.space_stride < 1 || pde.time_stride < 1) fail("pde: strides must be positive");
      if ((pde.fine.nx - 1) % pde.space_stride != 0) fail("pde.space_stride does not divide nx - 1");
      if ((pde.fine.nt - 1) % pde.time_stride != 0) fail("pde.time_stride does not divide nt - 1");
      if (pde.mu_lo.size() != 2 || pde.mu_hi.size() != 2 || pde.counts.size() != 2)
        fail("pde: mu_lo, mu_hi and counts need two entries (alpha, omega)");
      for (int i = 0; i < 2; ++i) {
        if (!(pde.mu_hi[i] > pde.mu_lo[i])) fail("pde: mu_hi must exceed mu_lo");
        if (pde.counts[i] < 2) fail("pde: at least two grid points per axis");
      }
      for (const auto& mu : pde.mu) {
        if (mu.size() != 2) fail("pde.mu entries need two values");
        if (!(mu[1] > 0.0)) fail("pde.mu: omega must be positive");
      }
      if (pde.mu_lo[1] <= 0.0) fail("pde: omega must be positive");
      if (greedy.enabled) {
        if (greedy.target < 4) fail("greedy.target must be at least the four corners");
        if (greedy.target > static_cast<std::size_t>(pde.counts[0] * pde.counts[1]))
          fail("greedy.target exceeds the parameter grid");
        if (greedy.period < 0 || greedy.final_iterations < 0) fail("greedy: iterations must be nonnegative");
      } else if (pde.mu.empty() && dataset.empty()) {
        fail("pde: give training parameters (pde.mu), a dataset or enable greedy sampling");
      }
      break;
    }
    case Problem::import:
      if (imported.path.empty() && dataset.empty()) fail("import: a dataset path is required");
      if (!imported.path.empty() && !std::filesystem::exists(imported.path))
        fail("import path not found: " + imported.path.string());
      if (imported.train_steps < 0 || imported.test_steps < 0) fail("import: step counts must be nonnegative");
      break;
  }
  if (ablate.seeds < 1) fail("ablate.seeds must be positive");
  for (const auto& name : ablate.configurations)
    if (name != "standard" && name != "jacobian" && name != "model" && name != "full")
      fail("ablate: unknown configuration '" + name + "'");
  if (linear.systems < 1 || linear.N < 2 || linear.n < 1 || linear.n >= linear.N || linear.points < 2 ||
      !(linear.t_end > 0.0))
    fail("linear: need systems >= 1, 1 <= n < N, points >= 2, t_end > 0");
}

ModelSpec RunConfig::model_spec(int N, int p) const {
  ModelSpec s;
  s.encoder.widths.push_back(N);
  for (int w : arch.encoder_hidden) s.encoder.widths.push_back(w);
  s.encoder.widths.push_back(arch.latent);
  s.encoder.activation = arch.activation;
  s.decoder.widths.assign(s.encoder.widths.rbegin(), s.encoder.widths.rend());
  s.decoder.activation = arch.activation;
  s.hyper = arch.hyper;
  if (arch.hyper) {
    s.hyper_net.widths.push_back(p);
    for (int w : arch.hyper_hidden) s.hyper_net.widths.push_back(w);
    s.hyper_net.widths.push_back(1);
    s.hyper_net.activation = arch.hyper_activation;
  }
  s.dynamics.kind = model;
  s.dynamics.latent = arch.latent;
  s.dynamics.K = arch.K;
  s.dynamics.hidden = arch.dynamics_hidden;
  s.dynamics.activation = arch.dynamics_activation;
  s.dynamics.shared_basis = arch.shared_basis;
  return s;
}

TrainSpec RunConfig::train_spec() const {
  TrainSpec t = train;
  t.seed = seed;
  t.jac = jac;
  return t;
}

json RunConfig::to_json() const {
  json j;
  j["problem"] = problem_name(problem);
  j["model"] = model_name(model);
  j["seed"] = seed;
  j["threads"] = threads;
  j["out"] = out.string();
  j["architecture"] = {{"encoder_hidden", arch.encoder_hidden},
                       {"latent", arch.latent},
                       {"activation", activation_name(arch.activation)},
                       {"dynamics_hidden", arch.dynamics_hidden},
                       {"dynamics_activation", activation_name(arch.dynamics_activation)},
                       {"K", arch.K},
                       {"shared_basis", arch.shared_basis},
                       {"hyper", arch.hyper},
                       {"hyper_hidden", arch.hyper_hidden},
                       {"hyper_activation", activation_name(arch.hyper_activation)}};
  j["loss"] = {{"integration", loss.integration},     {"reconstruction", loss.reconstruction},
               {"jacobian", loss.jacobian},           {"model", loss.model},
               {"degeneracy", loss.degeneracy},       {"regularization", loss.regularization},
               {"jacobian_variant", jac == JacVariant::derivative ? "derivative" : "frobenius"}};
  j["train"] = {{"iterations", train.iterations}, {"batches", train.batches},
                {"batch_size", train.batch_size}, {"lr", train.lr},
                {"decay", train.decay},           {"decay_period", train.decay_period},
                {"lr_floor", train.lr_floor},     {"substeps", train.substeps},
                {"checkpoint_every", train.checkpoint_every}};
  j["integrator"] = {{"scheme", scheme_name(integrator.scheme)},
                     {"dt", integrator.dt},
                     {"rtol", integrator.rtol},
                     {"atol", integrator.atol},
                     {"max_steps", integrator.max_steps}};
  return j;
}

}  // namespace trom::app
