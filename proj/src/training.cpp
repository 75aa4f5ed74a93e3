#include "thermorom/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace trom {

void LossWeights::validate() const {
  for (double w : {integration, reconstruction, jacobian, model, degeneracy, regularization})
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and nonnegative");
}

bool Batch::has_derivatives() const {
  return !groups.empty() &&
         std::all_of(groups.begin(), groups.end(), [](const Group& g) { return g.dx0.size() > 0; });
}

Eigen::Index Batch::pairs() const {
  Eigen::Index n = 0;
  for (const auto& g : groups) n += g.x0.rows();
  return n;
}

namespace {

double common_dt(const std::vector<SnapshotSet>& data) {
  double dt = 0.0;
  for (const SnapshotSet& s : data) {
    s.validate();
    if (s.steps() < 2) throw std::invalid_argument("training sets need at least two snapshots");
    const double d = s.dt();
    for (Eigen::Index k = 1; k < s.steps(); ++k)
      if (std::abs(s.times[k] - s.times[k - 1] - d) > 1e-9 * std::max(1.0, d))
        throw std::invalid_argument("training sets need a uniform time grid");
    if (dt == 0.0) dt = d;
    else if (std::abs(d - dt) > 1e-9 * std::max(1.0, dt))
      throw std::invalid_argument("all training sets must share one time step");
  }
  return dt;
}

}  // namespace

Batch full_batch(const std::vector<SnapshotSet>& data) {
  Batch b;
  b.dt = common_dt(data);
  for (const SnapshotSet& s : data) {
    Batch::Group g;
    g.mu = s.mu;
    const Eigen::Index K = s.steps() - 1;
    g.x0 = s.states.topRows(K);
    g.x1 = s.states.bottomRows(K);
    if (s.has_derivatives()) g.dx0 = s.derivatives.topRows(K);
    b.groups.push_back(std::move(g));
  }
  return b;
}

// ---------------------------------------------------------------------------

namespace {

Var frobenius_term(Graph& g, const Model& m, std::span<const Var> bound, const Autoencoder::Weights& w,
                   const Matrix& x0, const LossOptions& opt, std::uint64_t stream) {
  const Eigen::Index N = x0.cols(), rows = x0.rows();
  const bool exact = N <= opt.exact_frobenius_limit;
  const Eigen::Index P = exact ? N : opt.probes;
  Matrix probes(P, N);
  if (exact) {
    probes.setIdentity();
  } else {
    std::mt19937_64 rng(opt.probe_seed * 0x9E3779B97F4A7C15ULL + stream);
    std::bernoulli_distribution coin(0.5);
    for (Eigen::Index i = 0; i < probes.size(); ++i) probes.data()[i] = coin(rng) ? 1.0 : -1.0;
  }
  Matrix xrep(rows * P, N), vrep(rows * P, N);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index p = 0; p < P; ++p) {
      xrep.row(i * P + p) = x0.row(i);
      vrep.row(i * P + p) = probes.row(p);
    }
  const Var xr = g.input(std::move(xrep), false);
  const Var v = g.constant(vrep);
  const Var zr = m.ae().encode(g, bound, w, xr);
  Var ze = g.tangent(zr, xr, v);
  if (!ze.valid()) ze = g.zeros(zr.rows(), zr.cols());
  const Var xh = m.ae().decode(g, bound, w, zr);
  Var jd = g.tangent(xh, zr, ze);
  if (!jd.valid()) jd = g.zeros(xh.rows(), xh.cols());
  const Var term = g.sum_squares(g.sub(v, jd));
  return exact ? term : g.scale(term, 1.0 / static_cast<double>(P));
}

}  // namespace

LossValue total_loss(const Model& m, const Batch& b, const LossOptions& opt, Vector* grad) {
  const LossWeights& w = opt.weights;
  w.validate();
  if (b.groups.empty()) throw std::invalid_argument("empty batch");
  const bool spnn = m.dyn().kind() == DynamicsKind::spnn;
  if (w.degeneracy > 0.0 && m.dyn().kind() != DynamicsKind::spnn)
    throw std::invalid_argument("degeneracy loss requested for non-SPNN dynamics");
  const bool derivs = b.has_derivatives();
  auto want = [&](double weight) { return weight > 0.0 || opt.all_components; };
  const bool do_int = want(w.integration);
  const bool do_rec = want(w.reconstruction);
  bool do_jac = want(w.jacobian);
  bool do_mod = want(w.model);
  const bool do_deg = w.degeneracy > 0.0 || (opt.all_components && spnn);
  if (w.model > 0.0 && !derivs) throw std::invalid_argument("model loss needs derivative data");
  if (w.jacobian > 0.0 && opt.jac == JacVariant::derivative && !derivs)
    throw std::invalid_argument("derivative Jacobian loss needs derivative data");
  if (!derivs) {
    do_mod = false;
    if (opt.jac == JacVariant::derivative) do_jac = false;
  }

  Graph g(grad ? Graph::Mode::reverse : Graph::Mode::primal);
  const auto bound = m.params().bind(g, grad != nullptr);

  std::vector<Var> rec_terms, jac_terms, mod_terms, z0s, z1s, xhats, zes;
  std::vector<Autoencoder::Weights> weights;
  std::vector<Var> z0_nodes;
  for (std::size_t gi = 0; gi < b.groups.size(); ++gi) {
    const Batch::Group& grp = b.groups[gi];
    require_dims(grp.x0.cols() == m.full_dim() && grp.x1.rows() == grp.x0.rows(), "batch group shape");
    const auto hw = m.ae().hyper_weights(g, bound, grp.mu);
    weights.push_back(hw);
    const Var x0 = g.input(grp.x0, false);
    const Var z0 = m.ae().encode(g, bound, hw, x0);
    z0s.push_back(z0);
    if (do_int) z1s.push_back(m.ae().encode(g, bound, hw, g.constant(grp.x1)));
    Var xhat;
    if (do_rec || do_mod || (do_jac && opt.jac == JacVariant::derivative)) xhat = m.ae().decode(g, bound, hw, z0);
    xhats.push_back(xhat);
    if (do_rec) rec_terms.push_back(g.sum_squares(g.sub(x0, xhat)));
    Var ze;
    const bool need_ze = do_mod || (do_jac && opt.jac == JacVariant::derivative);
    Var dx;
    if (need_ze) {
      dx = g.constant(grp.dx0);
      ze = g.tangent(z0, x0, dx);
      if (!ze.valid()) ze = g.zeros(z0.rows(), z0.cols());
    }
    zes.push_back(ze);
    if (do_jac) {
      if (opt.jac == JacVariant::derivative) {
        Var jd = g.tangent(xhat, z0, ze);
        if (!jd.valid()) jd = g.zeros(xhat.rows(), xhat.cols());
        jac_terms.push_back(g.sum_squares(g.sub(dx, jd)));
      } else {
        jac_terms.push_back(frobenius_term(g, m, bound, hw, grp.x0, opt, gi));
      }
    }
  }

  LossValue out;
  std::vector<std::pair<double, Var>> weighted;
  auto add_all = [&](const std::vector<Var>& terms) {
    Var acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = g.add(acc, terms[i]);
    return acc;
  };

  Var Fk1;
  if (do_int || do_mod || do_deg) {
    const Var Z = z0s.size() == 1 ? z0s[0] : g.concat_rows(z0s);
    const auto terms = m.dyn().terms(g, bound, Z, do_deg);
    Fk1 = terms.F;
    if (do_deg) {
      const Var deg = g.add(g.sum_squares(terms.LgradS), g.sum_squares(terms.MgradE));
      out.degeneracy = g.value(deg)(0, 0);
      weighted.emplace_back(w.degeneracy, deg);
    }
    if (do_int) {
      const Var Z1 = z1s.size() == 1 ? z1s[0] : g.concat_rows(z1s);
      const auto F = [&](Var z) { return m.dyn().rhs(g, bound, z); };
      const double hs = b.dt / opt.substeps;
      Var z = Z;
      for (int s = 0; s < opt.substeps; ++s) {
        const Var k1 = s == 0 ? Fk1 : F(z);
        const Var k2 = F(g.add(z, g.scale(k1, 0.5 * hs)));
        const Var k3 = F(g.add(z, g.scale(k2, 0.5 * hs)));
        const Var k4 = F(g.add(z, g.scale(k3, hs)));
        z = g.add(z, g.scale(g.add(g.add(k1, k4), g.scale(g.add(k2, k3), 2.0)), hs / 6.0));
      }
      const Var li = g.sum_squares(g.sub(Z1, z));
      out.integration = g.value(li)(0, 0);
      weighted.emplace_back(w.integration, li);
    }
    if (do_mod) {
      Eigen::Index off = 0;
      for (std::size_t gi = 0; gi < b.groups.size(); ++gi) {
        const Eigen::Index rows = b.groups[gi].x0.rows();
        const Var Fg = b.groups.size() == 1 ? Fk1 : g.slice_rows(Fk1, off, rows);
        off += rows;
        Var jdF = g.tangent(xhats[gi], z0s[gi], Fg);
        if (!jdF.valid()) jdF = g.zeros(xhats[gi].rows(), xhats[gi].cols());
        const Var dx = g.constant(b.groups[gi].dx0);
        mod_terms.push_back(g.add(g.sum_squares(g.sub(zes[gi], Fg)), g.sum_squares(g.sub(dx, jdF))));
      }
    }
  }
  if (do_rec) {
    const Var v = add_all(rec_terms);
    out.reconstruction = g.value(v)(0, 0);
    weighted.emplace_back(w.reconstruction, v);
  }
  if (do_jac) {
    const Var v = add_all(jac_terms);
    out.jacobian = g.value(v)(0, 0);
    weighted.emplace_back(w.jacobian, v);
  }
  if (do_mod) {
    const Var v = add_all(mod_terms);
    out.model = g.value(v)(0, 0);
    weighted.emplace_back(w.model, v);
  }

  Var total;
  for (const auto& [wt, v] : weighted) {
    if (wt == 0.0) continue;
    const Var term = wt == 1.0 ? v : g.scale(v, wt);
    total = total.valid() ? g.add(total, term) : term;
  }
  out.total = total.valid() ? g.value(total)(0, 0) : 0.0;

  const Eigen::Index off = m.dyn().offset(), len = m.dyn().size();
  if (w.regularization > 0.0 || opt.all_components) {
    out.regularization = m.params().values().segment(off, len).squaredNorm();
    out.total += w.regularization * out.regularization;
  }
  if (grad) {
    if (total.valid()) {
      g.backward(total);
      *grad = m.params().gather_grad(g, bound);
    } else {
      *grad = Vector::Zero(m.params().size());
    }
    if (w.regularization > 0.0) grad->segment(off, len) += 2.0 * w.regularization * m.params().values().segment(off, len);
  }
  return out;
}

namespace {
LossValue single(const Model& m, const Batch& b, LossWeights w, JacVariant jac = JacVariant::derivative,
                 int substeps = 1) {
  LossOptions opt;
  opt.weights = w;
  opt.jac = jac;
  opt.substeps = substeps;
  return total_loss(m, b, opt);
}
LossWeights only() { return {0, 0, 0, 0, 0, 0}; }
}  // namespace

double loss_int(const Model& m, const Batch& b, int substeps) {
  LossWeights w = only();
  w.integration = 1.0;
  return single(m, b, w, JacVariant::derivative, substeps).integration;
}

double loss_rec(const Model& m, const Batch& b) {
  LossWeights w = only();
  w.reconstruction = 1.0;
  return single(m, b, w).reconstruction;
}

double loss_jac(const Model& m, const Batch& b, JacVariant variant) {
  LossWeights w = only();
  w.jacobian = 1.0;
  return single(m, b, w, variant).jacobian;
}

double loss_mod(const Model& m, const Batch& b) {
  LossWeights w = only();
  w.model = 1.0;
  return single(m, b, w).model;
}

double loss_deg(const Model& m, const Batch& b) {
  if (m.dyn().kind() != DynamicsKind::spnn)
    throw std::invalid_argument("loss_deg: degeneracy is structural for this dynamics model");
  LossWeights w = only();
  w.degeneracy = 1.0;
  return single(m, b, w).degeneracy;
}

double degeneracy_residual(const Model& m, const Batch& b) {
  if (!m.dyn().thermodynamic()) throw std::invalid_argument("degeneracy_residual needs GFINN or SPNN dynamics");
  Graph g(Graph::Mode::primal);
  const auto bound = m.params().bind(g, false);
  double total = 0.0;
  for (const auto& grp : b.groups) {
    const auto hw = m.ae().hyper_weights(g, bound, grp.mu);
    const Var z = m.ae().encode(g, bound, hw, g.constant(grp.x0));
    const auto t = m.dyn().terms(g, bound, z, true);
    total += g.value(t.LgradS).squaredNorm() + g.value(t.MgradE).squaredNorm();
  }
  return total;
}

// ---------------------------------------------------------------------------

Adam::Adam(Eigen::Index size, double beta1, double beta2, double eps)
    : b1_(beta1), b2_(beta2), eps_(eps), m_(Vector::Zero(size)), v_(Vector::Zero(size)) {}

void Adam::step(Vector& theta, const Vector& grad, double lr) {
  require_dims(theta.size() == m_.size() && grad.size() == m_.size(), "adam step");
  ++t_;
  m_ = b1_ * m_ + (1.0 - b1_) * grad;
  v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  theta.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

void Adam::store(Checkpoint& c) const {
  c.put("adam.m", m_);
  c.put("adam.v", v_);
  c.put_ints("adam.t", {t_});
  c.put("adam.hyper", std::vector<double>{b1_, b2_, eps_});
}

void Adam::restore(const Checkpoint& c) {
  m_ = c.vector("adam.m");
  v_ = c.vector("adam.v");
  t_ = static_cast<long>(c.ints("adam.t").at(0));
  const auto& h = c.f64("adam.hyper");
  b1_ = h.at(0);
  b2_ = h.at(1);
  eps_ = h.at(2);
}

void TrainSpec::validate() const {
  if (iterations < 0) throw std::invalid_argument("iterations must be nonnegative");
  if (batches < 1 || batch_size < 0) throw std::invalid_argument("invalid batch plan");
  if (!(lr > 0.0) || !(lr_floor >= 0.0)) throw std::invalid_argument("invalid learning rate");
  if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("decay rate must lie in [0, 1)");
  if (decay_period < 1 || checkpoint_every < 1) throw std::invalid_argument("periods must be positive");
  if (substeps < 1) throw std::invalid_argument("substeps must be positive");
}

double lr_schedule(long iteration, const TrainSpec& spec) {
  const double periods = std::floor(static_cast<double>(iteration) / static_cast<double>(spec.decay_period));
  return std::max(spec.lr_floor, spec.lr * std::pow(1.0 - spec.decay, periods));
}

void TrainHistory::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iteration,wall_seconds,loss_total,loss_int,loss_rec,loss_jac,loss_mod,loss_deg,lr,validation\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.iteration << ',' << r.wall_seconds << ',' << r.loss.total << ',' << r.loss.integration << ','
        << r.loss.reconstruction << ',' << r.loss.jacobian << ',' << r.loss.model << ',' << r.loss.degeneracy << ','
        << r.lr << ',';
    if (!std::isnan(r.validation)) out << r.validation;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

Trainer::Trainer(Model& model, LossWeights weights, TrainSpec spec)
    : model_(model), spec_(std::move(spec)), adam_(model.params().size()), rng_(spec_.seed) {
  weights.validate();
  spec_.validate();
  if (weights.degeneracy > 0.0 && model.dyn().kind() != DynamicsKind::spnn)
    throw std::invalid_argument("degeneracy loss weight set for non-SPNN dynamics");
  options_.weights = weights;
  options_.jac = spec_.jac;
  options_.substeps = spec_.substeps;
  last_good_ = model.params().values();
  start_ = std::chrono::steady_clock::now();
}

void Trainer::set_data(std::vector<SnapshotSet> data) {
  if (data.empty()) throw std::invalid_argument("no training data");
  common_dt(data);
  for (const auto& s : data) {
    require_dims(s.full_dim() == model_.full_dim(), "training data dimension vs model");
    if (model_.ae().hyper()) require_dims(s.mu.size() == model_.ae().param_dim(), "training data parameter");
  }
  const bool derivs = std::all_of(data.begin(), data.end(), [](const SnapshotSet& s) { return s.has_derivatives(); });
  if (!derivs) {
    // Without derivative data the Frobenius bound replaces the Jacobian term
    // and the model term is dropped.
    options_.jac = JacVariant::frobenius;
    options_.weights.model = 0.0;
  } else {
    options_.jac = spec_.jac;
  }
  data_ = std::move(data);
  order_.clear();
  for (std::size_t s = 0; s < data_.size(); ++s)
    for (Eigen::Index k = 0; k + 1 < data_[s].steps(); ++k) order_.emplace_back(s, k);
  cursor_ = order_.size();
}

Batch Trainer::next_batch() {
  const std::size_t total = order_.size();
  const std::size_t size =
      spec_.batch_size > 0 ? std::min<std::size_t>(static_cast<std::size_t>(spec_.batch_size), total)
                           : (total + static_cast<std::size_t>(spec_.batches) - 1) / static_cast<std::size_t>(spec_.batches);
  if (cursor_ >= total) {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  const std::size_t end = std::min(total, cursor_ + size);
  std::vector<std::pair<std::size_t, Eigen::Index>> pick(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                                         order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  std::sort(pick.begin(), pick.end());
  Batch b;
  b.dt = data_.front().dt();
  std::size_t i = 0;
  while (i < pick.size()) {
    std::size_t j = i;
    while (j < pick.size() && pick[j].first == pick[i].first) ++j;
    const SnapshotSet& s = data_[pick[i].first];
    Batch::Group grp;
    grp.mu = s.mu;
    const auto rows = static_cast<Eigen::Index>(j - i);
    grp.x0.resize(rows, s.full_dim());
    grp.x1.resize(rows, s.full_dim());
    if (s.has_derivatives()) grp.dx0.resize(rows, s.full_dim());
    for (std::size_t r = i; r < j; ++r) {
      const auto row = static_cast<Eigen::Index>(r - i);
      const Eigen::Index k = pick[r].second;
      grp.x0.row(row) = s.states.row(k);
      grp.x1.row(row) = s.states.row(k + 1);
      if (s.has_derivatives()) grp.dx0.row(row) = s.derivatives.row(k);
    }
    b.groups.push_back(std::move(grp));
    i = j;
  }
  return b;
}

void Trainer::checkpoint() {
  HistoryRow row;
  row.iteration = iteration_;
  row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  const double n = static_cast<double>(std::max(1L, window_count_));
  row.loss.total = window_.total / n;
  row.loss.integration = window_.integration / n;
  row.loss.reconstruction = window_.reconstruction / n;
  row.loss.jacobian = window_.jacobian / n;
  row.loss.model = window_.model / n;
  row.loss.degeneracy = window_.degeneracy / n;
  row.loss.regularization = window_.regularization / n;
  row.lr = lr_schedule(iteration_ > 0 ? iteration_ - 1 : 0, spec_);
  if (validation) row.validation = validation(model_);
  history_.rows.push_back(row);
  window_ = {};
  window_count_ = 0;
  last_good_ = model_.params().values();
  if (!spec_.checkpoint_path.empty()) save_state(spec_.checkpoint_path);
}

TrainHistory& Trainer::run(long iterations) {
  if (iterations < 0) throw std::invalid_argument("iterations must be nonnegative");
  if (iterations > 0 && data_.empty()) throw std::logic_error("Trainer::run without data");
  Vector grad;
  for (long it = 0; it < iterations; ++it) {
    const double lr = lr_schedule(iteration_, spec_);
    const Batch batch = next_batch();
    options_.probe_seed = spec_.seed ^ static_cast<std::uint64_t>(iteration_);
    LossValue loss;
    std::string failure;
    try {
      loss = total_loss(model_, batch, options_, &grad);
      if (!std::isfinite(loss.total) || !grad.allFinite()) failure = "non-finite loss";
    } catch (const NumericalError& e) {
      failure = e.what();
    }
    if (!failure.empty()) {
      std::ostringstream os;
      os << failure << " at iteration " << iteration_;
      model_.params().values() = last_good_;
      history_.aborted = true;
      history_.abort_reason = os.str();
      return history_;
    }
    adam_.step(model_.params().values(), grad, lr);
    ++iteration_;
    window_.total += loss.total;
    window_.integration += loss.integration;
    window_.reconstruction += loss.reconstruction;
    window_.jacobian += loss.jacobian;
    window_.model += loss.model;
    window_.degeneracy += loss.degeneracy;
    window_.regularization += loss.regularization;
    ++window_count_;
    if (iteration_ % spec_.checkpoint_every == 0) checkpoint();
  }
  if (window_count_ > 0) checkpoint();
  return history_;
}

void Trainer::save_state(const std::filesystem::path& path) const {
  Checkpoint c;
  model_.store(c);
  adam_.store(c);
  c.put_ints("trainer.iteration", {iteration_});
  std::ostringstream rng;
  rng << rng_;
  c.put_strings("trainer.rng", {rng.str()});
  std::vector<std::int64_t> order;
  for (const auto& [s, k] : order_) {
    order.push_back(static_cast<std::int64_t>(s));
    order.push_back(k);
  }
  c.put_ints("trainer.order", std::move(order));
  c.put_ints("trainer.cursor", {static_cast<std::int64_t>(cursor_)});
  c.write(path);
}

void Trainer::load_state(const std::filesystem::path& path) {
  const Checkpoint c = Checkpoint::read(path);
  Model loaded = Model::restore(c);
  if (!loaded.params().same_layout(model_.params())) throw FormatError("checkpoint does not match the model layout");
  model_.params().values() = loaded.params().values();
  adam_.restore(c);
  iteration_ = static_cast<long>(c.ints("trainer.iteration").at(0));
  std::istringstream rng(c.string("trainer.rng"));
  rng >> rng_;
  const auto& order = c.ints("trainer.order");
  if (order.size() == 2 * order_.size()) {
    for (std::size_t i = 0; i < order_.size(); ++i)
      order_[i] = {static_cast<std::size_t>(order[2 * i]), static_cast<Eigen::Index>(order[2 * i + 1])};
    cursor_ = static_cast<std::size_t>(c.ints("trainer.cursor").at(0));
  }
  last_good_ = model_.params().values();
}

TrainHistory train(Model& model, const std::vector<SnapshotSet>& data, const LossWeights& weights,
                   const TrainSpec& spec) {
  Trainer t(model, weights, spec);
  if (spec.iterations == 0) return {};
  t.set_data(data);
  return t.run(spec.iterations);
}

}  // namespace trom
