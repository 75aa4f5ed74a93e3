#include "thermorom/networks.hpp"

#include <cmath>

namespace trom {

Eigen::Index MlpSpec::param_count() const {
  Eigen::Index total = 0;
  for (std::size_t l = 1; l < widths.size(); ++l)
    total += static_cast<Eigen::Index>(widths[l]) * widths[l - 1] + widths[l];
  return total;
}

void MlpSpec::validate() const {
  if (widths.size() < 2) throw std::invalid_argument("mlp needs at least input and output widths");
  for (int w : widths)
    if (w <= 0) throw std::invalid_argument("mlp widths must be positive");
}

Mlp::Mlp(MlpSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

Mlp::Mlp(MlpSpec spec, ParamVector& params, const std::string& prefix) : spec_(std::move(spec)) {
  spec_.validate();
  offset_ = params.size();
  first_segment_ = static_cast<int>(params.segments().size());
  for (int l = 1; l <= spec_.layers(); ++l) {
    params.add_segment(prefix + ".W" + std::to_string(l), spec_.widths[l], spec_.widths[l - 1]);
    params.add_segment(prefix + ".b" + std::to_string(l), 1, spec_.widths[l]);
  }
}

void Mlp::init_flat(Eigen::Ref<Vector> flat, std::mt19937_64& rng) const {
  require_dims(flat.size() == param_count(), "Mlp::init_flat");
  Eigen::Index off = 0;
  for (int l = 1; l <= spec_.layers(); ++l) {
    const Eigen::Index rows = spec_.widths[l], cols = spec_.widths[l - 1];
    const double a = 1.0 / std::sqrt(static_cast<double>(cols));
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index k = 0; k < rows * cols; ++k) flat[off + k] = u(rng);
    off += rows * cols;
    flat.segment(off, rows).setZero();
    off += rows;
  }
}

void Mlp::init(ParamVector& params, std::mt19937_64& rng) const {
  if (!registered()) throw std::logic_error("Mlp::init on an unregistered net");
  init_flat(params.values().segment(offset_, param_count()), rng);
}

Var Mlp::forward(Graph& g, std::span<const Var> bound, Var x) const {
  if (!registered()) throw std::logic_error("Mlp::forward on an unregistered net");
  require_dims(x.cols() == spec_.in_dim(), "mlp input");
  Var h = x;
  for (int l = 0; l < spec_.layers(); ++l) {
    if (l > 0) h = g.activation(h, spec_.activation);
    const Var W = bound[static_cast<std::size_t>(first_segment_ + 2 * l)];
    const Var b = bound[static_cast<std::size_t>(first_segment_ + 2 * l + 1)];
    h = g.add_row(g.matmul_nt(h, W), b);
  }
  return h;
}

Var Mlp::forward_flat(Graph& g, Var flat, Var x) const {
  require_dims(flat.rows() == 1 && flat.cols() == param_count(), "mlp flat parameters");
  require_dims(x.cols() == spec_.in_dim(), "mlp input");
  Var h = x;
  Eigen::Index off = 0;
  for (int l = 1; l <= spec_.layers(); ++l) {
    const Eigen::Index rows = spec_.widths[l], cols = spec_.widths[l - 1];
    if (l > 1) h = g.activation(h, spec_.activation);
    const Var W = g.reshape(g.slice_cols(flat, off, rows * cols), rows, cols);
    off += rows * cols;
    const Var b = g.slice_cols(flat, off, rows);
    off += rows;
    h = g.add_row(g.matmul_nt(h, W), b);
  }
  return h;
}

Matrix Mlp::eval_flat(const double* flat, const Matrix& x) const {
  require_dims(x.cols() == spec_.in_dim(), "mlp input");
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Matrix h = x;
  Matrix act;
  for (int l = 1; l <= spec_.layers(); ++l) {
    const Eigen::Index rows = spec_.widths[l], cols = spec_.widths[l - 1];
    Eigen::Map<const RowMajor> W(flat, rows, cols);
    flat += rows * cols;
    Eigen::Map<const RowVector> b(flat, rows);
    flat += rows;
    if (l > 1) {
      ad::activation_derivative(spec_.activation, 0, h, act);
      h.swap(act);
    }
    Matrix next = h * W.transpose();
    next.rowwise() += b;
    h.swap(next);
  }
  if (!h.allFinite()) throw NumericalError("non-finite network output");
  return h;
}

Matrix Mlp::eval(const ParamVector& params, const Matrix& x) const {
  if (!registered()) throw std::logic_error("Mlp::eval on an unregistered net");
  return eval_flat(params.values().data() + offset_, x);
}

// ---------------------------------------------------------------------------

Autoencoder::Autoencoder(const MlpSpec& encoder, const MlpSpec& decoder, ParamVector& params)
    : enc_(encoder, params, "enc"), dec_(decoder, params, "dec") {
  require_dims(encoder.in_dim() == decoder.out_dim(), "autoencoder full dimension");
  require_dims(encoder.out_dim() == decoder.in_dim(), "autoencoder latent dimension");
}

Autoencoder::Autoencoder(const MlpSpec& encoder, const MlpSpec& decoder, const MlpSpec& hyper,
                         ParamVector& params)
    : enc_(encoder), dec_(decoder), hyper_(true) {
  require_dims(encoder.in_dim() == decoder.out_dim(), "autoencoder full dimension");
  require_dims(encoder.out_dim() == decoder.in_dim(), "autoencoder latent dimension");
  MlpSpec he = hyper, hd = hyper;
  he.widths.back() = static_cast<int>(enc_.param_count());
  hd.widths.back() = static_cast<int>(dec_.param_count());
  henc_ = Mlp(he, params, "henc");
  hdec_ = Mlp(hd, params, "hdec");
}

void Autoencoder::init(ParamVector& params, std::mt19937_64& rng) const {
  if (!hyper_) {
    enc_.init(params, rng);
    dec_.init(params, rng);
    return;
  }
  // The hypernets' output biases carry a regular initialization of the template,
  // so theta(mu) starts near a sensible autoencoder.
  for (const Mlp* h : {&henc_, &hdec_}) {
    h->init(params, rng);
    const Mlp& target = h == &henc_ ? enc_ : dec_;
    Vector flat(target.param_count());
    target.init_flat(flat, rng);
    const Eigen::Index bias = h->offset() + h->param_count() - target.param_count();
    params.values().segment(bias, target.param_count()) = flat;
    // Shrink the last weight layer so mu only perturbs the template.
    const int L = h->spec().layers();
    const Eigen::Index wsize = static_cast<Eigen::Index>(h->spec().widths[L]) * h->spec().widths[L - 1];
    params.values().segment(bias - wsize, wsize) *= 0.1;
  }
}

void Autoencoder::check_mu(const Vector& mu) const {
  if (hyper_) require_dims(mu.size() == henc_.spec().in_dim(), "hyper-autoencoder parameter");
}

Autoencoder::Weights Autoencoder::hyper_weights(Graph& g, std::span<const Var> bound, const Vector& mu) const {
  if (!hyper_) return {};
  check_mu(mu);
  const Var m = g.constant(mu.transpose());
  return {henc_.forward(g, bound, m), hdec_.forward(g, bound, m)};
}

Var Autoencoder::encode(Graph& g, std::span<const Var> bound, const Weights& w, Var x) const {
  return hyper_ ? enc_.forward_flat(g, w.enc, x) : enc_.forward(g, bound, x);
}

Var Autoencoder::decode(Graph& g, std::span<const Var> bound, const Weights& w, Var z) const {
  return hyper_ ? dec_.forward_flat(g, w.dec, z) : dec_.forward(g, bound, z);
}

std::pair<Vector, Vector> Autoencoder::hyper_params(const ParamVector& params, const Vector& mu) const {
  if (!hyper_) throw std::logic_error("hyper_params on a plain autoencoder");
  check_mu(mu);
  const Matrix m = mu.transpose();
  return {henc_.eval(params, m).transpose(), hdec_.eval(params, m).transpose()};
}

Matrix Autoencoder::encode(const ParamVector& params, const Matrix& x, const Vector& mu) const {
  if (!hyper_) return enc_.eval(params, x);
  const Vector th = hyper_params(params, mu).first;
  return enc_.eval_flat(th.data(), x);
}

Matrix Autoencoder::decode(const ParamVector& params, const Matrix& z, const Vector& mu) const {
  if (!hyper_) return dec_.eval(params, z);
  const Vector th = hyper_params(params, mu).second;
  return dec_.eval_flat(th.data(), z);
}

Matrix Autoencoder::reconstruct(const ParamVector& params, const Matrix& x, const Vector& mu) const {
  return decode(params, encode(params, x, mu), mu);
}

}  // namespace trom
