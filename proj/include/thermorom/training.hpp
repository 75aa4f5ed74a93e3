// Loss terms, Adam, learning-rate schedule and the simultaneous training loop.
#pragma once

#include "thermorom/fom.hpp"
#include "thermorom/model.hpp"

#include <chrono>
#include <limits>
#include <functional>
#include <random>

namespace trom {

struct LossWeights {
  double integration = 1.0;
  double reconstruction = 1e-1;
  double jacobian = 0.0;
  double model = 0.0;
  double degeneracy = 0.0;      // SPNN only
  double regularization = 0.0;  // l2 on dynamics parameters

  void validate() const;
};

enum class JacVariant : std::uint8_t { derivative, frobenius };

/// Consecutive snapshot pairs (x^k, x^{k+1}) with x'^k, grouped by parameter.
struct Batch {
  struct Group {
    Vector mu;
    Matrix x0, x1, dx0;  // dx0 may be empty
  };
  std::vector<Group> groups;
  double dt = 0.0;

  [[nodiscard]] bool has_derivatives() const;
  [[nodiscard]] Eigen::Index pairs() const;
};

/// Every pair of every set in one batch.
Batch full_batch(const std::vector<SnapshotSet>& data);

struct LossOptions {
  LossWeights weights;
  JacVariant jac = JacVariant::derivative;
  int substeps = 1;
  int exact_frobenius_limit = 512;
  int probes = 32;
  std::uint64_t probe_seed = 0;
  /// Also evaluate components whose weight is zero (for reporting).
  bool all_components = false;
};

struct LossValue {
  double total = 0.0;
  double integration = 0.0, reconstruction = 0.0, jacobian = 0.0, model = 0.0, degeneracy = 0.0;
  double regularization = 0.0;
};

/// Weighted loss and, when `grad` is given, its gradient over all parameters.
LossValue total_loss(const Model& m, const Batch& b, const LossOptions& opt, Vector* grad = nullptr);

double loss_int(const Model& m, const Batch& b, int substeps = 1);
double loss_rec(const Model& m, const Batch& b);
double loss_jac(const Model& m, const Batch& b, JacVariant variant);
double loss_mod(const Model& m, const Batch& b);
/// SPNN penalty; GFINN models are rejected since the residual is structurally zero.
double loss_deg(const Model& m, const Batch& b);
/// sum ||L grad S||^2 + ||M grad E||^2 at the encoded states, for any thermodynamic model.
double degeneracy_residual(const Model& m, const Batch& b);

class Adam {
 public:
  Adam() = default;
  explicit Adam(Eigen::Index size, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(Vector& theta, const Vector& grad, double lr);
  [[nodiscard]] long steps() const { return t_; }
  void store(Checkpoint& c) const;
  void restore(const Checkpoint& c);

 private:
  double b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  Vector m_, v_;
  long t_ = 0;
};

struct TrainSpec {
  long iterations = 1000;
  int batches = 1;  // batches per epoch; ignored when batch_size > 0
  int batch_size = 0;
  double lr = 1e-4;
  double decay = 0.01;
  long decay_period = 1000;
  double lr_floor = 1e-5;
  JacVariant jac = JacVariant::derivative;
  int substeps = 1;
  std::uint64_t seed = 0;
  long checkpoint_every = 1000;
  std::filesystem::path checkpoint_path;  // empty: keep checkpoints in memory only

  void validate() const;
};

/// lr0 (1 - decay)^floor(iter / period), clamped at the floor.
double lr_schedule(long iteration, const TrainSpec& spec);

struct HistoryRow {
  long iteration = 0;
  double wall_seconds = 0.0;
  LossValue loss;  // mean of the batch losses since the previous checkpoint
  double lr = 0.0;
  double validation = std::numeric_limits<double>::quiet_NaN();
};

struct TrainHistory {
  std::vector<HistoryRow> rows;
  bool aborted = false;
  std::string abort_reason;
  void write_csv(const std::filesystem::path& path) const;
};

/// Owns the optimizer state so training can pause and resume (greedy sampling).
class Trainer {
 public:
  Trainer(Model& model, LossWeights weights, TrainSpec spec);

  /// Replaces the training data; checks derivative requirements.
  void set_data(std::vector<SnapshotSet> data);
  [[nodiscard]] const std::vector<SnapshotSet>& data() const { return data_; }

  /// Runs `iterations` more iterations. On a non-finite loss the parameters
  /// are restored to the last good checkpoint and the history is marked aborted.
  TrainHistory& run(long iterations);
  [[nodiscard]] long iteration() const { return iteration_; }
  [[nodiscard]] const TrainHistory& history() const { return history_; }
  [[nodiscard]] const LossOptions& options() const { return options_; }

  /// Optional hook called at every checkpoint (e.g. a validation metric).
  std::function<double(const Model&)> validation;

  void save_state(const std::filesystem::path& path) const;
  void load_state(const std::filesystem::path& path);

 private:
  Batch next_batch();
  void checkpoint();

  Model& model_;
  TrainSpec spec_;
  LossOptions options_;
  std::vector<SnapshotSet> data_;
  Adam adam_;
  std::mt19937_64 rng_;
  std::vector<std::pair<std::size_t, Eigen::Index>> order_;
  std::size_t cursor_ = 0;
  long iteration_ = 0;
  Vector last_good_;
  LossValue window_;
  long window_count_ = 0;
  TrainHistory history_;
  std::chrono::steady_clock::time_point start_;
};

/// Convenience wrapper: fresh trainer, full run.
TrainHistory train(Model& model, const std::vector<SnapshotSet>& data, const LossWeights& weights,
                   const TrainSpec& spec);

}  // namespace trom
