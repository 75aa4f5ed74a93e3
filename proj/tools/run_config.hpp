// Experiment configuration: one JSON file per run.
#pragma once

#include "thermorom/eval.hpp"
#include "thermorom/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace trom::app {

/// Thrown for anything wrong with a configuration file (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Problem : std::uint8_t { gas, burgers, heat, import };

struct Architecture {
  std::vector<int> encoder_hidden;  // decoder mirrors it
  int latent = 8;
  Activation activation = Activation::tanh;
  std::vector<int> dynamics_hidden{24, 24, 24, 24};
  Activation dynamics_activation = Activation::tanh;
  int K = 0;
  bool shared_basis = false;
  bool hyper = false;
  std::vector<int> hyper_hidden{20, 20, 20};
  Activation hyper_activation = Activation::tanh;
};

struct GasBlock {
  int count = 20;
  double T = 7.84;
  double delta = 0.16;
  double dt = 0.02;
  GasEntropyForm form = GasEntropyForm::verbatim;
  std::uint64_t data_seed = 0;
};

struct PdeBlock {
  PdeGrid fine;  // generation grid
  int space_stride = 5;
  int time_stride = 5;
  std::vector<double> mu_lo{0.7, 0.9}, mu_hi{0.8, 1.0};
  std::vector<int> counts{5, 5};
  std::vector<std::vector<double>> mu;  // explicit training parameters without greedy

  [[nodiscard]] PdeGrid data_grid() const;
  [[nodiscard]] ParameterGrid grid() const { return {mu_lo, mu_hi, counts}; }
};

struct GreedyBlock {
  bool enabled = false;
  std::size_t target = 25;
  long period = 2000;
  long final_iterations = 0;
};

struct ImportBlock {
  std::filesystem::path path;
  long train_steps = 0;  // rows used for training; 0: all but the evaluation window
  long test_steps = 0;   // trailing rows held out for extrapolation
};

struct AblateBlock {
  int seeds = 5;
  std::vector<std::string> configurations{"standard", "jacobian", "model", "full"};
};

struct LinearBlock {
  int systems = 10;
  int N = 10;
  int n = 3;
  int points = 101;
  double t_end = 1.0;
};

struct RunConfig {
  Problem problem = Problem::gas;
  DynamicsKind model = DynamicsKind::gfinn;
  std::uint64_t seed = 0;
  int threads = 1;
  std::filesystem::path out = "out";
  std::filesystem::path dataset;     // optional pre-generated data
  std::filesystem::path checkpoint;  // for evaluate / diagnose
  Architecture arch;
  LossWeights loss;
  JacVariant jac = JacVariant::derivative;
  TrainSpec train;
  IntegratorSpec integrator{Scheme::rk23, 0.02, 1e-6, 1e-9};
  GasBlock gas;
  PdeBlock pde;
  GreedyBlock greedy;
  ImportBlock imported;
  AblateBlock ablate;
  LinearBlock linear;

  /// Checks every value and path; throws ConfigError.
  void validate() const;
  /// Model spec for full dimension N and parameter dimension p.
  [[nodiscard]] ModelSpec model_spec(int N, int p) const;
  [[nodiscard]] TrainSpec train_spec() const;
  [[nodiscard]] nlohmann::json to_json() const;
};

/// Relative paths inside the file resolve against its directory.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base = {});

std::string_view problem_name(Problem p);
std::string_view model_name(DynamicsKind k);

}  // namespace trom::app
