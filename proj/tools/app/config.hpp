#pragma once

#include "bm2/benchmark_oracle.hpp"
#include "bm2/bm2_trainer.hpp"
#include "bm2/ibm_trainer.hpp"
#include "bm2/sinkhorn_flow.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace bm2::app {

enum class Method { bm2, bm2_sigma, ibm, flow, oracle_check };
enum class ProblemKind { trivial, gaussian_1d, mixture_2d, mixture_custom };

std::string method_name(Method m);
std::string problem_name(ProblemKind k);

struct ProblemConfig {
  ProblemKind kind = ProblemKind::trivial;
  int dim = 1;
  // gaussian-1d
  double mu0 = -2.0, var0 = 1.0, mu1 = 2.0, var1 = 1.0;
  // mixture-2d
  double radius = 4.0, mode_variance = 0.5;
  int modes = 5;
  // mixture-custom: psi0 = N(0, psi0_var I), potential given component by component.
  double psi0_var = 1.0;
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::vector<std::vector<double>> variances;
};

struct DynConfig {
  double sigma = 1.0;
  std::string schedule = "constant";
  double ramp_start = 0.5;
};

struct MetricConfig {
  int kl_paths = 1000;
  int kl_times = 50;
  int cbw_conditions = 200;
  int cbw_inner = 200;
  int coupling_samples = 40000;
};

struct FlowConfig {
  double l_max = 30.0;
  double dl = 1e-3;
  int stride = 100;
};

struct ExperimentConfig {
  Method method = Method::bm2;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  /// "float32" or "float64" network parameters.
  std::string precision = "float32";
  ProblemConfig problem;
  DynConfig dyn;
  Bm2Config train;
  int ibm_outer = 10;
  int ibm_inner = 5000;
  MetricConfig metrics;
  FlowConfig flow;
};

/// Command-line overrides applied after parsing and before validation.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> steps;
};

/// Parses and validates a config file. Every failure is an InvalidArgument whose message starts
/// with the offending key ("dyn.sigma: ..."). Unknown keys and sections are rejected.
ExperimentConfig load_config(const std::filesystem::path& path, const Overrides& overrides = {});

/// Parses config text (for tests); `origin` is used in messages.
ExperimentConfig parse_config(const std::string& text, const Overrides& overrides = {},
                              const std::string& origin = "<config>");

/// Resolved config with every default written out, as TOML.
std::string echo_config(const ExperimentConfig& cfg);

/// Output directory: cfg.out, placed under $BM2_OUT_ROOT when that is set and cfg.out is relative.
std::filesystem::path resolve_out_dir(const ExperimentConfig& cfg);

/// The analytic instance described by the problem and dyn sections.
std::unique_ptr<SbInstance> build_instance(const ExperimentConfig& cfg);

RefDynamics build_dynamics(const DynConfig& dyn);

}  // namespace bm2::app
