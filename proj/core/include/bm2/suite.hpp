#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace bm2 {
class SbInstance;
}

namespace bm2::suite {

enum class Status { pass, fail, skip };
enum class Compare { less, less_equal, greater_equal };
enum class Tier { fast, full };

struct CheckResult {
  std::string name;
  /// Acceptance criterion the check belongs to (1-10), 0 for extra invariants.
  int criterion = 0;
  Status status = Status::skip;
  double measured = 0.0;
  double threshold = 0.0;
  Compare compare = Compare::less;
  double runtime_s = 0.0;
  std::string detail;
};

/// Training budgets used by the training-based checks.
struct Budget {
  int steps = 10000;
  int batch = 256;
  int width = 64;
  int mixture_width = 128;
  int hidden_layers = 3;
  int cache_capacity = 1000;
  double lr = 1e-4;
  /// Gaussian-pair and amortized runs use a larger step size; see notes in the README.
  double pair_lr = 1e-3;
  int fixed_point_steps = 1000;
  /// Bridge-matching steps that fit the backward head to S before the fixed-point hold.
  int fixed_point_prefit_steps = 5000;
  int ibm_outer = 10;
  int ibm_inner = 1000;
  int coupling_samples = 40000;
  int kl_paths = 1000;
  int kl_times = 50;
  int cbw_conditions = 200;
  int cbw_inner = 200;
};

struct Options {
  std::uint64_t seed = 20240917;
  Budget budget;
  /// Called after every finished check (progress output).
  std::function<void(const CheckResult&)> on_result;
};

/// Holds trained models shared between checks so a criterion that compares against another run
/// does not retrain it.
class Context {
 public:
  explicit Context(Options options);
  ~Context();
  Context(const Context&) = delete;
  Context& operator=(const Context&) = delete;

  /// Runs one acceptance criterion (1-9); criterion 10 reruns a set of criteria in a fresh
  /// context and compares every measured value bit for bit.
  std::vector<CheckResult> criterion(int k);
  /// Invariant checks that are not acceptance criteria. Training-based ones only in the full tier.
  std::vector<CheckResult> extras(Tier tier);

  [[nodiscard]] const Options& options() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Fast tier: criteria 1, 2, 3, 4, 8 and the closed-form invariants. Full tier adds the
/// training-based criteria 5, 6, 7, 9, the determinism rerun 10 and training invariants.
std::vector<CheckResult> run_suite(Tier tier, const Options& options);

/// Oracle cross-validations for one analytic instance: grid Sinkhorn (1-D Gaussian), joint
/// precision structure (Gaussian), drift vs finite differences of quadrature log-transitions
/// (mixture, d <= 2), conditional weight normalization (mixture) and Monte Carlo conditional means.
std::vector<CheckResult> oracle_checks(const SbInstance& inst, std::uint64_t seed);

/// Criteria run twice by the determinism check.
std::vector<int> determinism_criteria();

[[nodiscard]] bool passed(const CheckResult& r);
std::string status_name(Status s);
std::string to_json_line(const CheckResult& r);
std::string summary_line(const CheckResult& r);

}  // namespace bm2::suite
