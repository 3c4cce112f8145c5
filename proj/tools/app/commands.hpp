#pragma once

#include "config.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace bm2::app {

/// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitInvalid = 2;
inline constexpr int kExitNumerical = 3;

/// Runs one experiment and writes its artifacts into the resolved output directory:
/// config.toml (resolved echo), train_log.csv, metrics.csv, checkpoint.bin (or the two I-BM
/// nets), manifest.json; flow writes trajectory.csv and metrics.csv. Returns the directory.
std::filesystem::path run_experiment(const ExperimentConfig& cfg, std::ostream& log);

/// Runs the oracle cross-validations for the configured instance, writes oracle_check.jsonl and
/// returns whether all passed.
bool run_oracle_check(const ExperimentConfig& cfg, std::ostream& log);

/// One group of the compare summary.
struct SummaryRow {
  std::string method;
  int d = 0;
  double eps_reg = 0.0;
  int n = 0;
  double kl_mean = 0.0, kl_std = 0.0;
  double cbw_mean = 0.0, cbw_std = 0.0;
};

/// Reads result CSVs (all with the results header), groups rows by (method, d, eps_reg) in
/// first-seen order and reports mean and sample standard deviation (0 for a single row).
std::vector<SummaryRow> summarize(const std::vector<std::filesystem::path>& inputs);
void print_summary_text(const std::vector<SummaryRow>& rows, std::ostream& os);
void print_summary_csv(const std::vector<SummaryRow>& rows, std::ostream& os);

}  // namespace bm2::app
