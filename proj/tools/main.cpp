#include "app/commands.hpp"
#include "app/config.hpp"

#include "bm2/suite.hpp"
#include "bm2/version.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

using namespace bm2;

/// Maps library exceptions onto the documented exit codes.
template <typename F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return app::kExitInvalid;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return app::kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return app::kExitCheckFailed;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Coupled bridge matching for Schroedinger bridges"};
  cli.set_version_flag("--version", std::string(version()) + " (" + git_hash() + ")");
  cli.require_subcommand(1);

  app::Overrides ov;
  std::uint64_t seed = 0;
  std::string out;
  int steps = 0;
  auto add_overrides = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--out", out, "Override the output directory");
    sub->add_option("--steps", steps, "Override the training step count (I-BM: inner steps)")
        ->check(CLI::PositiveNumber);
  };
  auto collect = [&](CLI::App* sub) {
    if (sub->count("--seed")) ov.seed = seed;
    if (sub->count("--out")) ov.out = out;
    if (sub->count("--steps")) ov.steps = steps;
  };

  std::string config_path;
  CLI::App* run = cli.add_subcommand("run", "Run one experiment described by a config file");
  run->add_option("config", config_path, "Config file (TOML)")->required();
  add_overrides(run);

  std::vector<std::string> csvs;
  std::string csv_out;
  CLI::App* compare = cli.add_subcommand("compare", "Summarize metrics.csv files across seeds");
  compare->add_option("results", csvs, "Result CSV files");
  compare->add_option("--csv", csv_out, "Also write the summary as CSV to this file");

  std::string oracle_path;
  CLI::App* oracle = cli.add_subcommand("oracle-check", "Cross-validate the analytic oracle of a config's problem");
  oracle->add_option("config", oracle_path, "Config file (TOML)")->required();
  add_overrides(oracle);

  std::string tier = "fast";
  std::string json_path;
  std::uint64_t suite_seed = suite::Options{}.seed;
  CLI::App* suite_cmd = cli.add_subcommand("suite", "Run the property and acceptance checks");
  suite_cmd->add_option("--tier", tier, "fast or full")->check(CLI::IsMember({"fast", "full"}));
  suite_cmd->add_option("--seed", suite_seed, "Suite seed");
  suite_cmd->add_option("--json", json_path, "Write JSON lines to this file");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? 0 : app::kExitInvalid;
  }

  if (run->parsed()) {
    return guarded([&] {
      collect(run);
      const app::ExperimentConfig cfg = app::load_config(config_path, ov);
      if (cfg.method == app::Method::oracle_check) {
        return app::run_oracle_check(cfg, std::cout) ? app::kExitOk : app::kExitCheckFailed;
      }
      const auto dir = app::run_experiment(cfg, std::cout);
      std::cout << "artifacts in " << dir.string() << '\n';
      return app::kExitOk;
    });
  }
  if (compare->parsed()) {
    return guarded([&] {
      std::vector<std::filesystem::path> paths(csvs.begin(), csvs.end());
      const auto rows = app::summarize(paths);
      app::print_summary_text(rows, std::cout);
      if (!csv_out.empty()) {
        std::ofstream os(csv_out);
        if (!os) throw InvalidArgument("--csv: cannot write " + csv_out);
        app::print_summary_csv(rows, os);
      } else {
        std::cout << '\n';
        app::print_summary_csv(rows, std::cout);
      }
      return app::kExitOk;
    });
  }
  if (oracle->parsed()) {
    return guarded([&] {
      collect(oracle);
      const app::ExperimentConfig cfg = app::load_config(oracle_path, ov);
      return app::run_oracle_check(cfg, std::cout) ? app::kExitOk : app::kExitCheckFailed;
    });
  }
  if (suite_cmd->parsed()) {
    return guarded([&] {
      std::ofstream json;
      if (!json_path.empty()) {
        json.open(json_path);
        if (!json) throw InvalidArgument("--json: cannot write " + json_path);
      }
      suite::Options opt;
      opt.seed = suite_seed;
      bool ok = true;
      opt.on_result = [&](const suite::CheckResult& r) {
        std::cout << suite::summary_line(r) << std::endl;
        if (json.is_open()) json << suite::to_json_line(r) << '\n';
        ok = ok && suite::passed(r);
      };
      suite::run_suite(tier == "full" ? suite::Tier::full : suite::Tier::fast, opt);
      return ok ? app::kExitOk : app::kExitCheckFailed;
    });
  }
  return app::kExitInvalid;
}
