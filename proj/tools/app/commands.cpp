#include "commands.hpp"

#include "bm2/approximator.hpp"
#include "bm2/linalg.hpp"
#include "bm2/metrics.hpp"
#include "bm2/suite.hpp"
#include "bm2/version.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

namespace bm2::app {
namespace fs = std::filesystem;
namespace {

using Clock = std::chrono::steady_clock;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw InvalidArgument("cannot write " + path.string());
  os << text;
}

void write_manifest(const fs::path& dir, const ExperimentConfig& cfg, double wall_s,
                    const std::vector<std::string>& artifacts) {
  nlohmann::json j;
  j["version"] = version();
  j["git_hash"] = git_hash();
  j["seed"] = cfg.seed;
  j["method"] = method_name(cfg.method);
  j["problem"] = problem_name(cfg.problem.kind);
  j["wall_time_s"] = wall_s;
  j["artifacts"] = artifacts;
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

/// Fresh results CSV holding one row.
void write_metrics(const fs::path& path, const MetricReport& report) {
  fs::remove(path);
  append_results_csv(path.string(), {report});
}

struct Moments1d {
  double m0, m1, v0, v1, c;
};

Moments1d moments(const EndpointPairs& p) {
  return Moments1d{p.x0.col(0).mean(), p.x1.col(0).mean(), linalg::sample_covariance(p.x0)(0, 0),
                   linalg::sample_covariance(p.x1)(0, 0), linalg::sample_cross_covariance(p.x0, p.x1)(0, 0)};
}

/// For 1-D Gaussian instances: learned coupling moments next to the analytic ones.
void write_coupling_csv(const fs::path& path, const GaussianSbInstance& inst, const Moments1d& fwd,
                        const Moments1d& bwd) {
  std::ofstream os(path);
  if (!os) throw InvalidArgument("cannot write " + path.string());
  os << "quantity,forward,backward,analytic\n" << std::setprecision(10);
  os << "mean_x0," << fwd.m0 << ',' << bwd.m0 << ',' << inst.psi0().mean[0] << '\n';
  os << "mean_x1," << fwd.m1 << ',' << bwd.m1 << ',' << inst.psi1().mean[0] << '\n';
  os << "var_x0," << fwd.v0 << ',' << bwd.v0 << ',' << inst.psi0().cov(0, 0) << '\n';
  os << "var_x1," << fwd.v1 << ',' << bwd.v1 << ',' << inst.psi1().cov(0, 0) << '\n';
  os << "cov_x0x1," << fwd.c << ',' << bwd.c << ',' << inst.cross()(0, 0) << '\n';
}

/// KL and cBW2-UVP of a forward drift net against the instance.
template <typename S>
MetricReport evaluate(const ExperimentConfig& cfg, const SbInstance& inst, const DriftNet<S>& net, int steps) {
  const RngStream root(cfg.seed, "eval");
  const double sigma = cfg.dyn.sigma;
  const bool amortized = net.shape().sigma_conditioned;
  const std::optional<double> sigma_in = amortized ? std::optional<double>(sigma) : std::nullopt;
  const BatchDrift drift = [&](const Samples& x, double t) {
    std::vector<double> rows;
    if (amortized) rows.assign(static_cast<std::size_t>(x.rows()), sigma);
    return head_drift(net, true, rows)(x, t);
  };
  RngStream kl_rng = root.split("kl");
  RngStream cbw_rng = root.split("cbw");
  MetricReport r;
  r.method = method_name(cfg.method);
  r.d = inst.dim();
  r.sigma = sigma;
  r.eps_reg = sigma * sigma;
  r.seed = cfg.seed;
  r.steps = steps;
  r.kl = kl_drift_gap(inst, drift, cfg.metrics.kl_paths, cfg.metrics.kl_times, kl_rng, cfg.train.time_eps);
  r.cbw2uvp = cbw2_uvp(
      inst,
      [&](const Samples& x0, RngStream& rng) {
        return simulate_from(net, x0, cfg.train.grid_steps, inst.dynamics(), rng, sigma_in);
      },
      cfg.metrics.cbw_conditions, cfg.metrics.cbw_inner, cbw_rng);
  return r;
}

void log_report(const MetricReport& r, std::ostream& log) {
  log << "kl " << r.kl.value << " +- " << r.kl.se << ", cbw2-uvp " << r.cbw2uvp.value << " +- " << r.cbw2uvp.se
      << '\n';
}

template <typename S>
std::vector<std::string> run_bm2(const ExperimentConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto inst = build_instance(cfg);
  const Problem problem = problem_from(*inst);
  const auto start = Clock::now();
  const SnapshotHook<S> hook = [&](int step, const DriftNet<S>&) {
    const double s = std::chrono::duration<double>(Clock::now() - start).count();
    log << "step " << step << "/" << cfg.train.steps << " (" << std::fixed << std::setprecision(1) << s << " s)\n"
        << std::defaultfloat;
  };
  const TrainResult<S> res = train<S>(cfg.train, problem, hook);
  write_train_log((dir / "train_log.csv").string(), res.log);
  save_checkpoint(dir / "checkpoint.bin", res.ema_net);
  const MetricReport report = evaluate(cfg, *inst, res.ema_net, cfg.train.steps);
  write_metrics(dir / "metrics.csv", report);
  log_report(report, log);
  std::vector<std::string> artifacts{"config.toml", "train_log.csv", "checkpoint.bin", "metrics.csv"};
  if (const auto* g = dynamic_cast<const GaussianSbInstance*>(inst.get()); g && g->dim() == 1) {
    const RngStream root(cfg.seed, "eval");
    const std::optional<double> sigma =
        cfg.train.amortized ? std::optional<double>(cfg.dyn.sigma) : std::nullopt;
    RngStream f = root.split("coupling-forward");
    RngStream b = root.split("coupling-backward");
    const Eigen::Index n = cfg.metrics.coupling_samples;
    const Moments1d fwd =
        moments(simulate(res.ema_net, Direction::forward, n, cfg.train.grid_steps, problem, f, sigma));
    const Moments1d bwd =
        moments(simulate(res.ema_net, Direction::backward, n, cfg.train.grid_steps, problem, b, sigma));
    write_coupling_csv(dir / "coupling.csv", *g, fwd, bwd);
    artifacts.emplace_back("coupling.csv");
  }
  return artifacts;
}

template <typename S>
std::vector<std::string> run_ibm(const ExperimentConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto inst = build_instance(cfg);
  const Problem problem = problem_from(*inst);
  IbmConfig icfg;
  icfg.base = cfg.train;
  icfg.outer = cfg.ibm_outer;
  icfg.inner = cfg.ibm_inner;
  const RngStream root(cfg.seed, "eval");
  const IbmMetricHook<S> hook = [&](int iteration, const DriftNet<S>& fwd) {
    RngStream rng = root.split("ibm-kl", static_cast<std::uint64_t>(iteration));
    const double kl =
        kl_drift_gap(*inst, head_drift(fwd, true), cfg.metrics.kl_paths, cfg.metrics.kl_times, rng).value;
    log << "iteration " << iteration << " kl " << kl << '\n';
    return kl;
  };
  const IbmResult<S> res = ibm_loop<S>(icfg, problem, hook);
  write_ibm_log((dir / "train_log.csv").string(), res.log);
  save_checkpoint(dir / "checkpoint_forward.bin", res.forward);
  save_checkpoint(dir / "checkpoint_backward.bin", res.backward);
  const MetricReport report = evaluate(cfg, *inst, res.forward, cfg.ibm_outer * cfg.ibm_inner);
  write_metrics(dir / "metrics.csv", report);
  log_report(report, log);
  return {"config.toml", "train_log.csv", "checkpoint_forward.bin", "checkpoint_backward.bin", "metrics.csv"};
}

std::vector<std::string> run_flow(const ExperimentConfig& cfg, const fs::path& dir, std::ostream& log) {
  const ProblemConfig& p = cfg.problem;
  const FlowProblem prob{p.mu0, p.var0, p.mu1, p.var1, cfg.dyn.sigma};
  const std::vector<FlowRow> rows = flow_integrate(prob, cfg.flow.l_max, cfg.flow.dl);
  write_flow_csv((dir / "trajectory.csv").string(), rows, cfg.flow.stride);
  const FlowRow target = flow_moments(0.0, flow_analytic_state(prob), prob);
  const FlowRow& last = rows.back();
  std::ofstream os(dir / "metrics.csv");
  if (!os) throw InvalidArgument("cannot write metrics.csv");
  os << "quantity,value,analytic,abs_error\n" << std::setprecision(12);
  auto row = [&](const char* name, double v, double a) {
    os << name << ',' << v << ',' << a << ',' << std::abs(v - a) << '\n';
    log << name << ' ' << v << " (analytic " << a << ")\n";
  };
  row("E_X1", last.mean_x1, target.mean_x1);
  row("V_X1", last.var_x1, target.var_x1);
  row("C_X0X1", last.cov_x0x1, target.cov_x0x1);
  return {"config.toml", "trajectory.csv", "metrics.csv"};
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw InvalidArgument(where + ": not a number: '" + s + "'");
  return v;
}

}  // namespace

fs::path run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  if (cfg.method == Method::oracle_check) throw InvalidArgument("method: use the oracle-check subcommand");
  const fs::path dir = resolve_out_dir(cfg);
  fs::create_directories(dir);
  write_text(dir / "config.toml", echo_config(cfg));
  const auto start = Clock::now();
  std::vector<std::string> artifacts;
  const bool f64 = cfg.precision == "float64";
  switch (cfg.method) {
    case Method::bm2:
    case Method::bm2_sigma:
      artifacts = f64 ? run_bm2<double>(cfg, dir, log) : run_bm2<float>(cfg, dir, log);
      break;
    case Method::ibm:
      artifacts = f64 ? run_ibm<double>(cfg, dir, log) : run_ibm<float>(cfg, dir, log);
      break;
    case Method::flow:
      artifacts = run_flow(cfg, dir, log);
      break;
    case Method::oracle_check:
      break;
  }
  artifacts.emplace_back("manifest.json");
  write_manifest(dir, cfg, std::chrono::duration<double>(Clock::now() - start).count(), artifacts);
  return dir;
}

bool run_oracle_check(const ExperimentConfig& cfg, std::ostream& log) {
  const auto inst = build_instance(cfg);
  const fs::path dir = resolve_out_dir(cfg);
  fs::create_directories(dir);
  write_text(dir / "config.toml", echo_config(cfg));
  const auto start = Clock::now();
  const std::vector<suite::CheckResult> results = suite::oracle_checks(*inst, cfg.seed);
  std::ofstream os(dir / "oracle_check.jsonl");
  bool ok = true;
  for (const auto& r : results) {
    os << suite::to_json_line(r) << '\n';
    log << suite::summary_line(r) << '\n';
    ok = ok && suite::passed(r);
  }
  write_manifest(dir, cfg, std::chrono::duration<double>(Clock::now() - start).count(),
                 {"config.toml", "oracle_check.jsonl", "manifest.json"});
  return ok;
}

std::vector<SummaryRow> summarize(const std::vector<fs::path>& inputs) {
  if (inputs.empty()) throw InvalidArgument("compare: no input files");
  const std::vector<std::string> header = split_csv_line(kResultsHeader);
  struct Acc {
    SummaryRow row;
    std::vector<double> kl, cbw;
  };
  std::vector<Acc> groups;
  std::map<std::string, std::size_t> index;
  for (const fs::path& path : inputs) {
    std::ifstream is(path);
    if (!is) throw InvalidArgument("compare: cannot read " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw InvalidArgument("compare: " + path.string() + " is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (split_csv_line(line) != header) {
      throw InvalidArgument("compare: " + path.string() + " does not have the results columns (" +
                            std::string(kResultsHeader) + ")");
    }
    int lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::string where = path.string() + ":" + std::to_string(lineno);
      const auto cells = split_csv_line(line);
      if (cells.size() != header.size()) throw InvalidArgument(where + ": wrong number of columns");
      const std::string key = cells[0] + "\x1f" + cells[1] + "\x1f" + cells[3];
      auto it = index.find(key);
      if (it == index.end()) {
        it = index.emplace(key, groups.size()).first;
        Acc acc;
        acc.row.method = cells[0];
        acc.row.d = static_cast<int>(parse_number(cells[1], where));
        acc.row.eps_reg = parse_number(cells[3], where);
        groups.push_back(std::move(acc));
      }
      groups[it->second].kl.push_back(parse_number(cells[4], where));
      groups[it->second].cbw.push_back(parse_number(cells[6], where));
    }
  }
  auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    sd = 0.0;
    if (v.size() > 1) {
      for (double x : v) sd += (x - mean) * (x - mean);
      sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
    }
  };
  std::vector<SummaryRow> out;
  for (Acc& acc : groups) {
    acc.row.n = static_cast<int>(acc.kl.size());
    mean_std(acc.kl, acc.row.kl_mean, acc.row.kl_std);
    mean_std(acc.cbw, acc.row.cbw_mean, acc.row.cbw_std);
    out.push_back(acc.row);
  }
  return out;
}

void print_summary_text(const std::vector<SummaryRow>& rows, std::ostream& os) {
  os << std::left << std::setw(12) << "method" << std::right << std::setw(4) << "d" << std::setw(10) << "eps_reg"
     << std::setw(4) << "n" << std::setw(26) << "kl (mean +- std)" << std::setw(26) << "cbw2uvp (mean +- std)" << '\n';
  for (const auto& r : rows) {
    auto pm = [](double m, double s) {
      std::ostringstream c;
      c << std::setprecision(4) << m << " +- " << s;
      return c.str();
    };
    os << std::left << std::setw(12) << r.method << std::right << std::setw(4) << r.d << std::setw(10)
       << std::setprecision(4) << r.eps_reg << std::setw(4) << r.n << std::setw(26) << pm(r.kl_mean, r.kl_std)
       << std::setw(26) << pm(r.cbw_mean, r.cbw_std) << '\n';
  }
}

void print_summary_csv(const std::vector<SummaryRow>& rows, std::ostream& os) {
  os << "method,d,eps_reg,n,kl_mean,kl_std,cbw2uvp_mean,cbw2uvp_std\n" << std::setprecision(10);
  for (const auto& r : rows) {
    os << r.method << ',' << r.d << ',' << r.eps_reg << ',' << r.n << ',' << r.kl_mean << ',' << r.kl_std << ','
       << r.cbw_mean << ',' << r.cbw_std << '\n';
  }
}

}  // namespace bm2::app
