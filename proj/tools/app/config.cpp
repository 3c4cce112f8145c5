#include "config.hpp"

#define TOML_ENABLE_FORMATTERS 1
#include <toml.hpp>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace bm2::app {
namespace {

[[noreturn]] void fail(const std::string& key, const std::string& msg) { throw InvalidArgument(key + ": " + msg); }

/// Reads typed keys out of one table and remembers which ones were consumed.
class Section {
 public:
  Section(const toml::table* table, std::string prefix) : table_(table), prefix_(std::move(prefix)) {}

  [[nodiscard]] bool present() const { return table_ != nullptr; }
  [[nodiscard]] bool has(const std::string& key) const { return table_ && table_->contains(key); }

  std::string key(const std::string& k) const { return prefix_.empty() ? k : prefix_ + "." + k; }

  template <typename T>
  std::optional<T> get(const std::string& k) {
    used_.insert(k);
    if (!table_) return std::nullopt;
    const toml::node* node = table_->get(k);
    if (!node) return std::nullopt;
    if constexpr (std::is_same_v<T, double>) {
      if (auto v = node->value<double>()) return *v;
      fail(key(k), "expected a number");
    } else if constexpr (std::is_same_v<T, std::int64_t>) {
      if (auto v = node->value_exact<std::int64_t>()) return *v;
      fail(key(k), "expected an integer");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (auto v = node->value_exact<bool>()) return *v;
      fail(key(k), "expected true or false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = node->value_exact<std::string>()) return *v;
      fail(key(k), "expected a string");
    }
    return std::nullopt;
  }

  void read(const std::string& k, double& out) {
    if (auto v = get<double>(k)) out = *v;
  }
  void read(const std::string& k, int& out) {
    if (auto v = get<std::int64_t>(k)) {
      if (*v < std::numeric_limits<int>::min() || *v > std::numeric_limits<int>::max()) fail(key(k), "out of range");
      out = static_cast<int>(*v);
    }
  }
  void read(const std::string& k, bool& out) {
    if (auto v = get<bool>(k)) out = *v;
  }
  void read(const std::string& k, std::string& out) {
    if (auto v = get<std::string>(k)) out = *v;
  }

  std::vector<double> number_list(const std::string& k) {
    used_.insert(k);
    std::vector<double> out;
    const toml::array* arr = table_ ? table_->get_as<toml::array>(k) : nullptr;
    if (!arr) {
      if (has(k)) fail(key(k), "expected an array of numbers");
      return out;
    }
    for (const auto& el : *arr) {
      auto v = el.value<double>();
      if (!v) fail(key(k), "expected an array of numbers");
      out.push_back(*v);
    }
    return out;
  }

  std::vector<std::vector<double>> nested_list(const std::string& k) {
    used_.insert(k);
    std::vector<std::vector<double>> out;
    const toml::array* arr = table_ ? table_->get_as<toml::array>(k) : nullptr;
    if (!arr) {
      if (has(k)) fail(key(k), "expected an array of arrays");
      return out;
    }
    for (const auto& row : *arr) {
      const toml::array* inner = row.as_array();
      if (!inner) fail(key(k), "expected an array of arrays");
      std::vector<double> r;
      for (const auto& el : *inner) {
        auto v = el.value<double>();
        if (!v) fail(key(k), "expected numbers");
        r.push_back(*v);
      }
      out.push_back(std::move(r));
    }
    return out;
  }

  void mark(const std::string& k) { used_.insert(k); }

  /// Rejects keys that were never read.
  void finish() const {
    if (!table_) return;
    for (const auto& [k, v] : *table_) {
      const std::string name(k.str());
      if (!used_.count(name)) fail(key(name), "unknown key");
    }
  }

 private:
  const toml::table* table_;
  std::string prefix_;
  std::set<std::string> used_;
};

Method parse_method(const std::string& s) {
  if (s == "bm2") return Method::bm2;
  if (s == "bm2-sigma") return Method::bm2_sigma;
  if (s == "ibm") return Method::ibm;
  if (s == "flow") return Method::flow;
  if (s == "oracle-check") return Method::oracle_check;
  fail("method", "unknown method '" + s + "' (bm2, bm2-sigma, ibm, flow, oracle-check)");
}

ProblemKind parse_kind(const std::string& s) {
  if (s == "trivial") return ProblemKind::trivial;
  if (s == "gaussian-1d") return ProblemKind::gaussian_1d;
  if (s == "mixture-2d") return ProblemKind::mixture_2d;
  if (s == "mixture-custom") return ProblemKind::mixture_custom;
  fail("problem.kind", "unknown problem '" + s + "' (trivial, gaussian-1d, mixture-2d, mixture-custom)");
}

void positive(const std::string& key, double v) {
  if (!(v > 0.0) || !std::isfinite(v)) fail(key, "must be positive");
}
void at_least(const std::string& key, int v, int lo) {
  if (v < lo) fail(key, "must be >= " + std::to_string(lo));
}

void read_problem(Section& s, ProblemConfig& p) {
  const auto kind = s.get<std::string>("kind");
  if (!kind) fail("problem.kind", "required field is missing");
  p.kind = parse_kind(*kind);
  switch (p.kind) {
    case ProblemKind::trivial:
      s.read("dim", p.dim);
      at_least("problem.dim", p.dim, 1);
      break;
    case ProblemKind::gaussian_1d:
      p.dim = 1;
      s.read("dim", p.dim);
      if (p.dim != 1) fail("problem.dim", "must be 1 for gaussian-1d");
      s.read("mu0", p.mu0);
      s.read("var0", p.var0);
      s.read("mu1", p.mu1);
      s.read("var1", p.var1);
      positive("problem.var0", p.var0);
      positive("problem.var1", p.var1);
      break;
    case ProblemKind::mixture_2d:
      p.dim = 2;
      s.read("dim", p.dim);
      at_least("problem.dim", p.dim, 2);
      s.read("radius", p.radius);
      s.read("mode_variance", p.mode_variance);
      s.read("modes", p.modes);
      positive("problem.mode_variance", p.mode_variance);
      at_least("problem.modes", p.modes, 1);
      break;
    case ProblemKind::mixture_custom: {
      s.read("psi0_var", p.psi0_var);
      positive("problem.psi0_var", p.psi0_var);
      p.weights = s.number_list("weights");
      p.means = s.nested_list("means");
      p.variances = s.nested_list("variances");
      if (p.weights.empty()) fail("problem.weights", "required for mixture-custom");
      if (p.means.size() != p.weights.size()) fail("problem.means", "needs one row per weight");
      if (p.variances.size() != p.weights.size()) fail("problem.variances", "needs one row per weight");
      p.dim = static_cast<int>(p.means.front().size());
      at_least("problem.means", p.dim, 1);
      for (std::size_t k = 0; k < p.weights.size(); ++k) {
        if (!(p.weights[k] >= 0.0)) fail("problem.weights", "must be non-negative");
        if (p.means[k].size() != static_cast<std::size_t>(p.dim)) fail("problem.means", "rows differ in length");
        if (p.variances[k].size() != static_cast<std::size_t>(p.dim)) {
          fail("problem.variances", "rows must match the mean dimension");
        }
        for (double v : p.variances[k]) positive("problem.variances", v);
      }
      break;
    }
  }
}

void read_train(Section& s, Bm2Config& t) {
  s.read("steps", t.steps);
  s.read("batch", t.batch);
  s.read("width", t.width);
  s.read("hidden_layers", t.hidden_layers);
  s.read("lr", t.adam.lr);
  s.read("beta1", t.adam.beta1);
  s.read("beta2", t.adam.beta2);
  s.read("adam_eps", t.adam.eps);
  s.read("weight_decay", t.adam.weight_decay);
  s.read("ema_decay", t.ema_decay);
  s.read("cache_capacity", t.cache_capacity);
  s.read("cache_refresh", t.cache_refresh);
  s.read("time_eps", t.time_eps);
  s.read("grid_steps", t.grid_steps);
  s.read("sigma_lo", t.sigma_lo);
  s.read("sigma_hi", t.sigma_hi);
  s.read("snapshot_every", t.snapshot_every);
  s.read("divergence_threshold", t.divergence_threshold);
}

void validate(ExperimentConfig& cfg, const Section& root) {
  (void)root;
  positive("dyn.sigma", cfg.dyn.sigma);
  if (cfg.dyn.schedule != "constant" && cfg.dyn.schedule != "linear-ramp") {
    fail("dyn.schedule", "must be 'constant' or 'linear-ramp'");
  }
  if (cfg.dyn.schedule == "linear-ramp" && !(cfg.dyn.ramp_start > 0.0 && cfg.dyn.ramp_start <= 1.0)) {
    fail("dyn.ramp_start", "must lie in (0, 1]");
  }
  if (cfg.precision != "float32" && cfg.precision != "float64") fail("precision", "must be 'float32' or 'float64'");
  if (cfg.out.empty()) fail("out", "required field is missing");
  for (const auto& part : cfg.out) {
    if (part == "..") fail("out", "must not contain '..'");
  }
  if (cfg.method == Method::flow) {
    if (cfg.problem.kind != ProblemKind::gaussian_1d) fail("problem.kind", "method flow needs gaussian-1d");
    positive("flow.l_max", cfg.flow.l_max);
    positive("flow.dl", cfg.flow.dl);
    at_least("flow.stride", cfg.flow.stride, 1);
    return;
  }
  cfg.train.amortized = cfg.method == Method::bm2_sigma;
  cfg.train.seed = cfg.seed;
  try {
    cfg.train.validate();
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(std::string("train: ") + e.what());
  }
  if (cfg.method == Method::bm2_sigma && !(cfg.dyn.sigma >= cfg.train.sigma_lo && cfg.dyn.sigma <= cfg.train.sigma_hi)) {
    fail("dyn.sigma", "must lie in [train.sigma_lo, train.sigma_hi] for bm2-sigma");
  }
  if (cfg.method == Method::ibm) {
    at_least("ibm.outer", cfg.ibm_outer, 1);
    at_least("ibm.inner", cfg.ibm_inner, 1);
    if (cfg.train.width < 2) fail("train.width", "ibm splits the width between two nets, need >= 2");
  }
  at_least("metrics.kl_paths", cfg.metrics.kl_paths, 2);
  at_least("metrics.kl_times", cfg.metrics.kl_times, 1);
  at_least("metrics.cbw_conditions", cfg.metrics.cbw_conditions, 2);
  at_least("metrics.cbw_inner", cfg.metrics.cbw_inner, cfg.problem.dim + 1);
  at_least("metrics.coupling_samples", cfg.metrics.coupling_samples, 2);
}

ExperimentConfig from_table(const toml::table& tbl, const Overrides& ov) {
  static const std::set<std::string> kSections{"problem", "dyn", "train", "ibm", "metrics", "flow"};
  for (const auto& [k, v] : tbl) {
    const std::string name(k.str());
    if (v.is_table() && !kSections.count(name)) fail(name, "unknown section");
  }
  auto section = [&](const std::string& name) { return Section(tbl.get_as<toml::table>(name), name); };

  ExperimentConfig cfg;
  Section root(&tbl, "");
  for (const auto& name : kSections) root.mark(name);
  const auto method = root.get<std::string>("method");
  if (!method) fail("method", "required field is missing");
  cfg.method = parse_method(*method);
  if (auto seed = root.get<std::int64_t>("seed")) {
    if (*seed < 0) fail("seed", "must be non-negative");
    cfg.seed = static_cast<std::uint64_t>(*seed);
  }
  if (auto out = root.get<std::string>("out")) cfg.out = *out;
  root.read("precision", cfg.precision);

  Section problem = section("problem");
  if (!problem.present()) fail("problem", "required section is missing");
  read_problem(problem, cfg.problem);

  Section dyn = section("dyn");
  if (!dyn.has("sigma")) fail("dyn.sigma", "required field is missing");
  dyn.read("sigma", cfg.dyn.sigma);
  dyn.read("schedule", cfg.dyn.schedule);
  dyn.read("ramp_start", cfg.dyn.ramp_start);

  Section train = section("train");
  read_train(train, cfg.train);

  Section ibm = section("ibm");
  ibm.read("outer", cfg.ibm_outer);
  ibm.read("inner", cfg.ibm_inner);

  Section metrics = section("metrics");
  metrics.read("kl_paths", cfg.metrics.kl_paths);
  metrics.read("kl_times", cfg.metrics.kl_times);
  metrics.read("cbw_conditions", cfg.metrics.cbw_conditions);
  metrics.read("cbw_inner", cfg.metrics.cbw_inner);
  metrics.read("coupling_samples", cfg.metrics.coupling_samples);

  Section flow = section("flow");
  flow.read("l_max", cfg.flow.l_max);
  flow.read("dl", cfg.flow.dl);
  flow.read("stride", cfg.flow.stride);

  for (const Section* s : {&root, &problem, &dyn, &train, &ibm, &metrics, &flow}) s->finish();

  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.out) cfg.out = *ov.out;
  if (ov.steps) {
    if (cfg.method == Method::flow || cfg.method == Method::oracle_check) {
      fail("--steps", "does not apply to method " + method_name(cfg.method));
    }
    if (cfg.method == Method::ibm) {
      cfg.ibm_inner = *ov.steps;
    } else {
      cfg.train.steps = *ov.steps;
    }
  }
  validate(cfg, root);
  return cfg;
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::bm2: return "bm2";
    case Method::bm2_sigma: return "bm2-sigma";
    case Method::ibm: return "ibm";
    case Method::flow: return "flow";
    case Method::oracle_check: return "oracle-check";
  }
  return "?";
}

std::string problem_name(ProblemKind k) {
  switch (k) {
    case ProblemKind::trivial: return "trivial";
    case ProblemKind::gaussian_1d: return "gaussian-1d";
    case ProblemKind::mixture_2d: return "mixture-2d";
    case ProblemKind::mixture_custom: return "mixture-custom";
  }
  return "?";
}

ExperimentConfig parse_config(const std::string& text, const Overrides& overrides, const std::string& origin) {
  toml::table tbl;
  try {
    tbl = toml::parse(text, origin);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << origin << ':' << e.source().begin.line << ": " << e.description();
    throw InvalidArgument(msg.str());
  }
  return from_table(tbl, overrides);
}

ExperimentConfig load_config(const std::filesystem::path& path, const Overrides& overrides) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot read config " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_config(buf.str(), overrides, path.string());
}

std::string echo_config(const ExperimentConfig& cfg) {
  toml::table root;
  root.insert("method", method_name(cfg.method));
  root.insert("seed", static_cast<std::int64_t>(cfg.seed));
  root.insert("out", cfg.out.string());
  root.insert("precision", cfg.precision);

  const ProblemConfig& p = cfg.problem;
  toml::table problem{{"kind", problem_name(p.kind)}, {"dim", p.dim}};
  if (p.kind == ProblemKind::gaussian_1d) {
    problem.insert("mu0", p.mu0);
    problem.insert("var0", p.var0);
    problem.insert("mu1", p.mu1);
    problem.insert("var1", p.var1);
  } else if (p.kind == ProblemKind::mixture_2d) {
    problem.insert("radius", p.radius);
    problem.insert("mode_variance", p.mode_variance);
    problem.insert("modes", p.modes);
  } else if (p.kind == ProblemKind::mixture_custom) {
    problem.erase("dim");
    problem.insert("psi0_var", p.psi0_var);
    toml::array w, m, v;
    for (double x : p.weights) w.push_back(x);
    for (const auto& row : p.means) {
      toml::array r;
      for (double x : row) r.push_back(x);
      m.push_back(std::move(r));
    }
    for (const auto& row : p.variances) {
      toml::array r;
      for (double x : row) r.push_back(x);
      v.push_back(std::move(r));
    }
    problem.insert("weights", std::move(w));
    problem.insert("means", std::move(m));
    problem.insert("variances", std::move(v));
  }
  root.insert("problem", std::move(problem));

  toml::table dyn{{"sigma", cfg.dyn.sigma}, {"schedule", cfg.dyn.schedule}};
  if (cfg.dyn.schedule == "linear-ramp") dyn.insert("ramp_start", cfg.dyn.ramp_start);
  root.insert("dyn", std::move(dyn));

  if (cfg.method == Method::flow) {
    root.insert("flow", toml::table{{"l_max", cfg.flow.l_max}, {"dl", cfg.flow.dl}, {"stride", cfg.flow.stride}});
  } else if (cfg.method != Method::oracle_check) {
    const Bm2Config& t = cfg.train;
    root.insert("train", toml::table{{"steps", t.steps},
                                     {"batch", t.batch},
                                     {"width", t.width},
                                     {"hidden_layers", t.hidden_layers},
                                     {"lr", t.adam.lr},
                                     {"beta1", t.adam.beta1},
                                     {"beta2", t.adam.beta2},
                                     {"adam_eps", t.adam.eps},
                                     {"weight_decay", t.adam.weight_decay},
                                     {"ema_decay", t.ema_decay},
                                     {"cache_capacity", t.cache_capacity},
                                     {"cache_refresh", t.cache_refresh},
                                     {"time_eps", t.time_eps},
                                     {"grid_steps", t.grid_steps},
                                     {"sigma_lo", t.sigma_lo},
                                     {"sigma_hi", t.sigma_hi},
                                     {"snapshot_every", t.snapshot_every},
                                     {"divergence_threshold", t.divergence_threshold}});
    if (cfg.method == Method::ibm) root.insert("ibm", toml::table{{"outer", cfg.ibm_outer}, {"inner", cfg.ibm_inner}});
    const MetricConfig& m = cfg.metrics;
    root.insert("metrics", toml::table{{"kl_paths", m.kl_paths},
                                       {"kl_times", m.kl_times},
                                       {"cbw_conditions", m.cbw_conditions},
                                       {"cbw_inner", m.cbw_inner},
                                       {"coupling_samples", m.coupling_samples}});
  }
  std::ostringstream os;
  os << root << '\n';
  return os.str();
}

std::filesystem::path resolve_out_dir(const ExperimentConfig& cfg) {
  if (cfg.out.is_relative()) {
    if (const char* root = std::getenv("BM2_OUT_ROOT"); root && *root) return std::filesystem::path(root) / cfg.out;
  }
  return cfg.out;
}

RefDynamics build_dynamics(const DynConfig& dyn) {
  if (dyn.schedule == "linear-ramp") return RefDynamics(dyn.sigma, Schedule::linear_ramp(dyn.ramp_start));
  return RefDynamics(dyn.sigma);
}

std::unique_ptr<SbInstance> build_instance(const ExperimentConfig& cfg) {
  const ProblemConfig& p = cfg.problem;
  const RefDynamics dyn = build_dynamics(cfg.dyn);
  const double s2 = cfg.dyn.sigma * cfg.dyn.sigma;
  switch (p.kind) {
    case ProblemKind::trivial: {
      const Vector zero = Vector::Zero(p.dim);
      return std::make_unique<GaussianSbInstance>(GaussianSpec::isotropic(zero, 1.0),
                                                  GaussianSpec::isotropic(zero, 1.0 + s2), dyn);
    }
    case ProblemKind::gaussian_1d:
      return std::make_unique<GaussianSbInstance>(
          GaussianSpec{Vector::Constant(1, p.mu0), Matrix::Constant(1, 1, p.var0)},
          GaussianSpec{Vector::Constant(1, p.mu1), Matrix::Constant(1, 1, p.var1)}, dyn);
    case ProblemKind::mixture_2d:
      return std::make_unique<MixtureSbInstance>(GaussianSpec::isotropic(Vector::Zero(p.dim), 1.0),
                                                 pentagon_potential(p.dim, p.radius, p.mode_variance, p.modes), dyn);
    case ProblemKind::mixture_custom: {
      MixtureSpec v;
      v.weights = p.weights;
      for (std::size_t k = 0; k < p.weights.size(); ++k) {
        const Vector m = Eigen::Map<const Vector>(p.means[k].data(), p.dim);
        const Vector var = Eigen::Map<const Vector>(p.variances[k].data(), p.dim);
        v.components.push_back(GaussianSpec::diagonal(m, var));
      }
      return std::make_unique<MixtureSbInstance>(GaussianSpec::isotropic(Vector::Zero(p.dim), p.psi0_var), v, dyn);
    }
  }
  throw InvalidArgument("problem.kind: unsupported");
}

}  // namespace bm2::app
