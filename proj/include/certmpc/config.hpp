#pragma once

// Run configuration: one JSON file per run, with command-line flags layered
// on top. Unknown keys are rejected so that typos do not silently fall back
// to defaults. The config hash covers every key that can change a primary
// output (everything except the output directory and the thread count).

#include <certmpc/common.hpp>
#include <certmpc/lpv_mpc.hpp>
#include <certmpc/policy.hpp>
#include <certmpc/verify.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

namespace certmpc {

using json = nlohmann::json;

struct RunConfig {
  std::string family = "benchmark";  // benchmark | icc-surrogate | custom
  std::string custom_file;           // LTI family description for "custom"
  BenchmarkConfig benchmark;
  ICCConfig icc;
  std::uint64_t seed = 1;
  int jobs = 1;
  std::string out = "certmpc_out";

  struct Data {
    std::size_t samples = 1000;
    double label_margin = -1.0;  // negative: family default
    double solver_tolerance = 1e-8;
  } data;

  struct Train {
    std::vector<int> primal_hidden{15, 15, 15};
    std::vector<int> dual_hidden{5, 5, 5};
    TrainConfig cfg;
  } train;

  struct Verify {
    VerificationConfig cfg;
    int max_attempts = 5;
    std::size_t holdout = 0;  // extra empirical samples after verification
  } verify;

  struct Runtime {
    double gamma = -1.0;  // negative: the verified total gamma
    double feasibility_tolerance = 1e-6;
    int steps = 500;
    bool audit = true;
    std::string scenario = "random";  // random | equilibrium
    int reference_hold = 50;
    double state_bound = 1e6;
    std::string on_backup_failure = "raise";  // raise | hold
  } runtime;

  struct Bench {
    std::size_t samples = 200;
    int repetitions = 100;
    int warmup = 10;
  } bench;

  double label_margin() const {
    if (data.label_margin >= 0.0) return data.label_margin;
    if (family == "benchmark") return 0.05;
    if (family == "icc-surrogate") return 0.5;
    return 0.0;
  }
  double runtime_gamma() const { return runtime.gamma >= 0.0 ? runtime.gamma : verify.cfg.total_gamma(); }
};

namespace detail {

inline json vec_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline VectorXd json_vec(const json& j, const std::string& key) {
  if (!j.is_array()) throw ConfigError("config: '" + key + "' must be an array of numbers");
  VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError("config: '" + key + "' must contain numbers only");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

inline json mat_json(const MatrixXd& M) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) rows.push_back(vec_json(M.row(i).transpose()));
  return rows;
}

/// Rows of numbers; `cols` fixes the width of an empty matrix.
inline MatrixXd json_mat(const json& j, const std::string& key, Eigen::Index cols = -1) {
  if (!j.is_array()) throw ConfigError("config: '" + key + "' must be an array of rows");
  if (j.empty()) return MatrixXd(0, std::max<Eigen::Index>(cols, 0));
  const VectorXd first = json_vec(j[0], key);
  MatrixXd M(static_cast<Eigen::Index>(j.size()), first.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    const VectorXd r = json_vec(j[i], key);
    if (r.size() != M.cols()) throw ConfigError("config: '" + key + "' has ragged rows");
    M.row(static_cast<Eigen::Index>(i)) = r.transpose();
  }
  return M;
}

/// Reads keys from an object, rejecting anything not consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError("config: '" + where_ + "' must be an object");
  }
  ~ObjectReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + where_ + "." + it.key() + "'");
    }
  }
  ObjectReader(const ObjectReader&) = delete;
  ObjectReader& operator=(const ObjectReader&) = delete;

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <class T>
  void get(const std::string& key, T& dst) {
    if (const json* v = find(key)) {
      try {
        if constexpr (std::is_same_v<T, VectorXd>) {
          dst = json_vec(*v, where_ + "." + key);
        } else {
          dst = v->get<T>();
        }
      } catch (const json::exception& e) {
        throw ConfigError("config: bad value for '" + where_ + "." + key + "': " + e.what());
      }
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const BenchmarkConfig& c) {
  return {{"sample_time", c.sample_time}, {"horizon", c.horizon},       {"state_weight", c.state_weight},
          {"terminal_weight", c.terminal_weight}, {"input_weight", c.input_weight}, {"input_bound", c.input_bound},
          {"state_bound", c.state_bound}, {"terminal_set", c.terminal_set}, {"terminal_bound", c.terminal_bound},
          {"x0_bound", c.x0_bound}};
}

inline json to_json(const ICCConfig& c) {
  using detail::vec_json;
  return {{"speed_min", c.speed_min},
          {"speed_max", c.speed_max},
          {"sample_time", c.sample_time},
          {"horizon", c.horizon},
          {"mass", c.mass},
          {"yaw_inertia", c.yaw_inertia},
          {"roll_inertia", c.roll_inertia},
          {"cornering_front", c.cornering_front},
          {"cornering_rear", c.cornering_rear},
          {"dist_front", c.dist_front},
          {"dist_rear", c.dist_rear},
          {"roll_arm", c.roll_arm},
          {"roll_stiffness", c.roll_stiffness},
          {"roll_damping", c.roll_damping},
          {"input_bound", vec_json(c.input_bound)},
          {"rate_bound", vec_json(c.rate_bound)},
          {"output_weight", vec_json(c.output_weight)},
          {"input_weight", vec_json(c.input_weight)},
          {"x0_bound", vec_json(c.x0_bound)},
          {"ref_bound", vec_json(c.ref_bound)},
          {"steer_bound", c.steer_bound},
          {"prev_input_bound", vec_json(c.prev_input_bound)}};
}

inline json to_json(const RunConfig& c) {
  const auto& t = c.train.cfg;
  const auto& v = c.verify.cfg;
  json j;
  j["family"] = c.family;
  j["custom_file"] = c.custom_file;
  j["benchmark"] = to_json(c.benchmark);
  j["icc"] = to_json(c.icc);
  j["seed"] = c.seed;
  j["jobs"] = c.jobs;
  j["out"] = c.out;
  j["data"] = {{"samples", c.data.samples},
               {"label_margin", c.data.label_margin},
               {"solver_tolerance", c.data.solver_tolerance}};
  j["train"] = {{"primal_hidden", c.train.primal_hidden},
                {"dual_hidden", c.train.dual_hidden},
                {"step_size", t.step_size},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_epsilon", t.adam_epsilon},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"validation_fraction", t.validation_fraction},
                {"patience", t.patience},
                {"clamp_dual", t.clamp_dual}};
  j["verify"] = {{"epsilon_p", v.epsilon_p},
                 {"epsilon_d", v.epsilon_d},
                 {"beta_p", v.beta_p},
                 {"beta_d", v.beta_d},
                 {"gamma_p", v.gamma_p},
                 {"gamma_d", v.gamma_d},
                 {"epsilon", v.epsilon},
                 {"beta", v.beta},
                 {"gamma", v.gamma},
                 {"feasibility_tolerance", v.feasibility_tolerance},
                 {"solver_tolerance", v.oracle.tolerance},
                 {"max_attempts", c.verify.max_attempts},
                 {"holdout", c.verify.holdout}};
  j["runtime"] = {{"gamma", c.runtime.gamma},
                  {"feasibility_tolerance", c.runtime.feasibility_tolerance},
                  {"steps", c.runtime.steps},
                  {"audit", c.runtime.audit},
                  {"scenario", c.runtime.scenario},
                  {"reference_hold", c.runtime.reference_hold},
                  {"state_bound", c.runtime.state_bound},
                  {"on_backup_failure", c.runtime.on_backup_failure}};
  j["bench"] = {{"samples", c.bench.samples}, {"repetitions", c.bench.repetitions}, {"warmup", c.bench.warmup}};
  return j;
}

inline void from_json_into(const json& j, BenchmarkConfig& c) {
  detail::ObjectReader r(j, "benchmark");
  r.get("sample_time", c.sample_time);
  r.get("horizon", c.horizon);
  r.get("state_weight", c.state_weight);
  r.get("terminal_weight", c.terminal_weight);
  r.get("input_weight", c.input_weight);
  r.get("input_bound", c.input_bound);
  r.get("state_bound", c.state_bound);
  r.get("terminal_set", c.terminal_set);
  r.get("terminal_bound", c.terminal_bound);
  r.get("x0_bound", c.x0_bound);
}

inline void from_json_into(const json& j, ICCConfig& c) {
  detail::ObjectReader r(j, "icc");
  r.get("speed_min", c.speed_min);
  r.get("speed_max", c.speed_max);
  r.get("sample_time", c.sample_time);
  r.get("horizon", c.horizon);
  r.get("mass", c.mass);
  r.get("yaw_inertia", c.yaw_inertia);
  r.get("roll_inertia", c.roll_inertia);
  r.get("cornering_front", c.cornering_front);
  r.get("cornering_rear", c.cornering_rear);
  r.get("dist_front", c.dist_front);
  r.get("dist_rear", c.dist_rear);
  r.get("roll_arm", c.roll_arm);
  r.get("roll_stiffness", c.roll_stiffness);
  r.get("roll_damping", c.roll_damping);
  r.get("input_bound", c.input_bound);
  r.get("rate_bound", c.rate_bound);
  r.get("output_weight", c.output_weight);
  r.get("input_weight", c.input_weight);
  r.get("x0_bound", c.x0_bound);
  r.get("ref_bound", c.ref_bound);
  r.get("steer_bound", c.steer_bound);
  r.get("prev_input_bound", c.prev_input_bound);
}

/// Overlays the keys present in `j` onto `c`.
inline void apply_json(const json& j, RunConfig& c) {
  detail::ObjectReader r(j, "config");
  r.get("family", c.family);
  r.get("custom_file", c.custom_file);
  if (const json* b = r.find("benchmark")) from_json_into(*b, c.benchmark);
  if (const json* b = r.find("icc")) from_json_into(*b, c.icc);
  r.get("seed", c.seed);
  r.get("jobs", c.jobs);
  r.get("out", c.out);
  if (const json* d = r.find("data")) {
    detail::ObjectReader s(*d, "data");
    s.get("samples", c.data.samples);
    s.get("label_margin", c.data.label_margin);
    s.get("solver_tolerance", c.data.solver_tolerance);
  }
  if (const json* d = r.find("train")) {
    auto& t = c.train.cfg;
    detail::ObjectReader s(*d, "train");
    s.get("primal_hidden", c.train.primal_hidden);
    s.get("dual_hidden", c.train.dual_hidden);
    s.get("step_size", t.step_size);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("adam_epsilon", t.adam_epsilon);
    s.get("epochs", t.epochs);
    s.get("batch_size", t.batch_size);
    s.get("validation_fraction", t.validation_fraction);
    s.get("patience", t.patience);
    s.get("clamp_dual", t.clamp_dual);
  }
  if (const json* d = r.find("verify")) {
    auto& v = c.verify.cfg;
    detail::ObjectReader s(*d, "verify");
    s.get("epsilon_p", v.epsilon_p);
    s.get("epsilon_d", v.epsilon_d);
    s.get("beta_p", v.beta_p);
    s.get("beta_d", v.beta_d);
    s.get("gamma_p", v.gamma_p);
    s.get("gamma_d", v.gamma_d);
    s.get("epsilon", v.epsilon);
    s.get("beta", v.beta);
    s.get("gamma", v.gamma);
    s.get("feasibility_tolerance", v.feasibility_tolerance);
    s.get("solver_tolerance", v.oracle.tolerance);
    s.get("max_attempts", c.verify.max_attempts);
    s.get("holdout", c.verify.holdout);
  }
  if (const json* d = r.find("runtime")) {
    detail::ObjectReader s(*d, "runtime");
    s.get("gamma", c.runtime.gamma);
    s.get("feasibility_tolerance", c.runtime.feasibility_tolerance);
    s.get("steps", c.runtime.steps);
    s.get("audit", c.runtime.audit);
    s.get("scenario", c.runtime.scenario);
    s.get("reference_hold", c.runtime.reference_hold);
    s.get("state_bound", c.runtime.state_bound);
    s.get("on_backup_failure", c.runtime.on_backup_failure);
  }
  if (const json* d = r.find("bench")) {
    detail::ObjectReader s(*d, "bench");
    s.get("samples", c.bench.samples);
    s.get("repetitions", c.bench.repetitions);
    s.get("warmup", c.bench.warmup);
  }
}

inline void validate(const RunConfig& c) {
  if (c.family != "benchmark" && c.family != "icc-surrogate" && c.family != "custom") {
    throw ConfigError("config: family must be benchmark, icc-surrogate or custom, got '" + c.family + "'");
  }
  if (c.family == "custom" && c.custom_file.empty()) throw ConfigError("config: custom family needs custom_file");
  if (c.jobs < 1) throw ConfigError("config: jobs must be at least 1");
  if (c.data.samples < 1) throw ConfigError("config: data.samples must be at least 1");
  if (!(c.data.solver_tolerance > 0.0)) throw ConfigError("config: data.solver_tolerance must be positive");
  for (const auto* w : {&c.train.primal_hidden, &c.train.dual_hidden}) {
    for (int x : *w) {
      if (x <= 0) throw ConfigError("config: hidden widths must be positive");
    }
  }
  c.train.cfg.validate();
  c.verify.cfg.validate();
  if (c.verify.max_attempts < 1) throw ConfigError("config: verify.max_attempts must be at least 1");
  if (c.runtime.steps < 1) throw ConfigError("config: runtime.steps must be at least 1");
  if (!(c.runtime.feasibility_tolerance >= 0.0)) throw ConfigError("config: runtime.feasibility_tolerance must be >= 0");
  if (c.runtime.scenario != "random" && c.runtime.scenario != "equilibrium") {
    throw ConfigError("config: runtime.scenario must be random or equilibrium");
  }
  if (c.runtime.reference_hold < 1) throw ConfigError("config: runtime.reference_hold must be at least 1");
  if (!(c.runtime.state_bound > 0.0)) throw ConfigError("config: runtime.state_bound must be positive");
  if (c.runtime.on_backup_failure != "raise" && c.runtime.on_backup_failure != "hold") {
    throw ConfigError("config: runtime.on_backup_failure must be raise or hold");
  }
  if (c.bench.samples < 1) throw ConfigError("config: bench.samples must be at least 1");
  if (c.bench.repetitions < 100) throw ConfigError("config: bench.repetitions must be at least 100");
  if (c.bench.warmup < 0) throw ConfigError("config: bench.warmup must be >= 0");
}

/// FNV-1a over the canonical JSON of all output-relevant keys. A custom
/// family file contributes its contents, not its path.
inline std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("out");
  j.erase("jobs");
  if (c.family == "custom") {
    std::ifstream in(c.custom_file, std::ios::binary);
    std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    j["custom_file"] = hex64(fnv1a(body));
  }
  return hex64(fnv1a(j.dump()));
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  RunConfig c;
  apply_json(j, c);
  // A relative custom family path is taken relative to the config file.
  if (!c.custom_file.empty() && std::filesystem::path(c.custom_file).is_relative()) {
    c.custom_file = (std::filesystem::path(path).parent_path() / c.custom_file).string();
  }
  return c;
}

// ---------------------------------------------------------------------------
// Custom LTI families
//
//   {"name": "...", "horizon": T, "A": [[..]], "B": [[..]],
//    "Q": [[..]], "R": [[..]], "Qf": [[..]],
//    "Hx": [[..]], "hx": [..], "Hu": [[..]], "hu": [..], "Hf": [[..]], "hf": [..],
//    "x0_lower": [..], "x0_upper": [..]}
//
// Constraint blocks may be omitted. The parameter is the initial state.

inline ProblemFamily build_custom_lti(const json& j) {
  detail::ObjectReader r(j, "custom");
  std::string name = "custom";
  int horizon = 1;
  r.get("name", name);
  r.get("horizon", horizon);
  const auto mat = [&](const char* key, Eigen::Index cols, bool required) {
    const json* v = r.find(key);
    if (!v) {
      if (required) throw ConfigError(std::string("custom family: missing '") + key + "'");
      return MatrixXd(0, cols);
    }
    return detail::json_mat(*v, key, cols);
  };
  const auto vec = [&](const char* key) {
    const json* v = r.find(key);
    return v ? detail::json_vec(*v, key) : VectorXd(0);
  };
  SystemMatrices m;
  m.A = mat("A", 0, true);
  m.B = mat("B", 0, true);
  const Eigen::Index nx = m.A.rows(), nu = m.B.cols();
  if (m.A.cols() != nx || m.B.rows() != nx || nx == 0 || nu == 0) {
    throw ConfigError("custom family: A must be square and B must have as many rows as A");
  }
  LPVSystem sys(name, static_cast<int>(nx), static_cast<int>(nu), VectorXd(0), VectorXd(0),
                [m](const VectorXd&) { return m; });
  MPCSpec spec;
  spec.horizon = horizon;
  spec.Q = mat("Q", nx, true);
  spec.R = mat("R", nu, true);
  spec.Qf = mat("Qf", nx, true);
  spec.Hx = mat("Hx", nx, false);
  spec.hx = vec("hx");
  spec.Hu = mat("Hu", nu, false);
  spec.hu = vec("hu");
  spec.Hf = mat("Hf", nx, false);
  spec.hf = vec("hf");
  ParameterLayout L;
  L.nx = static_cast<int>(nx);
  L.nu = static_cast<int>(nu);
  L.ny = static_cast<int>(nx);
  L.horizon = horizon;
  ParameterBox box(vec("x0_lower"), vec("x0_upper"));
  if (box.dim() != nx) throw ConfigError("custom family: x0_lower/x0_upper must have nx entries");
  ProblemFamily f{std::move(sys), std::move(spec), L, std::move(box)};
  validate_family(f);
  return f;
}

inline ProblemFamily build_family(const RunConfig& c) {
  if (c.family == "benchmark") return build_benchmark_lti(c.benchmark);
  if (c.family == "icc-surrogate") return build_icc_surrogate(c.icc);
  if (c.family == "custom") {
    std::ifstream in(c.custom_file);
    if (!in) throw ConfigError("custom family file not found: " + c.custom_file);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("custom family file is not valid JSON: " + std::string(e.what()));
    }
    return build_custom_lti(j);
  }
  throw ConfigError("unknown family '" + c.family + "'");
}

inline std::vector<int> full_widths(const ProblemFamily& f, const std::vector<int>& hidden, Target t) {
  std::vector<int> w{f.parameter_dim()};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(t == Target::primal ? f.decision_dim() : f.constraint_dim());
  return w;
}

}  // namespace certmpc
