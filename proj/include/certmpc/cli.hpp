#pragma once

// Command-line front end: gen-data, train, verify, simulate, bench.
// Exit codes: 0 success or verification pass, 1 verification fail,
// 2 usage, configuration or runtime error.

#include <certmpc/config.hpp>
#include <certmpc/policy.hpp>
#include <certmpc/report.hpp>
#include <certmpc/runtime.hpp>
#include <certmpc/verify.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace certmpc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFail = 1;
inline constexpr int kExitError = 2;

/// Stream tags for the seeds derived from the global seed.
enum SeedStream : std::uint64_t { kTrainSeed = 1, kVerifySeed = 2, kScenarioSeed = 3, kBenchSeed = 4, kHoldoutSeed = 5 };

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> jobs;

  // gen-data
  std::optional<std::size_t> m;
  std::optional<double> label_margin;
  // train / verify
  std::string data_path;
  std::string primal_path;
  std::string dual_path;
  bool oracle = false;
  bool retrain = false;
  std::optional<std::size_t> holdout;
  bool dump_samples = false;
  // simulate
  std::optional<double> gamma;
  std::optional<int> steps;
  std::optional<std::string> scenario;
  bool no_audit = false;
  // bench
  std::optional<int> repetitions;
  std::optional<std::size_t> bench_samples;
};

/// Resolved configuration for one command invocation.
struct Context {
  RunConfig cfg;
  std::string hash;
  std::filesystem::path out;
  std::shared_ptr<const ProblemFamily> family;

  std::filesystem::path path(const std::string& name) const { return out / name; }
  json stamp() const { return {{"config_hash", hash}, {"seed", cfg.seed}, {"family", cfg.family}}; }
};

inline Context make_context(const Options& o) {
  Context ctx;
  if (!o.config_path.empty()) ctx.cfg = load_run_config(o.config_path);
  RunConfig& c = ctx.cfg;
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out = *o.out;
  if (o.jobs) c.jobs = *o.jobs;
  if (o.m) c.data.samples = *o.m;
  if (o.label_margin) c.data.label_margin = *o.label_margin;
  if (o.holdout) c.verify.holdout = *o.holdout;
  if (o.gamma) c.runtime.gamma = *o.gamma;
  if (o.steps) c.runtime.steps = *o.steps;
  if (o.scenario) c.runtime.scenario = *o.scenario;
  if (o.no_audit) c.runtime.audit = false;
  if (o.repetitions) c.bench.repetitions = *o.repetitions;
  if (o.bench_samples) c.bench.samples = *o.bench_samples;
  validate(c);
  ctx.hash = config_hash(c);
  ctx.out = c.out;
  std::filesystem::create_directories(ctx.out);
  ctx.family = std::make_shared<const ProblemFamily>(build_family(c));
  return ctx;
}

inline void write_json(const std::filesystem::path& p, const json& j) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << j.dump(2) << '\n';
}

inline std::string or_default(const std::string& given, const Context& ctx, const char* name) {
  return given.empty() ? ctx.path(name).string() : given;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("dataset not found: " + path);
  return read_dataset_csv(in);
}

inline void check_dataset(const Dataset& ds, const ProblemFamily& f) {
  if (ds.size() == 0) throw FormatError("dataset is empty");
  if (ds.family != f.name()) throw ContractError("dataset family '" + ds.family + "' does not match '" + f.name() + "'");
  require_dim(ds.parameter_dim(), f.parameter_dim(), "dataset parameter");
  require_dim(ds.primal_dim(), f.decision_dim(), "dataset primal label");
  require_dim(ds.dual_dim(), f.constraint_dim(), "dataset dual label");
}

inline std::string policy_metadata(const Context& ctx, Target t, const std::string& dataset_hash,
                                   const TrainReport* rep) {
  json j = ctx.stamp();
  j["target"] = to_string(t);
  j["dataset_config_hash"] = dataset_hash;
  if (rep) j["training"] = to_json(*rep);
  return j.dump();
}

inline void check_policy_dims(const Policy& p, const ProblemFamily& f, Target t) {
  const char* what = t == Target::primal ? "primal policy" : "dual policy";
  require_dim(p.input_dim(), f.parameter_dim(), what);
  require_dim(p.output_dim(), t == Target::primal ? f.decision_dim() : f.constraint_dim(), what);
}

/// Trained policies from files, or the exact solver wrapped as policies.
struct PolicyPair {
  PolicyMap primal, dual;
  std::string primal_fingerprint = "oracle", dual_fingerprint = "oracle";
};

inline PolicyPair load_policies(const Options& o, const Context& ctx) {
  PolicyPair pp;
  const ProblemFamily& f = *ctx.family;
  if (o.oracle) {
    pp.primal = oracle_primal_map(f, ctx.cfg.verify.cfg.oracle);
    pp.dual = oracle_dual_map(f, ctx.cfg.verify.cfg.oracle);
    return pp;
  }
  const Policy p = load_policy(or_default(o.primal_path, ctx, "primal.pol"));
  const Policy d = load_policy(or_default(o.dual_path, ctx, "dual.pol"));
  check_policy_dims(p, f, Target::primal);
  check_policy_dims(d, f, Target::dual);
  pp.primal_fingerprint = policy_fingerprint(p);
  pp.dual_fingerprint = policy_fingerprint(d);
  pp.primal = as_map(p);
  pp.dual = as_map(d);
  return pp;
}

inline TrainConfig train_config(const Context& ctx) {
  TrainConfig tc = ctx.cfg.train.cfg;
  tc.seed = derive_seed(ctx.cfg.seed, kTrainSeed);
  return tc;
}

inline VerificationConfig verification_config(const Context& ctx) {
  VerificationConfig vc = ctx.cfg.verify.cfg;
  vc.seed = derive_seed(ctx.cfg.seed, kVerifySeed);
  vc.jobs = ctx.cfg.jobs;
  return vc;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_gen_data(const Options& o, std::ostream& out) {
  const Context ctx = make_context(o);
  DatasetOptions dop;
  dop.solver.tolerance = ctx.cfg.data.solver_tolerance;
  dop.label_margin = ctx.cfg.label_margin();
  dop.jobs = ctx.cfg.jobs;
  Dataset ds = generate_dataset(*ctx.family, ctx.cfg.data.samples, ctx.cfg.seed, dop);
  ds.config_hash = ctx.hash;
  const auto path = ctx.path("dataset.csv");
  {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    write_dataset_csv(f, ds, ctx.family->layout.coordinate_names());
  }
  json rep = ctx.stamp();
  rep["records"] = ds.size();
  rep["failures"] = ds.failures;
  rep["label_margin"] = ds.label_margin;
  rep["solver_tolerance"] = ds.solver_tolerance;
  rep["dataset"] = path.filename().string();
  write_json(ctx.path("gen_data_report.json"), rep);
  out << "wrote " << ds.size() << " records to " << path.string() << " (" << ds.failures
      << " failed draws replaced)\n";
  return kExitOk;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  const Context ctx = make_context(o);
  const ProblemFamily& f = *ctx.family;
  const Dataset ds = load_dataset(or_default(o.data_path, ctx, "dataset.csv"));
  check_dataset(ds, f);
  const TrainConfig tc = train_config(ctx);
  json rep = ctx.stamp();
  rep["dataset_config_hash"] = ds.config_hash;
  for (Target t : {Target::primal, Target::dual}) {
    const auto& hidden = t == Target::primal ? ctx.cfg.train.primal_hidden : ctx.cfg.train.dual_hidden;
    TrainReport tr;
    Policy p = train(ds, t, full_widths(f, hidden, t), tc, &tr);
    p.set_metadata(policy_metadata(ctx, t, ds.config_hash, &tr));
    const auto path = ctx.path(t == Target::primal ? "primal.pol" : "dual.pol");
    save_policy(p, path.string());
    rep[to_string(t)] = to_json(tr);
    rep[to_string(t)]["widths"] = p.widths();
    rep[to_string(t)]["fingerprint"] = policy_fingerprint(p);
    out << to_string(t) << " policy: best validation loss " << fmt_sig(tr.best_validation_loss, 3) << " at epoch "
        << tr.best_epoch << ", saved to " << path.string() << '\n';
  }
  write_json(ctx.path("train_report.json"), rep);
  return kExitOk;
}

inline int cmd_verify(const Options& o, std::ostream& out) {
  const Context ctx = make_context(o);
  const ProblemFamily& f = *ctx.family;
  const VerificationConfig vc = verification_config(ctx);
  out << "N_p = " << required_sample_size(vc.epsilon_p, vc.beta_p)
      << ", N_d = " << required_sample_size(vc.epsilon_d, vc.beta_d) << '\n';

  VerificationReport rep;
  PolicyPair pp;
  if (o.retrain && !o.oracle) {
    const Dataset ds = load_dataset(or_default(o.data_path, ctx, "dataset.csv"));
    check_dataset(ds, f);
    RetrainOutcome res = train_and_verify(ds, f, full_widths(f, ctx.cfg.train.primal_hidden, Target::primal),
                                          full_widths(f, ctx.cfg.train.dual_hidden, Target::dual), train_config(ctx),
                                          vc, ctx.cfg.verify.max_attempts);
    for (const auto& line : res.log) out << line << '\n';
    res.primal.set_metadata(policy_metadata(ctx, Target::primal, ds.config_hash, nullptr));
    res.dual.set_metadata(policy_metadata(ctx, Target::dual, ds.config_hash, nullptr));
    save_policy(res.primal, ctx.path("primal.pol").string());
    save_policy(res.dual, ctx.path("dual.pol").string());
    rep = std::move(res.report);
    rep.primal_fingerprint = policy_fingerprint(res.primal);
    rep.dual_fingerprint = policy_fingerprint(res.dual);
    pp.primal = as_map(res.primal);
    pp.dual = as_map(res.dual);
  } else {
    pp = load_policies(o, ctx);
    rep = run_verification(pp.primal, pp.dual, f, vc);
    rep.primal_fingerprint = pp.primal_fingerprint;
    rep.dual_fingerprint = pp.dual_fingerprint;
  }
  if (ctx.cfg.verify.holdout > 0) {
    rep.stats = empirical_stats(pp.primal, pp.dual, f, ctx.cfg.verify.holdout, vc.gamma_p, vc.gamma_d,
                                vc.total_gamma(), derive_seed(ctx.cfg.seed, kHoldoutSeed), vc.feasibility_tolerance,
                                ctx.cfg.jobs, vc.oracle);
  }

  json j = to_json(rep);
  j.update(ctx.stamp());
  write_json(ctx.path("verification.json"), j);
  if (o.dump_samples) {
    std::ofstream s(ctx.path("verification_samples.csv"));
    s << "# config_hash=" << ctx.hash << " seed=" << ctx.cfg.seed << '\n';
    s << "fragment,index,J_star,objective,violation,feasible,within_gamma\n";
    for (const FragmentReport* fr : {&rep.primal, &rep.dual}) {
      for (const auto& c : fr->samples) {
        s << fr->name << ',' << c.index << ',' << detail::fmt17(c.J_star) << ',' << detail::fmt17(c.objective) << ','
          << detail::fmt17(c.violation) << ',' << c.feasible << ',' << c.within_gamma << '\n';
      }
    }
  }
  render_verification(out, rep);
  if (rep.stats) render_stats_table(out, *rep.stats);
  return rep.passed ? kExitOk : kExitFail;
}

inline CertifiedController make_controller(const Options& o, const Context& ctx) {
  const PolicyPair pp = load_policies(o, ctx);
  BackupStrategy bs;
  bs.solver = ctx.cfg.verify.cfg.oracle;
  bs.on_failure = ctx.cfg.runtime.on_backup_failure == "hold" ? BackupStrategy::OnFailure::hold
                                                               : BackupStrategy::OnFailure::raise;
  return CertifiedController(ctx.family, pp.primal, pp.dual, ctx.cfg.runtime_gamma(),
                             ctx.cfg.runtime.feasibility_tolerance, bs);
}

inline int cmd_simulate(const Options& o, std::ostream& out) {
  const Context ctx = make_context(o);
  const ProblemFamily& f = *ctx.family;
  const CertifiedController ctrl = make_controller(o, ctx);
  const auto& rc = ctx.cfg.runtime;
  Scenario sc = rc.scenario == "equilibrium"
                    ? equilibrium_scenario(f, rc.steps)
                    : random_scenario(f, rc.steps, derive_seed(ctx.cfg.seed, kScenarioSeed), rc.reference_hold);
  sc.state_bound = rc.state_bound;
  const auto recs = simulate(ctrl, sc, rc.audit);
  const SimulationSummary sum = summarize_run(f, sc, recs);
  {
    std::ofstream csv(ctx.path("steps.csv"));
    csv << "# config_hash=" << ctx.hash << " seed=" << ctx.cfg.seed << '\n';
    write_step_csv(csv, recs);
    std::ofstream jl(ctx.path("steps.jsonl"));
    jl << ctx.stamp().dump() << '\n';
    write_step_jsonl(jl, recs);
  }
  json j = to_json(sum);
  j.update(ctx.stamp());
  j["gamma"] = ctrl.gamma();
  j["scenario"] = rc.scenario;
  j["audit"] = rc.audit;
  write_json(ctx.path("simulation_summary.json"), j);
  render_simulation(out, sum);
  return kExitOk;
}

inline int cmd_bench(const Options& o, std::ostream& out) {
  const Context ctx = make_context(o);
  const CertifiedController ctrl = make_controller(o, ctx);
  const auto samples =
      sample_parameters(ctx.family->box, ctx.cfg.bench.samples, derive_seed(ctx.cfg.seed, kBenchSeed));
  const TimingReport t = benchmark_timing(ctrl, samples, ctx.cfg.bench.repetitions, ctx.cfg.bench.warmup);
  json j = to_json(t);
  j.update(ctx.stamp());
  write_json(ctx.path("timing.json"), j);
  render_timing_table(out, t);
  return kExitOk;
}

// ---------------------------------------------------------------------------

/// Parses arguments and dispatches. All errors are reported on `err` and
/// mapped to exit code 2.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"certmpc: learned primal/dual MPC policies with randomized verification and runtime certificates"};
  app.require_subcommand(1);
  Options o;
  const auto common = [&](CLI::App* sc) {
    sc->add_option("--config", o.config_path, "JSON run configuration");
    sc->add_option("--seed", o.seed, "global seed (overrides the config)");
    sc->add_option("--out", o.out, "output directory (overrides the config)");
    sc->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
  };
  auto* gen = app.add_subcommand("gen-data", "sample parameters and solve for training labels");
  common(gen);
  gen->add_option("--m", o.m, "number of records");
  gen->add_option("--label-margin", o.label_margin, "constraint tightening for primal targets");

  auto* tr = app.add_subcommand("train", "fit primal and dual policies");
  common(tr);
  tr->add_option("--data", o.data_path, "dataset CSV (default <out>/dataset.csv)");

  auto* ver = app.add_subcommand("verify", "randomized verification of both policies");
  common(ver);
  ver->add_option("--data", o.data_path, "dataset CSV used by --retrain");
  ver->add_option("--primal", o.primal_path, "primal policy file");
  ver->add_option("--dual", o.dual_path, "dual policy file");
  ver->add_flag("--oracle", o.oracle, "verify the exact solver wrapped as policies");
  ver->add_flag("--retrain", o.retrain, "retrain failing policies (bounded by verify.max_attempts)");
  ver->add_option("--holdout", o.holdout, "extra samples for empirical statistics");
  ver->add_flag("--dump-samples", o.dump_samples, "write per-sample records as CSV");

  auto* sim = app.add_subcommand("simulate", "closed-loop run of the certified controller");
  common(sim);
  sim->add_option("--primal", o.primal_path, "primal policy file");
  sim->add_option("--dual", o.dual_path, "dual policy file");
  sim->add_flag("--oracle", o.oracle, "use the exact solver as both policies");
  sim->add_option("--gamma", o.gamma, "certification threshold");
  sim->add_option("--steps", o.steps, "number of steps");
  sim->add_option("--scenario", o.scenario, "random or equilibrium");
  sim->add_flag("--no-audit", o.no_audit, "skip the per-step exact solve");

  auto* bench = app.add_subcommand("bench", "time policy+certificate against the embedded solver");
  common(bench);
  bench->add_option("--primal", o.primal_path, "primal policy file");
  bench->add_option("--dual", o.dual_path, "dual policy file");
  bench->add_flag("--oracle", o.oracle, "use the exact solver as both policies");
  bench->add_option("--repetitions", o.repetitions, "timed repetitions per sample (>= 100)");
  bench->add_option("--samples", o.bench_samples, "number of parameter samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o, out);
    if (tr->parsed()) return cmd_train(o, out);
    if (ver->parsed()) return cmd_verify(o, out);
    if (sim->parsed()) return cmd_simulate(o, out);
    if (bench->parsed()) return cmd_bench(o, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}

}  // namespace certmpc::cli
