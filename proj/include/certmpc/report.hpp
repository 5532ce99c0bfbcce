#pragma once

// Machine-readable (JSON, JSON lines) and aligned-text renderings of the
// training, verification, simulation and timing results.

#include <certmpc/config.hpp>
#include <certmpc/policy.hpp>
#include <certmpc/runtime.hpp>
#include <certmpc/verify.hpp>

#include <json.hpp>

#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

namespace certmpc {

/// JSON has no NaN; missing values become null.
inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const Summary& s) {
  return {{"min", num(s.min)},       {"max", num(s.max)},       {"mean", num(s.mean)},
          {"std", num(s.stddev)},    {"median", num(s.median)}, {"count", s.count}};
}

inline json to_json(const TrainReport& r) {
  return {{"initial_loss", num(r.initial_loss)},
          {"final_loss", num(r.final_loss)},
          {"best_validation_loss", num(r.best_validation_loss)},
          {"best_epoch", r.best_epoch},
          {"epochs_run", r.epochs_run}};
}

inline json to_json(const FragmentReport& f) {
  return {{"name", f.name},
          {"epsilon", f.epsilon},
          {"beta", f.beta},
          {"gamma", f.gamma},
          {"N", f.N},
          {"seed", f.seed},
          {"passed", f.passed},
          {"infeasible", f.infeasible},
          {"suboptimal", f.suboptimal},
          {"oracle_failures", f.oracle_failures},
          {"violators", f.violators},
          {"warning", f.warning}};
}

inline json to_json(const EmpiricalStats& s) {
  return {{"n", s.n},
          {"seed", s.seed},
          {"gamma_p", s.gamma_p},
          {"gamma_d", s.gamma_d},
          {"gamma", s.gamma},
          {"alpha_p", to_json(s.alpha_p)},
          {"alpha_d", to_json(s.alpha_d)},
          {"alpha", to_json(s.alpha)},
          {"eps_hat_p", s.eps_hat_p},
          {"eps_hat_d", s.eps_hat_d},
          {"eps_hat", s.eps_hat},
          {"oracle_failures", s.oracle_failures}};
}

inline json to_json(const VerificationReport& r) {
  json j = {{"schema", "certmpc-verification/1"},
            {"passed", r.passed},
            {"epsilon", r.config.total_epsilon()},
            {"beta", r.config.total_beta()},
            {"gamma", r.config.total_gamma()},
            {"effective_beta", r.effective_beta()},
            {"feasibility_tolerance", r.config.feasibility_tolerance},
            {"verification_seed", r.config.seed},
            {"primal", to_json(r.primal)},
            {"dual", to_json(r.dual)},
            {"primal_attempts", r.primal_attempts},
            {"dual_attempts", r.dual_attempts},
            {"primal_fingerprint", r.primal_fingerprint},
            {"dual_fingerprint", r.dual_fingerprint},
            {"failed_fragments", r.failed_fragments},
            {"guarantee", r.guarantee}};
  if (r.stats) j["holdout"] = to_json(*r.stats);
  return j;
}

inline json to_json(const StepRecord& r) {
  json j = {{"t", r.t},
            {"x", detail::vec_json(r.x)},
            {"P", detail::vec_json(r.P)},
            {"U", detail::vec_json(r.U)},
            {"lambda", detail::vec_json(r.lambda)},
            {"in_box", r.in_box},
            {"primal_feasible", r.primal_feasible},
            {"dual_feasible", r.dual_feasible},
            {"primal_violation", num(r.primal_violation)},
            {"primal_objective", num(r.primal_objective)},
            {"dual_objective", num(r.dual_objective)},
            {"gap", num(r.gap)},
            {"certified", r.certified},
            {"fallback", r.fallback},
            {"reason", r.aborted ? "aborted" : to_string(r.reason)},
            {"backup_failed", r.backup_failed},
            {"u", detail::vec_json(r.u)},
            {"solver_calls", r.solver_calls},
            {"times_us",
             {{"policy", r.times.policy_us},
              {"condense", r.times.condense_us},
              {"certificate", r.times.certificate_us},
              {"backup", r.times.backup_us},
              {"total", r.times.total_us}}}};
  if (r.audit) j["audit"] = {{"J_star", num(r.audit->J_star)}, {"suboptimality", num(r.audit->suboptimality)}};
  if (r.aborted) j["diagnostic"] = r.diagnostic;
  return j;
}

inline void write_step_jsonl(std::ostream& os, const std::vector<StepRecord>& recs) {
  for (const auto& r : recs) os << to_json(r).dump() << '\n';
}

inline json to_json(const SimulationSummary& s) {
  return {{"steps", s.steps},
          {"certified", s.certified},
          {"fallbacks", s.fallbacks},
          {"fallback_rate", s.fallback_rate},
          {"outside_box", s.outside_box},
          {"backup_failures", s.backup_failures},
          {"solver_calls", s.solver_calls},
          {"solver_calls_on_certified", s.solver_calls_on_certified},
          {"max_certified_gap", s.max_certified_gap},
          {"max_certified_suboptimality", num(s.max_certified_suboptimality)},
          {"aborted", s.aborted},
          {"constraint_violations",
           {{"input", s.violations.input}, {"rate", s.violations.rate}, {"state", s.violations.state}}}};
}

/// Rows min/max/mean/std (plus median) per column, in microseconds.
inline json to_json(const TimingReport& t) {
  return {{"schema", "certmpc-timing/1"},
          {"unit", "us"},
          {"policy", to_json(t.policy)},
          {"solver", to_json(t.solver)},
          {"condense", to_json(t.condense)},
          {"policy_end_to_end", to_json(t.policy_end_to_end)},
          {"solver_end_to_end", to_json(t.solver_end_to_end)},
          {"speedup", t.speedup},
          {"speedup_end_to_end", t.speedup_end_to_end},
          {"policy_cv", t.policy.mean > 0 ? t.policy.stddev / t.policy.mean : 0.0},
          {"samples", t.samples},
          {"repetitions", t.repetitions},
          {"warmup", t.warmup}};
}

// ---------------------------------------------------------------------------
// Text tables

inline std::string fmt_sig(double v, int digits = 2) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline void render_timing_table(std::ostream& os, const TimingReport& t) {
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %14s %16s\n", "[us]", "policy+cert", "embedded solver");
  os << line;
  const auto row = [&](const char* name, double a, double b) {
    std::snprintf(line, sizeof line, "%-8s %14s %16s\n", name, fmt_sig(a).c_str(), fmt_sig(b).c_str());
    os << line;
  };
  row("min.", t.policy.min, t.solver.min);
  row("max.", t.policy.max, t.solver.max);
  row("mean", t.policy.mean, t.solver.mean);
  row("std.", t.policy.stddev, t.solver.stddev);
  row("median", t.policy.median, t.solver.median);
  os << "speedup (mean): " << fmt_sig(t.speedup, 3) << "x\n";
  os << "shared QP assembly: mean " << fmt_sig(t.condense.mean) << " us; end-to-end speedup "
     << fmt_sig(t.speedup_end_to_end, 3) << "x\n";
}

inline void render_stats_table(std::ostream& os, const EmpiricalStats& s) {
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %12s %12s %12s\n", "", "alpha_p", "alpha_d", "alpha");
  os << line;
  const auto row = [&](const char* name, double a, double b, double c) {
    std::snprintf(line, sizeof line, "%-8s %12s %12s %12s\n", name, fmt_sig(a, 3).c_str(), fmt_sig(b, 3).c_str(),
                  fmt_sig(c, 3).c_str());
    os << line;
  };
  row("min.", s.alpha_p.min, s.alpha_d.min, s.alpha.min);
  row("max.", s.alpha_p.max, s.alpha_d.max, s.alpha.max);
  row("mean", s.alpha_p.mean, s.alpha_d.mean, s.alpha.mean);
  row("median", s.alpha_p.median, s.alpha_d.median, s.alpha.median);
  row("eps_hat", s.eps_hat_p, s.eps_hat_d, s.eps_hat);
}

inline void render_verification(std::ostream& os, const VerificationReport& r) {
  for (const FragmentReport* f : {&r.primal, &r.dual}) {
    os << f->name << ": N=" << f->N << " eps=" << f->epsilon << " beta=" << f->beta << " gamma=" << f->gamma
       << " violators=" << f->violators.size() << " (infeasible " << f->infeasible << ", suboptimal "
       << f->suboptimal << ") -> " << (f->passed ? "PASS" : "FAIL") << '\n';
    if (!f->warning.empty()) os << "warning: " << f->warning << '\n';
  }
  os << "result: " << (r.passed ? "PASS" : "FAIL") << '\n';
  if (r.passed) os << r.guarantee << '\n';
}

inline void render_simulation(std::ostream& os, const SimulationSummary& s) {
  os << "steps " << s.steps << ", certified " << s.certified << ", fallback " << s.fallbacks << " (rate "
     << fmt_sig(s.fallback_rate, 3) << ", outside box " << s.outside_box << ")\n";
  os << "max certified gap " << fmt_sig(s.max_certified_gap, 3);
  if (!std::isnan(s.max_certified_suboptimality)) {
    os << ", max certified suboptimality " << fmt_sig(s.max_certified_suboptimality, 3);
  }
  os << "\nconstraint violations: input " << s.violations.input << ", rate " << s.violations.rate << ", state "
     << s.violations.state << (s.aborted ? "\nrun aborted: state bound exceeded" : "") << '\n';
}

}  // namespace certmpc
