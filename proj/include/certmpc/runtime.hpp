#pragma once

// Online certified control loop. At each step both policies are evaluated at
// P_t, the QP is condensed afresh, and the learned input is applied only when
// U is primal feasible, lambda is dual feasible and p(U) - d(lambda) <= gamma.
// Everything else goes to the exact solver.

#include <certmpc/common.hpp>
#include <certmpc/lpv_mpc.hpp>
#include <certmpc/policy.hpp>
#include <certmpc/qp_core.hpp>
#include <certmpc/qp_solver.hpp>

#include <chrono>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace certmpc {

enum class StepReason { certified, outside_box, primal_infeasible, dual_infeasible, gap_above_threshold };

inline const char* to_string(StepReason r) {
  switch (r) {
    case StepReason::certified: return "certified";
    case StepReason::outside_box: return "parameter outside box";
    case StepReason::primal_infeasible: return "primal infeasible";
    case StepReason::dual_infeasible: return "dual infeasible";
    case StepReason::gap_above_threshold: return "gap above threshold";
  }
  return "unknown";
}

/// What to do when the exact solver itself fails on a fallback step.
struct BackupStrategy {
  enum class OnFailure {
    raise,  // throw BackupFailure
    hold,   // apply the previous input, scaled toward zero until it meets the input constraints
  };
  SolverOptions solver;
  OnFailure on_failure = OnFailure::raise;
};

struct PhaseTimes {
  double policy_us = 0.0;
  double condense_us = 0.0;
  double certificate_us = 0.0;
  double backup_us = 0.0;
  double total_us = 0.0;
};

struct StepAudit {
  double J_star = std::numeric_limits<double>::quiet_NaN();
  /// p(U) - J* for the primal policy output (NaN when the policy was not run).
  double suboptimality = std::numeric_limits<double>::quiet_NaN();
  bool solved = false;
};

struct StepRecord {
  int t = 0;
  VectorXd P;
  VectorXd U;       // primal output (empty when the policies were skipped)
  VectorXd lambda;  // dual output
  bool in_box = true;
  bool primal_feasible = false;
  bool dual_feasible = false;
  double primal_violation = std::numeric_limits<double>::quiet_NaN();
  double primal_objective = std::numeric_limits<double>::quiet_NaN();
  double dual_objective = std::numeric_limits<double>::quiet_NaN();
  double gap = std::numeric_limits<double>::quiet_NaN();
  bool certified = false;
  bool fallback = false;
  StepReason reason = StepReason::outside_box;
  /// Set when the backup solver failed and the hold rule supplied u.
  bool backup_failed = false;
  VectorXd u;
  int solver_calls = 0;
  PhaseTimes times;
  std::optional<StepAudit> audit;
  /// Closed-loop bookkeeping filled in by simulate().
  VectorXd x;
  bool aborted = false;
  std::string diagnostic;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double micros(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::micro>(b - a).count();
}

}  // namespace detail

/// Immutable once built; certify_and_act is const and may run concurrently.
class CertifiedController {
 public:
  CertifiedController(std::shared_ptr<const ProblemFamily> family, PolicyMap primal, PolicyMap dual, double gamma,
                      double feasibility_tolerance = 1e-6, BackupStrategy backup = {})
      : fam_(std::move(family)),
        primal_(std::move(primal)),
        dual_(std::move(dual)),
        gamma_(gamma),
        feas_tol_(feasibility_tolerance),
        backup_(backup) {
    if (!fam_) throw ContractError("CertifiedController: no problem family");
    if (!primal_ || !dual_) throw ContractError("CertifiedController: both policies are required");
    // gamma = 0 is accepted so that forced-fallback runs can be expressed.
    if (!(gamma_ >= 0.0)) throw ConfigError("CertifiedController: gamma must be nonnegative");
    if (!(feas_tol_ >= 0.0) || !std::isfinite(feas_tol_)) {
      throw ConfigError("CertifiedController: feasibility tolerance must be finite and nonnegative");
    }
  }

  /// Checks the network widths against the family before wrapping them.
  static CertifiedController from_policies(std::shared_ptr<const ProblemFamily> family, const Policy& primal,
                                           const Policy& dual, double gamma, double feasibility_tolerance = 1e-6,
                                           BackupStrategy backup = {}) {
    if (!family) throw ContractError("CertifiedController: no problem family");
    const ProblemFamily& f = *family;
    require_dim(primal.input_dim(), f.parameter_dim(), "CertifiedController: primal policy input");
    require_dim(primal.output_dim(), f.decision_dim(), "CertifiedController: primal policy output");
    require_dim(dual.input_dim(), f.parameter_dim(), "CertifiedController: dual policy input");
    require_dim(dual.output_dim(), f.constraint_dim(), "CertifiedController: dual policy output");
    return CertifiedController(std::move(family), as_map(primal), as_map(dual), gamma, feasibility_tolerance, backup);
  }

  const ProblemFamily& family() const { return *fam_; }
  std::shared_ptr<const ProblemFamily> family_handle() const { return fam_; }
  double gamma() const { return gamma_; }
  double feasibility_tolerance() const { return feas_tol_; }
  const BackupStrategy& backup() const { return backup_; }
  const PolicyMap& primal() const { return primal_; }
  const PolicyMap& dual() const { return dual_; }

  /// One step of the online loop. With `audit` the QP is additionally solved
  /// to record J* and the true suboptimality; audit solves are not counted
  /// in solver_calls.
  StepRecord certify_and_act(const VectorXd& P, bool audit = false) const {
    const ProblemFamily& f = *fam_;
    require_dim(P.size(), f.parameter_dim(), "certify_and_act: parameter");
    if (!P.allFinite()) throw ContractError("certify_and_act: non-finite parameter");
    const auto t_start = detail::Clock::now();
    StepRecord rec;
    rec.P = P;
    rec.in_box = f.box.contains(P);

    DenseQP qp;
    bool have_qp = false;
    if (rec.in_box) {
      const auto t0 = detail::Clock::now();
      rec.U = primal_(P);
      rec.lambda = dual_(P);
      const auto t1 = detail::Clock::now();
      require_dim(rec.U.size(), f.decision_dim(), "certify_and_act: primal policy output");
      require_dim(rec.lambda.size(), f.constraint_dim(), "certify_and_act: dual policy output");
      Eigen::LLT<MatrixXd> llt;
      qp = condense(f, P, &llt);
      have_qp = true;
      const auto t2 = detail::Clock::now();
      evaluate_certificate(qp, llt, rec);
      const auto t3 = detail::Clock::now();
      rec.times.policy_us = detail::micros(t0, t1);
      rec.times.condense_us = detail::micros(t1, t2);
      rec.times.certificate_us = detail::micros(t2, t3);
    }

    const int nu = f.system.nu();
    std::optional<SolveResult> exact;
    if (rec.certified) {
      rec.u = rec.U.head(nu);
    } else {
      rec.fallback = true;
      const auto t0 = detail::Clock::now();
      try {
        if (!have_qp) {
          qp = condense(f, P);
          have_qp = true;
        }
        ++rec.solver_calls;
        exact = solve(qp, backup_.solver);
        if (!exact->optimal()) {
          throw BackupFailure(std::string("backup solver failed with status ") + to_string(exact->status),
                              exact->status);
        }
        rec.u = exact->U_star.head(nu);
      } catch (const std::exception& e) {
        if (backup_.on_failure == BackupStrategy::OnFailure::raise) {
          if (dynamic_cast<const BackupFailure*>(&e)) throw;
          throw BackupFailure(std::string("backup controller failed: ") + e.what(), SolveStatus::numerical_failure);
        }
        rec.backup_failed = true;
        rec.u = hold_input(P);
        exact.reset();
      }
      rec.times.backup_us = detail::micros(t0, detail::Clock::now());
    }
    rec.times.total_us = detail::micros(t_start, detail::Clock::now());

    if (audit) {
      StepAudit a;
      try {
        if (!have_qp) qp = condense(f, P);
        const SolveResult r = exact ? *exact : solve(qp, backup_.solver);
        if (r.optimal()) {
          a.solved = true;
          a.J_star = r.J_star;
          if (rec.U.size() == f.decision_dim()) a.suboptimality = primal_objective(qp, rec.U) - r.J_star;
        }
      } catch (const std::exception&) {
        // An unsolvable audit leaves J* as NaN.
      }
      rec.audit = a;
    }
    return rec;
  }

  /// Previous input (zero without a rate constraint), scaled by 2^-k until it
  /// satisfies the input constraints. Zero always does since hu >= 0.
  VectorXd hold_input(const VectorXd& P) const {
    const ProblemFamily& f = *fam_;
    VectorXd u = VectorXd::Zero(f.system.nu());
    if (f.layout.has_prev_input) u = P.segment(f.layout.prev_offset(), f.system.nu());
    const MatrixXd& Hu = f.spec.Hu;
    for (int k = 0; k < 60 && Hu.rows() > 0; ++k) {
      if ((Hu * u - f.spec.hu).maxCoeff() <= 0.0) return u;
      u *= 0.5;
    }
    return Hu.rows() > 0 ? VectorXd::Zero(f.system.nu()) : u;
  }

  /// Feasibility flags and gap for given policy outputs and condensed data.
  /// The dual value uses max(lambda, 0) so that the weak-duality bound holds
  /// exactly even when tiny negative entries pass the tolerance.
  void evaluate_certificate(const DenseQP& qp, const Eigen::LLT<MatrixXd>& llt, StepRecord& rec) const {
    const bool finite = rec.U.allFinite() && rec.lambda.allFinite();
    if (finite) {
      const FeasibilityCheck pf = primal_feasible(qp, rec.U, feas_tol_);
      rec.primal_feasible = pf.feasible;
      rec.primal_violation = pf.max_violation;
      rec.dual_feasible = dual_feasible(rec.lambda, feas_tol_);
      rec.primal_objective = primal_objective(qp, rec.U);
      rec.dual_objective = dual_objective(qp, llt, rec.lambda.cwiseMax(0.0));
      rec.gap = rec.primal_objective - rec.dual_objective;
    }
    if (!finite || !rec.primal_feasible) {
      rec.reason = StepReason::primal_infeasible;
    } else if (!rec.dual_feasible) {
      rec.reason = StepReason::dual_infeasible;
    } else if (!(rec.gap <= gamma_)) {
      rec.reason = StepReason::gap_above_threshold;
    } else {
      rec.reason = StepReason::certified;
      rec.certified = true;
    }
  }

 private:
  std::shared_ptr<const ProblemFamily> fam_;
  PolicyMap primal_;
  PolicyMap dual_;
  double gamma_;
  double feas_tol_;
  BackupStrategy backup_;
};

// ---------------------------------------------------------------------------
// Closed-loop simulation

/// Exogenous trajectories indexed by time step. Lookahead beyond the last
/// entry holds the last value.
struct Scenario {
  VectorXd x0;
  std::vector<VectorXd> q;     // scheduling variable at each step
  std::vector<VectorXd> yref;  // output reference at each step (tracking families)
  std::vector<double> delta;   // exogenous input at each step (preview families)
  VectorXd u_prev0;            // input applied before t = 0
  int steps = 0;
  double state_bound = 1e6;    // abort once |x| exceeds this
};

inline void validate_scenario(const ProblemFamily& f, const Scenario& s) {
  if (s.steps < 1) throw ConfigError("scenario: steps must be at least 1");
  require_dim(s.x0.size(), f.system.nx(), "scenario: initial state");
  const auto need = static_cast<std::size_t>(s.steps);
  if (f.system.nq() > 0 && s.q.size() < need) throw ConfigError("scenario: scheduling trajectory shorter than steps");
  for (const auto& q : s.q) require_dim(q.size(), f.system.nq(), "scenario: scheduling value");
  if (f.layout.has_reference) {
    if (s.yref.size() < need) throw ConfigError("scenario: reference trajectory shorter than steps");
    for (const auto& y : s.yref) require_dim(y.size(), f.system.ny(), "scenario: reference value");
  }
  if (f.layout.has_preview && s.delta.size() < need) {
    throw ConfigError("scenario: exogenous trajectory shorter than steps");
  }
  if (f.layout.has_prev_input && s.u_prev0.size() != 0) {
    require_dim(s.u_prev0.size(), f.system.nu(), "scenario: previous input");
  }
  if (!(s.state_bound > 0.0)) throw ConfigError("scenario: state bound must be positive");
}

/// Parameter vector at time t for state x and previous input u_prev.
inline VectorXd scenario_parameter(const ProblemFamily& f, const Scenario& s, int t, const VectorXd& x,
                                   const VectorXd& u_prev) {
  const ParameterLayout& L = f.layout;
  const auto at = [](const auto& v, int k) { return v[std::min<std::size_t>(static_cast<std::size_t>(k), v.size() - 1)]; };
  VectorXd P(L.dim());
  P.segment(L.x_offset(), L.nx) = x;
  if (L.nq > 0) {
    if (L.frozen_schedule) {
      P.segment(L.q_offset(), L.nq) = at(s.q, t);
    } else {
      for (int k = 0; k < L.horizon; ++k) P.segment(L.q_offset() + k * L.nq, L.nq) = at(s.q, t + k);
    }
  }
  if (L.has_reference) {
    for (int k = 0; k < L.horizon; ++k) P.segment(L.ref_offset() + k * L.ny, L.ny) = at(s.yref, t + k);
  }
  if (L.has_preview) {
    for (int k = 0; k < L.horizon; ++k) P[L.preview_offset() + k] = at(s.delta, t + k);
  }
  if (L.has_prev_input) P.segment(L.prev_offset(), L.nu) = u_prev;
  return P;
}

/// Rolls the closed loop for s.steps steps. Each record carries the state at
/// which the step was taken. If the state norm exceeds s.state_bound the run
/// stops with a final record flagged `aborted`.
inline std::vector<StepRecord> simulate(const CertifiedController& ctrl, const Scenario& s, bool audit = false) {
  const ProblemFamily& f = ctrl.family();
  validate_scenario(f, s);
  std::vector<StepRecord> out;
  out.reserve(static_cast<std::size_t>(s.steps));
  VectorXd x = s.x0;
  VectorXd u_prev = s.u_prev0.size() ? s.u_prev0 : VectorXd::Zero(f.system.nu());
  for (int t = 0; t < s.steps; ++t) {
    if (!x.allFinite() || x.norm() > s.state_bound) {
      StepRecord r;
      r.t = t;
      r.x = x;
      r.aborted = true;
      r.diagnostic = "state norm " + std::to_string(x.norm()) + " exceeds bound " + std::to_string(s.state_bound);
      out.push_back(std::move(r));
      break;
    }
    const VectorXd P = scenario_parameter(f, s, t, x, u_prev);
    StepRecord r = ctrl.certify_and_act(P, audit);
    r.t = t;
    r.x = x;
    const VectorXd q = f.system.nq() > 0 ? VectorXd(s.q[static_cast<std::size_t>(t)]) : VectorXd(0);
    const double d = f.layout.has_preview ? s.delta[static_cast<std::size_t>(t)] : 0.0;
    x = step_dynamics(f.system, x, r.u, q, d);
    u_prev = r.u;
    out.push_back(std::move(r));
  }
  return out;
}

/// Closed-loop constraint violations of applied inputs and reached states.
struct ConstraintViolations {
  int input = 0;
  int rate = 0;
  int state = 0;
};

struct SimulationSummary {
  int steps = 0;
  int certified = 0;
  int fallbacks = 0;
  int outside_box = 0;
  int backup_failures = 0;
  int solver_calls = 0;
  int solver_calls_on_certified = 0;
  double fallback_rate = 0.0;
  double max_certified_gap = 0.0;
  /// Largest audited p(U) - J* over certified steps (NaN without audit).
  double max_certified_suboptimality = std::numeric_limits<double>::quiet_NaN();
  bool aborted = false;
  ConstraintViolations violations;
};

inline SimulationSummary summarize_run(const ProblemFamily& f, const Scenario& s, const std::vector<StepRecord>& recs,
                                       double tol = 1e-6) {
  SimulationSummary sum;
  const int nu = f.system.nu();
  VectorXd u_prev = s.u_prev0.size() ? s.u_prev0 : VectorXd::Zero(nu);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const StepRecord& r = recs[i];
    if (r.aborted) {
      sum.aborted = true;
      continue;
    }
    ++sum.steps;
    sum.solver_calls += r.solver_calls;
    if (r.certified) {
      ++sum.certified;
      sum.solver_calls_on_certified += r.solver_calls;
      sum.max_certified_gap = std::max(sum.max_certified_gap, r.gap);
      if (r.audit && r.audit->solved) {
        const double so = r.audit->suboptimality;
        sum.max_certified_suboptimality =
            std::isnan(sum.max_certified_suboptimality) ? so : std::max(sum.max_certified_suboptimality, so);
      }
    }
    if (r.fallback) ++sum.fallbacks;
    if (!r.in_box) ++sum.outside_box;
    if (r.backup_failed) ++sum.backup_failures;
    if (f.spec.Hu.rows() > 0 && (f.spec.Hu * r.u - f.spec.hu).maxCoeff() > tol) ++sum.violations.input;
    if (f.spec.rate_bound && ((r.u - u_prev).cwiseAbs() - *f.spec.rate_bound).maxCoeff() > tol) ++sum.violations.rate;
    u_prev = r.u;
    // Successor state is the next record's state.
    if (f.spec.Hx.rows() > 0 && i + 1 < recs.size() && recs[i + 1].x.size() == f.system.nx()) {
      if ((f.spec.Hx * recs[i + 1].x - f.spec.hx).maxCoeff() > tol) ++sum.violations.state;
    }
  }
  sum.fallback_rate = sum.steps ? static_cast<double>(sum.fallbacks) / sum.steps : 0.0;
  return sum;
}

/// Zero state, references and disturbances; the scheduling variable sits at
/// the middle of its range.
inline Scenario equilibrium_scenario(const ProblemFamily& f, int steps) {
  Scenario s;
  s.steps = steps;
  s.x0 = VectorXd::Zero(f.system.nx());
  const VectorXd qmid = 0.5 * (f.system.q_lower() + f.system.q_upper());
  s.q.assign(static_cast<std::size_t>(steps), qmid);
  if (f.layout.has_reference) s.yref.assign(static_cast<std::size_t>(steps), VectorXd::Zero(f.system.ny()));
  if (f.layout.has_preview) s.delta.assign(static_cast<std::size_t>(steps), 0.0);
  s.u_prev0 = VectorXd::Zero(f.system.nu());
  return s;
}

/// Randomized scenario drawn from the family's parameter box: initial state
/// uniform in the box, the scheduling variable as a bounded random walk,
/// references piecewise constant (redrawn every `hold` steps) and a
/// sinusoidal exogenous input at 80% of its bound.
inline Scenario random_scenario(const ProblemFamily& f, int steps, std::uint64_t seed, int hold = 50) {
  if (steps < 1 || hold < 1) throw ConfigError("random_scenario: steps and hold must be positive");
  const ParameterLayout& L = f.layout;
  const ParameterBox& B = f.box;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U01(0.0, 1.0);
  const auto draw = [&](int off, int len) {
    VectorXd v(len);
    for (int i = 0; i < len; ++i) v[i] = B.lower[off + i] + (B.upper[off + i] - B.lower[off + i]) * U01(rng);
    return v;
  };
  Scenario s;
  s.steps = steps;
  s.x0 = draw(L.x_offset(), L.nx);
  s.u_prev0 = VectorXd::Zero(L.nu);
  if (L.nq > 0) {
    const VectorXd lo = B.lower.segment(L.q_offset(), L.nq), hi = B.upper.segment(L.q_offset(), L.nq);
    VectorXd q = draw(L.q_offset(), L.nq);
    for (int t = 0; t < steps; ++t) {
      s.q.push_back(q);
      for (int i = 0; i < L.nq; ++i) q[i] = std::clamp(q[i] + 0.01 * (hi[i] - lo[i]) * (2.0 * U01(rng) - 1.0), lo[i], hi[i]);
    }
  }
  if (L.has_reference) {
    VectorXd y;
    for (int t = 0; t < steps; ++t) {
      if (t % hold == 0) y = draw(L.ref_offset(), L.ny);
      s.yref.push_back(y);
    }
  }
  if (L.has_preview) {
    const double amp = 0.8 * B.upper[L.preview_offset()];
    const double phase = 2.0 * std::numbers::pi * U01(rng);
    for (int t = 0; t < steps; ++t) s.delta.push_back(amp * std::sin(2.0 * std::numbers::pi * t / 100.0 + phase));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Timing

/// Per-sample mean times (microseconds) summarized over samples. Both
/// columns start from the same condensed QP; its assembly is reported
/// separately as a shared cost and added back in the end-to-end figures.
struct TimingReport {
  Summary policy;     // both forwards + feasibility + gap
  Summary solver;     // interior-point solve
  Summary condense;   // QP assembly and Hessian factorization, shared
  Summary policy_end_to_end;
  Summary solver_end_to_end;
  double speedup = 0.0;             // solver.mean / policy.mean
  double speedup_end_to_end = 0.0;  // with condensing added to both
  std::size_t samples = 0;
  int repetitions = 0;
  int warmup = 0;
};

/// Pure measurement: the controller is only read. Each sample is timed over
/// `repetitions` runs after `warmup` untimed runs; the per-sample mean enters
/// the summaries.
inline TimingReport benchmark_timing(const CertifiedController& ctrl, const std::vector<VectorXd>& samples,
                                     int repetitions = 100, int warmup = 10) {
  if (samples.empty()) throw ContractError("benchmark_timing: empty sample list");
  if (repetitions < 100) throw ConfigError("benchmark_timing: repetitions must be at least 100");
  if (warmup < 0) throw ConfigError("benchmark_timing: warmup must be nonnegative");
  const ProblemFamily& f = ctrl.family();
  std::vector<double> tp, ts, tc, tpe, tse;
  double sink = 0.0;
  for (const VectorXd& P : samples) {
    require_dim(P.size(), f.parameter_dim(), "benchmark_timing: sample");
    Eigen::LLT<MatrixXd> llt;
    const DenseQP qp = condense(f, P, &llt);

    const auto policy_path = [&] {
      StepRecord rec;
      rec.U = ctrl.primal()(P);
      rec.lambda = ctrl.dual()(P);
      ctrl.evaluate_certificate(qp, llt, rec);
      sink += rec.gap;
    };
    const auto solver_path = [&] { sink += solve(qp, ctrl.backup().solver).J_star; };
    const auto condense_path = [&] {
      Eigen::LLT<MatrixXd> l;
      sink += condense(f, P, &l).Q(0, 0);
    };
    const auto time_it = [&](const auto& body) {
      for (int r = 0; r < warmup; ++r) body();
      const auto t0 = detail::Clock::now();
      for (int r = 0; r < repetitions; ++r) body();
      return detail::micros(t0, detail::Clock::now()) / repetitions;
    };
    tp.push_back(time_it(policy_path));
    ts.push_back(time_it(solver_path));
    tc.push_back(time_it(condense_path));
    tpe.push_back(tp.back() + tc.back());
    tse.push_back(ts.back() + tc.back());
  }
  TimingReport rep;
  rep.policy = summarize(tp);
  rep.solver = summarize(ts);
  rep.condense = summarize(tc);
  rep.policy_end_to_end = summarize(tpe);
  rep.solver_end_to_end = summarize(tse);
  rep.speedup = rep.solver.mean / rep.policy.mean;
  rep.speedup_end_to_end = rep.solver_end_to_end.mean / rep.policy_end_to_end.mean;
  rep.samples = samples.size();
  rep.repetitions = repetitions;
  rep.warmup = warmup;
  // Keeps the optimizer from discarding the timed work.
  volatile double keep = sink;
  (void)keep;
  return rep;
}

// ---------------------------------------------------------------------------
// Step record export

namespace detail {

inline std::string join_vec(const VectorXd& v, char sep = ' ') {
  std::string s;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    s += fmt17(v[i]);
  }
  return s;
}

}  // namespace detail

/// One row per step. Vector fields are space-separated inside one column.
inline void write_step_csv(std::ostream& os, const std::vector<StepRecord>& recs) {
  os << "t,in_box,primal_feasible,dual_feasible,primal_violation,gap,certified,fallback,reason,backup_failed,"
        "solver_calls,policy_us,condense_us,certificate_us,backup_us,total_us,J_star,suboptimality,aborted,x,u,P,U,"
        "lambda\n";
  for (const auto& r : recs) {
    const auto f = detail::fmt17;
    os << r.t << ',' << r.in_box << ',' << r.primal_feasible << ',' << r.dual_feasible << ','
       << f(r.primal_violation) << ',' << f(r.gap) << ',' << r.certified << ',' << r.fallback << ','
       << (r.aborted ? "aborted" : to_string(r.reason)) << ',' << r.backup_failed << ',' << r.solver_calls << ','
       << f(r.times.policy_us) << ',' << f(r.times.condense_us) << ',' << f(r.times.certificate_us) << ','
       << f(r.times.backup_us) << ',' << f(r.times.total_us) << ','
       << (r.audit ? f(r.audit->J_star) : "") << ',' << (r.audit ? f(r.audit->suboptimality) : "") << ','
       << r.aborted << ',' << detail::join_vec(r.x) << ',' << detail::join_vec(r.u) << ','
       << detail::join_vec(r.P) << ',' << detail::join_vec(r.U) << ',' << detail::join_vec(r.lambda) << '\n';
  }
}

}  // namespace certmpc
