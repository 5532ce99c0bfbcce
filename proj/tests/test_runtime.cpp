#include <certmpc/runtime.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

using namespace certmpc;

namespace {

std::shared_ptr<const ProblemFamily> bench() { return std::make_shared<const ProblemFamily>(build_benchmark_lti()); }
std::shared_ptr<const ProblemFamily> icc() { return std::make_shared<const ProblemFamily>(build_icc_surrogate()); }

PolicyMap constant_map(VectorXd v) {
  return [v = std::move(v)](const VectorXd&) { return v; };
}

}  // namespace

TEST(Controller, ExactPoliciesAreCertified) {
  const auto f = icc();
  SolverOptions tight;
  tight.tolerance = 1e-10;
  const CertifiedController ctrl(f, oracle_primal_map(*f, tight), oracle_dual_map(*f, tight), 1e-6);
  for (const VectorXd& P : sample_parameters(f->box, 50, 2)) {
    const StepRecord r = ctrl.certify_and_act(P, true);
    EXPECT_TRUE(r.certified);
    EXPECT_EQ(r.reason, StepReason::certified);
    EXPECT_EQ(r.solver_calls, 0);
    EXPECT_FALSE(r.fallback);
    EXPECT_LE(r.gap, 1e-7);
    EXPECT_GE(r.gap, -1e-9);
    EXPECT_EQ(r.u, r.U.head(3));
    ASSERT_TRUE(r.audit && r.audit->solved);
    EXPECT_LE(std::abs(r.audit->suboptimality), 1e-7);
  }
}

TEST(Controller, NegativeDualFallsBackWithReason) {
  const auto f = bench();
  const CertifiedController ctrl(f, oracle_primal_map(*f), constant_map(VectorXd::Constant(f->constraint_dim(), -1.0)),
                                 1e9);
  const VectorXd P = (VectorXd(2) << 1.0, -0.5).finished();
  const StepRecord r = ctrl.certify_and_act(P);
  EXPECT_FALSE(r.certified);
  EXPECT_TRUE(r.fallback);
  EXPECT_EQ(r.reason, StepReason::dual_infeasible);
  EXPECT_STREQ(to_string(r.reason), "dual infeasible");
  EXPECT_EQ(r.solver_calls, 1);
  EXPECT_EQ(r.u, backup_action(*f, P));
}

TEST(Controller, InfeasiblePrimalFallsBack) {
  const auto f = bench();
  const CertifiedController ctrl(f, constant_map(VectorXd::Constant(3, 2.0)), oracle_dual_map(*f), 1e9);
  const StepRecord r = ctrl.certify_and_act(VectorXd::Zero(2));
  EXPECT_EQ(r.reason, StepReason::primal_infeasible);
  EXPECT_NEAR(r.primal_violation, 1.0, 1e-12);
  EXPECT_LE(r.u.cwiseAbs().maxCoeff(), 1e-7);
}

TEST(Controller, GapAboveThresholdFallsBack) {
  const auto f = bench();
  // Zero input is feasible near the origin but far from optimal at x0 = (1, 1).
  const CertifiedController ctrl(f, constant_map(VectorXd::Zero(3)), oracle_dual_map(*f), 1e-3);
  const StepRecord r = ctrl.certify_and_act((VectorXd(2) << 1.0, 1.0).finished(), true);
  EXPECT_TRUE(r.primal_feasible);
  EXPECT_TRUE(r.dual_feasible);
  EXPECT_EQ(r.reason, StepReason::gap_above_threshold);
  EXPECT_GT(r.gap, 1e-3);
  // The gap bounds the true suboptimality from above.
  EXPECT_LE(r.audit->suboptimality, r.gap + 1e-9);
}

TEST(Controller, OutsideBoxSkipsPolicies) {
  const auto f = bench();
  int calls = 0;
  const PolicyMap counting = [&](const VectorXd&) {
    ++calls;
    return VectorXd(VectorXd::Zero(3));
  };
  const CertifiedController ctrl(f, counting, oracle_dual_map(*f), 1e9);
  const StepRecord r = ctrl.certify_and_act((VectorXd(2) << 2.5, 0.0).finished());
  EXPECT_FALSE(r.in_box);
  EXPECT_EQ(r.reason, StepReason::outside_box);
  EXPECT_EQ(calls, 0);
  EXPECT_EQ(r.U.size(), 0);
  EXPECT_EQ(r.solver_calls, 1);
}

TEST(Controller, InfiniteGammaNeverFallsBackForFeasibleOutputs) {
  const auto f = icc();
  const CertifiedController ctrl(f, constant_map(VectorXd::Zero(9)), constant_map(VectorXd::Zero(36)), INFINITY);
  for (const VectorXd& P : sample_parameters(f->box, 100, 3)) {
    const StepRecord r = ctrl.certify_and_act(P);
    EXPECT_TRUE(r.certified);
    EXPECT_EQ(r.solver_calls, 0);
  }
}

TEST(Controller, CertifiedStepsAreWithinGapOfOptimal) {
  // Perturbed exact policies: some steps certify, some do not; every
  // certified input must satisfy p(U) - J* <= gap <= gamma.
  const auto f = icc();
  const PolicyMap p_exact = oracle_primal_map(*f), d_exact = oracle_dual_map(*f);
  const PolicyMap p = [&](const VectorXd& P) { return VectorXd(0.97 * p_exact(P)); };
  const PolicyMap d = [&](const VectorXd& P) { return VectorXd(0.9 * d_exact(P)); };
  const auto samples = sample_parameters(f->box, 300, 4);
  // gamma = median gap over the samples, so roughly half certify.
  const CertifiedController probe(f, p, d, std::numeric_limits<double>::infinity());
  std::vector<double> gaps;
  for (const VectorXd& P : samples) gaps.push_back(probe.certify_and_act(P).gap);
  std::nth_element(gaps.begin(), gaps.begin() + 150, gaps.end());
  const double gamma = gaps[150];
  ASSERT_TRUE(std::isfinite(gamma) && gamma > 0.0);
  const CertifiedController ctrl(f, p, d, gamma);
  int certified = 0, fallback = 0;
  for (const VectorXd& P : samples) {
    const StepRecord r = ctrl.certify_and_act(P, true);
    ASSERT_TRUE(r.audit && r.audit->solved);
    if (r.certified) {
      ++certified;
      EXPECT_LE(r.gap, gamma);
      EXPECT_LE(r.audit->suboptimality, r.gap + 1e-9);
      EXPECT_GE(r.audit->suboptimality, -1e-7);
      EXPECT_LE(r.primal_violation, 1e-6);
    } else {
      ++fallback;
      EXPECT_EQ(r.solver_calls, 1);
    }
  }
  EXPECT_GT(certified, 0);
  EXPECT_GT(fallback, 0);
}

TEST(Controller, ConstructionErrors) {
  const auto f = bench();
  EXPECT_THROW(CertifiedController(f, oracle_primal_map(*f), oracle_dual_map(*f), -1.0), ConfigError);
  EXPECT_THROW(CertifiedController(f, oracle_primal_map(*f), oracle_dual_map(*f), 1.0, NAN), ConfigError);
  EXPECT_THROW(CertifiedController(nullptr, oracle_primal_map(*f), oracle_dual_map(*f), 1.0), ContractError);
  EXPECT_THROW(CertifiedController(f, PolicyMap{}, oracle_dual_map(*f), 1.0), ContractError);
  EXPECT_THROW(CertifiedController::from_policies(f, Policy({2, 4, 2}), Policy({2, 4, 22}), 1.0), ContractError);
  EXPECT_THROW(CertifiedController::from_policies(f, Policy({2, 4, 3}), Policy({3, 4, 22}), 1.0), ContractError);
  EXPECT_NO_THROW(CertifiedController::from_policies(f, Policy({2, 4, 3}), Policy({2, 4, 22}), 1.0));
  const CertifiedController ok(f, oracle_primal_map(*f), oracle_dual_map(*f), 1.0);
  EXPECT_THROW(ok.certify_and_act(VectorXd::Zero(3)), ContractError);
  const CertifiedController wrong(f, constant_map(VectorXd::Zero(2)), oracle_dual_map(*f), 1.0);
  EXPECT_THROW(wrong.certify_and_act(VectorXd::Zero(2)), ContractError);
}

// ---------------------------------------------------------------------------
// Backup failures

TEST(Backup, RaiseAndHold) {
  const auto f = icc();
  VectorXd P = 0.5 * (f->box.lower + f->box.upper);
  P.segment(f->layout.prev_offset(), 3) << 0.9, 2.0, -3.5;  // |u_prev| > u_bar + du_bar: infeasible
  const PolicyMap zp = constant_map(VectorXd::Zero(9)), zd = constant_map(VectorXd::Zero(36));
  const CertifiedController raise(f, zp, zd, 1.0);
  try {
    raise.certify_and_act(P);
    FAIL() << "expected BackupFailure";
  } catch (const BackupFailure& e) {
    EXPECT_EQ(e.status(), SolveStatus::infeasible);
  }
  BackupStrategy hold;
  hold.on_failure = BackupStrategy::OnFailure::hold;
  const CertifiedController holder(f, zp, zd, 1.0, 1e-6, hold);
  const StepRecord r = holder.certify_and_act(P, true);
  EXPECT_TRUE(r.backup_failed);
  EXPECT_TRUE(r.fallback);
  EXPECT_FALSE(r.in_box);
  EXPECT_TRUE(r.u.isApprox((VectorXd(3) << 0.225, 0.5, -0.875).finished(), 0.0));
  ASSERT_TRUE(r.audit.has_value());
  EXPECT_FALSE(r.audit->solved);
}

TEST(Backup, HoldWithoutPreviousInputIsZero) {
  const auto f = bench();
  BackupStrategy hold;
  hold.on_failure = BackupStrategy::OnFailure::hold;
  const CertifiedController ctrl(f, oracle_primal_map(*f), oracle_dual_map(*f), 1.0, 1e-6, hold);
  // Far outside the state constraints: the exact MPC has no feasible input.
  const StepRecord r = ctrl.certify_and_act((VectorXd(2) << 4.99, 4.99).finished());
  EXPECT_TRUE(r.backup_failed);
  EXPECT_TRUE(r.u.isZero(0.0));
}

// ---------------------------------------------------------------------------
// Closed loop

TEST(Simulation, ForcedFallbackReproducesExactMpc) {
  const auto f = icc();
  const Scenario s = random_scenario(*f, 60, 7, 20);
  // Zero policies have a strictly positive gap away from the origin.
  const CertifiedController ctrl(f, constant_map(VectorXd::Zero(9)), constant_map(VectorXd::Zero(36)), 0.0);
  const auto recs = simulate(ctrl, s);
  ASSERT_EQ(recs.size(), 60u);
  // Reference loop built from the exact solver alone.
  VectorXd x = s.x0, u_prev = VectorXd::Zero(3);
  for (int t = 0; t < 60; ++t) {
    const auto& r = recs[static_cast<std::size_t>(t)];
    EXPECT_TRUE(r.fallback);
    EXPECT_EQ(r.solver_calls, 1);
    const VectorXd P = scenario_parameter(*f, s, t, x, u_prev);
    EXPECT_TRUE(r.P.isApprox(P, 0.0));
    const VectorXd u = backup_action(*f, P);
    EXPECT_TRUE(r.u.isApprox(u, 0.0));
    x = step_dynamics(f->system, x, u, s.q[static_cast<std::size_t>(t)], s.delta[static_cast<std::size_t>(t)]);
    u_prev = u;
  }
}

TEST(Simulation, EquilibriumStaysAtRestAndCertifies) {
  const auto f = icc();
  const CertifiedController ctrl(f, oracle_primal_map(*f), oracle_dual_map(*f), 1e-6);
  const Scenario s = equilibrium_scenario(*f, 30);
  const auto recs = simulate(ctrl, s, true);
  for (const auto& r : recs) {
    EXPECT_TRUE(r.certified);
    EXPECT_LE(r.u.cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE(r.x.cwiseAbs().maxCoeff(), 1e-8);
  }
  const SimulationSummary sum = summarize_run(*f, s, recs);
  EXPECT_EQ(sum.steps, 30);
  EXPECT_EQ(sum.certified, 30);
  EXPECT_EQ(sum.solver_calls, 0);
  EXPECT_EQ(sum.fallback_rate, 0.0);
}

TEST(Simulation, PreviousInputChainsThroughParameters) {
  const auto f = icc();
  const PolicyMap p_exact = oracle_primal_map(*f);
  const PolicyMap p = [&](const VectorXd& P) { return VectorXd(0.97 * p_exact(P)); };
  const CertifiedController ctrl(f, p, oracle_dual_map(*f), 0.05);
  const Scenario s = random_scenario(*f, 80, 3, 25);
  const auto recs = simulate(ctrl, s, true);
  const int off = f->layout.prev_offset();
  EXPECT_TRUE(recs[0].P.segment(off, 3).isZero(0.0));
  for (std::size_t t = 1; t < recs.size(); ++t) {
    EXPECT_EQ(recs[t].P.segment(off, 3), recs[t - 1].u);
    EXPECT_EQ(recs[t].t, static_cast<int>(t));
  }
  const SimulationSummary sum = summarize_run(*f, s, recs);
  EXPECT_EQ(sum.certified + sum.fallbacks, sum.steps);
  EXPECT_EQ(sum.solver_calls_on_certified, 0);
  EXPECT_EQ(sum.violations.input + sum.violations.rate, 0);
  if (sum.certified > 0) {
    EXPECT_LE(sum.max_certified_suboptimality, sum.max_certified_gap + 1e-9);
  }
}

TEST(Simulation, ScenarioLookaheadHoldsLastValue) {
  const auto f = icc();
  Scenario s = random_scenario(*f, 5, 1, 2);
  const VectorXd P = scenario_parameter(*f, s, 4, s.x0, VectorXd::Zero(3));
  const auto& L = f->layout;
  for (int k = 0; k < L.horizon; ++k) {
    EXPECT_EQ(P.segment(L.ref_offset() + 3 * k, 3), s.yref[4]);
    EXPECT_EQ(P[L.preview_offset() + k], s.delta[4]);
  }
  s.steps = 10;
  EXPECT_THROW(validate_scenario(*f, s), ConfigError);
}

TEST(Simulation, RandomScenarioIsReproducible) {
  const auto f = icc();
  const Scenario a = random_scenario(*f, 100, 5), b = random_scenario(*f, 100, 5);
  EXPECT_EQ(a.x0, b.x0);
  for (int t = 0; t < 100; ++t) {
    EXPECT_EQ(a.q[t], b.q[t]);
    EXPECT_TRUE(f->system.q_lower()[0] <= a.q[t][0] && a.q[t][0] <= f->system.q_upper()[0]);
  }
  EXPECT_EQ(a.yref[0], a.yref[49]);
  EXPECT_NE(a.yref[0], a.yref[50]);
  EXPECT_THROW(random_scenario(*f, 0, 1), ConfigError);
}

TEST(Simulation, AbortsOnStateBound) {
  const auto f = bench();
  const CertifiedController ctrl(f, oracle_primal_map(*f), oracle_dual_map(*f), 1.0);
  Scenario s = equilibrium_scenario(*f, 10);
  s.x0 << 0.5, 0.0;
  s.state_bound = 0.1;
  const auto recs = simulate(ctrl, s);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_TRUE(recs[0].aborted);
  EXPECT_FALSE(recs[0].diagnostic.empty());
  EXPECT_TRUE(summarize_run(*f, s, recs).aborted);
}

TEST(Simulation, StepCsvHasOneRowPerStep) {
  const auto f = bench();
  const CertifiedController ctrl(f, oracle_primal_map(*f), oracle_dual_map(*f), 1.0);
  Scenario s = equilibrium_scenario(*f, 7);
  s.x0 << 1.0, 0.0;
  std::ostringstream os;
  write_step_csv(os, simulate(ctrl, s, true));
  const std::string out = os.str();
  EXPECT_EQ(std::count(out.begin(), out.end(), '\n'), 8);
  EXPECT_EQ(out.rfind("t,in_box,", 0), 0u);
}

// ---------------------------------------------------------------------------
// Timing

TEST(Timing, ArgumentChecksAndShape) {
  const auto f = bench();
  const CertifiedController ctrl(f, oracle_primal_map(*f), oracle_dual_map(*f), 1.0);
  EXPECT_THROW(benchmark_timing(ctrl, {}), ContractError);
  const auto samples = sample_parameters(f->box, 3, 1);
  EXPECT_THROW(benchmark_timing(ctrl, samples, 99), ConfigError);
  EXPECT_THROW(benchmark_timing(ctrl, samples, 100, -1), ConfigError);
  const TimingReport t = benchmark_timing(ctrl, samples, 100, 1);
  EXPECT_EQ(t.samples, 3u);
  EXPECT_EQ(t.policy.count, 3u);
  EXPECT_GT(t.policy.mean, 0.0);
  EXPECT_GT(t.solver.mean, 0.0);
  EXPECT_LE(t.policy.min, t.policy.mean);
  EXPECT_LE(t.policy.mean, t.policy.max);
  EXPECT_NEAR(t.policy_end_to_end.mean, t.policy.mean + t.condense.mean, 1e-9 * t.policy_end_to_end.mean + 1e-12);
  EXPECT_DOUBLE_EQ(t.speedup, t.solver.mean / t.policy.mean);
}
