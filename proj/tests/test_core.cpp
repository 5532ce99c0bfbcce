#include <certmpc/common.hpp>
#include <certmpc/lpv_mpc.hpp>

#include <gtest/gtest.h>

#include <atomic>
#include <set>
#include <sstream>

using namespace certmpc;

TEST(Common, Fnv1aKnownVectors) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hex64(0xaf63dc4c8601ec8cULL), "af63dc4c8601ec8c");
}

TEST(Common, DeriveSeedSeparatesStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t base : {0ULL, 1ULL, 42ULL})
    for (std::uint64_t s = 0; s < 50; ++s) seen.insert(derive_seed(base, s));
  EXPECT_EQ(seen.size(), 150u);
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
}

TEST(Common, ParallelForCoversEveryIndexOnce) {
  for (int jobs : {1, 2, 5}) {
    std::vector<std::atomic<int>> hits(37);
    parallel_for(hits.size(), jobs, [&](std::size_t i) { hits[i]++; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
}

TEST(Common, ParallelForPropagatesExceptions) {
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw DomainError("boom"); }), DomainError);
}

TEST(Common, SummaryOrdering) {
  std::mt19937_64 rng(3);
  std::lognormal_distribution<double> d(0.0, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + trial % 17);
    for (auto& x : v) x = d(rng);
    const Summary s = summarize(v);
    EXPECT_LE(s.min, s.median);
    EXPECT_LE(s.median, s.max);
    EXPECT_LE(s.min, s.mean);
    EXPECT_LE(s.mean, s.max);
    EXPECT_GE(s.stddev, 0.0);
  }
  const Summary s = summarize({1.0, 2.0, 3.0, 10.0});
  EXPECT_DOUBLE_EQ(s.mean, 4.0);
  EXPECT_DOUBLE_EQ(s.median, 2.5);
  EXPECT_EQ(summarize({}).count, 0u);
}

// ---------------------------------------------------------------------------
// Systems

TEST(LpvMpc, BenchmarkMatrices) {
  const ProblemFamily f = build_benchmark_lti();
  EXPECT_EQ(f.system.nx(), 2);
  EXPECT_EQ(f.system.nu(), 1);
  EXPECT_EQ(f.spec.horizon, 3);
  const SystemMatrices m = eval_system(f.system, VectorXd(0));
  MatrixXd A(2, 2);
  A << 1.0, 0.1, 0.0, 1.0;
  MatrixXd B(2, 1);
  B << 0.0, 0.1;
  EXPECT_TRUE(m.A.isApprox(A, 0.0));
  EXPECT_TRUE(m.B.isApprox(B, 0.0));
}

TEST(LpvMpc, BenchmarkConstraintRowCount) {
  const ProblemFamily f = build_benchmark_lti();
  const int T = 3, rows_x = 4, rows_u = 2, rows_f = 4;
  EXPECT_EQ(f.constraint_dim(), T * (rows_x + rows_u) + rows_f);
  BenchmarkConfig c;
  c.terminal_set = false;
  EXPECT_EQ(build_benchmark_lti(c).constraint_dim(), T * (rows_x + rows_u));
  c.horizon = 1;
  EXPECT_EQ(build_benchmark_lti(c).decision_dim(), 1);
}

TEST(LpvMpc, StepDynamics) {
  const ProblemFamily f = build_benchmark_lti();
  EXPECT_TRUE(step_dynamics(f.system, VectorXd::Zero(2), VectorXd::Zero(1), VectorXd(0)).isZero(0.0));
  const VectorXd x = step_dynamics(f.system, (VectorXd(2) << 1.0, 0.0).finished(), VectorXd::Zero(1), VectorXd(0));
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(x[1], 0.0);
  EXPECT_THROW(step_dynamics(f.system, VectorXd::Zero(3), VectorXd::Zero(1), VectorXd(0)), ContractError);
}

TEST(LpvMpc, IccSpeedEntersThroughInverseSpeed) {
  // Apart from the -v coupling in the lateral row, every speed dependence is
  // a 1/v term: v * (A(v) - I) / Ts, less the coupling, is affine in v with
  // zero slope on all entries except (0,1), which has slope -1.
  const ICCConfig cfg;
  const double Ts = cfg.sample_time;
  const auto scaled = [&](double v) {
    MatrixXd M = v * (icc_matrices(cfg, v).A - MatrixXd::Identity(4, 4)) / Ts;
    M(0, 1) += v * v;
    // Constant (speed-free) entries become proportional to v; remove them.
    const MatrixXd c = (icc_matrices(cfg, 1e9).A - MatrixXd::Identity(4, 4)) / Ts;
    MatrixXd cc = c;
    cc(0, 1) += 1e9;
    return MatrixXd(M - v * cc);
  };
  const MatrixXd a = scaled(10.0), b = scaled(30.0);
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-6 * (1.0 + a.cwiseAbs().maxCoeff()));
  EXPECT_TRUE(icc_matrices(cfg, 10.0).B.isApprox(icc_matrices(cfg, 30.0).B, 0.0));
  EXPECT_TRUE(icc_matrices(cfg, 10.0).E.isApprox(icc_matrices(cfg, 30.0).E, 0.0));
  EXPECT_DOUBLE_EQ(icc_matrices(cfg, 17.0).A(2, 3), Ts);
}

TEST(LpvMpc, IccDependsOnSpeed) {
  const ProblemFamily f = build_icc_surrogate();
  const SystemMatrices lo = eval_system(f.system, VectorXd::Constant(1, 10.0));
  const SystemMatrices hi = eval_system(f.system, VectorXd::Constant(1, 30.0));
  EXPECT_GT((lo.A - hi.A).norm(), 1e-6);
  const SystemMatrices mid = eval_system(f.system, VectorXd::Constant(1, 20.0));
  EXPECT_TRUE(mid.A.allFinite());
  EXPECT_TRUE(std::isfinite(mid.A.eigenvalues().cwiseAbs().maxCoeff()));
}

TEST(LpvMpc, SchedulingBoxEdgesAcceptedOutsideRejected) {
  const ProblemFamily f = build_icc_surrogate();
  EXPECT_NO_THROW(eval_system(f.system, VectorXd::Constant(1, 10.0)));
  EXPECT_NO_THROW(eval_system(f.system, VectorXd::Constant(1, 30.0)));
  try {
    eval_system(f.system, VectorXd::Constant(1, 31.0));
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("q[0]"), std::string::npos);
  }
}

TEST(LpvMpc, IccDimensions) {
  const ProblemFamily f = build_icc_surrogate();
  EXPECT_EQ(f.parameter_dim(), 20);
  EXPECT_EQ(f.decision_dim(), 9);
  EXPECT_EQ(f.constraint_dim(), 3 * (6 + 6));
}

TEST(LpvMpc, IccRejectsZeroSpeed) {
  ICCConfig c;
  c.speed_min = 0.0;
  EXPECT_THROW(build_icc_surrogate(c), ConfigError);
}

TEST(LpvMpc, SpecValidation) {
  ProblemFamily f = build_benchmark_lti();
  MPCSpec s = f.spec;
  s.R = MatrixXd::Zero(1, 1);
  EXPECT_THROW(validate_spec(s, f.system), ConfigError);
  s = f.spec;
  s.Q(0, 1) = 0.5;
  EXPECT_THROW(validate_spec(s, f.system), ConfigError);
  s = f.spec;
  s.hu[0] = -1.0;  // polytope excludes the origin
  EXPECT_THROW(validate_spec(s, f.system), ConfigError);
  s = f.spec;
  s.Hx = MatrixXd::Ones(4, 3);
  EXPECT_THROW(validate_spec(s, f.system), ConfigError);
}

// ---------------------------------------------------------------------------
// Parameters

TEST(Parameters, FlattenRoundTrip) {
  const ProblemFamily f = build_icc_surrogate();
  for (const VectorXd& P : sample_parameters(f.box, 20, 5)) {
    const ParameterVector pv = unflatten(f.layout, P);
    EXPECT_TRUE(flatten(f.layout, pv).isApprox(P, 0.0));
    EXPECT_EQ(pv.u_prev.size(), 3);
    EXPECT_EQ(pv.y_ref_seq.rows(), 3);
  }
  EXPECT_EQ(f.layout.coordinate_names().size(), 20u);
}

TEST(Parameters, SamplingIsReproducibleAndInsideBox) {
  const ProblemFamily f = build_icc_surrogate();
  const auto a = sample_parameters(f.box, 200, 9);
  const auto b = sample_parameters(f.box, 200, 9);
  const auto c = sample_parameters(f.box, 200, 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a[i].isApprox(b[i], 0.0));
    EXPECT_TRUE(f.box.contains(a[i]));
  }
  EXPECT_FALSE(a[0].isApprox(c[0], 0.0));
}

TEST(Parameters, UniformMeanOnUnitBox) {
  const ParameterBox box(VectorXd::Zero(3), VectorXd::Ones(3));
  VectorXd mean = VectorXd::Zero(3);
  for (const auto& P : sample_parameters(box, 10000, 1)) mean += P;
  mean /= 10000.0;
  for (int i = 0; i < 3; ++i) {
    EXPECT_GE(mean[i], 0.45);
    EXPECT_LE(mean[i], 0.55);
  }
}

TEST(Parameters, DegenerateBoxIsPointMass) {
  const VectorXd p = (VectorXd(2) << 0.3, -1.25).finished();
  for (const auto& P : sample_parameters(ParameterBox(p, p), 50, 2)) EXPECT_TRUE(P.isApprox(p, 0.0));
}

TEST(Parameters, BoxValidation) {
  EXPECT_THROW(ParameterBox(VectorXd::Ones(2), VectorXd::Zero(2)), ConfigError);
  EXPECT_THROW(ParameterBox(VectorXd::Zero(2), VectorXd::Constant(2, INFINITY)), ConfigError);
  EXPECT_THROW(sample_parameters(ParameterBox(VectorXd::Zero(1), VectorXd::Ones(1)), 0, 1), ContractError);
}

TEST(Parameters, CsvHeaderAndRows) {
  const ProblemFamily f = build_benchmark_lti();
  std::ostringstream os;
  write_parameter_csv(os, f.layout, {(VectorXd(2) << 0.5, -0.25).finished()});
  EXPECT_EQ(os.str(), "x0_0,x0_1\n0.5,-0.25\n");
}
