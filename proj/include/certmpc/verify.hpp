#pragma once

// Randomized verification of learned policies. A primal policy passes when
// every one of N_p fresh samples gives a feasible input sequence within
// gamma_p of the optimal cost; the dual policy mirrors this with
// nonnegative multipliers whose dual value is within gamma_d of J*. N is the
// smallest count for which a pass has probability at most beta when the
// violation probability exceeds epsilon.

#include <certmpc/common.hpp>
#include <certmpc/lpv_mpc.hpp>
#include <certmpc/policy.hpp>
#include <certmpc/qp_core.hpp>
#include <certmpc/qp_solver.hpp>

#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace certmpc {

/// Smallest N with (1 - eps)^N <= beta, i.e. ceil(ln(1/beta) / ln(1/(1-eps))).
/// The denominator uses log1p so small eps keeps full precision.
inline std::size_t required_sample_size(double epsilon, double beta) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw DomainError("required_sample_size: epsilon must lie in (0, 1)");
  if (!(beta > 0.0 && beta < 1.0)) throw DomainError("required_sample_size: beta must lie in (0, 1)");
  const double ratio = -std::log(beta) / -std::log1p(-epsilon);
  // Exact integer ratios (eps = beta = 0.5) can land one ulp above the
  // integer; do not round those up.
  const double nearest = std::round(ratio);
  if (std::abs(ratio - nearest) <= 1e-12 * nearest) return static_cast<std::size_t>(std::max(1.0, nearest));
  return static_cast<std::size_t>(std::ceil(ratio));
}

struct VerificationConfig {
  double epsilon_p = 0.005, epsilon_d = 0.005;
  double beta_p = 1e-7, beta_d = 1e-7;
  double gamma_p = 0.5, gamma_d = 0.5;
  /// Totals; 0 means "sum of the splits".
  double epsilon = 0.0, beta = 0.0, gamma = 0.0;
  double feasibility_tolerance = 1e-6;
  std::uint64_t seed = 0;
  int jobs = 1;
  SolverOptions oracle;
  /// Draw verification samples from this box instead of the family's. The
  /// guarantee then refers to the override distribution.
  std::optional<ParameterBox> sampling_box;

  static VerificationConfig equal_splits(double eps, double beta, double gamma) {
    VerificationConfig c;
    c.epsilon = eps;
    c.beta = beta;
    c.gamma = gamma;
    c.epsilon_p = c.epsilon_d = eps / 2;
    c.beta_p = c.beta_d = beta / 2;
    c.gamma_p = c.gamma_d = gamma / 2;
    return c;
  }

  double total_epsilon() const { return epsilon > 0.0 ? epsilon : epsilon_p + epsilon_d; }
  double total_beta() const { return beta > 0.0 ? beta : beta_p + beta_d; }
  double total_gamma() const { return gamma > 0.0 ? gamma : gamma_p + gamma_d; }

  void validate() const {
    for (double e : {epsilon_p, epsilon_d}) {
      if (!(e > 0.0 && e < 1.0)) throw ConfigError("verification: epsilon splits must lie in (0, 1)");
    }
    for (double b : {beta_p, beta_d}) {
      if (!(b > 0.0 && b < 1.0)) throw ConfigError("verification: beta splits must lie in (0, 1)");
    }
    for (double g : {gamma_p, gamma_d}) {
      if (!(g > 0.0)) throw ConfigError("verification: gamma splits must be positive");
    }
    auto sums = [](double total, double a, double b) {
      return total == 0.0 || std::abs(a + b - total) <= 1e-12 * std::max(1.0, std::abs(total));
    };
    if (!sums(epsilon, epsilon_p, epsilon_d)) throw ConfigError("verification: epsilon_p + epsilon_d != epsilon");
    if (!sums(beta, beta_p, beta_d)) throw ConfigError("verification: beta_p + beta_d != beta");
    if (!sums(gamma, gamma_p, gamma_d)) throw ConfigError("verification: gamma_p + gamma_d != gamma");
    if (!(total_epsilon() < 1.0)) throw ConfigError("verification: total epsilon must be below 1");
    if (!(total_beta() < 1.0)) throw ConfigError("verification: total beta must be below 1");
    if (!(feasibility_tolerance >= 0.0)) throw ConfigError("verification: feasibility tolerance must be >= 0");
  }
};

/// max( max_j (H_j U - h_j), p(U) - J* - gamma_p ). Nonpositive exactly when
/// U is feasible and gamma_p-suboptimal.
inline double aux_primal_violation(const DenseQP& qp, const VectorXd& U, double J_star, double gamma_p) {
  require_dim(U.size(), qp.n(), "aux_primal_violation: U");
  double v = primal_objective(qp, U) - J_star - gamma_p;
  if (qp.m() > 0) v = std::max(v, (qp.H * U - qp.h).maxCoeff());
  return v;
}

/// max( max_j (-lambda_j), J* - d(lambda) - gamma_d ), the dual mirror.
inline double aux_dual_violation(const DualQP& dq, const VectorXd& lambda, double J_star, double gamma_d) {
  double v = J_star - dual_objective(dq, lambda) - gamma_d;
  if (lambda.size() > 0) v = std::max(v, -lambda.minCoeff());
  return v;
}

/// One verification sample.
struct SampleCheck {
  std::size_t index = 0;
  double J_star = 0.0;
  double objective = 0.0;   // p(U~) for primal, d(lambda~) for dual
  double violation = 0.0;   // max(HU - h) for primal, max(-lambda) for dual
  bool feasible = true;
  bool within_gamma = true;

  bool ok() const { return feasible && within_gamma; }
};

struct FragmentReport {
  std::string name;  // "primal" or "dual"
  double epsilon = 0.0, beta = 0.0, gamma = 0.0;
  std::size_t N = 0;
  std::uint64_t seed = 0;
  bool passed = false;
  std::size_t infeasible = 0;
  std::size_t suboptimal = 0;
  /// Draws where the oracle failed; each was replaced by a fresh draw.
  std::size_t oracle_failures = 0;
  std::vector<std::size_t> violators;
  std::vector<SampleCheck> samples;
  std::string warning;
};

namespace detail {

struct OracleSample {
  VectorXd P;
  DenseQP qp;
  SolveResult sol;
};

inline std::vector<OracleSample> oracle_samples(const ProblemFamily& fam, const ParameterBox& box, std::size_t N,
                                                std::uint64_t seed, const SolverOptions& opts, int jobs,
                                                std::size_t* failures) {
  require_dim(box.dim(), fam.parameter_dim(), "verification sampling box");
  const std::function<std::optional<OracleSample>(const VectorXd&)> label =
      [&](const VectorXd& P) -> std::optional<OracleSample> {
    OracleSample s{P, condense(fam, P), {}};
    s.sol = solve(s.qp, opts);
    if (!s.sol.optimal()) return std::nullopt;
    return s;
  };
  return draw_solved<OracleSample>(box, N, seed, jobs, label, failures, "verification sampling");
}

inline const ParameterBox& sampling_box(const ProblemFamily& fam, const VerificationConfig& cfg, FragmentReport& rep) {
  if (!cfg.sampling_box) return fam.box;
  rep.warning = "samples drawn from an override box; the guarantee holds for that distribution, not the family's";
  return *cfg.sampling_box;
}

inline void finish_fragment(FragmentReport& rep) {
  rep.passed = true;
  for (const auto& s : rep.samples) {
    if (!s.feasible) ++rep.infeasible;
    if (!s.within_gamma) ++rep.suboptimal;
    if (!s.ok()) {
      rep.violators.push_back(s.index);
      rep.passed = false;
    }
  }
}

}  // namespace detail

/// Checks the primal conditions on N_p fresh samples drawn with seed
/// derive_seed(cfg.seed, 1).
inline FragmentReport verify_primal(const PolicyMap& policy, const ProblemFamily& fam, const VerificationConfig& cfg) {
  cfg.validate();
  FragmentReport rep;
  rep.name = "primal";
  rep.epsilon = cfg.epsilon_p;
  rep.beta = cfg.beta_p;
  rep.gamma = cfg.gamma_p;
  rep.N = required_sample_size(cfg.epsilon_p, cfg.beta_p);
  rep.seed = derive_seed(cfg.seed, 1);
  const ParameterBox& box = detail::sampling_box(fam, cfg, rep);
  const auto draws = detail::oracle_samples(fam, box, rep.N, rep.seed, cfg.oracle, cfg.jobs, &rep.oracle_failures);
  rep.samples.resize(rep.N);
  parallel_for(rep.N, cfg.jobs, [&](std::size_t i) {
    const auto& d = draws[i];
    const VectorXd U = policy(d.P);
    require_dim(U.size(), d.qp.n(), "verify_primal: policy output");
    SampleCheck& s = rep.samples[i];
    s.index = i;
    s.J_star = d.sol.J_star;
    s.objective = primal_objective(d.qp, U);
    const FeasibilityCheck fc = primal_feasible(d.qp, U, cfg.feasibility_tolerance);
    s.violation = fc.max_violation;
    s.feasible = fc.feasible && U.allFinite();
    s.within_gamma = s.objective - s.J_star <= cfg.gamma_p;
  });
  detail::finish_fragment(rep);
  return rep;
}

/// Checks the dual conditions on N_d fresh samples drawn with seed
/// derive_seed(cfg.seed, 2).
inline FragmentReport verify_dual(const PolicyMap& policy, const ProblemFamily& fam, const VerificationConfig& cfg) {
  cfg.validate();
  FragmentReport rep;
  rep.name = "dual";
  rep.epsilon = cfg.epsilon_d;
  rep.beta = cfg.beta_d;
  rep.gamma = cfg.gamma_d;
  rep.N = required_sample_size(cfg.epsilon_d, cfg.beta_d);
  rep.seed = derive_seed(cfg.seed, 2);
  const ParameterBox& box = detail::sampling_box(fam, cfg, rep);
  const auto draws = detail::oracle_samples(fam, box, rep.N, rep.seed, cfg.oracle, cfg.jobs, &rep.oracle_failures);
  rep.samples.resize(rep.N);
  parallel_for(rep.N, cfg.jobs, [&](std::size_t i) {
    const auto& d = draws[i];
    const VectorXd lam = policy(d.P);
    require_dim(lam.size(), d.qp.m(), "verify_dual: policy output");
    const auto llt = factor_hessian(d.qp.Q);
    SampleCheck& s = rep.samples[i];
    s.index = i;
    s.J_star = d.sol.J_star;
    s.objective = dual_objective(d.qp, llt, lam);
    s.violation = lam.size() ? -lam.minCoeff() : 0.0;
    s.feasible = dual_feasible(lam, cfg.feasibility_tolerance) && lam.allFinite();
    s.within_gamma = s.J_star - s.objective <= cfg.gamma_d;
  });
  detail::finish_fragment(rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Empirical statistics on a holdout set

struct EmpiricalSample {
  double J_star = 0.0, p = 0.0, d = 0.0;
  bool primal_feasible = true, dual_feasible = true;

  double alpha_p() const { return p - J_star; }
  double alpha_d() const { return J_star - d; }
  double alpha() const { return p - d; }
};

struct EmpiricalStats {
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double gamma_p = 0.0, gamma_d = 0.0, gamma = 0.0;
  Summary alpha_p, alpha_d, alpha;
  double eps_hat_p = 0.0;  // U~ infeasible or alpha_p > gamma_p
  double eps_hat_d = 0.0;  // lambda~ infeasible or alpha_d > gamma_d
  double eps_hat = 0.0;    // either infeasible or alpha > gamma
  std::size_t oracle_failures = 0;
  std::vector<EmpiricalSample> samples;
};

/// alpha statistics cover all n samples; the epsilon-hat rates count the
/// events above.
inline EmpiricalStats empirical_stats(const PolicyMap& primal, const PolicyMap& dual, const ProblemFamily& fam,
                                      std::size_t n, double gamma_p, double gamma_d, double gamma, std::uint64_t seed,
                                      double feas_tol = 1e-6, int jobs = 1, const SolverOptions& oracle = {}) {
  if (n < 1) throw ContractError("empirical_stats: n must be at least 1");
  EmpiricalStats st;
  st.n = n;
  st.seed = seed;
  st.gamma_p = gamma_p;
  st.gamma_d = gamma_d;
  st.gamma = gamma;
  const auto draws = detail::oracle_samples(fam, fam.box, n, seed, oracle, jobs, &st.oracle_failures);
  st.samples.resize(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    const auto& dr = draws[i];
    const VectorXd U = primal(dr.P);
    const VectorXd lam = dual(dr.P);
    require_dim(U.size(), dr.qp.n(), "empirical_stats: primal output");
    require_dim(lam.size(), dr.qp.m(), "empirical_stats: dual output");
    const auto llt = factor_hessian(dr.qp.Q);
    EmpiricalSample& s = st.samples[i];
    s.J_star = dr.sol.J_star;
    s.p = primal_objective(dr.qp, U);
    s.d = dual_objective(dr.qp, llt, lam);
    s.primal_feasible = primal_feasible(dr.qp, U, feas_tol).feasible && U.allFinite();
    s.dual_feasible = dual_feasible(lam, feas_tol) && lam.allFinite();
  });
  std::vector<double> ap, ad, a;
  ap.reserve(n);
  ad.reserve(n);
  a.reserve(n);
  std::size_t vp = 0, vd = 0, v = 0;
  for (const auto& s : st.samples) {
    ap.push_back(s.alpha_p());
    ad.push_back(s.alpha_d());
    a.push_back(s.alpha());
    if (!s.primal_feasible || s.alpha_p() > gamma_p) ++vp;
    if (!s.dual_feasible || s.alpha_d() > gamma_d) ++vd;
    if (!s.primal_feasible || !s.dual_feasible || s.alpha() > gamma) ++v;
  }
  st.alpha_p = summarize(std::move(ap));
  st.alpha_d = summarize(std::move(ad));
  st.alpha = summarize(std::move(a));
  const double dn = static_cast<double>(n);
  st.eps_hat_p = static_cast<double>(vp) / dn;
  st.eps_hat_d = static_cast<double>(vd) / dn;
  st.eps_hat = static_cast<double>(v) / dn;
  return st;
}

// ---------------------------------------------------------------------------
// Combined report

struct VerificationReport {
  VerificationConfig config;
  FragmentReport primal;
  FragmentReport dual;
  bool passed = false;
  /// Training attempts behind each policy; more than one widens the
  /// confidence bound by the union over attempts.
  int primal_attempts = 1;
  int dual_attempts = 1;
  std::string primal_fingerprint, dual_fingerprint;
  std::string guarantee;  // empty unless passed
  std::vector<std::string> failed_fragments;
  std::optional<EmpiricalStats> stats;

  double effective_beta() const {
    return primal_attempts * config.beta_p + dual_attempts * config.beta_d;
  }
};

inline std::string guarantee_statement(double epsilon, double beta, double gamma) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "With confidence at least 1 - %.6g, a parameter drawn from the sampling distribution yields a "
                "feasible primal policy output, a nonnegative dual policy output and a duality gap of at most %.6g "
                "with probability at least 1 - %.6g.",
                beta, gamma, epsilon);
  return buf;
}

inline void combine(VerificationReport& rep) {
  rep.failed_fragments.clear();
  if (!rep.primal.passed) rep.failed_fragments.push_back("primal");
  if (!rep.dual.passed) rep.failed_fragments.push_back("dual");
  rep.passed = rep.failed_fragments.empty();
  rep.guarantee = rep.passed ? guarantee_statement(rep.config.total_epsilon(), rep.effective_beta(),
                                                   rep.config.total_gamma())
                             : std::string();
}

inline VerificationReport run_verification(const PolicyMap& primal, const PolicyMap& dual, const ProblemFamily& fam,
                                           const VerificationConfig& cfg) {
  cfg.validate();
  VerificationReport rep;
  rep.config = cfg;
  rep.primal = verify_primal(primal, fam, cfg);
  rep.dual = verify_dual(dual, fam, cfg);
  combine(rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Retraining loop: a failing policy is retrained with doubled hidden widths
// and checked again on fresh samples, up to max_attempts trainings each.

struct RetrainOutcome {
  Policy primal;
  Policy dual;
  VerificationReport report;
  std::vector<std::string> log;
};

inline std::vector<int> scale_hidden(std::vector<int> widths, int factor) {
  for (std::size_t i = 1; i + 1 < widths.size(); ++i) widths[i] *= factor;
  return widths;
}

inline RetrainOutcome train_and_verify(const Dataset& data, const ProblemFamily& fam, const std::vector<int>& primal_widths,
                                       const std::vector<int>& dual_widths, const TrainConfig& train_cfg,
                                       const VerificationConfig& ver_cfg, int max_attempts = 5) {
  if (max_attempts < 1) throw ConfigError("train_and_verify: max_attempts must be at least 1");
  ver_cfg.validate();
  RetrainOutcome out;
  out.report.config = ver_cfg;
  auto attempt_cfgs = [&](int k) {
    TrainConfig tc = train_cfg;
    tc.seed = k == 0 ? train_cfg.seed : derive_seed(train_cfg.seed, static_cast<std::uint64_t>(k));
    VerificationConfig vc = ver_cfg;
    vc.seed = k == 0 ? ver_cfg.seed : derive_seed(ver_cfg.seed, 100 + static_cast<std::uint64_t>(k));
    return std::pair{tc, vc};
  };
  for (int k = 0; k < max_attempts; ++k) {
    const auto [tc, vc] = attempt_cfgs(k);
    const std::vector<int> w = scale_hidden(primal_widths, 1 << k);
    out.primal = train(data, Target::primal, w, tc);
    out.report.primal = verify_primal(as_map(out.primal), fam, vc);
    out.report.primal_attempts = k + 1;
    std::ostringstream msg;
    msg << "primal attempt " << k + 1 << ": hidden width " << (w.size() > 2 ? w[1] : 0) << ", "
        << out.report.primal.violators.size() << " of " << out.report.primal.N << " samples violate";
    out.log.push_back(msg.str());
    if (out.report.primal.passed) break;
  }
  for (int k = 0; k < max_attempts; ++k) {
    const auto [tc, vc] = attempt_cfgs(k);
    const std::vector<int> w = scale_hidden(dual_widths, 1 << k);
    out.dual = train(data, Target::dual, w, tc);
    out.report.dual = verify_dual(as_map(out.dual), fam, vc);
    out.report.dual_attempts = k + 1;
    std::ostringstream msg;
    msg << "dual attempt " << k + 1 << ": hidden width " << (w.size() > 2 ? w[1] : 0) << ", "
        << out.report.dual.violators.size() << " of " << out.report.dual.N << " samples violate";
    out.log.push_back(msg.str());
    if (out.report.dual.passed) break;
  }
  out.report.primal_fingerprint = policy_fingerprint(out.primal);
  out.report.dual_fingerprint = policy_fingerprint(out.dual);
  combine(out.report);
  return out;
}

}  // namespace certmpc
