#pragma once

// Dense primal-dual interior-point solver (Mehrotra predictor-corrector) for
// the condensed QP. Returns the optimizer together with the multipliers, which
// serve as dual-policy labels and as verification ground truth.

#include <certmpc/common.hpp>
#include <certmpc/qp_core.hpp>

#include <limits>
#include <string>
#include <vector>

namespace certmpc {

enum class SolveStatus { optimal, max_iter, infeasible, numerical_failure };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::max_iter: return "max_iter";
    case SolveStatus::infeasible: return "infeasible";
    case SolveStatus::numerical_failure: return "numerical_failure";
  }
  return "unknown";
}

/// Infinity-norm KKT residuals.
struct KKTResiduals {
  double stationarity = 0.0;        // |Q U + c + H' lambda|
  double primal_feasibility = 0.0;  // max(0, H U - h)
  double dual_feasibility = 0.0;    // max(0, -lambda)
  double complementarity = 0.0;     // max |lambda_i (H U - h)_i|

  double max() const {
    return std::max(std::max(stationarity, primal_feasibility), std::max(dual_feasibility, complementarity));
  }
};

struct SolverOptions {
  double tolerance = 1e-8;
  int max_iterations = 100;
  /// Diagonal floor added to the reduced Newton matrix if its factorization
  /// fails.
  double regularization = 1e-12;
  /// Multiplier magnitude taken as evidence of primal infeasibility even
  /// without a clean Farkas certificate.
  double divergence_threshold = 1e12;
};

struct SolveResult {
  VectorXd U_star;
  VectorXd lambda_star;
  double J_star = 0.0;
  SolveStatus status = SolveStatus::numerical_failure;
  int iterations = 0;
  KKTResiduals kkt;

  bool optimal() const { return status == SolveStatus::optimal; }
};

/// Residuals recomputed from (U, lambda) alone.
inline KKTResiduals check_kkt(const DenseQP& qp, const VectorXd& U, const VectorXd& lambda) {
  require_dim(U.size(), qp.n(), "check_kkt: U");
  require_dim(lambda.size(), qp.m(), "check_kkt: lambda");
  KKTResiduals r;
  VectorXd grad = qp.Q * U + qp.c;
  if (qp.m() > 0) grad.noalias() += qp.H.transpose() * lambda;
  r.stationarity = grad.size() ? grad.cwiseAbs().maxCoeff() : 0.0;
  if (qp.m() > 0) {
    const VectorXd g = qp.H * U - qp.h;
    r.primal_feasibility = std::max(0.0, g.maxCoeff());
    r.dual_feasibility = std::max(0.0, -lambda.minCoeff());
    r.complementarity = lambda.cwiseProduct(g).cwiseAbs().maxCoeff();
  }
  return r;
}

inline KKTResiduals check_kkt(const DenseQP& qp, const SolveResult& res) {
  return check_kkt(qp, res.U_star, res.lambda_star);
}

namespace detail {

inline double max_step(const VectorXd& v, const VectorXd& dv) {
  double alpha = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (dv[i] < 0.0) alpha = std::min(alpha, -v[i] / dv[i]);
  }
  return alpha;
}

/// Equality-constrained re-solve on the active set guessed from an interior
/// iterate (lambda_i > s_i). Rows whose multiplier comes out negative are
/// dropped one at a time. Only used when the interior iteration stalls, which
/// happens on degenerate problems where strict complementarity fails.
inline bool polish_active_set(const DenseQP& qp, const VectorXd& lam, const VectorXd& s, double tol, VectorXd& U,
                              VectorXd& L) {
  const Eigen::Index n = qp.n(), m = qp.m();
  std::vector<Eigen::Index> act;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (lam[i] > s[i]) act.push_back(i);
  }
  for (Eigen::Index round = 0; round <= m; ++round) {
    const auto k = static_cast<Eigen::Index>(act.size());
    MatrixXd K = MatrixXd::Zero(n + k, n + k);
    VectorXd rhs(n + k);
    K.topLeftCorner(n, n) = qp.Q;
    rhs.head(n) = -qp.c;
    for (Eigen::Index j = 0; j < k; ++j) {
      K.block(n + j, 0, 1, n) = qp.H.row(act[static_cast<std::size_t>(j)]);
      K.block(0, n + j, n, 1) = qp.H.row(act[static_cast<std::size_t>(j)]).transpose();
      rhs[n + j] = qp.h[act[static_cast<std::size_t>(j)]];
    }
    // Degenerate active sets have dependent rows; take the minimum-norm solution.
    const VectorXd sol = K.completeOrthogonalDecomposition().solve(rhs);
    U = sol.head(n);
    L = VectorXd::Zero(m);
    std::size_t worst = 0;
    for (Eigen::Index j = 0; j < k; ++j) {
      L[act[static_cast<std::size_t>(j)]] = sol[n + j];
      if (sol[n + j] < sol[n + static_cast<Eigen::Index>(worst)]) worst = static_cast<std::size_t>(j);
    }
    if (k == 0 || sol.tail(k).minCoeff() >= -tol) {
      L = L.cwiseMax(0.0);
      return U.allFinite() && check_kkt(qp, U, L).max() <= tol;
    }
    act.erase(act.begin() + static_cast<std::ptrdiff_t>(worst));
  }
  return false;
}

}  // namespace detail

inline SolveResult solve(const DenseQP& qp, const SolverOptions& opts = {}) {
  if (!(opts.tolerance > 0.0)) throw ConfigError("SolverOptions: tolerance must be positive");
  check_qp_shapes(qp);
  const Eigen::Index n = qp.n(), m = qp.m();
  SolveResult res;

  Eigen::LLT<MatrixXd> qllt;
  try {
    qllt = factor_hessian(qp.Q);
  } catch (const NumericalError&) {
    res.U_star = VectorXd::Zero(n);
    res.lambda_star = VectorXd::Zero(m);
    res.status = SolveStatus::numerical_failure;
    return res;
  }
  VectorXd x = -qllt.solve(qp.c);

  if (m == 0) {
    res.U_star = x;
    res.lambda_star = VectorXd::Zero(0);
    res.J_star = primal_objective(qp, x);
    res.kkt = check_kkt(qp, res);
    res.status = res.kkt.max() <= opts.tolerance ? SolveStatus::optimal : SolveStatus::numerical_failure;
    return res;
  }

  VectorXd s = (qp.h - qp.H * x).cwiseMax(1.0);
  VectorXd lam = VectorXd::Ones(m);
  VectorXd rd(n), rp(m), D(m), rc(m), rhs(n), dx(n), dlam(m), ds(m);
  VectorXd dx_aff(n), dlam_aff(m), ds_aff(m);
  MatrixXd K(n, n), DH(m, n);
  Eigen::LLT<MatrixXd> kllt(n);

  // Diverging multipliers approach a Farkas certificate: H' lam ~ 0 with
  // h' lam < 0 proves H U <= h has no solution.
  const auto farkas = [&](const VectorXd& l, double rel) {
    const double hl = qp.h.dot(l);
    return hl < 0.0 && (qp.H.transpose() * l).cwiseAbs().maxCoeff() <= rel * std::abs(hl);
  };

  const auto finish = [&](SolveStatus st, int it) {
    res.U_star = x;
    res.lambda_star = lam;
    res.J_star = primal_objective(qp, x);
    res.iterations = it;
    res.kkt = check_kkt(qp, x, lam);
    res.status = st;
    return res;
  };

  // Best iterate so far, for the active-set polish when the iteration stalls.
  VectorXd best_lam = lam, best_s = s;
  double best = std::numeric_limits<double>::infinity();
  bool polished = false;
  const auto try_polish = [&]() {
    if (polished || !std::isfinite(best)) return false;
    polished = true;
    VectorXd U, L;
    if (!detail::polish_active_set(qp, best_lam, best_s, opts.tolerance, U, L)) return false;
    x = U;
    lam = L;
    return true;
  };
  const auto fail = [&](SolveStatus st, int it) {
    return finish(try_polish() ? SolveStatus::optimal : st, it);
  };

  for (int it = 0; it <= opts.max_iterations; ++it) {
    rd = qp.Q * x + qp.c;
    rd.noalias() += qp.H.transpose() * lam;
    rp = qp.H * x + s - qp.h;
    const double mu = s.dot(lam) / static_cast<double>(m);

    const KKTResiduals kkt = check_kkt(qp, x, lam);
    if (!std::isfinite(kkt.max()) || !std::isfinite(mu)) return fail(SolveStatus::numerical_failure, it);
    if (kkt.max() <= opts.tolerance) return finish(SolveStatus::optimal, it);
    if (kkt.max() < best) {
      best = kkt.max();
      best_lam = lam;
      best_s = s;
    } else if (best <= 1e-5 && kkt.max() > 1e3 * best && try_polish()) {
      // Residuals blowing up after near-convergence: ill-conditioned Newton
      // systems on a degenerate vertex.
      return finish(SolveStatus::optimal, it);
    }
    if (lam.maxCoeff() > opts.divergence_threshold || (lam.maxCoeff() > 1e6 && farkas(lam, 1e-6))) {
      return finish(SolveStatus::infeasible, it);
    }
    if (it == opts.max_iterations) break;

    D = lam.cwiseQuotient(s);
    DH = D.asDiagonal() * qp.H;
    K = qp.Q;
    K.noalias() += qp.H.transpose() * DH;
    kllt.compute(K);
    if (kllt.info() != Eigen::Success) {
      K.diagonal().array() += opts.regularization * (1.0 + K.diagonal().cwiseAbs().maxCoeff());
      kllt.compute(K);
      if (kllt.info() != Eigen::Success) return fail(SolveStatus::numerical_failure, it);
    }

    // Predictor (affine scaling): rc = s o lam, so rc / s = lam.
    rhs = -rd;
    rhs.noalias() -= qp.H.transpose() * (D.cwiseProduct(rp) - lam);
    dx_aff = kllt.solve(rhs);
    dlam_aff = D.cwiseProduct(qp.H * dx_aff + rp) - lam;
    ds_aff = -rp - qp.H * dx_aff;
    const double a_aff = std::min(detail::max_step(s, ds_aff), detail::max_step(lam, dlam_aff));
    const double mu_aff = (s + a_aff * ds_aff).dot(lam + a_aff * dlam_aff) / static_cast<double>(m);
    const double sigma = std::pow(std::max(0.0, mu_aff) / mu, 3);

    // Corrector with centering. A short predictor step means the affine
    // direction is unreliable; its second-order term is then dropped.
    rc = s.cwiseProduct(lam);
    if (a_aff >= 0.1) rc += ds_aff.cwiseProduct(dlam_aff);
    rc.array() -= sigma * mu;
    const VectorXd rc_s = rc.cwiseQuotient(s);
    rhs = -rd;
    rhs.noalias() -= qp.H.transpose() * (D.cwiseProduct(rp) - rc_s);
    dx = kllt.solve(rhs);
    dlam = D.cwiseProduct(qp.H * dx + rp) - rc_s;
    ds = -rp - qp.H * dx;

    const double a_max = std::min(detail::max_step(s, ds), detail::max_step(lam, dlam));
    double alpha = std::min(1.0, 0.995 * a_max);
    // Stay in the wide neighbourhood min(s o lam) >= 1e-3 mu so no single
    // pair collapses ahead of the others.
    for (int bt = 0; bt < 30; ++bt) {
      const VectorXd s_new = s + alpha * ds;
      const VectorXd l_new = lam + alpha * dlam;
      const VectorXd prod = s_new.cwiseProduct(l_new);
      if (prod.minCoeff() >= 1e-3 * prod.sum() / static_cast<double>(m)) break;
      alpha *= 0.8;
    }
    // A stalled step with a persisting primal residual is accepted as
    // infeasibility on a looser certificate.
    if (alpha < 1e-12) {
      if (farkas(lam, 1e-2)) return finish(SolveStatus::infeasible, it);
      return fail(SolveStatus::numerical_failure, it);
    }
    x += alpha * dx;
    s += alpha * ds;
    lam += alpha * dlam;
  }
  // Out of iterations: slowly diverging multipliers with a persisting primal
  // residual still carry an approximate Farkas certificate.
  const KKTResiduals last = check_kkt(qp, x, lam);
  if (last.primal_feasibility > opts.tolerance && farkas(lam, 1e-3)) {
    return finish(SolveStatus::infeasible, opts.max_iterations);
  }
  return fail(SolveStatus::max_iter, opts.max_iterations);
}

/// Raised when the exact solver cannot produce a backup input.
class BackupFailure : public std::runtime_error {
 public:
  BackupFailure(const std::string& what, SolveStatus status) : std::runtime_error(what), status_(status) {}
  SolveStatus status() const noexcept { return status_; }

 private:
  SolveStatus status_;
};

/// Receding-horizon input of the exact MPC: first nu entries of U*.
inline VectorXd backup_action(const ProblemFamily& fam, const VectorXd& P, const SolverOptions& opts = {}) {
  const DenseQP qp = condense(fam, P);
  const SolveResult res = solve(qp, opts);
  if (!res.optimal()) {
    throw BackupFailure(std::string("backup solver failed with status ") + to_string(res.status), res.status);
  }
  return res.U_star.head(fam.system.nu());
}

}  // namespace certmpc
