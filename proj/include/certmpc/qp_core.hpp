#pragma once

// Condensed parametric QP
//
//   min_U  1/2 U' Q U + c' U     s.t.  H U <= h
//
// and its Lagrange dual. The dual function is kept in concave form
//
//   d(lambda) = -1/2 lambda' M lambda - r' lambda + g_const,   lambda >= 0,
//
// with M = H Q^-1 H', r = H Q^-1 c + h and g_const = -1/2 c' Q^-1 c, so that
// d(lambda) <= p(U) for every primal-feasible U and dual-feasible lambda.

#include <certmpc/common.hpp>
#include <certmpc/lpv_mpc.hpp>

#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

namespace certmpc {

struct DenseQP {
  MatrixXd Q;
  VectorXd c;
  MatrixXd H;
  VectorXd h;
  /// U-independent part of the trajectory cost, so that
  /// cost(U) = 1/2 U'QU + c'U + const_term.
  double const_term = 0.0;

  Eigen::Index n() const { return Q.rows(); }
  Eigen::Index m() const { return H.rows(); }
};

struct DualQP {
  MatrixXd M;
  VectorXd r;
  double g_const = 0.0;

  Eigen::Index m() const { return M.rows(); }
};

/// Smallest LLT pivot of Q relative to its largest diagonal entry must exceed
/// this value.
inline constexpr double kPdTolerance = 1e-10;

/// Cholesky factor of the Hessian; throws NumericalError with the offending
/// pivot when Q is not numerically positive definite.
inline Eigen::LLT<MatrixXd> factor_hessian(const MatrixXd& Q) {
  if (Q.rows() != Q.cols()) throw ContractError("factor_hessian: Q must be square");
  if (Q.rows() == 0) return Eigen::LLT<MatrixXd>(Q);
  Eigen::LLT<MatrixXd> llt(Q);
  const double scale = Q.diagonal().cwiseAbs().maxCoeff();
  if (llt.info() != Eigen::Success) {
    Eigen::LDLT<MatrixXd> ldlt(Q);
    const double pivot = ldlt.vectorD().minCoeff();
    throw NumericalError("condensed Hessian is not positive definite (pivot " + std::to_string(pivot) + ")", pivot);
  }
  const double pivot = llt.matrixLLT().diagonal().array().square().minCoeff();
  if (!(pivot > kPdTolerance * scale)) {
    throw NumericalError("condensed Hessian is numerically singular (pivot " + std::to_string(pivot) + ")", pivot);
  }
  return llt;
}

inline void check_qp_shapes(const DenseQP& qp) {
  if (qp.Q.rows() != qp.Q.cols() || qp.c.size() != qp.Q.rows() || qp.H.cols() != qp.Q.rows() ||
      qp.h.size() != qp.H.rows()) {
    throw ContractError("DenseQP: inconsistent dimensions");
  }
}

namespace detail {

// out.leftCols(cols) = A * B.leftCols(cols). The condensing products are a
// few rows by a few columns, where Eigen's product dispatch costs more than
// the arithmetic.
inline void small_product(const MatrixXd& A, const MatrixXd& B, Eigen::Index cols, MatrixXd& out) {
  const Eigen::Index rows = A.rows(), inner = A.cols();
  for (Eigen::Index j = 0; j < cols; ++j) {
    double* o = out.data() + j * out.rows();
    const double b0 = inner > 0 ? B(0, j) : 0.0;
    for (Eigen::Index i = 0; i < rows; ++i) o[i] = inner > 0 ? A(i, 0) * b0 : 0.0;
    for (Eigen::Index l = 1; l < inner; ++l) {
      const double b = B(l, j);
      const double* a = A.data() + l * rows;
      for (Eigen::Index i = 0; i < rows; ++i) o[i] += a[i] * b;
    }
  }
}

inline void small_product(const MatrixXd& A, const VectorXd& x, VectorXd& out) {
  const Eigen::Index rows = A.rows(), inner = A.cols();
  for (Eigen::Index i = 0; i < rows; ++i) out[i] = inner > 0 ? A(i, 0) * x[0] : 0.0;
  for (Eigen::Index l = 1; l < inner; ++l) {
    const double b = x[l];
    const double* a = A.data() + l * rows;
    for (Eigen::Index i = 0; i < rows; ++i) out[i] += a[i] * b;
  }
}

}  // namespace detail

/// Eliminates the predicted states. Constraint rows are ordered stage by
/// stage, k = 0..T-1: input rows for u_k, rate rows (+ then -) for
/// u_k - u_{k-1}, state rows for x_{k+1}; terminal rows for x_T come last.
/// In tracking mode the terminal weight penalizes C x_T - y_ref_{T-1}.
/// When `factor` is given it receives the Cholesky factor of Q computed for
/// the positive-definiteness check.
inline DenseQP condense(const ProblemFamily& fam, const VectorXd& P, Eigen::LLT<MatrixXd>* factor = nullptr) {
  const LPVSystem& sys = fam.system;
  const MPCSpec& spec = fam.spec;
  const ParameterLayout& L = fam.layout;
  require_dim(P.size(), L.dim(), "condense: parameter");
  if (!P.allFinite()) throw ContractError("condense: non-finite parameter entry");
  const int T = spec.horizon, nx = sys.nx(), nu = sys.nu();
  const int n = T * nu;
  const int m = fam.constraint_dim();
  const MatrixXd& C = sys.output_map();
  const int nw = spec.tracking ? static_cast<int>(C.rows()) : nx;

  DenseQP qp;
  qp.Q.setZero(n, n);
  qp.c.setZero(n);
  qp.H.setZero(m, n);
  qp.h.setZero(m);
  for (int k = 0; k < T; ++k) qp.Q.block(k * nu, k * nu, nu, nu) = 2.0 * spec.R;

  // x_k = a + G U; only the first k*nu columns of G are nonzero at stage k.
  VectorXd a = P.segment(L.x_offset(), nx), a_next(nx);
  MatrixXd G = MatrixXd::Zero(nx, n), G_next(nx, n);
  MatrixXd CG(nw, n), WCG(nw, n);
  VectorXd e(nw), We(nw);
  auto add_cost = [&](const MatrixXd& W, int k_ref, int cols) {
    if (spec.tracking) {
      detail::small_product(C, a, e);
      if (L.has_reference) e -= P.segment(L.ref_offset() + k_ref * L.ny, L.ny);
    } else {
      e = a;
    }
    detail::small_product(W, e, We);
    qp.const_term += e.dot(We);
    if (cols == 0) return;
    if (spec.tracking) {
      detail::small_product(C, G, cols, CG);
    } else {
      CG.leftCols(cols) = G.leftCols(cols);
    }
    detail::small_product(W, CG, cols, WCG);
    for (int j = 0; j < cols; ++j) {
      for (int i = j; i < cols; ++i) {
        double acc = 0.0;
        for (int r = 0; r < nw; ++r) acc += CG(r, i) * WCG(r, j);
        qp.Q(i, j) += 2.0 * acc;
      }
      double acc = 0.0;
      for (int r = 0; r < nw; ++r) acc += CG(r, j) * We[r];
      qp.c[j] += 2.0 * acc;
    }
  };

  SystemMatrices sm;
  int row = 0;
  for (int k = 0; k < T; ++k) {
    add_cost(spec.Q, k, k * nu);

    const int Hu_rows = static_cast<int>(spec.Hu.rows());
    if (Hu_rows > 0) {
      qp.H.block(row, k * nu, Hu_rows, nu) = spec.Hu;
      qp.h.segment(row, Hu_rows) = spec.hu;
      row += Hu_rows;
    }
    if (spec.rate_bound) {
      const VectorXd& du = *spec.rate_bound;
      qp.H.block(row, k * nu, nu, nu).diagonal().setOnes();
      qp.H.block(row + nu, k * nu, nu, nu).diagonal().setConstant(-1.0);
      qp.h.segment(row, nu) = du;
      qp.h.segment(row + nu, nu) = du;
      if (k == 0) {
        if (L.has_prev_input) {
          qp.h.segment(row, nu) += P.segment(L.prev_offset(), nu);
          qp.h.segment(row + nu, nu) -= P.segment(L.prev_offset(), nu);
        }
      } else {
        qp.H.block(row, (k - 1) * nu, nu, nu).diagonal().setConstant(-1.0);
        qp.H.block(row + nu, (k - 1) * nu, nu, nu).diagonal().setOnes();
      }
      row += 2 * nu;
    }

    // A frozen schedule needs one evaluation for the whole horizon.
    if (k == 0 || !L.frozen_schedule) {
      sm = eval_system(sys, P.segment(L.q_offset() + (L.frozen_schedule ? 0 : k * L.nq), L.nq));
    }
    detail::small_product(sm.A, a, a_next);
    if (L.has_preview) a_next += P[L.preview_offset() + k] * sm.E;
    a.swap(a_next);
    const int cols = k * nu;
    if (cols > 0) {
      detail::small_product(sm.A, G, cols, G_next);
      G.leftCols(cols) = G_next.leftCols(cols);
    }
    G.block(0, k * nu, nx, nu) = sm.B;

    const int Hx_rows = static_cast<int>(spec.Hx.rows());
    if (Hx_rows > 0) {
      qp.H.block(row, 0, Hx_rows, n).noalias() = spec.Hx * G;
      qp.h.segment(row, Hx_rows) = spec.hx;
      qp.h.segment(row, Hx_rows).noalias() -= spec.Hx * a;
      row += Hx_rows;
    }
  }
  add_cost(spec.Qf, T - 1, n);
  const int Hf_rows = static_cast<int>(spec.Hf.rows());
  if (Hf_rows > 0) {
    qp.H.block(row, 0, Hf_rows, n).noalias() = spec.Hf * G;
    qp.h.segment(row, Hf_rows) = spec.hf;
    qp.h.segment(row, Hf_rows).noalias() -= spec.Hf * a;
  }
  // Accumulated products are symmetric up to rounding; mirror the lower half.
  for (int j = 1; j < n; ++j)
    for (int i = 0; i < j; ++i) qp.Q(i, j) = qp.Q(j, i);
  if (factor) {
    *factor = factor_hessian(qp.Q);
  } else {
    factor_hessian(qp.Q);
  }
  return qp;
}

/// Dual coefficients from a single Cholesky factorization Q = L L'.
inline DualQP build_dual(const DenseQP& qp) {
  check_qp_shapes(qp);
  const auto llt = factor_hessian(qp.Q);
  const auto L = llt.matrixL();
  const MatrixXd Y = L.solve(qp.H.transpose());  // L^-1 H'
  const VectorXd z = L.solve(qp.c);              // L^-1 c
  DualQP dq;
  dq.M.noalias() = Y.transpose() * Y;
  dq.r = Y.transpose() * z + qp.h;
  dq.g_const = -0.5 * z.squaredNorm();
  return dq;
}

inline double primal_objective(const DenseQP& qp, const VectorXd& U) {
  require_dim(U.size(), qp.n(), "primal_objective: U");
  return 0.5 * U.dot(qp.Q * U) + qp.c.dot(U);
}

inline double dual_objective(const DualQP& dq, const VectorXd& lambda) {
  require_dim(lambda.size(), dq.m(), "dual_objective: lambda");
  return -0.5 * lambda.dot(dq.M * lambda) - dq.r.dot(lambda) + dq.g_const;
}

/// Same value as dual_objective, evaluated as the Lagrangian minimum
/// -1/2 w' Q^-1 w - h' lambda with w = c + H' lambda. Costs O(n m) given the
/// factor instead of forming M.
inline double dual_objective(const DenseQP& qp, const Eigen::LLT<MatrixXd>& llt, const VectorXd& lambda) {
  require_dim(lambda.size(), qp.m(), "dual_objective: lambda");
  VectorXd w = qp.c;
  w.noalias() += qp.H.transpose() * lambda;
  llt.matrixL().solveInPlace(w);
  return -0.5 * w.squaredNorm() - qp.h.dot(lambda);
}

struct FeasibilityCheck {
  bool feasible = true;
  /// max_i (H U - h)_i; 0 when there are no constraints.
  double max_violation = 0.0;
};

inline FeasibilityCheck primal_feasible(const DenseQP& qp, const VectorXd& U, double tol) {
  require_dim(U.size(), qp.n(), "primal_feasible: U");
  if (qp.m() == 0) return {true, 0.0};
  const double v = (qp.H * U - qp.h).maxCoeff();
  return {v <= tol, v};
}

inline bool dual_feasible(const VectorXd& lambda, double tol) {
  return lambda.size() == 0 || lambda.minCoeff() >= -tol;
}

/// p(U) - d(lambda). Upper-bounds p(U) - J* when U and lambda are feasible.
inline double duality_gap(const DenseQP& qp, const DualQP& dq, const VectorXd& U, const VectorXd& lambda) {
  return primal_objective(qp, U) - dual_objective(dq, lambda);
}

/// Lagrangian minimizer U(lambda) = -Q^-1 (c + H' lambda).
inline VectorXd recover_primal(const DenseQP& qp, const VectorXd& lambda) {
  require_dim(lambda.size(), qp.m(), "recover_primal: lambda");
  const auto llt = factor_hessian(qp.Q);
  return -llt.solve(qp.c + qp.H.transpose() * lambda);
}

// ---------------------------------------------------------------------------
// Text export. Layout:
//
//   certmpc-dense-qp 1
//   n <n> m <m>
//   const_term <value>
//   Q <rows> <cols>      followed by <rows> lines of <cols> numbers
//   c 1 <n>
//   H <m> <n>
//   h 1 <m>
//
// The dual uses header "certmpc-dual-qp 1", then "m <m>", "g_const <value>",
// and matrices M (m x m) and r (1 x m). Numbers are printed with 17
// significant digits so a round trip is exact.

namespace detail {

inline void write_matrix(std::ostream& os, const char* name, const MatrixXd& A) {
  os << name << ' ' << A.rows() << ' ' << A.cols() << '\n';
  char buf[32];
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index j = 0; j < A.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", A(i, j));
      os << (j ? " " : "") << buf;
    }
    os << '\n';
  }
}

inline std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void expect_token(std::istream& is, const std::string& want) {
  std::string tok;
  if (!(is >> tok) || tok != want) throw FormatError("expected '" + want + "', got '" + tok + "'");
}

inline MatrixXd read_matrix(std::istream& is, const std::string& name) {
  expect_token(is, name);
  Eigen::Index rows = 0, cols = 0;
  if (!(is >> rows >> cols) || rows < 0 || cols < 0) throw FormatError("bad shape for matrix " + name);
  MatrixXd A(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      if (!(is >> A(i, j))) throw FormatError("truncated matrix " + name);
  return A;
}

}  // namespace detail

inline void write_text(std::ostream& os, const DenseQP& qp) {
  check_qp_shapes(qp);
  os << "certmpc-dense-qp 1\n";
  os << "n " << qp.n() << " m " << qp.m() << '\n';
  os << "const_term " << detail::fmt17(qp.const_term) << '\n';
  detail::write_matrix(os, "Q", qp.Q);
  detail::write_matrix(os, "c", qp.c.transpose());
  detail::write_matrix(os, "H", qp.H);
  detail::write_matrix(os, "h", qp.h.transpose());
}

inline void write_text(std::ostream& os, const DualQP& dq) {
  os << "certmpc-dual-qp 1\n";
  os << "m " << dq.m() << '\n';
  os << "g_const " << detail::fmt17(dq.g_const) << '\n';
  detail::write_matrix(os, "M", dq.M);
  detail::write_matrix(os, "r", dq.r.transpose());
}

inline DenseQP read_dense_qp(std::istream& is) {
  detail::expect_token(is, "certmpc-dense-qp");
  int version = 0;
  if (!(is >> version) || version != 1) throw FormatError("unsupported dense QP version");
  Eigen::Index n = 0, m = 0;
  detail::expect_token(is, "n");
  is >> n;
  detail::expect_token(is, "m");
  is >> m;
  DenseQP qp;
  detail::expect_token(is, "const_term");
  if (!(is >> qp.const_term)) throw FormatError("bad const_term");
  qp.Q = detail::read_matrix(is, "Q");
  qp.c = detail::read_matrix(is, "c").transpose();
  qp.H = detail::read_matrix(is, "H");
  qp.h = detail::read_matrix(is, "h").transpose();
  if (qp.n() != n || qp.m() != m || qp.H.cols() != n) throw FormatError("dense QP header disagrees with data");
  check_qp_shapes(qp);
  return qp;
}

inline DualQP read_dual_qp(std::istream& is) {
  detail::expect_token(is, "certmpc-dual-qp");
  int version = 0;
  if (!(is >> version) || version != 1) throw FormatError("unsupported dual QP version");
  Eigen::Index m = 0;
  detail::expect_token(is, "m");
  is >> m;
  DualQP dq;
  detail::expect_token(is, "g_const");
  if (!(is >> dq.g_const)) throw FormatError("bad g_const");
  dq.M = detail::read_matrix(is, "M");
  dq.r = detail::read_matrix(is, "r").transpose();
  if (dq.M.rows() != m || dq.M.cols() != m || dq.r.size() != m) throw FormatError("dual QP header disagrees with data");
  return dq;
}

}  // namespace certmpc
