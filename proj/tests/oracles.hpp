#pragma once

// Test oracles that share no code with the library's QP path: the MPC
// problem kept in sparse form (states as variables, dynamics as equality
// constraints), solved by a plain path-following interior-point method on
// the full KKT system followed by an active-set polish.

#include <certmpc/lpv_mpc.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <vector>

namespace oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// min 1/2 z' P z + q' z + r  s.t.  Aeq z = beq,  G z <= g.
struct SparseQP {
  MatrixXd P;
  VectorXd q;
  double r = 0.0;
  MatrixXd Aeq;
  VectorXd beq;
  MatrixXd G;
  VectorXd g;
};

struct SparseResult {
  VectorXd z;
  double objective = 0.0;
  bool converged = false;
  bool polished = false;
};

/// z = [u_0 .. u_{T-1}, x_1 .. x_T]. Cost sum_{k<T} e_k' Q e_k + u_k' R u_k
/// + e_T' Qf e_T with e_k = x_k (regulation) or C x_k - yref_k (tracking,
/// yref_T := yref_{T-1}).
inline SparseQP sparse_mpc(const certmpc::ProblemFamily& f, const VectorXd& Pv) {
  const auto& sys = f.system;
  const auto& spec = f.spec;
  const auto& L = f.layout;
  const int T = spec.horizon, nx = sys.nx(), nu = sys.nu();
  const int nz = T * nu + T * nx;
  const auto ui = [&](int k) { return k * nu; };
  const auto xi = [&](int k) { return T * nu + (k - 1) * nx; };  // k = 1..T

  const VectorXd x0 = Pv.head(nx);
  SparseQP s;
  s.P = MatrixXd::Zero(nz, nz);
  s.q = VectorXd::Zero(nz);

  const MatrixXd C = spec.tracking ? sys.output_map() : MatrixXd::Identity(nx, nx);
  const auto yref = [&](int k) -> VectorXd {
    if (!L.has_reference) return VectorXd::Zero(C.rows());
    return Pv.segment(L.ref_offset() + std::min(k, T - 1) * L.ny, L.ny);
  };
  // Stage terms. x_0 is data, so its cost is a constant.
  for (int k = 0; k <= T; ++k) {
    const MatrixXd& W = k < T ? spec.Q : spec.Qf;
    const MatrixXd CWC = C.transpose() * W * C;
    const VectorXd y = yref(k);
    if (k == 0) {
      const VectorXd e = C * x0 - y;
      s.r += e.dot(W * e);
    } else {
      s.P.block(xi(k), xi(k), nx, nx) += 2.0 * CWC;
      s.q.segment(xi(k), nx) += -2.0 * C.transpose() * W * y;
      s.r += y.dot(W * y);
    }
    if (k < T) s.P.block(ui(k), ui(k), nu, nu) += 2.0 * spec.R;
  }

  // Dynamics x_{k+1} - A x_k - B u_k = E delta_k (+ A x_0 at k = 0).
  s.Aeq = MatrixXd::Zero(T * nx, nz);
  s.beq = VectorXd::Zero(T * nx);
  for (int k = 0; k < T; ++k) {
    const int qoff = L.q_offset() + (L.frozen_schedule ? 0 : k * L.nq);
    const auto m = certmpc::eval_system(sys, Pv.segment(qoff, L.nq));
    const int row = k * nx;
    s.Aeq.block(row, xi(k + 1), nx, nx) = MatrixXd::Identity(nx, nx);
    s.Aeq.block(row, ui(k), nx, nu) = -m.B;
    VectorXd rhs = VectorXd::Zero(nx);
    if (L.has_preview) rhs += Pv[L.preview_offset() + k] * m.E;
    if (k == 0) {
      rhs += m.A * x0;
    } else {
      s.Aeq.block(row, xi(k), nx, nx) = -m.A;
    }
    s.beq.segment(row, nx) = rhs;
  }

  // Inequalities.
  std::vector<VectorXd> rows;
  std::vector<double> rhs;
  const auto add = [&](const VectorXd& r, double b) {
    rows.push_back(r);
    rhs.push_back(b);
  };
  for (int k = 0; k < T; ++k) {
    for (int i = 0; i < spec.Hu.rows(); ++i) {
      VectorXd r = VectorXd::Zero(nz);
      r.segment(ui(k), nu) = spec.Hu.row(i).transpose();
      add(r, spec.hu[i]);
    }
    if (spec.rate_bound) {
      VectorXd uprev = L.has_prev_input ? VectorXd(Pv.segment(L.prev_offset(), nu)) : VectorXd::Zero(nu);
      for (int sign : {1, -1}) {
        for (int i = 0; i < nu; ++i) {
          VectorXd r = VectorXd::Zero(nz);
          r[ui(k) + i] = sign;
          double b = (*spec.rate_bound)[i];
          if (k == 0) {
            b += sign * uprev[i];
          } else {
            r[ui(k - 1) + i] = -sign;
          }
          add(r, b);
        }
      }
    }
    for (int i = 0; i < spec.Hx.rows(); ++i) {
      VectorXd r = VectorXd::Zero(nz);
      r.segment(xi(k + 1), nx) = spec.Hx.row(i).transpose();
      add(r, spec.hx[i]);
    }
  }
  for (int i = 0; i < spec.Hf.rows(); ++i) {
    VectorXd r = VectorXd::Zero(nz);
    r.segment(xi(T), nx) = spec.Hf.row(i).transpose();
    add(r, spec.hf[i]);
  }
  s.G.resize(static_cast<Eigen::Index>(rows.size()), nz);
  s.g.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    s.G.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    s.g[static_cast<Eigen::Index>(i)] = rhs[i];
  }
  return s;
}

inline double objective(const SparseQP& s, const VectorXd& z) { return 0.5 * z.dot(s.P * z) + s.q.dot(z) + s.r; }

/// Equality-constrained solve with the given active rows; returns false if
/// the result is not a KKT point of the full problem.
inline bool polish(const SparseQP& s, const std::vector<int>& active, VectorXd& z) {
  const Eigen::Index n = s.P.rows(), me = s.Aeq.rows(), ma = static_cast<Eigen::Index>(active.size());
  MatrixXd K = MatrixXd::Zero(n + me + ma, n + me + ma);
  VectorXd rhs = VectorXd::Zero(n + me + ma);
  K.topLeftCorner(n, n) = s.P;
  K.block(0, n, n, me) = s.Aeq.transpose();
  K.block(n, 0, me, n) = s.Aeq;
  rhs.head(n) = -s.q;
  rhs.segment(n, me) = s.beq;
  for (Eigen::Index i = 0; i < ma; ++i) {
    K.block(0, n + me + i, n, 1) = s.G.row(active[static_cast<std::size_t>(i)]).transpose();
    K.block(n + me + i, 0, 1, n) = s.G.row(active[static_cast<std::size_t>(i)]);
    rhs[n + me + i] = s.g[active[static_cast<std::size_t>(i)]];
  }
  Eigen::FullPivLU<MatrixXd> lu(K);
  if (lu.rank() < K.rows()) return false;
  const VectorXd sol = lu.solve(rhs);
  const VectorXd zc = sol.head(n);
  const double scale = 1.0 + s.g.cwiseAbs().maxCoeff();
  if (s.G.rows() > 0 && (s.G * zc - s.g).maxCoeff() > 1e-11 * scale) return false;
  if (ma > 0 && sol.tail(ma).minCoeff() < -1e-11 * (1.0 + sol.tail(ma).cwiseAbs().maxCoeff())) return false;
  z = zc;
  return true;
}

/// Path following with a fixed centering parameter and the full Newton
/// system solved by LU.
inline SparseResult solve_sparse(const SparseQP& s, int max_iter = 300) {
  const Eigen::Index n = s.P.rows(), me = s.Aeq.rows(), mi = s.G.rows();
  VectorXd z = VectorXd::Zero(n), y = VectorXd::Zero(me), lam = VectorXd::Ones(mi), sl = VectorXd::Ones(mi);
  SparseResult res;
  const Eigen::Index N = n + me + 2 * mi;
  for (int it = 0; it < max_iter; ++it) {
    const VectorXd rd = s.P * z + s.q + s.Aeq.transpose() * y + s.G.transpose() * lam;
    const VectorXd re = s.Aeq * z - s.beq;
    const VectorXd ri = s.G * z + sl - s.g;
    const double mu = mi ? lam.dot(sl) / static_cast<double>(mi) : 0.0;
    const double res_norm = std::max({rd.size() ? rd.cwiseAbs().maxCoeff() : 0.0,
                                      re.size() ? re.cwiseAbs().maxCoeff() : 0.0,
                                      ri.size() ? ri.cwiseAbs().maxCoeff() : 0.0, mu});
    if (res_norm < 1e-12) {
      res.converged = true;
      break;
    }
    MatrixXd K = MatrixXd::Zero(N, N);
    VectorXd rhs(N);
    K.block(0, 0, n, n) = s.P;
    K.block(0, n, n, me) = s.Aeq.transpose();
    K.block(0, n + me, n, mi) = s.G.transpose();
    K.block(n, 0, me, n) = s.Aeq;
    K.block(n + me, 0, mi, n) = s.G;
    K.block(n + me, n + me + mi, mi, mi) = MatrixXd::Identity(mi, mi);
    K.block(n + me + mi, n + me, mi, mi) = sl.asDiagonal();
    K.block(n + me + mi, n + me + mi, mi, mi) = lam.asDiagonal();
    rhs << -rd, -re, -ri, (0.1 * mu - (lam.array() * sl.array())).matrix();
    const VectorXd d = K.partialPivLu().solve(rhs);
    const VectorXd dz = d.head(n), dy = d.segment(n, me), dl = d.segment(n + me, mi), ds = d.tail(mi);
    double a = 1.0;
    for (Eigen::Index i = 0; i < mi; ++i) {
      if (dl[i] < 0) a = std::min(a, -0.99 * lam[i] / dl[i]);
      if (ds[i] < 0) a = std::min(a, -0.99 * sl[i] / ds[i]);
    }
    z += a * dz;
    y += a * dy;
    lam += a * dl;
    sl += a * ds;
  }
  std::vector<int> active;
  for (Eigen::Index i = 0; i < mi; ++i) {
    if (lam[i] > sl[i]) active.push_back(static_cast<int>(i));
  }
  VectorXd zp = z;
  if (polish(s, active, zp)) {
    z = zp;
    res.polished = true;
  }
  res.z = z;
  res.objective = objective(s, z);
  return res;
}

/// Exhaustive active-set solve of min 1/2 U'QU + c'U s.t. HU <= h for tiny
/// problems: the optimum is the best KKT point over all active subsets.
inline bool enumerate_qp(const MatrixXd& Q, const VectorXd& c, const MatrixXd& H, const VectorXd& h, VectorXd& U,
                         double& J) {
  const Eigen::Index n = Q.rows(), m = H.rows();
  bool found = false;
  for (unsigned mask = 0; mask < (1u << m); ++mask) {
    std::vector<Eigen::Index> act;
    for (Eigen::Index i = 0; i < m; ++i) {
      if (mask & (1u << i)) act.push_back(i);
    }
    const Eigen::Index a = static_cast<Eigen::Index>(act.size());
    if (a > n) continue;
    MatrixXd K = MatrixXd::Zero(n + a, n + a);
    VectorXd rhs(n + a);
    K.topLeftCorner(n, n) = Q;
    rhs.head(n) = -c;
    for (Eigen::Index i = 0; i < a; ++i) {
      K.block(0, n + i, n, 1) = H.row(act[i]).transpose();
      K.block(n + i, 0, 1, n) = H.row(act[i]);
      rhs[n + i] = h[act[i]];
    }
    Eigen::FullPivLU<MatrixXd> lu(K);
    if (lu.rank() < K.rows()) continue;
    const VectorXd sol = lu.solve(rhs);
    const VectorXd u = sol.head(n);
    if (m > 0 && (H * u - h).maxCoeff() > 1e-9) continue;
    if (a > 0 && sol.tail(a).minCoeff() < -1e-9) continue;
    const double val = 0.5 * u.dot(Q * u) + c.dot(u);
    if (!found || val < J) {
      U = u;
      J = val;
      found = true;
    }
  }
  return found;
}

/// Random strictly convex QP with a known feasible point: H U0 <= h with a
/// share of rows tight at U0.
struct RandomQP {
  MatrixXd Q;
  VectorXd c;
  MatrixXd H;
  VectorXd h;
};

template <class Rng>
RandomQP random_qp(Rng& rng, int n, int m) {
  std::normal_distribution<double> N01;
  std::uniform_real_distribution<double> U01(0.0, 1.0);
  RandomQP p;
  MatrixXd A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = N01(rng);
  p.Q = A * A.transpose() + (0.1 + U01(rng)) * MatrixXd::Identity(n, n);
  p.c.resize(n);
  for (int i = 0; i < n; ++i) p.c[i] = 3.0 * N01(rng);
  p.H.resize(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) p.H(i, j) = N01(rng);
  VectorXd U0(n);
  for (int i = 0; i < n; ++i) U0[i] = N01(rng);
  p.h = p.H * U0;
  for (int i = 0; i < m; ++i) p.h[i] += U01(rng) < 0.3 ? 0.0 : U01(rng);
  return p;
}

}  // namespace oracle
