#pragma once

// LPV prediction models, MPC problem data, parameter vectors and the two
// built-in problem families (a double integrator and a chassis-control
// surrogate).

#include <certmpc/common.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace certmpc {

/// Matrices of x+ = A x + B u + E delta at one scheduling value. E is empty
/// when the system has no exogenous channel.
struct SystemMatrices {
  MatrixXd A;
  MatrixXd B;
  VectorXd E;
};

class LPVSystem {
 public:
  using DynamicsMap = std::function<SystemMatrices(const VectorXd&)>;

  LPVSystem(std::string name, int nx, int nu, VectorXd q_lower, VectorXd q_upper,
            DynamicsMap map, bool has_exogenous = false, MatrixXd output_map = {})
      : name_(std::move(name)),
        nx_(nx),
        nu_(nu),
        q_lower_(std::move(q_lower)),
        q_upper_(std::move(q_upper)),
        map_(std::move(map)),
        has_exogenous_(has_exogenous),
        C_(std::move(output_map)) {
    if (nx <= 0 || nu <= 0) throw ConfigError("LPVSystem: state and input dimensions must be positive");
    if (q_lower_.size() != q_upper_.size()) throw ConfigError("LPVSystem: scheduling bounds differ in size");
    for (Eigen::Index i = 0; i < q_lower_.size(); ++i) {
      if (!(q_lower_[i] <= q_upper_[i]) || !std::isfinite(q_lower_[i]) || !std::isfinite(q_upper_[i])) {
        throw ConfigError("LPVSystem: scheduling box coordinate " + std::to_string(i) + " is empty or unbounded");
      }
    }
    if (C_.size() == 0) C_ = MatrixXd::Identity(nx, nx);
    if (C_.cols() != nx) throw ConfigError("LPVSystem: output map must have nx columns");
  }

  const std::string& name() const { return name_; }
  int nx() const { return nx_; }
  int nu() const { return nu_; }
  int nq() const { return static_cast<int>(q_lower_.size()); }
  int ny() const { return static_cast<int>(C_.rows()); }
  bool has_exogenous() const { return has_exogenous_; }
  const MatrixXd& output_map() const { return C_; }
  const VectorXd& q_lower() const { return q_lower_; }
  const VectorXd& q_upper() const { return q_upper_; }
  const DynamicsMap& dynamics_map() const { return map_; }

 private:
  std::string name_;
  int nx_;
  int nu_;
  VectorXd q_lower_;
  VectorXd q_upper_;
  DynamicsMap map_;
  bool has_exogenous_;
  MatrixXd C_;
};

/// Evaluates A(q), B(q), E(q). Throws DomainError naming the first scheduling
/// coordinate outside the declared box.
inline SystemMatrices eval_system(const LPVSystem& sys, const VectorXd& q) {
  require_dim(q.size(), sys.nq(), "eval_system: scheduling parameter");
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (!(q[i] >= sys.q_lower()[i] && q[i] <= sys.q_upper()[i])) {
      throw DomainError("eval_system: scheduling coordinate q[" + std::to_string(i) + "] = " +
                        std::to_string(q[i]) + " outside [" + std::to_string(sys.q_lower()[i]) + ", " +
                        std::to_string(sys.q_upper()[i]) + "]");
    }
  }
  SystemMatrices m = sys.dynamics_map()(q);
  if (m.A.rows() != sys.nx() || m.A.cols() != sys.nx() || m.B.rows() != sys.nx() ||
      m.B.cols() != sys.nu()) {
    throw ContractError("eval_system: dynamics map returned matrices of the wrong shape");
  }
  if (sys.has_exogenous()) {
    if (m.E.size() != sys.nx()) throw ContractError("eval_system: exogenous column has wrong size");
  } else {
    m.E = VectorXd::Zero(sys.nx());
  }
  if (!m.A.allFinite() || !m.B.allFinite() || !m.E.allFinite()) {
    throw NumericalError("eval_system: non-finite system matrix");
  }
  return m;
}

/// One step of x+ = A(q) x + B(q) u + E(q) delta.
inline VectorXd step_dynamics(const LPVSystem& sys, const VectorXd& x, const VectorXd& u,
                              const VectorXd& q, double delta = 0.0) {
  require_dim(x.size(), sys.nx(), "step_dynamics: state");
  require_dim(u.size(), sys.nu(), "step_dynamics: input");
  const SystemMatrices m = eval_system(sys, q);
  return m.A * x + m.B * u + m.E * delta;
}

/// MPC problem data. With `tracking` the stage weight Q acts on outputs
/// y = C x minus the reference; otherwise on the state. Constraints with zero
/// rows are absent.
struct MPCSpec {
  int horizon = 1;
  MatrixXd Q;
  MatrixXd R;
  MatrixXd Qf;
  MatrixXd Hx;
  VectorXd hx;
  MatrixXd Hu;
  VectorXd hu;
  std::optional<VectorXd> rate_bound;
  MatrixXd Hf;
  VectorXd hf;
  bool tracking = false;

  bool has_terminal_set() const { return Hf.rows() > 0; }
  /// Constraint rows contributed by one stage (inputs, rates, states).
  int rows_per_stage(int nu) const {
    return static_cast<int>(Hu.rows()) + (rate_bound ? 2 * nu : 0) + static_cast<int>(Hx.rows());
  }
  int constraint_rows(int nu) const { return horizon * rows_per_stage(nu) + static_cast<int>(Hf.rows()); }
};

namespace detail {

inline bool symmetric(const MatrixXd& M, double tol) {
  return M.rows() == M.cols() && (M - M.transpose()).cwiseAbs().maxCoeff() <= tol * (1.0 + M.cwiseAbs().maxCoeff());
}

inline double min_eigenvalue(const MatrixXd& M) {
  if (M.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (M + M.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline void check_polytope(const MatrixXd& H, const VectorXd& h, int dim, const char* what) {
  if (H.rows() == 0) return;
  if (H.cols() != dim || h.size() != H.rows()) {
    throw ConfigError(std::string("MPCSpec: ") + what + " constraint has inconsistent shape");
  }
  // The origin is the witness point for every built-in constraint set.
  if ((h.array() < 0.0).any()) {
    throw ConfigError(std::string("MPCSpec: ") + what + " set does not contain the origin witness");
  }
}

}  // namespace detail

/// Checks shapes, R positive definite, Q and Qf PSD, nonempty constraint sets.
inline void validate_spec(const MPCSpec& spec, const LPVSystem& sys) {
  constexpr double kTol = 1e-10;
  if (spec.horizon < 1) throw ConfigError("MPCSpec: horizon must be positive");
  const int cost_dim = spec.tracking ? sys.ny() : sys.nx();
  if (spec.Q.rows() != cost_dim || spec.Q.cols() != cost_dim) throw ConfigError("MPCSpec: Q has wrong shape");
  if (spec.Qf.rows() != cost_dim || spec.Qf.cols() != cost_dim) throw ConfigError("MPCSpec: Qf has wrong shape");
  if (spec.R.rows() != sys.nu() || spec.R.cols() != sys.nu()) throw ConfigError("MPCSpec: R has wrong shape");
  if (!detail::symmetric(spec.Q, kTol) || !detail::symmetric(spec.Qf, kTol) || !detail::symmetric(spec.R, kTol)) {
    throw ConfigError("MPCSpec: weight matrices must be symmetric");
  }
  if (detail::min_eigenvalue(spec.R) <= kTol * (1.0 + spec.R.cwiseAbs().maxCoeff())) {
    throw ConfigError("MPCSpec: R must be positive definite");
  }
  if (detail::min_eigenvalue(spec.Q) < -kTol || detail::min_eigenvalue(spec.Qf) < -kTol) {
    throw ConfigError("MPCSpec: Q and Qf must be positive semidefinite");
  }
  detail::check_polytope(spec.Hx, spec.hx, sys.nx(), "state");
  detail::check_polytope(spec.Hu, spec.hu, sys.nu(), "input");
  detail::check_polytope(spec.Hf, spec.hf, sys.nx(), "terminal");
  if (spec.rate_bound) {
    if (spec.rate_bound->size() != sys.nu() || (spec.rate_bound->array() <= 0.0).any()) {
      throw ConfigError("MPCSpec: rate bound must be positive with one entry per input");
    }
  }
}

/// Layout of the flattened parameter vector:
///   x0 (nx) | q (nq, or T*nq stage by stage) | y_ref (T*ny, stage by stage) |
///   delta preview (T) | u_prev (nu)
/// Blocks that are disabled have zero width.
struct ParameterLayout {
  int nx = 0;
  int nu = 0;
  int nq = 0;
  int ny = 0;
  int horizon = 1;
  bool frozen_schedule = true;
  bool has_reference = false;
  bool has_preview = false;
  bool has_prev_input = false;

  int q_width() const { return frozen_schedule ? nq : horizon * nq; }
  int ref_width() const { return has_reference ? horizon * ny : 0; }
  int preview_width() const { return has_preview ? horizon : 0; }
  int prev_width() const { return has_prev_input ? nu : 0; }

  int x_offset() const { return 0; }
  int q_offset() const { return nx; }
  int ref_offset() const { return q_offset() + q_width(); }
  int preview_offset() const { return ref_offset() + ref_width(); }
  int prev_offset() const { return preview_offset() + preview_width(); }
  int dim() const { return prev_offset() + prev_width(); }

  std::vector<std::string> coordinate_names() const {
    std::vector<std::string> names;
    names.reserve(static_cast<std::size_t>(dim()));
    for (int i = 0; i < nx; ++i) names.push_back("x0_" + std::to_string(i));
    if (frozen_schedule) {
      for (int i = 0; i < nq; ++i) names.push_back("q_" + std::to_string(i));
    } else {
      for (int k = 0; k < horizon; ++k)
        for (int i = 0; i < nq; ++i) names.push_back("q" + std::to_string(k) + "_" + std::to_string(i));
    }
    if (has_reference) {
      for (int k = 0; k < horizon; ++k)
        for (int i = 0; i < ny; ++i) names.push_back("yref" + std::to_string(k) + "_" + std::to_string(i));
    }
    if (has_preview) {
      for (int k = 0; k < horizon; ++k) names.push_back("delta_" + std::to_string(k));
    }
    if (has_prev_input) {
      for (int i = 0; i < nu; ++i) names.push_back("uprev_" + std::to_string(i));
    }
    return names;
  }
};

/// Structured view of one parameter instance.
struct ParameterVector {
  VectorXd x0;
  MatrixXd q_seq;      // T x nq
  MatrixXd y_ref_seq;  // T x ny (zero when absent)
  VectorXd delta_seq;  // T (zero when absent)
  VectorXd u_prev;     // nu (zero when absent)
};

inline VectorXd flatten(const ParameterLayout& L, const ParameterVector& pv) {
  require_dim(pv.x0.size(), L.nx, "flatten: x0");
  VectorXd P(L.dim());
  P.segment(L.x_offset(), L.nx) = pv.x0;
  if (L.nq > 0) {
    if (pv.q_seq.rows() != L.horizon || pv.q_seq.cols() != L.nq) {
      throw ContractError("flatten: q_seq must be horizon x nq");
    }
    if (L.frozen_schedule) {
      P.segment(L.q_offset(), L.nq) = pv.q_seq.row(0).transpose();
    } else {
      for (int k = 0; k < L.horizon; ++k) P.segment(L.q_offset() + k * L.nq, L.nq) = pv.q_seq.row(k).transpose();
    }
  }
  if (L.has_reference) {
    if (pv.y_ref_seq.rows() != L.horizon || pv.y_ref_seq.cols() != L.ny) {
      throw ContractError("flatten: y_ref_seq must be horizon x ny");
    }
    for (int k = 0; k < L.horizon; ++k) P.segment(L.ref_offset() + k * L.ny, L.ny) = pv.y_ref_seq.row(k).transpose();
  }
  if (L.has_preview) {
    require_dim(pv.delta_seq.size(), L.horizon, "flatten: delta_seq");
    P.segment(L.preview_offset(), L.horizon) = pv.delta_seq;
  }
  if (L.has_prev_input) {
    require_dim(pv.u_prev.size(), L.nu, "flatten: u_prev");
    P.segment(L.prev_offset(), L.nu) = pv.u_prev;
  }
  return P;
}

inline ParameterVector unflatten(const ParameterLayout& L, const VectorXd& P) {
  require_dim(P.size(), L.dim(), "unflatten: parameter");
  if (!P.allFinite()) throw ContractError("unflatten: non-finite parameter entry");
  ParameterVector pv;
  pv.x0 = P.segment(L.x_offset(), L.nx);
  pv.q_seq.resize(L.horizon, L.nq);
  for (int k = 0; k < L.horizon; ++k) {
    const int off = L.q_offset() + (L.frozen_schedule ? 0 : k * L.nq);
    if (L.nq > 0) pv.q_seq.row(k) = P.segment(off, L.nq).transpose();
  }
  pv.y_ref_seq = MatrixXd::Zero(L.horizon, L.ny);
  if (L.has_reference) {
    for (int k = 0; k < L.horizon; ++k) pv.y_ref_seq.row(k) = P.segment(L.ref_offset() + k * L.ny, L.ny).transpose();
  }
  pv.delta_seq = L.has_preview ? VectorXd(P.segment(L.preview_offset(), L.horizon)) : VectorXd::Zero(L.horizon);
  pv.u_prev = L.has_prev_input ? VectorXd(P.segment(L.prev_offset(), L.nu)) : VectorXd::Zero(L.nu);
  return pv;
}

/// Compact box of admissible parameters with the sampling law over it.
struct ParameterBox {
  enum class Distribution { uniform };

  VectorXd lower;
  VectorXd upper;
  Distribution distribution = Distribution::uniform;

  ParameterBox() = default;
  ParameterBox(VectorXd lo, VectorXd hi) : lower(std::move(lo)), upper(std::move(hi)) { validate(); }

  void validate() const {
    if (lower.size() != upper.size()) throw ConfigError("ParameterBox: bound sizes differ");
    for (Eigen::Index i = 0; i < lower.size(); ++i) {
      if (!std::isfinite(lower[i]) || !std::isfinite(upper[i])) {
        throw ConfigError("ParameterBox: coordinate " + std::to_string(i) + " is unbounded");
      }
      if (lower[i] > upper[i]) {
        throw ConfigError("ParameterBox: lower > upper at coordinate " + std::to_string(i));
      }
    }
  }
  Eigen::Index dim() const { return lower.size(); }
  bool contains(const VectorXd& P) const {
    return P.size() == lower.size() && (P.array() >= lower.array()).all() && (P.array() <= upper.array()).all();
  }
};

/// n i.i.d. draws from the box distribution, reproducible from `seed`.
inline std::vector<VectorXd> sample_parameters(const ParameterBox& box, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ContractError("sample_parameters: n must be at least 1");
  box.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<VectorXd> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    VectorXd P(box.dim());
    for (Eigen::Index i = 0; i < box.dim(); ++i) {
      // Written as a convex combination so degenerate coordinates reproduce
      // the bound exactly and draws never leave [lower, upper].
      const double t = unit(rng);
      P[i] = std::clamp((1.0 - t) * box.lower[i] + t * box.upper[i], box.lower[i], box.upper[i]);
    }
    out.push_back(std::move(P));
  }
  return out;
}

/// CSV with a header of coordinate names and one flattened parameter per row.
inline void write_parameter_csv(std::ostream& os, const ParameterLayout& L, const std::vector<VectorXd>& samples) {
  const auto names = L.coordinate_names();
  for (std::size_t i = 0; i < names.size(); ++i) os << (i ? "," : "") << names[i];
  os << '\n';
  char buf[32];
  for (const auto& P : samples) {
    require_dim(P.size(), L.dim(), "write_parameter_csv");
    for (Eigen::Index i = 0; i < P.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", P[i]);
      os << (i ? "," : "") << buf;
    }
    os << '\n';
  }
}

/// A complete parametric MPC family: model, problem data, parameter layout
/// and the box P ranges over.
struct ProblemFamily {
  LPVSystem system;
  MPCSpec spec;
  ParameterLayout layout;
  ParameterBox box;

  const std::string& name() const { return system.name(); }
  int parameter_dim() const { return layout.dim(); }
  int decision_dim() const { return spec.horizon * system.nu(); }
  int constraint_dim() const { return spec.constraint_rows(system.nu()); }
};

inline void validate_family(const ProblemFamily& f) {
  validate_spec(f.spec, f.system);
  const auto& L = f.layout;
  if (L.nx != f.system.nx() || L.nu != f.system.nu() || L.nq != f.system.nq() || L.ny != f.system.ny() ||
      L.horizon != f.spec.horizon) {
    throw ConfigError("ProblemFamily: parameter layout does not match the system");
  }
  if (L.has_preview != f.system.has_exogenous()) {
    throw ConfigError("ProblemFamily: preview block must be present exactly when the system has an exogenous input");
  }
  if (L.has_prev_input != f.spec.rate_bound.has_value()) {
    throw ConfigError("ProblemFamily: previous-input block must be present exactly when rate bounds are set");
  }
  if (L.has_reference != f.spec.tracking) {
    throw ConfigError("ProblemFamily: reference block must be present exactly in tracking mode");
  }
  if (f.box.dim() != L.dim()) throw ConfigError("ProblemFamily: parameter box dimension mismatch");
  f.box.validate();
  const int qo = L.q_offset();
  for (int k = 0; k < L.q_width(); ++k) {
    const int i = k % std::max(1, L.nq);
    if (f.box.lower[qo + k] < f.system.q_lower()[i] || f.box.upper[qo + k] > f.system.q_upper()[i]) {
      throw ConfigError("ProblemFamily: parameter box leaves the scheduling box");
    }
  }
}

// ---------------------------------------------------------------------------
// Double-integrator regulation benchmark.

struct BenchmarkConfig {
  double sample_time = 0.1;
  int horizon = 3;
  double state_weight = 1.0;
  double terminal_weight = 1.0;
  double input_weight = 0.1;
  double input_bound = 1.0;
  double state_bound = 5.0;
  bool terminal_set = true;
  double terminal_bound = 3.0;
  double x0_bound = 2.0;
};

/// x+ = [[1, Ts], [0, 1]] x + [0; Ts] u with box state/input constraints and
/// an optional box terminal set. The parameter is the initial state.
inline ProblemFamily build_benchmark_lti(const BenchmarkConfig& cfg = {}) {
  if (!(cfg.sample_time > 0.0) || cfg.horizon < 1 || !(cfg.input_weight > 0.0) || cfg.state_weight < 0.0 ||
      cfg.terminal_weight < 0.0 || !(cfg.input_bound > 0.0) || !(cfg.state_bound > 0.0) ||
      !(cfg.x0_bound > 0.0) || (cfg.terminal_set && !(cfg.terminal_bound > 0.0))) {
    throw ConfigError("build_benchmark_lti: invalid configuration value");
  }
  const double Ts = cfg.sample_time;
  SystemMatrices m;
  m.A = (MatrixXd(2, 2) << 1.0, Ts, 0.0, 1.0).finished();
  m.B = (MatrixXd(2, 1) << 0.0, Ts).finished();
  LPVSystem sys("benchmark", 2, 1, VectorXd(0), VectorXd(0), [m](const VectorXd&) { return m; });

  MPCSpec spec;
  spec.horizon = cfg.horizon;
  spec.Q = cfg.state_weight * MatrixXd::Identity(2, 2);
  spec.Qf = cfg.terminal_weight * MatrixXd::Identity(2, 2);
  spec.R = cfg.input_weight * MatrixXd::Identity(1, 1);
  MatrixXd I2 = MatrixXd::Identity(2, 2);
  spec.Hx.resize(4, 2);
  spec.Hx << I2, -I2;
  spec.hx = VectorXd::Constant(4, cfg.state_bound);
  spec.Hu.resize(2, 1);
  spec.Hu << 1.0, -1.0;
  spec.hu = VectorXd::Constant(2, cfg.input_bound);
  if (cfg.terminal_set) {
    spec.Hf.resize(4, 2);
    spec.Hf << I2, -I2;
    spec.hf = VectorXd::Constant(4, cfg.terminal_bound);
  } else {
    spec.Hf.resize(0, 2);
    spec.hf.resize(0);
  }

  ParameterLayout L;
  L.nx = 2;
  L.nu = 1;
  L.nq = 0;
  L.ny = 2;
  L.horizon = cfg.horizon;
  ParameterBox box(VectorXd::Constant(2, -cfg.x0_bound), VectorXd::Constant(2, cfg.x0_bound));
  ProblemFamily f{std::move(sys), std::move(spec), L, std::move(box)};
  validate_family(f);
  return f;
}

// ---------------------------------------------------------------------------
// Integrated chassis control surrogate.

/// Vehicle data for the surrogate. Inputs are scaled to kN*m (yaw moment,
/// roll moment) and kN (lateral force).
struct ICCConfig {
  double speed_min = 10.0;
  double speed_max = 30.0;
  double sample_time = 0.05;
  int horizon = 3;
  double mass = 1500.0;
  double yaw_inertia = 2500.0;
  double roll_inertia = 600.0;
  double cornering_front = 60000.0;
  double cornering_rear = 60000.0;
  double dist_front = 1.2;
  double dist_rear = 1.5;
  double roll_arm = 0.5;
  double roll_stiffness = 60000.0;
  double roll_damping = 5000.0;
  VectorXd input_bound = VectorXd::Constant(3, 1.0);
  VectorXd rate_bound = VectorXd::Constant(3, 1.0);
  VectorXd output_weight = (VectorXd(3) << 10.0, 100.0, 100.0).finished();
  VectorXd input_weight = VectorXd::Constant(3, 0.1);
  // Sampling box: mild manoeuvres, so that constraints bind on a minority of
  // draws and the optimal law stays learnable from about a thousand samples.
  VectorXd x0_bound = (VectorXd(4) << 0.1, 0.03, 0.005, 0.02).finished();
  VectorXd ref_bound = (VectorXd(3) << 0.05, 0.03, 0.003).finished();
  double steer_bound = 0.005;
  VectorXd prev_input_bound = VectorXd::Constant(3, 0.25);
};

/// Continuous single-track lateral model with roll, forward-Euler
/// discretized. State: lateral velocity, yaw rate, roll angle, roll rate.
/// Output: lateral velocity, yaw rate, roll angle. A, B and E depend on the
/// longitudinal speed through 1/v terms.
inline SystemMatrices icc_matrices(const ICCConfig& c, double v) {
  const double Cf = c.cornering_front, Cr = c.cornering_rear, a = c.dist_front, b = c.dist_rear;
  const double m = c.mass, Iz = c.yaw_inertia, Ix = c.roll_inertia, hr = c.roll_arm;
  // Lateral acceleration a_y = vy' + v r expressed in state/input terms.
  Eigen::RowVector4d ay_x(-(Cf + Cr) / (m * v), (Cr * b - Cf * a) / (m * v), 0.0, 0.0);
  const Eigen::RowVector3d ay_u(0.0, 0.0, 1000.0 / m);
  const double ay_d = Cf / m;

  Eigen::Matrix4d Ac = Eigen::Matrix4d::Zero();
  Ac.row(0) = ay_x;
  Ac(0, 1) -= v;
  Ac(1, 0) = (Cr * b - Cf * a) / (Iz * v);
  Ac(1, 1) = -(Cf * a * a + Cr * b * b) / (Iz * v);
  Ac(2, 3) = 1.0;
  Ac.row(3) = (m * hr / Ix) * ay_x;
  Ac(3, 2) -= c.roll_stiffness / Ix;
  Ac(3, 3) -= c.roll_damping / Ix;

  Eigen::Matrix<double, 4, 3> Bc = Eigen::Matrix<double, 4, 3>::Zero();
  Bc.row(0) = ay_u;
  Bc(1, 0) = 1000.0 / Iz;
  Bc.row(3) = (m * hr / Ix) * ay_u;
  Bc(3, 1) += 1000.0 / Ix;

  Eigen::Vector4d Ec(ay_d, Cf * a / Iz, 0.0, (m * hr / Ix) * ay_d);

  const double Ts = c.sample_time;
  SystemMatrices out;
  out.A = MatrixXd::Identity(4, 4) + Ts * MatrixXd(Ac);
  out.B = Ts * MatrixXd(Bc);
  out.E = Ts * VectorXd(Ec);
  return out;
}

/// Output-tracking MPC with |u| <= u_bar and |u_k - u_{k-1}| <= du_bar. The
/// parameter is (x0, v, y_ref preview, steering preview, u_prev), with the
/// speed frozen over the horizon; dimension 20 at the default horizon of 3.
inline ProblemFamily build_icc_surrogate(const ICCConfig& cfg = {}) {
  if (!(cfg.speed_min > 0.0)) throw ConfigError("build_icc_surrogate: speed range must exclude 0 (1/v terms)");
  if (!(cfg.speed_max >= cfg.speed_min)) throw ConfigError("build_icc_surrogate: empty speed range");
  if (!(cfg.sample_time > 0.0) || cfg.horizon < 1) throw ConfigError("build_icc_surrogate: invalid timing");
  if (cfg.input_bound.size() != 3 || cfg.rate_bound.size() != 3 || cfg.output_weight.size() != 3 ||
      cfg.input_weight.size() != 3 || cfg.x0_bound.size() != 4 || cfg.ref_bound.size() != 3 ||
      cfg.prev_input_bound.size() != 3) {
    throw ConfigError("build_icc_surrogate: vector settings have wrong sizes");
  }
  if ((cfg.input_bound.array() <= 0).any() || (cfg.rate_bound.array() <= 0).any() ||
      (cfg.output_weight.array() <= 0).any() || (cfg.input_weight.array() <= 0).any() ||
      (cfg.x0_bound.array() < 0).any() || (cfg.ref_bound.array() < 0).any() || cfg.steer_bound < 0 ||
      (cfg.prev_input_bound.array() < 0).any()) {
    throw ConfigError("build_icc_surrogate: bounds and weights must be positive");
  }
  MatrixXd C = MatrixXd::Zero(3, 4);
  C(0, 0) = C(1, 1) = C(2, 2) = 1.0;
  LPVSystem sys("icc-surrogate", 4, 3, VectorXd::Constant(1, cfg.speed_min), VectorXd::Constant(1, cfg.speed_max),
                [cfg](const VectorXd& q) { return icc_matrices(cfg, q[0]); }, true, C);

  MPCSpec spec;
  spec.horizon = cfg.horizon;
  spec.tracking = true;
  spec.Q = cfg.output_weight.asDiagonal();
  spec.Qf = MatrixXd::Zero(3, 3);
  spec.R = cfg.input_weight.asDiagonal();
  spec.Hx.resize(0, 4);
  spec.hx.resize(0);
  MatrixXd I3 = MatrixXd::Identity(3, 3);
  spec.Hu.resize(6, 3);
  spec.Hu << I3, -I3;
  spec.hu.resize(6);
  spec.hu << cfg.input_bound, cfg.input_bound;
  spec.rate_bound = cfg.rate_bound;
  spec.Hf.resize(0, 4);
  spec.hf.resize(0);

  ParameterLayout L;
  L.nx = 4;
  L.nu = 3;
  L.nq = 1;
  L.ny = 3;
  L.horizon = cfg.horizon;
  L.frozen_schedule = true;
  L.has_reference = true;
  L.has_preview = true;
  L.has_prev_input = true;

  VectorXd lo(L.dim()), hi(L.dim());
  lo.segment(L.x_offset(), 4) = -cfg.x0_bound;
  hi.segment(L.x_offset(), 4) = cfg.x0_bound;
  lo[L.q_offset()] = cfg.speed_min;
  hi[L.q_offset()] = cfg.speed_max;
  for (int k = 0; k < cfg.horizon; ++k) {
    lo.segment(L.ref_offset() + 3 * k, 3) = -cfg.ref_bound;
    hi.segment(L.ref_offset() + 3 * k, 3) = cfg.ref_bound;
  }
  lo.segment(L.preview_offset(), cfg.horizon).setConstant(-cfg.steer_bound);
  hi.segment(L.preview_offset(), cfg.horizon).setConstant(cfg.steer_bound);
  lo.segment(L.prev_offset(), 3) = -cfg.prev_input_bound;
  hi.segment(L.prev_offset(), 3) = cfg.prev_input_bound;

  ProblemFamily f{std::move(sys), std::move(spec), L, ParameterBox(lo, hi)};
  validate_family(f);
  return f;
}

}  // namespace certmpc
