#pragma once

// Feedforward ReLU policies trained by regression on solver labels.
//
// A Policy maps a flattened parameter P to either the stacked input sequence
// (primal) or the constraint multipliers (dual). Inputs and outputs are
// standardized with statistics from the training data; the dual variant
// clamps its outputs at zero so that dual feasibility holds by construction.

#include <certmpc/common.hpp>
#include <certmpc/lpv_mpc.hpp>
#include <certmpc/qp_core.hpp>
#include <certmpc/qp_solver.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace certmpc {

/// Any map from a flattened parameter to a vector; trained networks and the
/// exact solver both fit behind it.
using PolicyMap = std::function<VectorXd(const VectorXd&)>;

struct DenseLayer {
  MatrixXd W;  // out x in
  VectorXd b;
};

class Policy {
 public:
  Policy() = default;

  /// Zero-initialized network with identity normalization. `widths` lists
  /// input, hidden and output widths.
  explicit Policy(std::vector<int> widths, bool clamp_nonnegative = false)
      : widths_(std::move(widths)), clamp_(clamp_nonnegative) {
    if (widths_.size() < 2) throw ContractError("Policy: need at least input and output widths");
    for (int w : widths_) {
      if (w <= 0) throw ContractError("Policy: widths must be positive");
    }
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      layers_.push_back({MatrixXd::Zero(widths_[l + 1], widths_[l]), VectorXd::Zero(widths_[l + 1])});
    }
    in_shift_ = VectorXd::Zero(input_dim());
    in_scale_ = VectorXd::Ones(input_dim());
    out_shift_ = VectorXd::Zero(output_dim());
    out_scale_ = VectorXd::Ones(output_dim());
  }

  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }
  const std::vector<int>& widths() const { return widths_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  bool clamp_nonnegative() const { return clamp_; }
  void set_clamp_nonnegative(bool on) { clamp_ = on; }
  const std::string& metadata() const { return metadata_; }
  void set_metadata(std::string m) { metadata_ = std::move(m); }

  const VectorXd& in_shift() const { return in_shift_; }
  const VectorXd& in_scale() const { return in_scale_; }
  const VectorXd& out_shift() const { return out_shift_; }
  const VectorXd& out_scale() const { return out_scale_; }

  void set_normalization(VectorXd in_shift, VectorXd in_scale, VectorXd out_shift, VectorXd out_scale) {
    require_dim(in_shift.size(), input_dim(), "Policy: input shift");
    require_dim(in_scale.size(), input_dim(), "Policy: input scale");
    require_dim(out_shift.size(), output_dim(), "Policy: output shift");
    require_dim(out_scale.size(), output_dim(), "Policy: output scale");
    if ((in_scale.array() <= 0.0).any() || (out_scale.array() <= 0.0).any()) {
      throw ContractError("Policy: normalization scales must be positive");
    }
    in_shift_ = std::move(in_shift);
    in_scale_ = std::move(in_scale);
    out_shift_ = std::move(out_shift);
    out_scale_ = std::move(out_scale);
  }

  /// Network output in normalized coordinates for normalized input z.
  VectorXd forward_normalized(const VectorXd& z) const {
    VectorXd a = z;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      VectorXd next = layers_[l].b;
      next.noalias() += layers_[l].W * a;
      if (l + 1 < layers_.size()) next = next.cwiseMax(0.0);
      a.swap(next);
    }
    return a;
  }

  VectorXd normalize_input(const VectorXd& P) const { return (P - in_shift_).cwiseQuotient(in_scale_); }
  VectorXd normalize_output(const VectorXd& y) const { return (y - out_shift_).cwiseQuotient(out_scale_); }

  VectorXd forward(const VectorXd& P) const {
    require_dim(P.size(), input_dim(), "Policy::forward: parameter");
    if (!P.allFinite()) throw ContractError("Policy::forward: non-finite input");
    VectorXd y = out_shift_ + out_scale_.cwiseProduct(forward_normalized(normalize_input(P)));
    if (clamp_) y = y.cwiseMax(0.0);
    return y;
  }

  Eigen::Index num_parameters() const {
    Eigen::Index n = 0;
    for (const auto& L : layers_) n += L.W.size() + L.b.size();
    return n;
  }

  /// theta: per layer, W in column-major order followed by b.
  VectorXd parameters() const {
    VectorXd theta(num_parameters());
    Eigen::Index k = 0;
    for (const auto& L : layers_) {
      theta.segment(k, L.W.size()) = L.W.reshaped();
      k += L.W.size();
      theta.segment(k, L.b.size()) = L.b;
      k += L.b.size();
    }
    return theta;
  }

  void set_parameters(const VectorXd& theta) {
    require_dim(theta.size(), num_parameters(), "Policy::set_parameters");
    Eigen::Index k = 0;
    for (auto& L : layers_) {
      L.W.reshaped() = theta.segment(k, L.W.size());
      k += L.W.size();
      L.b = theta.segment(k, L.b.size());
      k += L.b.size();
    }
  }

 private:
  std::vector<int> widths_;
  std::vector<DenseLayer> layers_;
  VectorXd in_shift_, in_scale_, out_shift_, out_scale_;
  bool clamp_ = false;
  std::string metadata_;
};

inline PolicyMap as_map(Policy pol) {
  return [p = std::move(pol)](const VectorXd& P) { return p.forward(P); };
}

/// Exact primal policy P -> U*(P). Throws BackupFailure when the solve fails.
inline PolicyMap oracle_primal_map(const ProblemFamily& fam, SolverOptions opts = {}) {
  return [&fam, opts](const VectorXd& P) {
    const SolveResult r = solve(condense(fam, P), opts);
    if (!r.optimal()) throw BackupFailure("oracle primal policy: solve failed", r.status);
    return r.U_star;
  };
}

/// Exact dual policy P -> lambda*(P).
inline PolicyMap oracle_dual_map(const ProblemFamily& fam, SolverOptions opts = {}) {
  return [&fam, opts](const VectorXd& P) {
    const SolveResult r = solve(condense(fam, P), opts);
    if (!r.optimal()) throw BackupFailure("oracle dual policy: solve failed", r.status);
    return r.lambda_star;
  };
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetRecord {
  VectorXd P;
  VectorXd U_star;
  VectorXd lambda_star;
  double J_star = 0.0;
  /// Primal regression target: U_star, or the optimizer of the tightened QP
  /// when the dataset was generated with a label margin.
  VectorXd U_target;
};

struct Dataset {
  std::vector<DatasetRecord> records;
  std::string family;
  std::uint64_t seed = 0;
  double solver_tolerance = 1e-8;
  double label_margin = 0.0;
  std::size_t failures = 0;
  std::string config_hash;
  ParameterBox box;

  std::size_t size() const { return records.size(); }
  int parameter_dim() const { return records.empty() ? 0 : static_cast<int>(records.front().P.size()); }
  int primal_dim() const { return records.empty() ? 0 : static_cast<int>(records.front().U_star.size()); }
  int dual_dim() const { return records.empty() ? 0 : static_cast<int>(records.front().lambda_star.size()); }
};

struct DatasetOptions {
  SolverOptions solver;
  /// Primal targets come from the QP with every right-hand side tightened by
  /// this margin, which keeps regression error from pushing learned inputs
  /// across hard constraints. U_star, lambda_star and J_star always describe
  /// the nominal QP. 0 uses U_star as the target.
  double label_margin = 0.0;
  int jobs = 1;
};

namespace detail {

/// Draws parameters from `box` until `count` of them solve to optimality.
/// Candidates are drawn sequentially from one stream and solved in parallel,
/// so results do not depend on the thread count. Failed draws are replaced
/// by fresh ones and counted.
template <typename Solved>
std::vector<Solved> draw_solved(const ParameterBox& box, std::size_t count, std::uint64_t seed, int jobs,
                                const std::function<std::optional<Solved>(const VectorXd&)>& label,
                                std::size_t* failures, const char* what) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&] {
    VectorXd P(box.dim());
    for (Eigen::Index i = 0; i < box.dim(); ++i) {
      const double t = unit(rng);
      P[i] = std::clamp((1.0 - t) * box.lower[i] + t * box.upper[i], box.lower[i], box.upper[i]);
    }
    return P;
  };
  std::vector<Solved> out;
  out.reserve(count);
  std::size_t attempts = 0;
  *failures = 0;
  while (out.size() < count) {
    const std::size_t want = count - out.size();
    std::vector<VectorXd> batch;
    batch.reserve(want);
    for (std::size_t i = 0; i < want; ++i) batch.push_back(draw());
    std::vector<std::optional<Solved>> results(want);
    parallel_for(want, jobs, [&](std::size_t i) { results[i] = label(batch[i]); });
    for (auto& r : results) {
      ++attempts;
      if (r) {
        out.push_back(std::move(*r));
      } else {
        ++*failures;
      }
    }
    if (2 * *failures > attempts) {
      throw std::runtime_error(std::string(what) + ": " + std::to_string(*failures) + " of " +
                               std::to_string(attempts) +
                               " sampled QPs failed to solve; the parameter box likely leaves the feasible region");
    }
  }
  return out;
}

}  // namespace detail

/// M labeled samples drawn i.i.d. from the family's box.
inline Dataset generate_dataset(const ProblemFamily& fam, std::size_t M, std::uint64_t seed,
                                const DatasetOptions& opts = {}) {
  if (M < 1) throw ContractError("generate_dataset: M must be at least 1");
  if (opts.label_margin < 0.0) throw ConfigError("generate_dataset: label margin must be nonnegative");
  const std::function<std::optional<DatasetRecord>(const VectorXd&)> label =
      [&](const VectorXd& P) -> std::optional<DatasetRecord> {
    DenseQP qp = condense(fam, P);
    const SolveResult r = solve(qp, opts.solver);
    if (!r.optimal()) return std::nullopt;
    DatasetRecord rec{P, r.U_star, r.lambda_star, r.J_star, r.U_star};
    if (opts.label_margin > 0.0) {
      qp.h.array() -= opts.label_margin;
      const SolveResult t = solve(qp, opts.solver);
      if (!t.optimal()) return std::nullopt;
      rec.U_target = t.U_star;
    }
    return rec;
  };
  Dataset ds;
  ds.records = detail::draw_solved<DatasetRecord>(fam.box, M, seed, opts.jobs, label, &ds.failures,
                                                  "generate_dataset");
  ds.family = fam.name();
  ds.seed = seed;
  ds.solver_tolerance = opts.solver.tolerance;
  ds.label_margin = opts.label_margin;
  ds.box = fam.box;
  return ds;
}

/// CSV layout: one comment line
///   # certmpc-dataset 1 family=<name> seed=<s> solver_tol=<t> label_margin=<b> failures=<k> config_hash=<h>
/// then a header (parameter names, U_<i>, lambda_<j>, J_star, and T_<i> for
/// the primal targets when label_margin > 0) and one record per row, all
/// numbers with 17 significant digits.
inline void write_dataset_csv(std::ostream& os, const Dataset& ds, const std::vector<std::string>& param_names) {
  char buf[40];
  os << "# certmpc-dataset 1 family=" << ds.family << " seed=" << ds.seed;
  std::snprintf(buf, sizeof buf, "%.17g", ds.solver_tolerance);
  os << " solver_tol=" << buf;
  std::snprintf(buf, sizeof buf, "%.17g", ds.label_margin);
  os << " label_margin=" << buf << " failures=" << ds.failures
     << " config_hash=" << (ds.config_hash.empty() ? "-" : ds.config_hash) << '\n';
  const int np = ds.parameter_dim(), nu = ds.primal_dim(), nl = ds.dual_dim();
  require_dim(static_cast<Eigen::Index>(param_names.size()), np, "write_dataset_csv: parameter names");
  for (int i = 0; i < np; ++i) os << (i ? "," : "") << param_names[static_cast<std::size_t>(i)];
  for (int i = 0; i < nu; ++i) os << ",U_" << i;
  for (int i = 0; i < nl; ++i) os << ",lambda_" << i;
  os << ",J_star";
  const bool targets = ds.label_margin > 0.0;
  if (targets) {
    for (int i = 0; i < nu; ++i) os << ",T_" << i;
  }
  os << '\n';
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << buf;
  };
  for (const auto& r : ds.records) {
    for (int i = 0; i < np; ++i) {
      if (i) os << ',';
      put(r.P[i]);
    }
    for (int i = 0; i < nu; ++i) os << ',', put(r.U_star[i]);
    for (int i = 0; i < nl; ++i) os << ',', put(r.lambda_star[i]);
    os << ',';
    put(r.J_star);
    if (targets) {
      for (int i = 0; i < nu; ++i) os << ',', put(r.U_target[i]);
    }
    os << '\n';
  }
}

inline Dataset read_dataset_csv(std::istream& is) {
  Dataset ds;
  std::string line;
  if (!std::getline(is, line) || line.rfind("# certmpc-dataset ", 0) != 0) {
    throw FormatError("dataset: missing '# certmpc-dataset' header line");
  }
  {
    std::istringstream hs(line.substr(2));
    std::string tok;
    hs >> tok;
    int version = 0;
    hs >> version;
    if (version != 1) throw FormatError("dataset: unsupported version " + std::to_string(version));
    while (hs >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "family") ds.family = val;
      else if (key == "seed") ds.seed = std::stoull(val);
      else if (key == "solver_tol") ds.solver_tolerance = std::stod(val);
      else if (key == "label_margin") ds.label_margin = std::stod(val);
      else if (key == "failures") ds.failures = std::stoull(val);
      else if (key == "config_hash") ds.config_hash = val == "-" ? "" : val;
    }
  }
  if (!std::getline(is, line)) throw FormatError("dataset: missing column header");
  int np = 0, nu = 0, nl = 0, nt = 0;
  {
    std::istringstream cs(line);
    std::string col;
    bool seen_j = false;
    while (std::getline(cs, col, ',')) {
      if (col.rfind("U_", 0) == 0) ++nu;
      else if (col.rfind("T_", 0) == 0) ++nt;
      else if (col.rfind("lambda_", 0) == 0) ++nl;
      else if (col == "J_star") seen_j = true;
      else ++np;
    }
    if (!seen_j) throw FormatError("dataset: column header lacks J_star");
    if (nt != 0 && nt != nu) throw FormatError("dataset: primal target columns do not match U columns");
  }
  const int width = np + nu + nl + 1 + nt;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> vals;
    vals.reserve(static_cast<std::size_t>(width));
    std::istringstream rs(line);
    std::string cell;
    while (std::getline(rs, cell, ',')) vals.push_back(std::stod(cell));
    if (static_cast<int>(vals.size()) != width) throw FormatError("dataset: row has wrong number of columns");
    DatasetRecord r;
    r.P = Eigen::Map<const VectorXd>(vals.data(), np);
    r.U_star = Eigen::Map<const VectorXd>(vals.data() + np, nu);
    r.lambda_star = Eigen::Map<const VectorXd>(vals.data() + np + nu, nl);
    r.J_star = vals[static_cast<std::size_t>(np + nu + nl)];
    r.U_target = nt ? VectorXd(Eigen::Map<const VectorXd>(vals.data() + np + nu + nl + 1, nt)) : r.U_star;
    ds.records.push_back(std::move(r));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Training

enum class Target { primal, dual };

inline const char* to_string(Target t) { return t == Target::primal ? "primal" : "dual"; }

struct TrainConfig {
  double step_size = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int epochs = 2000;
  int batch_size = 64;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  /// Stop after this many epochs without a validation improvement.
  int patience = 200;
  /// Nonnegative output clamp for dual policies.
  bool clamp_dual = true;

  void validate() const {
    if (!(step_size > 0.0)) throw ConfigError("TrainConfig: step size must be positive");
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch size must be at least 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("TrainConfig: moment decay rates must lie in [0, 1)");
    }
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw ConfigError("TrainConfig: validation fraction must lie in [0, 1)");
    }
    if (patience < 1) throw ConfigError("TrainConfig: patience must be at least 1");
  }
};

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;  // training loss of the returned checkpoint
  double best_validation_loss = 0.0;
  int best_epoch = 0;
  int epochs_run = 0;
  std::vector<double> train_loss;
  std::vector<double> validation_loss;
  /// Validation loss of the best checkpoint so far, per epoch.
  std::vector<double> best_so_far;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, int last_finite_epoch)
      : std::runtime_error(what), last_finite_epoch_(last_finite_epoch) {}
  int last_finite_epoch() const noexcept { return last_finite_epoch_; }

 private:
  int last_finite_epoch_;
};

namespace detail {

/// Forward/backward pass of the squared loss over a batch of columns.
/// Returns the mean loss; fills `grad` (same layout as Policy::parameters).
inline double loss_and_gradient(const Policy& pol, const MatrixXd& Z, const MatrixXd& Y, VectorXd* grad) {
  const auto& layers = pol.layers();
  const std::size_t L = layers.size();
  const double B = static_cast<double>(Z.cols());
  std::vector<MatrixXd> acts(L + 1);
  acts[0] = Z;
  for (std::size_t l = 0; l < L; ++l) {
    MatrixXd pre = layers[l].W * acts[l];
    pre.colwise() += layers[l].b;
    acts[l + 1] = (l + 1 < L) ? MatrixXd(pre.cwiseMax(0.0)) : pre;
  }
  MatrixXd delta = acts[L] - Y;
  const double loss = delta.squaredNorm() / B;
  if (!grad) return loss;
  grad->resize(pol.num_parameters());
  delta *= 2.0 / B;
  std::vector<Eigen::Index> offsets(L);
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < L; ++l) {
    offsets[l] = k;
    k += layers[l].W.size() + layers[l].b.size();
  }
  for (std::size_t l = L; l-- > 0;) {
    const MatrixXd gW = delta * acts[l].transpose();
    const VectorXd gb = delta.rowwise().sum();
    grad->segment(offsets[l], gW.size()) = gW.reshaped();
    grad->segment(offsets[l] + gW.size(), gb.size()) = gb;
    if (l > 0) {
      MatrixXd back = layers[l].W.transpose() * delta;
      delta = back.cwiseProduct((acts[l].array() > 0.0).cast<double>().matrix());
    }
  }
  return loss;
}

/// Coordinates whose spread is at most `rel_floor` times the widest one take
/// the widest scale. Inputs use a tiny floor (only degenerate box edges);
/// outputs use 1e-3, since a label that is zero up to solver noise would
/// otherwise be standardized into a unit-variance noise target.
inline void column_stats(const MatrixXd& X, VectorXd* mean, VectorXd* scale, double rel_floor) {
  *mean = X.rowwise().mean();
  const double n = static_cast<double>(X.cols());
  *scale = ((X.colwise() - *mean).array().square().rowwise().sum() / std::max(1.0, n - 1.0)).sqrt().matrix();
  const double widest = scale->size() ? scale->maxCoeff() : 0.0;
  const double floor = std::max(1e-12, rel_floor * widest);
  for (Eigen::Index i = 0; i < scale->size(); ++i) {
    if (!((*scale)[i] > floor)) (*scale)[i] = widest > 1e-12 ? widest : 1.0;
  }
}

}  // namespace detail

/// Fits a policy of the given widths {input, hidden..., output} to the
/// dataset's primal or dual labels with Adam on the mean squared loss.
/// Returns the checkpoint with the lowest validation loss.
inline Policy train(const Dataset& data, Target target, const std::vector<int>& widths, const TrainConfig& cfg,
                    TrainReport* report = nullptr) {
  cfg.validate();
  if (data.records.empty()) throw ContractError("train: empty dataset");
  if (widths.size() < 2) throw ContractError("train: need input and output widths");
  const int out_dim = target == Target::primal ? data.primal_dim() : data.dual_dim();
  if (widths.front() != data.parameter_dim()) {
    throw ContractError("train: input width " + std::to_string(widths.front()) + " does not match parameter dimension " +
                        std::to_string(data.parameter_dim()));
  }
  if (widths.back() != out_dim) {
    throw ContractError("train: output width " + std::to_string(widths.back()) + " does not match " +
                        to_string(target) + " dimension " + std::to_string(out_dim));
  }

  const std::size_t M = data.records.size();
  MatrixXd X(widths.front(), static_cast<Eigen::Index>(M)), Y(out_dim, static_cast<Eigen::Index>(M));
  for (std::size_t i = 0; i < M; ++i) {
    const auto& r = data.records[i];
    X.col(static_cast<Eigen::Index>(i)) = r.P;
    Y.col(static_cast<Eigen::Index>(i)) = target == Target::primal ? r.U_target : r.lambda_star;
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<Eigen::Index> order(M);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(M)));
  if (n_val >= M) n_val = M - 1;
  const std::vector<Eigen::Index> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<Eigen::Index> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

  Policy pol(widths, target == Target::dual && cfg.clamp_dual);
  {
    VectorXd in_mean, in_scale, out_mean, out_scale;
    const MatrixXd Xt = X(Eigen::all, train_idx);
    const MatrixXd Yt = Y(Eigen::all, train_idx);
    detail::column_stats(Xt, &in_mean, &in_scale, 1e-6);
    detail::column_stats(Yt, &out_mean, &out_scale, 1e-3);
    pol.set_normalization(in_mean, in_scale, out_mean, out_scale);
  }
  const MatrixXd Zn = (X.colwise() - pol.in_shift()).array().colwise() / pol.in_scale().array();
  const MatrixXd Yn = (Y.colwise() - pol.out_shift()).array().colwise() / pol.out_scale().array();
  const MatrixXd Z_train = Zn(Eigen::all, train_idx), Y_train = Yn(Eigen::all, train_idx);
  const MatrixXd Z_val = Zn(Eigen::all, val_idx), Y_val = Yn(Eigen::all, val_idx);

  // He-uniform hidden layers, Glorot-uniform output layer, zero biases.
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (std::size_t l = 0; l < pol.layers().size(); ++l) {
    auto& layer = pol.layers()[l];
    const double fan_in = static_cast<double>(layer.W.cols()), fan_out = static_cast<double>(layer.W.rows());
    const bool last = l + 1 == pol.layers().size();
    const double bound = last ? std::sqrt(6.0 / (fan_in + fan_out)) : std::sqrt(6.0 / fan_in);
    for (Eigen::Index i = 0; i < layer.W.size(); ++i) layer.W.data()[i] = bound * unit(rng);
  }

  const bool has_val = !val_idx.empty();
  auto eval_loss = [&](const MatrixXd& Z, const MatrixXd& Yt) {
    return detail::loss_and_gradient(pol, Z, Yt, nullptr);
  };

  TrainReport rep;
  rep.initial_loss = eval_loss(Z_train, Y_train);
  VectorXd theta = pol.parameters();
  VectorXd best_theta = theta;
  double best_val = has_val ? eval_loss(Z_val, Y_val) : rep.initial_loss;
  double best_train = rep.initial_loss;
  rep.best_epoch = 0;
  VectorXd m1 = VectorXd::Zero(theta.size()), m2 = VectorXd::Zero(theta.size()), grad;
  double b1t = 1.0, b2t = 1.0;
  int since_best = 0;
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  // Columns of Z_train, addressed by position within the training split.
  std::vector<Eigen::Index> local(train_idx.size());
  std::iota(local.begin(), local.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(local.begin(), local.end(), rng);
    for (std::size_t start = 0; start < local.size(); start += batch) {
      const std::size_t stop = std::min(local.size(), start + batch);
      const std::vector<Eigen::Index> idx(local.begin() + static_cast<std::ptrdiff_t>(start),
                                          local.begin() + static_cast<std::ptrdiff_t>(stop));
      const MatrixXd Zb = Z_train(Eigen::all, idx);
      const MatrixXd Yb = Y_train(Eigen::all, idx);
      detail::loss_and_gradient(pol, Zb, Yb, &grad);
      b1t *= cfg.beta1;
      b2t *= cfg.beta2;
      m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * grad;
      m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * grad.cwiseAbs2();
      theta.array() -= cfg.step_size * (m1.array() / (1.0 - b1t)) /
                       ((m2.array() / (1.0 - b2t)).sqrt() + cfg.adam_epsilon);
      pol.set_parameters(theta);
    }
    const double tl = eval_loss(Z_train, Y_train);
    const double vl = has_val ? eval_loss(Z_val, Y_val) : tl;
    if (!std::isfinite(tl) || !std::isfinite(vl)) {
      throw TrainingDiverged("train: loss became non-finite at epoch " + std::to_string(epoch), epoch - 1);
    }
    rep.train_loss.push_back(tl);
    rep.validation_loss.push_back(vl);
    rep.epochs_run = epoch;
    if (vl < best_val) {
      best_val = vl;
      best_train = tl;
      best_theta = theta;
      rep.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      rep.best_so_far.push_back(best_val);
      break;
    }
    rep.best_so_far.push_back(best_val);
  }
  pol.set_parameters(best_theta);
  rep.best_validation_loss = best_val;
  rep.final_loss = best_train;
  if (report) *report = std::move(rep);
  return pol;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::vector<Eigen::Index> checked;
  /// Coordinates whose +-step changes the ReLU activation pattern.
  std::vector<Eigen::Index> kink_coordinates;
};

namespace detail {

inline std::vector<bool> activation_pattern(const Policy& pol, const VectorXd& z) {
  std::vector<bool> pattern;
  VectorXd a = z;
  const auto& layers = pol.layers();
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    VectorXd pre = layers[l].W * a + layers[l].b;
    for (Eigen::Index i = 0; i < pre.size(); ++i) pattern.push_back(pre[i] > 0.0);
    for (Eigen::Index i = 0; i < pre.size(); ++i) {
      if (pre[i] == 0.0) pattern.push_back(true);  // exactly on a kink
    }
    a = pre.cwiseMax(0.0);
  }
  return pattern;
}

}  // namespace detail

/// Compares the backpropagated gradient of the squared loss at one sample
/// (P, target) against central differences on `coords` random coordinates of
/// theta. Relative error is |g - g_fd| / max(|g|, |g_fd|, 1e-8).
inline GradCheckResult grad_check(const Policy& pol, const VectorXd& P, const VectorXd& target,
                                  std::uint64_t seed = 0, int coords = 25, double step = 1e-5) {
  require_dim(P.size(), pol.input_dim(), "grad_check: parameter");
  require_dim(target.size(), pol.output_dim(), "grad_check: target");
  const MatrixXd z = pol.normalize_input(P);
  const MatrixXd y = pol.normalize_output(target);
  VectorXd grad;
  detail::loss_and_gradient(pol, z, y, &grad);

  const Eigen::Index np = pol.num_parameters();
  std::vector<Eigen::Index> all(static_cast<std::size_t>(np));
  std::iota(all.begin(), all.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(coords)));

  GradCheckResult out;
  Policy probe = pol;
  const VectorXd theta = pol.parameters();
  const auto base_pattern = detail::activation_pattern(pol, z);
  for (Eigen::Index j : all) {
    VectorXd tp = theta, tm = theta;
    tp[j] += step;
    tm[j] -= step;
    probe.set_parameters(tp);
    const bool kink_p = detail::activation_pattern(probe, z) != base_pattern;
    const double lp = detail::loss_and_gradient(probe, z, y, nullptr);
    probe.set_parameters(tm);
    const bool kink_m = detail::activation_pattern(probe, z) != base_pattern;
    const double lm = detail::loss_and_gradient(probe, z, y, nullptr);
    if (kink_p || kink_m) {
      out.kink_coordinates.push_back(j);
      continue;
    }
    const double fd = (lp - lm) / (2.0 * step);
    const double rel = std::abs(grad[j] - fd) / std::max({std::abs(grad[j]), std::abs(fd), 1e-8});
    out.max_relative_error = std::max(out.max_relative_error, rel);
    out.checked.push_back(j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Policy files. Little-endian binary layout:
//
//   bytes 0-7    magic "CMPCPOL\0"
//   u32          format version (1)
//   u32          flags, bit 0 = nonnegative output clamp
//   u32          L, number of width entries (layers + 1)
//   u32[L]       widths: input, hidden..., output
//   per layer    f64 W[out*in] row-major, then f64 b[out]
//   f64[in]      input shift,  f64[in] input scale
//   f64[out]     output shift, f64[out] output scale
//   u32          metadata length, then that many bytes of UTF-8 JSON

inline constexpr char kPolicyMagic[8] = {'C', 'M', 'P', 'C', 'P', 'O', 'L', '\0'};
inline constexpr std::uint32_t kPolicyVersion = 1;

static_assert(std::endian::native == std::endian::little, "policy files assume a little-endian host");

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
inline void put_f64(std::string& out, double v) { out.append(reinterpret_cast<const char*>(&v), 8); }

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  void take(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError("policy file truncated");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    take(&v, 4);
    return v;
  }
  double f64() {
    double v;
    take(&v, 8);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_policy(const Policy& pol) {
  std::string out(kPolicyMagic, sizeof kPolicyMagic);
  detail::put_u32(out, kPolicyVersion);
  detail::put_u32(out, pol.clamp_nonnegative() ? 1u : 0u);
  detail::put_u32(out, static_cast<std::uint32_t>(pol.widths().size()));
  for (int w : pol.widths()) detail::put_u32(out, static_cast<std::uint32_t>(w));
  for (const auto& L : pol.layers()) {
    for (Eigen::Index i = 0; i < L.W.rows(); ++i)
      for (Eigen::Index j = 0; j < L.W.cols(); ++j) detail::put_f64(out, L.W(i, j));
    for (Eigen::Index i = 0; i < L.b.size(); ++i) detail::put_f64(out, L.b[i]);
  }
  for (const VectorXd* v : {&pol.in_shift(), &pol.in_scale(), &pol.out_shift(), &pol.out_scale()}) {
    for (Eigen::Index i = 0; i < v->size(); ++i) detail::put_f64(out, (*v)[i]);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(pol.metadata().size()));
  out += pol.metadata();
  return out;
}

inline Policy deserialize_policy(std::string_view bytes) {
  detail::ByteReader rd(bytes);
  char magic[8];
  rd.take(magic, 8);
  if (std::memcmp(magic, kPolicyMagic, 8) != 0) throw FormatError("not a policy file (bad magic header)");
  const std::uint32_t version = rd.u32();
  if (version != kPolicyVersion) {
    throw FormatError("unsupported policy file version " + std::to_string(version) + " (expected " +
                      std::to_string(kPolicyVersion) + ")");
  }
  const std::uint32_t flags = rd.u32();
  const std::uint32_t nw = rd.u32();
  if (nw < 2 || nw > 64) throw FormatError("policy file: implausible layer count");
  std::vector<int> widths(nw);
  for (auto& w : widths) {
    const std::uint32_t v = rd.u32();
    if (v == 0 || v > (1u << 20)) throw FormatError("policy file: implausible width");
    w = static_cast<int>(v);
  }
  Policy pol(widths, (flags & 1u) != 0);
  for (auto& L : pol.layers()) {
    for (Eigen::Index i = 0; i < L.W.rows(); ++i)
      for (Eigen::Index j = 0; j < L.W.cols(); ++j) L.W(i, j) = rd.f64();
    for (Eigen::Index i = 0; i < L.b.size(); ++i) L.b[i] = rd.f64();
  }
  VectorXd is(pol.input_dim()), isc(pol.input_dim()), os(pol.output_dim()), osc(pol.output_dim());
  for (VectorXd* v : {&is, &isc, &os, &osc}) {
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = rd.f64();
  }
  pol.set_normalization(is, isc, os, osc);
  const std::uint32_t meta_len = rd.u32();
  std::string meta(meta_len, '\0');
  rd.take(meta.data(), meta_len);
  pol.set_metadata(std::move(meta));
  if (!rd.done()) throw FormatError("policy file: trailing bytes");
  return pol;
}

inline void save_policy(const Policy& pol, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = serialize_policy(pol);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path);
}

inline Policy load_policy(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_policy(ss.str());
}

/// Stable fingerprint of weights, widths, normalization and flags.
inline std::string policy_fingerprint(const Policy& pol) { return hex64(fnv1a(serialize_policy(pol))); }

}  // namespace certmpc
