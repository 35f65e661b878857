#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "srnn/integrators.hpp"
#include "srnn/learning.hpp"
#include "srnn/systems.hpp"

namespace srnn {

/// Error metrics of one model. NaN marks a metric that was not evaluated
/// (no truth potential, forcing present for the energy metric, ...).
/// A diverged rollout sets dq and dR to +inf and diverged = true.
struct MetricsReport {
  double dq = 0.0;       // mean |q_pred - q_true|, stacked over bodies
  double dR = 0.0;       // mean sum_i geodesic(R_true,i, R_pred,i)
  double dp_dot = 0.0;   // mean |p_hat - p_true| / dt over one-step predictions
  double dPi_dot = 0.0;  // same for Pi
  double dVdq = 0.0;     // mean |dV/dq learned - truth|
  double dVdR = 0.0;     // mean |torque(dV/dR learned - truth)|
  double max_defect = 0.0;
  double max_H_error = 0.0;  // relative, or absolute if H_absolute
  bool H_absolute = false;
  std::size_t steps = 0;
  bool diverged = false;

  /// Field-wise; doubles compare by bit pattern so NaN == NaN.
  friend bool operator==(const MetricsReport& a, const MetricsReport& b);
};

struct TrajectoryErrors {
  double dq = 0.0;
  double dR = 0.0;
};

/// Mean over snapshots of the stacked position error and of the summed
/// per-body geodesic attitude error. Throws std::invalid_argument on a length
/// or body-count mismatch.
TrajectoryErrors metric_trajectory(std::span<const SystemState> pred, std::span<const SystemState> truth);

enum class Split { All, Train, Val };

/// All snapshots of the selected trajectories, in file order.
std::vector<SystemState> dataset_states(const Dataset& d, Split split);

struct ForceErrors {
  double dp_dot = 0.0;
  double dPi_dot = 0.0;
  bool diverged = false;
};

/// One-step predictions between consecutive snapshots: `substeps` steps of
/// size dt / substeps from snapshot k, then (p_hat - p_true) / dt against
/// snapshot k+1. Means of the stacked norms over all pairs.
ForceErrors metric_force_errors(const StepContext& model, StepScheme scheme, const Dataset& d,
                                std::size_t substeps = 1, Split split = Split::All);

struct GradErrors {
  double dVdq = 0.0;
  double dVdR = 0.0;
};

/// q-gradients compared directly; R-gradients only through
/// skew_project_torque, so symmetric parts of R^T dV/dR do not count.
GradErrors metric_potential_grad_errors(const PotentialModel& learned, const PotentialModel& truth,
                                        std::span<const SystemState> states);

struct ConservationErrors {
  double max_defect = 0.0;
  double max_H_error = 0.0;
  bool H_absolute = false;  // H(0) == 0, absolute error reported
};

ConservationErrors metric_conservation(std::span<const SystemState> traj, const SystemParams& params,
                                       const PotentialModel& V);

struct EvalSpec {
  StepScheme scheme = StepScheme::LieT2;
  std::size_t H = 1;        // integrator steps per dataset interval
  std::size_t steps = 500;  // integrator steps per rollout, a multiple of H
  IntegratorOptions options;
  Split split = Split::Val;
};

/// Rolls `model` (h = dt / H) from the first snapshot of every selected
/// trajectory and compares against the dataset every H steps. Force metrics
/// use the same split; gradient metrics need both residual potentials
/// (learned part and truth part over v_point) and run along the dataset.
MetricsReport evaluate_dynamics(const StepContext& model, const Dataset& d, const EvalSpec& spec,
                                const PotentialModel* learned_resid = nullptr,
                                const PotentialModel* truth_resid = nullptr);
MetricsReport evaluate_model(const LearnedDynamics& model, const Dataset& d, const EvalSpec& spec,
                             const PotentialModel* truth_resid = nullptr);

/// Shortest text that reads back to the same double.
std::string format_real(double x);

/// Fixed column order:
///   label,dq,dR,dp_dot,dPi_dot,dVdq,dVdR,max_defect,max_H_error,H_absolute,steps,diverged
using LabeledReport = std::pair<std::string, MetricsReport>;
void write_metrics_csv(std::ostream& os, std::span<const LabeledReport> rows);
std::vector<LabeledReport> read_metrics_csv(std::istream& is);

/// Non-finite numbers are written as the strings "nan", "inf", "-inf".
std::string metrics_to_json(const MetricsReport& r);
MetricsReport metrics_from_json(const std::string& text);

// ---- convergence -----------------------------------------------------------

struct ConvergenceSpec {
  std::vector<StepScheme> schemes;
  std::vector<double> h;
  double T = 1.0;
  double h_ref = 0.0;  // 0: min(h) / 100
  StepScheme reference = StepScheme::LieRK4;
  IntegratorOptions options;
};

struct ConvergenceRow {
  StepScheme scheme = StepScheme::LieT2;
  double h = 0.0;
  double err_q = 0.0;  // stacked position error at T
  double err_R = 0.0;  // summed geodesic error at T
  double slope = 0.0;  // the scheme's fitted slope, repeated on each row
  bool diverged = false;
};

struct ConvergenceResult {
  std::vector<ConvergenceRow> rows;  // scheme-major, h in the given order
  double slope(StepScheme s) const;
};

/// Global error at time T against a reference run at h_ref. The slope is the
/// least-squares fit of log(err_q + err_R) on log h over the rows that did
/// not diverge. Every T / h must be an integer.
ConvergenceResult convergence_study(const System& sys, const ConvergenceSpec& spec);

/// Header `scheme,h,err_q,err_R,slope`; diverged rows carry inf errors.
void write_convergence_csv(std::ostream& os, const ConvergenceResult& r);
ConvergenceResult read_convergence_csv(std::istream& is);

}  // namespace srnn
