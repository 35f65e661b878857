#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "srnn/autodiff.hpp"
#include "srnn/integrators.hpp"
#include "srnn/potentials.hpp"

namespace srnn {

// ---- datasets --------------------------------------------------------------

struct Trajectory {
  std::vector<SystemState> snapshots;  // K+1 states, spacing dt
  bool train = true;
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct Dataset {
  SystemParams params;
  std::size_t K = 0;
  double dt = 0.0;
  std::string units = "G=1";
  std::uint64_t seed = 0;
  std::string truth;
  std::vector<Trajectory> trajectories;

  std::size_t num_bodies() const { return params.size(); }
  std::size_t num_train() const;
  friend bool operator==(const Dataset& a, const Dataset& b);
};

/// Structured text. Header lines (key value), then one block per trajectory:
///   srnn-dataset 1
///   N <n>  L <l>  K <k>  dt <dt>  units <text>  seed <u64>  truth <text>  G <g>
///   body <m> <J1> <J2> <J3>        (N lines)
///   trajectory <index> train|val   then K+1 snapshot lines
/// Snapshot line: t, then per body q(3) p(3) R(9, row-major) Pi(3).
/// Reals use the shortest round-trip form, so write/read is bit-exact.
void write_dataset(std::ostream& os, const Dataset& d);
Dataset read_dataset(std::istream& is);
void save_dataset(const std::string& path, const Dataset& d);
Dataset load_dataset(const std::string& path);

/// Same snapshot-line format, without a header, for plain trajectories.
void write_snapshot(std::ostream& os, const SystemState& s);
SystemState parse_snapshot(const std::string& line, std::size_t n_bodies);
void write_trajectory(std::ostream& os, const std::vector<SystemState>& traj);
std::vector<SystemState> read_trajectory(std::istream& is, std::size_t n_bodies);

struct GenerateOptions {
  std::size_t L = 32;
  std::size_t K = 128;
  double dt = 0.1;
  double fine_h = 0.01;
  double noise_sigma = 1e-3;
  std::uint64_t seed = 0;
  std::size_t max_retries = 10;
  std::string units = "G=1";
};

/// L trajectories from multiplicatively perturbed copies of `init`,
/// integrated with LieT2 at fine_h and sampled every dt. The first
/// floor(0.8 L) trajectories are the training split. q, p, Pi components get
/// c <- c (1 + sigma xi); R gets a right factor exp(sigma xi). Trajectory l
/// draws from its own generator seeded by (seed, l).
Dataset generate_dataset(const PotentialPtr& truth_V, const ForcingPtr& truth_F, const SystemParams& params,
                         const SystemState& init, const GenerateOptions& opts);

// ---- learned model ---------------------------------------------------------

/// Per-column affine map x -> (x - shift) * inv_scale applied to MLP inputs.
struct Normalizer {
  std::vector<double> shift;
  std::vector<double> inv_scale;

  static Normalizer identity(std::size_t dim);
  bool empty() const { return shift.empty(); }
  friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

struct ModelConfig {
  std::size_t width = 256;
  std::size_t depth = 3;
  bool learn_potential = true;
  bool conservative_only = true;  // no forcing network
  double potential_output_scale = 1.0;
  double forcing_output_scale = 1.0;
  bool normalize_inputs = true;
  std::uint64_t init_seed = 0;
};

/// v_point (known) + V_resid (MLP on [q_i, R_i]) and an optional forcing MLP
/// on [q_i, R_i, p_i, Pi_i] with 6N outputs [F_p,i, F_Pi,i].
struct LearnedDynamics {
  SystemParams params;
  std::optional<Mlp> V;
  Normalizer V_norm;
  std::optional<Mlp> F;
  Normalizer F_norm;

  static LearnedDynamics make(const SystemParams& params, const ModelConfig& cfg);
  /// Fits the input normalizers to the training split (mean/std of q, p, Pi
  /// columns; R columns untouched).
  void fit_normalizers(const Dataset& d);

  bool conservative_only() const { return !F.has_value(); }
  PotentialPtr potential() const;
  ForcingPtr forcing() const;
  StepContext context(double h, const IntegratorOptions& options = {}) const;

  /// Weights, normalizers and output scales under names like "V.W0",
  /// "V.shift", "F.output_scale".
  std::vector<NamedTensor> named_tensors() const;
  /// Inverse of named_tensors(): rebuilds both networks from the names.
  void assign_tensors(const std::vector<NamedTensor>& tensors);
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
};

/// PotentialModel adapter; evaluates the network on a single-row no-grad tape
/// with the same routine used during training.
class LearnedPotential final : public PotentialModel {
 public:
  LearnedPotential(Mlp net, Normalizer norm);
  PotentialEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const override;
  bool has_rotation_dependence() const override { return true; }
  std::string describe() const override { return "mlp_potential"; }

 private:
  Mlp net_;
  Normalizer norm_;
};

class LearnedForcing final : public ForcingModel {
 public:
  LearnedForcing(Mlp net, Normalizer norm);
  ForcingEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R, std::span<const Vec3> p,
                       std::span<const Vec3> Pi) const override;
  std::string describe() const override { return "mlp_forcing"; }

 private:
  Mlp net_;
  Normalizer norm_;
};

// ---- taped integration -----------------------------------------------------

/// A batch of system states on a tape: per body [B,3] q, p, Pi and [B,9] R.
struct TapedState {
  std::vector<Var> q, p, R, Pi;
  std::size_t size() const { return q.size(); }
  std::size_t batch() const { return q.front().rows(); }
};

TapedState bind_states(Tape& tape, const std::vector<SystemState>& batch);
SystemState extract_state(const TapedState& s, std::size_t row);
/// Per-row flag: every entry of that row is finite.
std::vector<bool> finite_rows(const TapedState& s);

struct TapedPotentialGrads {
  std::vector<Var> grad_q;
  std::vector<Var> grad_R;  // empty when the potential ignores rotations
  std::optional<Var> value;  // [B,1], learned part only
};

struct TapedForcing {
  std::vector<Var> F_p, F_Pi;
};

/// Learned dynamics bound to one tape. With trainable=true the weights are
/// leaves and parameters() returns them in LearnedDynamics::parameters()
/// order.
class TapedDynamics {
 public:
  TapedDynamics(Tape& tape, const LearnedDynamics& model, bool trainable);

  TapedPotentialGrads potential(const TapedState& s) const;
  std::optional<TapedForcing> forcing(const TapedState& s) const;

  TapedState step(StepScheme scheme, const TapedState& s, double h, const IntegratorOptions& opts = {}) const;
  std::vector<Var> parameters() const;

 private:
  struct Rhs {
    std::vector<Var> dq, dp, dR, dPi;
  };
  Rhs rhs(const TapedState& s) const;
  TapedState flow_ke(const TapedState& s, double h) const;
  TapedState flow_pe(const TapedState& s, double h) const;
  TapedState flow_asym(const TapedState& s, double h, bool left) const;
  TapedState flow_force(const TapedState& s, double h) const;
  TapedState lie_t2(const TapedState& s, double h, const IntegratorOptions& o) const;
  TapedState euler(const TapedState& s, double h) const;
  TapedState rk4(const TapedState& s, double h) const;
  TapedState verlet(const TapedState& s, double h, const IntegratorOptions& o) const;
  TapedState cf2(const TapedState& s, double h, const IntegratorOptions& o) const;
  TapedState cf4(const TapedState& s, double h, const IntegratorOptions& o) const;

  Tape* tape_;
  const LearnedDynamics* model_;
  std::optional<MlpVars> V_, F_;
};

/// The learned potential's value and gradients, as used by both the taped
/// rollout and LearnedPotential.
TapedPotentialGrads learned_potential_terms(const MlpVars& net, const Normalizer& norm, const std::vector<Var>& q,
                                            const std::vector<Var>& R);
TapedForcing learned_forcing_terms(const MlpVars& net, const Normalizer& norm, const std::vector<Var>& q,
                                   const std::vector<Var>& R, const std::vector<Var>& p, const std::vector<Var>& Pi);
/// v_point gradient on the tape, pair loop in the same order as PointMassPotential.
std::vector<Var> point_mass_grad(Tape& tape, const SystemParams& params, const std::vector<Var>& q);

// ---- loss and training -----------------------------------------------------

struct LossReport {
  double total = 0.0;
  double q = 0.0, p = 0.0, R = 0.0, Pi = 0.0;
  double divergence_penalty = 0.0;  // 1e6 per diverged sample, averaged over the batch
  std::size_t diverged = 0;
  std::size_t samples = 0;
};

inline constexpr double kDivergedLoss = 1e6;

/// A training example: trajectory index and first snapshot index.
struct Sample {
  std::size_t traj = 0;
  std::size_t start = 0;
};

/// All (trajectory, start) pairs of the given split with start + K_loss <= K.
std::vector<Sample> enumerate_samples(const Dataset& d, bool train, std::size_t K_loss);

struct RolloutSpec {
  StepScheme scheme = StepScheme::LieT2;
  std::size_t H = 1;       // integrator steps per observation
  std::size_t K_loss = 1;  // observations per sample entering the loss
  IntegratorOptions options;
};

/// Taped K_loss * H step prediction from `starts`. Entry k of the result is
/// the state after k observations (k = 1..K_loss).
std::vector<TapedState> predict_rollout(const TapedDynamics& dyn, const TapedState& start, double dt,
                                        const RolloutSpec& spec, std::vector<bool>* finite = nullptr);

/// Mean over batch and horizon of |dq|^2 + |dp|^2 + |dR|_F^2 + |dPi|^2.
/// `per_sample` receives each row's loss summed over the horizon.
Var srnn_loss(const std::vector<TapedState>& pred, const std::vector<TapedState>& target, LossReport* report = nullptr,
              std::vector<double>* per_sample = nullptr);

/// Loss and gradients on a batch of samples with the divergence rule: rows
/// that go non-finite or exceed kDivergedLoss are dropped and the batch is
/// re-run without them. grads is empty if every sample diverged.
struct BatchResult {
  LossReport report;
  std::vector<Tensor> grads;
};
BatchResult batch_loss(const LearnedDynamics& model, const Dataset& d, const std::vector<Sample>& samples,
                       const RolloutSpec& spec, bool with_grad);

struct TrainConfig {
  std::size_t batch_size = 256;
  AdamWConfig adam;
  RolloutSpec rollout;
  std::size_t max_epochs = 100;
  std::size_t steps_per_epoch = 0;  // 0: ceil(train samples / batch_size)
  std::size_t patience = 20;
  double min_improvement = 0.0;  // relative
  std::uint64_t seed = 0;
  bool verbose = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::size_t diverged = 0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainResult {
  LearnedDynamics model;
  AdamW optimizer;
  std::vector<EpochRecord> curve;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool diverged = false;
  std::string divergence_report;
};

/// Minibatch AdamW on the training split, validation loss per epoch, early
/// stopping with restore-best. Deterministic for a given seed.
TrainResult train(const Dataset& d, LearnedDynamics model, const TrainConfig& cfg);

struct SchemeOutcome {
  StepScheme scheme;
  TrainResult result;
};

/// train() once per scheme with everything else held fixed.
std::vector<SchemeOutcome> baseline_train_matrix(const Dataset& d, const LearnedDynamics& init,
                                                 const TrainConfig& cfg, std::span<const StepScheme> schemes);

/// Checkpoint <-> model and optimizer.
Checkpoint make_checkpoint(const LearnedDynamics& model, const AdamW& opt, const std::string& config_json);
void restore_checkpoint(const Checkpoint& c, LearnedDynamics& model, AdamW* opt);

}  // namespace srnn
