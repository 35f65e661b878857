#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "srnn/evaluation.hpp"
#include "srnn/learning.hpp"
#include "srnn/systems.hpp"

namespace srnn {

/// Malformed or schema-violating configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BodySpec {
  double mass = 1.0;
  Vec3 inertia{1.0, 1.0, 1.0};
  std::string shape = "point";  // point | cuboid
  Vec3 q, p, Pi;
  Mat3 R = Mat3::identity();
};

struct SystemSpec {
  // toy_precession | toy_point_mass | free_body | trappist_like | custom
  std::string preset = "toy_precession";
  ToyOptions toy;
  Vec3 free_J{1.0, 2.0, 3.0};
  Vec3 free_Pi{1.0, 0.1, 0.5};
  double G = 1.0;                // custom only
  std::vector<BodySpec> bodies;  // custom only
};

/// Everything a CLI run needs. JSON layout (all sections optional, unknown
/// keys rejected, seeds required wherever a section has one):
///   schema_version                          must be 1
///   system      preset, toy{...}, free_body{J, Pi}, G, bodies[{mass, inertia,
///               shape, q, p, R (9, row-major), Pi}]
///   truth       potential: preset | zero | point_mass | point_quadrupole;
///               drag_p, drag_Pi
///   integrator  scheme, h, steps, substeps, options{verlet_literal,
///               asym_literal_left, cf_literal_left, cf4_literal_stage}
///   data        L, K, dt, fine_h, noise_sigma, seed, max_retries, path
///   model       width, depth, learn_potential, conservative_only,
///               potential_output_scale, forcing_output_scale,
///               normalize_inputs, init_seed
///   training    batch_size, lr, beta1, beta2, eps, weight_decay, K_loss,
///               max_epochs, steps_per_epoch, patience, min_improvement, seed
///   evaluation  steps, split, schemes, checkpoint, trajectory, reference
///   convergence schemes, h, T, h_ref, reference
///   output      dir
/// integrator.substeps is the number of integrator steps per recorded
/// snapshot: the save stride of `simulate` and H = dt / h for training and
/// evaluation.
struct RunConfig {
  int schema_version = 1;
  SystemSpec system;

  std::string truth_potential = "preset";
  double drag_p = 0.0;
  double drag_Pi = 0.0;

  StepScheme scheme = StepScheme::LieT2;
  double h = 0.01;
  std::size_t steps = 1000;
  std::size_t substeps = 1;
  IntegratorOptions options;

  GenerateOptions data;
  std::string dataset_path;

  ModelConfig model;
  TrainConfig training;

  std::size_t eval_steps = 500;
  Split eval_split = Split::Val;
  std::vector<StepScheme> compare_schemes{std::begin(kAllSchemes), std::end(kAllSchemes)};
  std::string checkpoint;
  std::string trajectory;
  std::string reference;

  ConvergenceSpec convergence;

  std::string out_dir = "out";
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
/// Canonical form with every field spelled out; parse_config accepts it and
/// reproduces the same text.
std::string config_to_json(const RunConfig& cfg);

/// Parameters, initial state and truth models for the configured system.
System build_system(const RunConfig& cfg);
/// The truth potential minus v_point, for gradient metrics. Null when the
/// truth is not point mass plus a known residual.
PotentialPtr truth_residual(const RunConfig& cfg);

/// Training settings with the rollout filled from the integrator section.
TrainConfig training_config(const RunConfig& cfg);

std::string to_string(Split s);
Split parse_split(const std::string& s);

}  // namespace srnn
