#pragma once

#include <span>
#include <vector>

#include "srnn/geometry.hpp"

namespace srnn {

class PotentialModel;
class ForcingModel;

/// Mass and principal-axis inertia of one body. Only the diagonal of J is
/// stored; the body frame is the principal frame.
struct BodyParams {
  double mass = 1.0;
  Vec3 inertia{1.0, 1.0, 1.0};

  /// Validates m > 0 and J > 0. Violated triangle inequalities are reported on
  /// std::clog but accepted.
  static BodyParams make(double mass, const Vec3& inertia);
  /// Rejects a non-diagonal inertia matrix instead of diagonalizing it.
  static BodyParams from_matrix(double mass, const Mat3& inertia);

  Vec3 inverse_inertia() const { return {1.0 / inertia.x, 1.0 / inertia.y, 1.0 / inertia.z}; }
};

struct SystemParams {
  std::vector<BodyParams> bodies;
  double G = 1.0;

  std::size_t size() const { return bodies.size(); }
};

struct BodyState {
  Vec3 q;   // position (inertial frame)
  Vec3 p;   // linear momentum (inertial frame)
  Mat3 R = Mat3::identity();  // body -> inertial attitude
  Vec3 Pi;  // angular momentum (body frame)

  friend bool operator==(const BodyState&, const BodyState&) = default;
};

struct SystemState {
  double t = 0.0;
  std::vector<BodyState> bodies;

  std::size_t size() const { return bodies.size(); }
  friend bool operator==(const SystemState&, const SystemState&) = default;
};

struct BodyDerivatives {
  Vec3 dq;
  Vec3 dp;
  Mat3 dR;
  Vec3 dPi;
};

using Derivatives = std::vector<BodyDerivatives>;

/// J_d = tr(J)/2 * I - J, the second moment of the mass distribution.
Mat3 nonstandard_inertia(const BodyParams& body);

double kinetic_energy(const SystemState& state, const SystemParams& params);
double hamiltonian(const SystemState& state, const SystemParams& params, const PotentialModel& potential);

/// (R^T dV/dR - (dV/dR)^T R)^vee, the generalized torque that enters dPi/dt
/// with a minus sign.
Vec3 skew_project_torque(const Mat3& R, const Mat3& dVdR);

/// Right-hand side of the rigid-body equations of motion.
Derivatives eom(const SystemState& state, const SystemParams& params, const PotentialModel& potential,
                const ForcingModel& forcing);

void check_consistent(const SystemState& state, const SystemParams& params);
bool all_finite(const SystemState& state);

}  // namespace srnn
