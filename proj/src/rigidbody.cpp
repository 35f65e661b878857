#include "srnn/rigidbody.hpp"

#include <iostream>

#include "srnn/potentials.hpp"

namespace srnn {

BodyParams BodyParams::make(double mass, const Vec3& inertia) {
  if (!(mass > 0.0)) throw std::invalid_argument("BodyParams: mass must be > 0");
  if (!(inertia.x > 0.0 && inertia.y > 0.0 && inertia.z > 0.0))
    throw std::invalid_argument("BodyParams: principal moments must be > 0");
  if (inertia.x + inertia.y < inertia.z || inertia.y + inertia.z < inertia.x || inertia.z + inertia.x < inertia.y)
    std::clog << "warning: principal moments (" << inertia.x << ", " << inertia.y << ", " << inertia.z
              << ") violate the triangle inequality\n";
  return {mass, inertia};
}

BodyParams BodyParams::from_matrix(double mass, const Mat3& inertia) {
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      if (r != c && inertia(r, c) != 0.0)
        throw std::invalid_argument("BodyParams: inertia must be diagonal in the body frame");
  return make(mass, {inertia(0, 0), inertia(1, 1), inertia(2, 2)});
}

Mat3 nonstandard_inertia(const BodyParams& body) {
  const Vec3& J = body.inertia;
  const double half_trace = 0.5 * (J.x + J.y + J.z);
  return Mat3::diag({half_trace - J.x, half_trace - J.y, half_trace - J.z});
}

void check_consistent(const SystemState& state, const SystemParams& params) {
  if (state.size() == 0) throw std::invalid_argument("SystemState: needs at least one body");
  if (state.size() != params.size())
    throw std::invalid_argument("SystemState has " + std::to_string(state.size()) + " bodies, params have " +
                                std::to_string(params.size()));
}

bool all_finite(const SystemState& state) {
  if (!std::isfinite(state.t)) return false;
  for (const auto& b : state.bodies)
    if (!all_finite(b.q) || !all_finite(b.p) || !all_finite(b.R) || !all_finite(b.Pi)) return false;
  return true;
}

double kinetic_energy(const SystemState& state, const SystemParams& params) {
  check_consistent(state, params);
  double e = 0.0;
  for (std::size_t i = 0; i < state.size(); ++i) {
    const auto& b = state.bodies[i];
    const auto& bp = params.bodies[i];
    e += 0.5 * dot(b.p, b.p) / bp.mass;
    e += 0.5 * dot(b.Pi, hadamard(bp.inverse_inertia(), b.Pi));
  }
  return e;
}

double hamiltonian(const SystemState& state, const SystemParams& params, const PotentialModel& potential) {
  const StateViews v(state);
  return kinetic_energy(state, params) + potential.evaluate(v.q, v.R).value;
}

Vec3 skew_project_torque(const Mat3& R, const Mat3& dVdR) { return skew_vee(tmul(R, dVdR)); }

Derivatives eom(const SystemState& state, const SystemParams& params, const PotentialModel& potential,
                const ForcingModel& forcing) {
  check_consistent(state, params);
  const StateViews v(state);
  const PotentialEval pe = potential.evaluate(v.q, v.R);
  const bool rotational = potential.has_rotation_dependence();
  const bool forced = !forcing.is_zero();
  ForcingEval fe;
  if (forced) fe = forcing.evaluate(v.q, v.R, v.p, v.Pi);

  Derivatives d(state.size());
  for (std::size_t i = 0; i < state.size(); ++i) {
    const auto& b = state.bodies[i];
    const auto& bp = params.bodies[i];
    const Vec3 omega = hadamard(b.Pi, bp.inverse_inertia());
    d[i].dq = b.p * (1.0 / bp.mass);
    d[i].dp = -pe.grad_q[i];
    d[i].dR = mul(b.R, hat(omega));
    d[i].dPi = cross(b.Pi, omega);
    if (rotational) d[i].dPi = d[i].dPi - skew_project_torque(b.R, pe.grad_R[i]);
    if (forced) {
      d[i].dp = d[i].dp + fe.F_p[i];
      d[i].dPi = d[i].dPi + fe.F_Pi[i];
    }
  }
  return d;
}

}  // namespace srnn
