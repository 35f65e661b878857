#pragma once

#include <string>

#include "srnn/potentials.hpp"
#include "srnn/rigidbody.hpp"

namespace srnn {

/// A ready-to-run problem: parameters, initial state and the truth models.
struct System {
  std::string name;
  std::string description;
  std::string units = "G=1";
  SystemParams params;
  SystemState state;
  PotentialPtr truth_V;
  ForcingPtr truth_F;
};

/// Two bodies on a Kepler orbit with semi-major axis a and eccentricity e,
/// started at periapsis in the centre-of-mass frame, orbit in the xy plane.
/// Attitudes are identity and Pi is zero.
SystemState kepler_pair(const SystemParams& params, double a, double e);

struct ToyOptions {
  double star_mass = 1.0;
  double planet_mass = 0.1;
  Vec3 star_inertia{0.01, 0.01, 0.01};
  Vec3 planet_inertia{0.004, 0.004, 0.006};
  double a = 1.0;
  double e = 0.3;
  double planet_spin = 0.0;  // angular rate about the body z axis
  double planet_tilt = 0.0;  // angular rate about the body x axis; nonzero nutates
};

/// Star and oblate planet. Truth is v_point + v_quadrupole; the quadrupole
/// makes the orbit precess relative to the point-mass model.
System toy_precession(const ToyOptions& opts = {});

/// Point-mass truth only; the same bodies as toy_precession.
System toy_point_mass(const ToyOptions& opts = {});

/// Single torque-free body with principal inertia J and body momentum Pi.
System free_body(const Vec3& J, const Vec3& Pi);

/// Star and seven planets with TRAPPIST-1-like masses and periods, in units
/// of AU, yr and solar masses (G = 4 pi^2). This is NOT the published system:
/// initial conditions are circular, coplanar orbits from Kepler's third law.
System trappist_like();

}  // namespace srnn
