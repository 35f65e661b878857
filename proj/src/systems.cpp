#include "srnn/systems.hpp"

#include <cmath>
#include <numbers>

namespace srnn {

SystemState kepler_pair(const SystemParams& params, double a, double e) {
  if (params.size() != 2) throw std::invalid_argument("kepler_pair: needs exactly two bodies");
  if (!(a > 0.0) || !(e >= 0.0 && e < 1.0)) throw std::invalid_argument("kepler_pair: need a > 0 and 0 <= e < 1");
  const double m0 = params.bodies[0].mass, m1 = params.bodies[1].mass;
  const double M = m0 + m1;
  const double mu = params.G * M;
  const double rp = a * (1.0 - e);
  const double vp = std::sqrt(mu * (1.0 + e) / rp);
  const double reduced = m0 * m1 / M;
  SystemState s;
  BodyState b0, b1;
  b0.q = {-m1 / M * rp, 0.0, 0.0};
  b1.q = {m0 / M * rp, 0.0, 0.0};
  b1.p = {0.0, reduced * vp, 0.0};
  b0.p = -b1.p;
  s.bodies = {b0, b1};
  return s;
}

namespace {

SystemParams toy_params(const ToyOptions& o) {
  SystemParams p;
  p.bodies = {BodyParams::make(o.star_mass, o.star_inertia), BodyParams::make(o.planet_mass, o.planet_inertia)};
  return p;
}

}  // namespace

System toy_precession(const ToyOptions& opts) {
  System s;
  s.name = "toy_precession";
  s.params = toy_params(opts);
  s.state = kepler_pair(s.params, opts.a, opts.e);
  s.state.bodies[1].Pi = {opts.planet_inertia.x * opts.planet_tilt, 0.0, opts.planet_inertia.z * opts.planet_spin};
  s.truth_V = composite_potential(
      {std::make_shared<PointMassPotential>(s.params), std::make_shared<QuadrupolePotential>(s.params)});
  s.truth_F = std::make_shared<ZeroForcing>();
  s.description = "star + oblate planet, point-mass + quadrupole truth";
  return s;
}

System toy_point_mass(const ToyOptions& opts) {
  System s = toy_precession(opts);
  s.name = "toy_point_mass";
  s.truth_V = std::make_shared<PointMassPotential>(s.params);
  s.description = "star + planet, point-mass truth";
  return s;
}

System free_body(const Vec3& J, const Vec3& Pi) {
  System s;
  s.name = "free_body";
  s.params.bodies = {BodyParams::make(1.0, J)};
  BodyState b;
  b.Pi = Pi;
  s.state.bodies = {b};
  s.truth_V = std::make_shared<ZeroPotential>();
  s.truth_F = std::make_shared<ZeroForcing>();
  s.description = "torque-free rigid body";
  return s;
}

System trappist_like() {
  constexpr double kEarthMass = 3.0035e-6;  // solar masses
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  // Periods in years; the innermost matches the 4.1e-3 yr scale.
  const double periods[7] = {4.1e-3, 6.6e-3, 1.11e-2, 1.67e-2, 2.52e-2, 3.37e-2, 5.13e-2};
  const double masses[7] = {1.37, 1.31, 0.39, 0.69, 1.04, 1.32, 0.33};  // Earth masses
  System s;
  s.name = "trappist_like";
  s.units = "AU yr Msun";
  s.description =
      "TRAPPIST-like 8-body system (star + 7 planets, circular coplanar orbits); NOT the published TRAPPIST-1 "
      "initial conditions";
  s.params.G = kTwoPi * kTwoPi;
  const double m_star = 0.0898;
  const double r_star = 5.5e-4;  // AU
  const double j_star = 0.4 * m_star * r_star * r_star;
  s.params.bodies.push_back(BodyParams::make(m_star, {j_star, j_star, 1.05 * j_star}));
  BodyState star;
  s.state.bodies.push_back(star);
  for (int k = 0; k < 7; ++k) {
    const double m = masses[k] * kEarthMass;
    const double a = std::cbrt(s.params.G * (m_star + m) * periods[k] * periods[k] / (kTwoPi * kTwoPi));
    const double r = 4.3e-5 * std::cbrt(masses[k]);  // ~ Earth radius in AU, scaled
    const double j = 0.33 * m * r * r;
    s.params.bodies.push_back(BodyParams::make(m, {j, j, 1.003 * j}));
    const double phase = 2.399963 * k;  // golden-angle spread
    const double v = std::sqrt(s.params.G * (m_star + m) / a);
    BodyState b;
    b.q = {a * std::cos(phase), a * std::sin(phase), 0.0};
    b.p = {-m * v * std::sin(phase), m * v * std::cos(phase), 0.0};
    // Tidally locked spin: one rotation per orbit.
    b.Pi = {0.0, 0.0, 1.003 * j * kTwoPi / periods[k]};
    s.state.bodies.push_back(b);
  }
  // Move to the centre-of-mass frame.
  Vec3 P, Q;
  double M = 0.0;
  for (std::size_t i = 0; i < s.params.size(); ++i) {
    P += s.state.bodies[i].p;
    Q += s.state.bodies[i].q * s.params.bodies[i].mass;
    M += s.params.bodies[i].mass;
  }
  for (std::size_t i = 0; i < s.params.size(); ++i) {
    s.state.bodies[i].q -= Q * (1.0 / M);
    s.state.bodies[i].p -= P * (s.params.bodies[i].mass / M);
  }
  s.truth_V = composite_potential(
      {std::make_shared<PointMassPotential>(s.params), std::make_shared<QuadrupolePotential>(s.params)});
  s.truth_F = std::make_shared<ZeroForcing>();
  return s;
}

}  // namespace srnn
