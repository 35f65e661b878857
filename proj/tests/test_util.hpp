#pragma once

#include <cmath>
#include <random>

#include "srnn/geometry.hpp"
#include "srnn/rigidbody.hpp"

namespace srnn::test {

inline Vec3 random_vec(std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  return {n(rng), n(rng), n(rng)};
}

inline Mat3 random_mat(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat3 m;
  for (double& v : m.m) v = n(rng);
  return m;
}

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> a(-3.0, 3.0);
  Vec3 axis = random_vec(rng);
  return rot_axis(axis, a(rng)).matrix();
}

inline double max_abs_diff(const Mat3& a, const Mat3& b) {
  double d = 0.0;
  for (int i = 0; i < 9; ++i) d = std::max(d, std::abs(a.m[i] - b.m[i]));
  return d;
}

inline double max_abs_diff(const Vec3& a, const Vec3& b) {
  return std::max({std::abs(a.x - b.x), std::abs(a.y - b.y), std::abs(a.z - b.z)});
}

inline double state_distance(const SystemState& a, const SystemState& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d = std::max(d, max_abs_diff(a.bodies[i].q, b.bodies[i].q));
    d = std::max(d, max_abs_diff(a.bodies[i].p, b.bodies[i].p));
    d = std::max(d, max_abs_diff(a.bodies[i].R, b.bodies[i].R));
    d = std::max(d, max_abs_diff(a.bodies[i].Pi, b.bodies[i].Pi));
  }
  return d;
}

inline SystemState random_state(std::mt19937_64& rng, std::size_t n, double spread = 3.0) {
  SystemState s;
  for (std::size_t i = 0; i < n; ++i) {
    BodyState b;
    b.q = random_vec(rng, spread) + Vec3{spread * 3.0 * static_cast<double>(i), 0.0, 0.0};
    b.p = random_vec(rng, 0.3);
    b.R = random_rotation(rng);
    b.Pi = random_vec(rng, 0.5);
    s.bodies.push_back(b);
  }
  return s;
}

}  // namespace srnn::test
