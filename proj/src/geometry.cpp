#include "srnn/geometry.hpp"

#include <algorithm>
#include <string>

namespace srnn {

Mat3 transpose(const Mat3& a) {
  return {{a(0, 0), a(1, 0), a(2, 0), a(0, 1), a(1, 1), a(2, 1), a(0, 2), a(1, 2), a(2, 2)}};
}

Mat3 mul(const Mat3& a, const Mat3& b) {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = a(i, 0) * b(0, j) + a(i, 1) * b(1, j) + a(i, 2) * b(2, j);
  return r;
}

Vec3 mul(const Mat3& a, const Vec3& v) {
  return {a(0, 0) * v.x + a(0, 1) * v.y + a(0, 2) * v.z, a(1, 0) * v.x + a(1, 1) * v.y + a(1, 2) * v.z,
          a(2, 0) * v.x + a(2, 1) * v.y + a(2, 2) * v.z};
}

Mat3 tmul(const Mat3& a, const Mat3& b) {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = a(0, i) * b(0, j) + a(1, i) * b(1, j) + a(2, i) * b(2, j);
  return r;
}

Vec3 tmul(const Mat3& a, const Vec3& v) {
  return {a(0, 0) * v.x + a(1, 0) * v.y + a(2, 0) * v.z, a(0, 1) * v.x + a(1, 1) * v.y + a(2, 1) * v.z,
          a(0, 2) * v.x + a(1, 2) * v.y + a(2, 2) * v.z};
}

double trace(const Mat3& a) { return a(0, 0) + a(1, 1) + a(2, 2); }

double inner(const Mat3& a, const Mat3& b) {
  double s = 0.0;
  for (int i = 0; i < 9; ++i) s += a.m[i] * b.m[i];
  return s;
}

double frobenius_norm(const Mat3& a) { return std::sqrt(inner(a, a)); }

double determinant(const Mat3& a) {
  return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
         a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}

Mat3 outer(const Vec3& a, const Vec3& b) {
  return {{a.x * b.x, a.x * b.y, a.x * b.z, a.y * b.x, a.y * b.y, a.y * b.z, a.z * b.x, a.z * b.y, a.z * b.z}};
}

Mat3 hat(const Vec3& u) { return {{0.0, -u.z, u.y, u.z, 0.0, -u.x, -u.y, u.x, 0.0}}; }

Vec3 vee(const Mat3& m, double tol) {
  const bool skew = std::abs(m(0, 0)) <= tol && std::abs(m(1, 1)) <= tol && std::abs(m(2, 2)) <= tol &&
                    std::abs(m(2, 1) + m(1, 2)) <= tol && std::abs(m(0, 2) + m(2, 0)) <= tol &&
                    std::abs(m(1, 0) + m(0, 1)) <= tol;
  if (!skew) throw std::invalid_argument("vee: matrix is not skew-symmetric");
  return {m(2, 1), m(0, 2), m(1, 0)};
}

Vec3 skew_vee(const Mat3& m) { return {m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)}; }

Rotation::Rotation(const Mat3& m) : m_(m) {
  const double defect = orthonormality_defect(m);
  const double det = determinant(m);
  if (!(defect <= kTolerance) || !(std::abs(det - 1.0) <= kTolerance))
    throw std::invalid_argument("Rotation: matrix is not in SO(3) (defect " + std::to_string(defect) + ", det " +
                                std::to_string(det) + ")");
}

Rotation Rotation::inverse() const { return Rotation(transpose(m_), Unchecked{}); }

Rotation operator*(const Rotation& a, const Rotation& b) { return Rotation(mul(a.m_, b.m_), Rotation::Unchecked{}); }

Rotation exp_so3(const Vec3& omega) {
  const double theta2 = dot(omega, omega);
  const double theta = std::sqrt(theta2);
  double a;  // sin(t)/t
  double b;  // (1 - cos(t))/t^2
  if (theta < 1e-8) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    const double s = std::sin(0.5 * theta);
    a = std::sin(theta) / theta;
    b = 2.0 * s * s / theta2;
  }
  const Mat3 w = hat(omega);
  const Mat3 w2 = mul(w, w);
  Mat3 r = Mat3::identity();
  for (int i = 0; i < 9; ++i) r.m[i] = r.m[i] + a * w.m[i] + b * w2.m[i];
  return Rotation(r, Rotation::Unchecked{});
}

Rotation rot_axis(const Vec3& axis, double angle) {
  const double n = norm(axis);
  if (n == 0.0 || angle == 0.0) return Rotation();
  return exp_so3(axis * (angle / n));
}

Rotation rot_x(double angle) { return exp_so3({angle, 0.0, 0.0}); }
Rotation rot_y(double angle) { return exp_so3({0.0, angle, 0.0}); }
Rotation rot_z(double angle) { return exp_so3({0.0, 0.0, angle}); }

double geodesic_distance(const Mat3& a, const Mat3& b) {
  // atan2 form of arccos((tr M - 1) / 2), accurate for small angles.
  const Mat3 m = tmul(a, b);
  return std::atan2(0.5 * norm(skew_vee(m)), 0.5 * (trace(m) - 1.0));
}

double orthonormality_defect(const Mat3& m) { return frobenius_norm(tmul(m, m) - Mat3::identity()); }

namespace {

Mat3 inverse_transpose(const Mat3& a, double det) {
  // cofactor matrix / det == inv(a)^T
  Mat3 c;
  c(0, 0) = a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1);
  c(0, 1) = a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2);
  c(0, 2) = a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0);
  c(1, 0) = a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2);
  c(1, 1) = a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0);
  c(1, 2) = a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1);
  c(2, 0) = a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1);
  c(2, 1) = a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2);
  c(2, 2) = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
  return c * (1.0 / det);
}

}  // namespace

Mat3 project_to_so3(const Mat3& m) {
  const double scale = frobenius_norm(m);
  if (!(scale > 0.0) || !std::isfinite(scale)) return Mat3::identity();
  // Newton iteration for the polar factor, on a rescaled copy.
  Mat3 x = m * (std::sqrt(3.0) / scale);
  for (int it = 0; it < 100; ++it) {
    const double det = determinant(x);
    if (det == 0.0 || !std::isfinite(det)) return Mat3::identity();
    const Mat3 next = (x + inverse_transpose(x, det)) * 0.5;
    const double change = frobenius_norm(next - x);
    x = next;
    if (change < 1e-15) break;
  }
  if (determinant(x) < 0.0) {
    // Reflection: flip the column closest to degenerate. Only reachable for
    // matrices far off the manifold.
    for (int r = 0; r < 3; ++r) x(r, 2) = -x(r, 2);
  }
  return x;
}

}  // namespace srnn
