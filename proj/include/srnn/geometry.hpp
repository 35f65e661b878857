#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

namespace srnn {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }

  friend Vec3 operator+(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator-(const Vec3& a) { return {-a.x, -a.y, -a.z}; }
  friend Vec3 operator*(const Vec3& a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend Vec3 operator*(double s, const Vec3& a) { return {a.x * s, a.y * s, a.z * s}; }
  Vec3& operator+=(const Vec3& b) { return *this = *this + b; }
  Vec3& operator-=(const Vec3& b) { return *this = *this - b; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{};

  double operator()(int r, int c) const { return m[3 * r + c]; }
  double& operator()(int r, int c) { return m[3 * r + c]; }

  static Mat3 identity() { return {{1, 0, 0, 0, 1, 0, 0, 0, 1}}; }
  static Mat3 zero() { return {}; }
  static Mat3 diag(const Vec3& d) { return {{d.x, 0, 0, 0, d.y, 0, 0, 0, d.z}}; }

  friend Mat3 operator+(const Mat3& a, const Mat3& b) {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = a.m[i] + b.m[i];
    return r;
  }
  friend Mat3 operator-(const Mat3& a, const Mat3& b) {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = a.m[i] - b.m[i];
    return r;
  }
  friend Mat3 operator*(const Mat3& a, double s) {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = a.m[i] * s;
    return r;
  }
  friend Mat3 operator*(double s, const Mat3& a) { return a * s; }
  friend bool operator==(const Mat3&, const Mat3&) = default;
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
// Componentwise product.
inline Vec3 hadamard(const Vec3& a, const Vec3& b) { return {a.x * b.x, a.y * b.y, a.z * b.z}; }

Mat3 transpose(const Mat3& a);
// A*B
Mat3 mul(const Mat3& a, const Mat3& b);
// A*v
Vec3 mul(const Mat3& a, const Vec3& v);
// A^T*B, accumulated in the same order as mul(transpose(a), b).
Mat3 tmul(const Mat3& a, const Mat3& b);
// A^T*v
Vec3 tmul(const Mat3& a, const Vec3& v);
inline Mat3 operator*(const Mat3& a, const Mat3& b) { return mul(a, b); }
inline Vec3 operator*(const Mat3& a, const Vec3& v) { return mul(a, v); }

double trace(const Mat3& a);
double frobenius_norm(const Mat3& a);
double determinant(const Mat3& a);
// Frobenius inner product <A, B> = tr(A^T B).
double inner(const Mat3& a, const Mat3& b);
Mat3 outer(const Vec3& a, const Vec3& b);

/// Cross-product matrix: hat(u) * v == cross(u, v).
Mat3 hat(const Vec3& u);

/// Inverse of hat. Throws std::invalid_argument if m is not skew-symmetric
/// within `tol` (absolute, per entry pair).
Vec3 vee(const Mat3& m, double tol = 1e-9);

/// vee(M - M^T) without the skew check; M - M^T is skew by construction.
Vec3 skew_vee(const Mat3& m);

/// A validated element of SO(3). Construction checks orthonormality and
/// determinant but never re-projects.
class Rotation {
 public:
  static constexpr double kTolerance = 1e-9;

  Rotation() : m_(Mat3::identity()) {}
  explicit Rotation(const Mat3& m);

  const Mat3& matrix() const { return m_; }
  operator const Mat3&() const { return m_; }

  Rotation inverse() const;
  friend Rotation operator*(const Rotation& a, const Rotation& b);
  friend Vec3 operator*(const Rotation& a, const Vec3& v) { return mul(a.m_, v); }

 private:
  struct Unchecked {};
  Rotation(const Mat3& m, Unchecked) : m_(m) {}
  friend Rotation exp_so3(const Vec3& omega);
  Mat3 m_;
};

/// Exponential map so(3) -> SO(3) (Rodrigues). For |omega| < 1e-8 the
/// sin/cos coefficients are replaced by their second-order Taylor expansions.
Rotation exp_so3(const Vec3& omega);

/// Rotation by `angle` about `axis`; identity if the axis or angle is zero.
Rotation rot_axis(const Vec3& axis, double angle);
Rotation rot_x(double angle);
Rotation rot_y(double angle);
Rotation rot_z(double angle);

/// Angle of the relative rotation a^T b, in [0, pi].
double geodesic_distance(const Mat3& a, const Mat3& b);

/// ||m^T m - I||_F. Zero for exact rotations.
double orthonormality_defect(const Mat3& m);

/// Closest rotation in the Frobenius sense (polar factor). Used only for
/// diagnostics of off-manifold matrices.
Mat3 project_to_so3(const Mat3& m);

inline bool all_finite(const Vec3& v) { return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z); }
inline bool all_finite(const Mat3& a) {
  for (double v : a.m)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace srnn
