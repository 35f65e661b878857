#pragma once

#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "srnn/geometry.hpp"
#include "srnn/rigidbody.hpp"

namespace srnn {

/// Raised when two bodies (or two sample points) come closer than r_min.
class SingularConfiguration : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PotentialEval {
  double value = 0.0;
  std::vector<Vec3> grad_q;  // dV/dq_i
  std::vector<Mat3> grad_R;  // dV/dR_i, unprojected

  static PotentialEval zeros(std::size_t n) {
    return {0.0, std::vector<Vec3>(n), std::vector<Mat3>(n)};
  }
};

class PotentialModel {
 public:
  virtual ~PotentialModel() = default;
  virtual PotentialEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const = 0;
  /// False if grad_R is identically zero; lets callers skip torque work.
  virtual bool has_rotation_dependence() const = 0;
  virtual std::string describe() const = 0;
};

struct ForcingEval {
  std::vector<Vec3> F_p;
  std::vector<Vec3> F_Pi;
};

class ForcingModel {
 public:
  virtual ~ForcingModel() = default;
  virtual ForcingEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R, std::span<const Vec3> p,
                               std::span<const Vec3> Pi) const = 0;
  /// True if the forcing is identically zero; integrators skip the force flow.
  virtual bool is_zero() const { return false; }
  virtual std::string describe() const = 0;
};

using PotentialPtr = std::shared_ptr<const PotentialModel>;
using ForcingPtr = std::shared_ptr<const ForcingModel>;

class ZeroPotential final : public PotentialModel {
 public:
  PotentialEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const override;
  bool has_rotation_dependence() const override { return false; }
  std::string describe() const override { return "zero"; }
};

/// Sum over pairs of -G m_i m_j / |q_i - q_j|.
class PointMassPotential final : public PotentialModel {
 public:
  explicit PointMassPotential(const SystemParams& params, double r_min = 0.0);
  PotentialEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const override;
  bool has_rotation_dependence() const override { return false; }
  std::string describe() const override { return "point_mass"; }

 private:
  std::vector<double> mass_;
  double G_;
  double r_min_;
};

/// Second-order multipole (MacCullagh) residual: for every ordered pair, the
/// quadrupole of body i seen by the point mass of body j,
///   G m_j / (2 r^3) * (tr(J_d,i) - 3 n^T R_i J_d,i R_i^T n).
/// Returns only the residual; add PointMassPotential for the full potential.
class QuadrupolePotential final : public PotentialModel {
 public:
  explicit QuadrupolePotential(const SystemParams& params, double r_min = 0.0);
  PotentialEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const override;
  bool has_rotation_dependence() const override { return true; }
  std::string describe() const override { return "quadrupole"; }

 private:
  std::vector<double> mass_;
  std::vector<Mat3> second_moment_;  // J_d per body, body frame
  double G_;
  double r_min_;
};

/// Sums values and gradients of its parts, in order.
class CompositePotential final : public PotentialModel {
 public:
  explicit CompositePotential(std::vector<PotentialPtr> parts);
  PotentialEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const override;
  bool has_rotation_dependence() const override;
  std::string describe() const override;
  const std::vector<PotentialPtr>& parts() const { return parts_; }

 private:
  std::vector<PotentialPtr> parts_;
};

PotentialPtr composite_potential(std::vector<PotentialPtr> parts);

class ZeroForcing final : public ForcingModel {
 public:
  ForcingEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R, std::span<const Vec3> p,
                       std::span<const Vec3> Pi) const override;
  bool is_zero() const override { return true; }
  std::string describe() const override { return "zero"; }
};

/// Linear drag F_p = -c_p p, F_Pi = -c_Pi Pi. Stands in for dissipative
/// forcings in tests of forcing learning.
class DragForcing final : public ForcingModel {
 public:
  DragForcing(double c_p, double c_Pi);
  ForcingEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R, std::span<const Vec3> p,
                       std::span<const Vec3> Pi) const override;
  bool is_zero() const override { return c_p_ == 0.0 && c_Pi_ == 0.0; }
  std::string describe() const override;

 private:
  double c_p_;
  double c_Pi_;
};

ForcingPtr synthetic_drag_forcing(double c_p, double c_Pi);

/// Point-sampled mass distribution in the body frame.
struct BodyShape {
  std::vector<Vec3> points;
  std::vector<double> weights;

  double mass() const;
  Vec3 center_of_mass() const;
  Mat3 second_moment() const;  // sum w x x^T
  Mat3 inertia() const;        // sum w (|x|^2 I - x x^T)
};

/// n^3 grid of equal weights whose second moments reproduce (m, J) exactly.
/// Requires J to admit a cuboid (all J_d entries > 0).
BodyShape cuboid_shape(const BodyParams& body, int n);
/// Single point carrying the whole mass.
BodyShape point_shape(double mass);

/// Brute-force discretization of the finite-body gravitational double integral.
double pointcloud_potential(std::span<const Vec3> q, std::span<const Mat3> R, std::span<const BodyShape> shapes,
                            double G, double r_min = 0.0);

/// 1e-9 of the minimum pairwise separation in `state`.
double default_r_min(const SystemState& state);

/// Split a state into the per-body spans the model interfaces expect.
struct StateViews {
  std::vector<Vec3> q, p, Pi;
  std::vector<Mat3> R;
  explicit StateViews(const SystemState& s);
};

}  // namespace srnn
