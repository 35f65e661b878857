#include "srnn/potentials.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

namespace srnn {

namespace {

void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": body count mismatch");
}

}  // namespace

StateViews::StateViews(const SystemState& s) {
  const std::size_t n = s.size();
  q.reserve(n);
  p.reserve(n);
  Pi.reserve(n);
  R.reserve(n);
  for (const auto& b : s.bodies) {
    q.push_back(b.q);
    p.push_back(b.p);
    R.push_back(b.R);
    Pi.push_back(b.Pi);
  }
}

PotentialEval ZeroPotential::evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const {
  require_same_size(q.size(), R.size(), "ZeroPotential");
  return PotentialEval::zeros(q.size());
}

PointMassPotential::PointMassPotential(const SystemParams& params, double r_min) : G_(params.G), r_min_(r_min) {
  for (const auto& b : params.bodies) mass_.push_back(b.mass);
}

PotentialEval PointMassPotential::evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const {
  require_same_size(q.size(), mass_.size(), "PointMassPotential");
  require_same_size(R.size(), mass_.size(), "PointMassPotential");
  const std::size_t n = q.size();
  PotentialEval out = PotentialEval::zeros(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const Vec3 d = q[i] - q[j];
      const double r2 = dot(d, d);
      const double r = std::sqrt(r2);
      if (r <= r_min_) {
        std::ostringstream msg;
        msg << "bodies " << i << " and " << j << " coincide (r = " << r << ")";
        throw SingularConfiguration(msg.str());
      }
      const double gmm = G_ * mass_[i] * mass_[j];
      out.value += -gmm / r;
      const double coef = gmm * (1.0 / (r2 * r));
      const Vec3 g = d * coef;
      out.grad_q[i] = out.grad_q[i] + g;
      out.grad_q[j] = out.grad_q[j] - g;
    }
  }
  return out;
}

QuadrupolePotential::QuadrupolePotential(const SystemParams& params, double r_min) : G_(params.G), r_min_(r_min) {
  for (const auto& b : params.bodies) {
    mass_.push_back(b.mass);
    second_moment_.push_back(nonstandard_inertia(b));
  }
}

PotentialEval QuadrupolePotential::evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const {
  require_same_size(q.size(), mass_.size(), "QuadrupolePotential");
  require_same_size(R.size(), mass_.size(), "QuadrupolePotential");
  const std::size_t n = q.size();
  PotentialEval out = PotentialEval::zeros(n);

  // Quadrupole of body a as seen by the point mass of body b.
  auto add_term = [&](std::size_t a, std::size_t b) {
    const Vec3 d = q[a] - q[b];
    const double r2 = dot(d, d);
    const double r = std::sqrt(r2);
    if (r <= r_min_) {
      std::ostringstream msg;
      msg << "bodies " << a << " and " << b << " coincide (r = " << r << ")";
      throw SingularConfiguration(msg.str());
    }
    const Mat3& Jd = second_moment_[a];
    const double c = trace(Jd);
    const Mat3 RJ = mul(R[a], Jd);
    const Mat3 A = mul(RJ, transpose(R[a]));
    const Vec3 Ad = mul(A, d);
    const double dAd = dot(d, Ad);
    const double r3 = r2 * r;
    const double r5 = r3 * r2;
    const double r7 = r5 * r2;
    const double k = 0.5 * G_ * mass_[b];
    out.value += k * (c / r3 - 3.0 * dAd / r5);
    const Vec3 gd = d * (k * (-3.0 * c / r5 + 15.0 * dAd / r7)) - Ad * (6.0 * k / r5);
    out.grad_q[a] += gd;
    out.grad_q[b] -= gd;
    // d/dR (d^T R Jd R^T d) = 2 d d^T R Jd
    out.grad_R[a] = out.grad_R[a] + mul(outer(d, d), RJ) * (-6.0 * k / r5);
  };

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      add_term(i, j);
      add_term(j, i);
    }
  }
  return out;
}

CompositePotential::CompositePotential(std::vector<PotentialPtr> parts) : parts_(std::move(parts)) {
  if (parts_.empty()) throw std::invalid_argument("CompositePotential: needs at least one part");
  for (const auto& p : parts_)
    if (!p) throw std::invalid_argument("CompositePotential: null part");
}

PotentialEval CompositePotential::evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const {
  PotentialEval out = parts_.front()->evaluate(q, R);
  for (std::size_t k = 1; k < parts_.size(); ++k) {
    const PotentialEval e = parts_[k]->evaluate(q, R);
    out.value += e.value;
    for (std::size_t i = 0; i < out.grad_q.size(); ++i) {
      out.grad_q[i] = out.grad_q[i] + e.grad_q[i];
      out.grad_R[i] = out.grad_R[i] + e.grad_R[i];
    }
  }
  return out;
}

bool CompositePotential::has_rotation_dependence() const {
  return std::any_of(parts_.begin(), parts_.end(), [](const auto& p) { return p->has_rotation_dependence(); });
}

std::string CompositePotential::describe() const {
  std::string s;
  for (const auto& p : parts_) {
    if (!s.empty()) s += "+";
    s += p->describe();
  }
  return s;
}

PotentialPtr composite_potential(std::vector<PotentialPtr> parts) {
  return std::make_shared<CompositePotential>(std::move(parts));
}

ForcingEval ZeroForcing::evaluate(std::span<const Vec3> q, std::span<const Mat3>, std::span<const Vec3>,
                                  std::span<const Vec3>) const {
  return {std::vector<Vec3>(q.size()), std::vector<Vec3>(q.size())};
}

DragForcing::DragForcing(double c_p, double c_Pi) : c_p_(c_p), c_Pi_(c_Pi) {
  if (!(c_p >= 0.0) || !(c_Pi >= 0.0)) throw std::invalid_argument("DragForcing: coefficients must be >= 0");
}

ForcingEval DragForcing::evaluate(std::span<const Vec3> q, std::span<const Mat3>, std::span<const Vec3> p,
                                  std::span<const Vec3> Pi) const {
  ForcingEval out;
  out.F_p.reserve(q.size());
  out.F_Pi.reserve(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    out.F_p.push_back(p[i] * -c_p_);
    out.F_Pi.push_back(Pi[i] * -c_Pi_);
  }
  return out;
}

std::string DragForcing::describe() const {
  std::ostringstream s;
  s << "drag(c_p=" << c_p_ << ",c_Pi=" << c_Pi_ << ")";
  return s.str();
}

ForcingPtr synthetic_drag_forcing(double c_p, double c_Pi) { return std::make_shared<DragForcing>(c_p, c_Pi); }

double BodyShape::mass() const {
  double m = 0.0;
  for (double w : weights) m += w;
  return m;
}

Vec3 BodyShape::center_of_mass() const {
  Vec3 c;
  for (std::size_t k = 0; k < points.size(); ++k) c += points[k] * weights[k];
  return c * (1.0 / mass());
}

Mat3 BodyShape::second_moment() const {
  Mat3 s;
  for (std::size_t k = 0; k < points.size(); ++k) s = s + outer(points[k], points[k]) * weights[k];
  return s;
}

Mat3 BodyShape::inertia() const {
  const Mat3 s = second_moment();
  return Mat3::identity() * trace(s) - s;
}

BodyShape cuboid_shape(const BodyParams& body, int n) {
  if (n < 1) throw std::invalid_argument("cuboid_shape: n must be >= 1");
  const Mat3 Jd = nonstandard_inertia(body);
  const Vec3 moments{Jd(0, 0), Jd(1, 1), Jd(2, 2)};
  if (!(moments.x > 0 && moments.y > 0 && moments.z > 0))
    throw std::invalid_argument("cuboid_shape: inertia does not admit a cuboid (J_d must be positive)");
  std::vector<double> u(n);
  double mean_u2 = 0.0;
  for (int i = 0; i < n; ++i) {
    u[i] = 2.0 * (i + 0.5) / n - 1.0;
    mean_u2 += u[i] * u[i];
  }
  mean_u2 /= n;
  const Vec3 s{std::sqrt(moments.x / (body.mass * mean_u2)), std::sqrt(moments.y / (body.mass * mean_u2)),
               std::sqrt(moments.z / (body.mass * mean_u2))};
  BodyShape shape;
  const double w = body.mass / (static_cast<double>(n) * n * n);
  shape.points.reserve(static_cast<std::size_t>(n) * n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        shape.points.push_back({s.x * u[i], s.y * u[j], s.z * u[k]});
        shape.weights.push_back(w);
      }
  return shape;
}

BodyShape point_shape(double mass) { return {{Vec3{}}, {mass}}; }

double pointcloud_potential(std::span<const Vec3> q, std::span<const Mat3> R, std::span<const BodyShape> shapes,
                            double G, double r_min) {
  require_same_size(q.size(), shapes.size(), "pointcloud_potential");
  require_same_size(R.size(), shapes.size(), "pointcloud_potential");
  const std::size_t n = q.size();
  std::vector<std::vector<Vec3>> world(n);
  for (std::size_t i = 0; i < n; ++i) {
    world[i].reserve(shapes[i].points.size());
    for (const auto& x : shapes[i].points) world[i].push_back(q[i] + mul(R[i], x));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto& wi = shapes[i].weights;
      const auto& wj = shapes[j].weights;
      double pair = 0.0;
      int overlap = 0;
#pragma omp parallel for reduction(+ : pair) reduction(| : overlap) schedule(static)
      for (std::size_t k = 0; k < world[i].size(); ++k) {
        double row = 0.0;
        for (std::size_t l = 0; l < world[j].size(); ++l) {
          const double r = norm(world[i][k] - world[j][l]);
          if (r <= r_min) overlap = 1;
          row += wj[l] / r;
        }
        pair += wi[k] * row;
      }
      if (overlap) throw SingularConfiguration("pointcloud_potential: overlapping sample points");
      total += -G * pair;
    }
  }
  return total;
}

double default_r_min(const SystemState& state) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < state.size(); ++i)
    for (std::size_t j = i + 1; j < state.size(); ++j) best = std::min(best, norm(state.bodies[i].q - state.bodies[j].q));
  return std::isfinite(best) ? 1e-9 * best : 0.0;
}

}  // namespace srnn
