#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>

#include "srnn/evaluation.hpp"
#include "srnn/kernels.hpp"
#include "srnn/systems.hpp"
#include "test_util.hpp"

using namespace srnn;

namespace {

// base + edit(eval), for perturbation examples.
class EditedPotential final : public PotentialModel {
 public:
  EditedPotential(PotentialPtr base, std::function<void(std::span<const Vec3>, std::span<const Mat3>, PotentialEval&)> f)
      : base_(std::move(base)), f_(std::move(f)) {}
  PotentialEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const override {
    PotentialEval e = base_->evaluate(q, R);
    f_(q, R, e);
    return e;
  }
  bool has_rotation_dependence() const override { return true; }
  std::string describe() const override { return "edited"; }

 private:
  PotentialPtr base_;
  std::function<void(std::span<const Vec3>, std::span<const Mat3>, PotentialEval&)> f_;
};

class ScaledPotential final : public PotentialModel {
 public:
  ScaledPotential(PotentialPtr base, double c) : base_(std::move(base)), c_(c) {}
  PotentialEval evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const override {
    PotentialEval e = base_->evaluate(q, R);
    e.value *= c_;
    for (auto& g : e.grad_q) g = g * c_;
    for (auto& g : e.grad_R) g = g * c_;
    return e;
  }
  bool has_rotation_dependence() const override { return true; }
  std::string describe() const override { return "scaled"; }

 private:
  PotentialPtr base_;
  double c_;
};

// MacCullagh residual written out directly: sum over ordered pairs of
// G m_j / (2 r^3) (tr Jd_i - 3 n^T R_i Jd_i R_i^T n), Jd = tr(J)/2 I - J.
double quadrupole_value(const SystemParams& P, const SystemState& s) {
  double v = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Vec3 J = P.bodies[i].inertia;
    const double half = 0.5 * (J.x + J.y + J.z);
    const Vec3 Jd{half - J.x, half - J.y, half - J.z};
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (i == j) continue;
      const Vec3 d = s.bodies[j].q - s.bodies[i].q;
      const double r = norm(d);
      const Vec3 nb = tmul(s.bodies[i].R, d * (1.0 / r));
      const double quad = Jd.x * nb.x * nb.x + Jd.y * nb.y * nb.y + Jd.z * nb.z * nb.z;
      v += P.G * P.bodies[j].mass / (2.0 * r * r * r) * (Jd.x + Jd.y + Jd.z - 3.0 * quad);
    }
  }
  return v;
}

// |grad_q| of the residual, stacked over bodies, by central differences.
double quadrupole_force_norm(const SystemParams& P, const SystemState& s) {
  double sum = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double eps = 1e-6;
      SystemState a = s, b = s;
      a.bodies[i].q[c] += eps;
      b.bodies[i].q[c] -= eps;
      const double g = (quadrupole_value(P, a) - quadrupole_value(P, b)) / (2.0 * eps);
      sum += g * g;
    }
  }
  return std::sqrt(sum);
}

GenerateOptions clean_gen(std::size_t L, std::size_t K, double dt, double fine_h, std::uint64_t seed) {
  GenerateOptions g;
  g.L = L;
  g.K = K;
  g.dt = dt;
  g.fine_h = fine_h;
  g.noise_sigma = 0.0;
  g.seed = seed;
  return g;
}

System spinning_toy() {
  ToyOptions o;
  o.planet_spin = 2.0;
  o.planet_inertia = {0.003, 0.0045, 0.006};
  System s = toy_precession(o);
  s.state.bodies[1].Pi = s.state.bodies[1].Pi + Vec3{0.001, 0.002, 0.0};
  return s;
}

}  // namespace

TEST_CASE("trajectory metric examples") {
  std::mt19937_64 rng(5);
  std::vector<SystemState> a;
  for (int k = 0; k < 4; ++k) a.push_back(test::random_state(rng, 2));
  const auto same = metric_trajectory(a, a);
  CHECK(same.dq == 0.0);
  CHECK(same.dR == 0.0);

  SUBCASE("rotated by rot_z(pi/2)") {
    std::vector<SystemState> one(3), turned(3);
    for (int k = 0; k < 3; ++k) {
      BodyState b;
      b.R = test::random_rotation(rng);
      one[k].bodies = {b};
      b.R = b.R * rot_z(std::numbers::pi / 2).matrix();
      turned[k].bodies = {b};
    }
    CHECK(metric_trajectory(turned, one).dR == doctest::Approx(std::numbers::pi / 2).epsilon(1e-12));
  }
  SUBCASE("constant position offset") {
    std::vector<SystemState> one(5), moved(5);
    for (int k = 0; k < 5; ++k) {
      BodyState b;
      b.q = test::random_vec(rng);
      one[k].bodies = {b};
      b.q += Vec3{3, 4, 0};
      moved[k].bodies = {b};
    }
    CHECK(metric_trajectory(moved, one).dq == doctest::Approx(5.0).epsilon(1e-14));
  }
  SUBCASE("length mismatch") {
    CHECK_THROWS_AS(metric_trajectory(std::span(a).first(3), a), std::invalid_argument);
  }
}

TEST_CASE("force metric") {
  const System sys = spinning_toy();

  SUBCASE("perfect model on its own data") {
    const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, clean_gen(2, 20, 0.02, 0.02, 1));
    const StepContext ctx{sys.params, sys.truth_V, sys.truth_F, 0.02, {}};
    const ForceErrors e = metric_force_errors(ctx, StepScheme::LieT2, d);
    CHECK_FALSE(e.diverged);
    CHECK(e.dp_dot <= 1e-12);
    CHECK(e.dPi_dot <= 1e-12);
  }

  SUBCASE("zero-residual model sees the quadrupole force") {
    const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, clean_gen(2, 60, 0.01, 0.001, 2));
    const StepContext point{sys.params, std::make_shared<PointMassPotential>(sys.params), sys.truth_F, 0.01, {}};
    const ForceErrors e = metric_force_errors(point, StepScheme::LieT2, d);
    double mean = 0.0;
    std::size_t n = 0;
    for (const auto& t : d.trajectories)
      for (std::size_t k = 0; k + 1 < t.snapshots.size(); ++k, ++n) mean += quadrupole_force_norm(sys.params, t.snapshots[k]);
    mean /= static_cast<double>(n);
    MESSAGE("dp_dot " << e.dp_dot << " analytic quadrupole force " << mean);
    CHECK(e.dp_dot == doctest::Approx(mean).epsilon(0.2));
  }

  SUBCASE("doubling the residual doubles the error") {
    // Fixed data; the model misses c times the quadrupole: point + (1 - c) quad.
    auto quad = std::make_shared<QuadrupolePotential>(sys.params);
    auto point = std::make_shared<PointMassPotential>(sys.params);
    const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, clean_gen(2, 40, 0.01, 0.001, 3));
    const StepContext c1{sys.params, point, sys.truth_F, 0.01, {}};
    const StepContext c2{sys.params, composite_potential({point, std::make_shared<ScaledPotential>(quad, -1.0)}),
                         sys.truth_F, 0.01, {}};
    const double e1 = metric_force_errors(c1, StepScheme::LieT2, d).dp_dot;
    const double e2 = metric_force_errors(c2, StepScheme::LieT2, d).dp_dot;
    CHECK(e2 / e1 == doctest::Approx(2.0).epsilon(0.02));
  }
}

TEST_CASE("potential gradient metric") {
  const System sys = spinning_toy();
  const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, clean_gen(2, 10, 0.1, 0.01, 4));
  const auto states = dataset_states(d, Split::All);
  auto truth = std::make_shared<QuadrupolePotential>(sys.params);

  const GradErrors same = metric_potential_grad_errors(*truth, *truth, states);
  CHECK(same.dVdq == 0.0);
  CHECK(same.dVdR == 0.0);

  SUBCASE("symmetric R-gradient part is invisible") {
    std::mt19937_64 rng(8);
    Mat3 S = test::random_mat(rng);
    S = S + transpose(S);
    const EditedPotential learned(truth, [S](auto, std::span<const Mat3> R, PotentialEval& e) {
      for (std::size_t i = 0; i < R.size(); ++i) e.grad_R[i] = e.grad_R[i] + R[i] * S;
    });
    const GradErrors g = metric_potential_grad_errors(learned, *truth, states);
    CHECK(g.dVdq == 0.0);
    CHECK(g.dVdR <= 1e-14 * frobenius_norm(S));
    // A skew part is visible.
    const EditedPotential skewed(truth, [](auto, std::span<const Mat3> R, PotentialEval& e) {
      for (std::size_t i = 0; i < R.size(); ++i) e.grad_R[i] = e.grad_R[i] + R[i] * hat({0.0, 0.0, 1e-3});
    });
    CHECK(metric_potential_grad_errors(skewed, *truth, states).dVdR > 1e-3);
  }

  SUBCASE("extra q potential enters linearly") {
    // Harmonic coupling 0.5 k |q0 - q1|^2, gradient +-k (q0 - q1).
    const double k = 0.7, c = 0.25;
    const EditedPotential learned(truth, [k, c](std::span<const Vec3> q, auto, PotentialEval& e) {
      const Vec3 g = (q[0] - q[1]) * (c * k);
      e.grad_q[0] += g;
      e.grad_q[1] -= g;
    });
    double expect = 0.0;
    for (const auto& s : states) expect += std::sqrt(2.0) * k * norm(s.bodies[0].q - s.bodies[1].q);
    expect *= c / static_cast<double>(states.size());
    const GradErrors g = metric_potential_grad_errors(learned, *truth, states);
    CHECK(g.dVdq == doctest::Approx(expect).epsilon(1e-12));
    CHECK(g.dVdR == 0.0);
  }
}

TEST_CASE("conservation metric") {
  SUBCASE("closed-form free sphere") {
    const double j = 0.8;
    const System sys = free_body({j, j, j}, {0.3, -0.2, 0.9});
    std::vector<SystemState> traj;
    for (int k = 0; k <= 1000; ++k) {
      SystemState s = sys.state;
      s.bodies[0].R = exp_so3(sys.state.bodies[0].Pi * (0.05 * k / j)).matrix();
      traj.push_back(s);
    }
    const auto c = metric_conservation(traj, sys.params, *sys.truth_V);
    CHECK(c.max_defect <= 1e-13);
    CHECK(c.max_H_error <= 1e-13);
    CHECK_FALSE(c.H_absolute);
  }
  SUBCASE("zero energy falls back to absolute error") {
    const System sys = free_body({1, 2, 3}, {0, 0, 0});
    const std::vector<SystemState> traj{sys.state, sys.state};
    const auto c = metric_conservation(traj, sys.params, *sys.truth_V);
    CHECK(c.H_absolute);
    CHECK(c.max_H_error == 0.0);
  }
  SUBCASE("Euler defect grows monotonically") {
    const System sys = free_body({1, 2, 3}, {1.0, 0.1, 0.5});
    const StepContext ctx{sys.params, sys.truth_V, sys.truth_F, 1e-2, {}};
    const auto traj = rollout(sys.state, ctx, StepScheme::ExplicitEuler, 2000, {RolloutOptions::Keep::Stride, 200});
    double prev = 0.0;
    for (std::size_t k = 1; k <= traj.size(); ++k) {
      const double d = metric_conservation(std::span(traj).first(k), sys.params, *sys.truth_V).max_defect;
      const double last = orthonormality_defect(traj[k - 1].bodies[0].R);
      CHECK(last > prev);
      CHECK(d == last);
      prev = last;
    }
  }
  SUBCASE("LieT2 two-body energy stays bounded") {
    const System sys = spinning_toy();
    const StepContext ctx{sys.params, sys.truth_V, sys.truth_F, 1e-2, {}};
    auto traj = rollout(sys.state, ctx, StepScheme::LieT2, 20000, {RolloutOptions::Keep::Stride, 10});
    traj.insert(traj.begin(), sys.state);
    const std::size_t half = traj.size() / 2;
    const double first = metric_conservation(std::span(traj).first(half), sys.params, *sys.truth_V).max_H_error;
    const double all = metric_conservation(traj, sys.params, *sys.truth_V).max_H_error;
    MESSAGE("max rel H error, first half " << first << ", whole run " << all);
    CHECK(all < 1e-4);
    CHECK(all <= 1.5 * first);
  }
}

TEST_CASE("model evaluation") {
  const System sys = spinning_toy();
  const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, clean_gen(5, 12, 0.1, 0.025, 6));
  EvalSpec spec;
  spec.H = 4;
  spec.steps = 40;
  auto quad = std::make_shared<QuadrupolePotential>(sys.params);
  const StepContext truth{sys.params, sys.truth_V, sys.truth_F, 0.025, {}};

  SUBCASE("truth reproduces its own data") {
    const MetricsReport r = evaluate_dynamics(truth, d, spec, quad.get(), quad.get());
    CHECK(r.dq == 0.0);
    CHECK(r.dR == 0.0);
    CHECK(r.dp_dot == 0.0);
    CHECK(r.dVdq == 0.0);
    CHECK(r.dVdR == 0.0);
    CHECK(r.max_defect < 1e-13);
    CHECK(r.max_H_error < 1e-3);
    CHECK(r.steps == 40);
    CHECK_FALSE(r.diverged);
  }
  SUBCASE("zero-correction model has positive errors") {
    ModelConfig mc;
    mc.learn_potential = false;
    const auto model = LearnedDynamics::make(sys.params, mc);
    const MetricsReport r = evaluate_model(model, d, spec, quad.get());
    CHECK(r.dq > 0.0);
    CHECK(r.dVdq > 0.0);
    CHECK(r.dVdR > 0.0);
  }
  SUBCASE("deterministic across thread counts") {
    ModelConfig mc;
    mc.width = 8;
    mc.depth = 2;
    mc.init_seed = 3;
    auto model = LearnedDynamics::make(sys.params, mc);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 0.01);
    for (double& w : model.V->W.back().data) w = n(rng);
    kernels::set_num_threads(1);
    const MetricsReport a = evaluate_model(model, d, spec, quad.get());
    kernels::set_num_threads(3);
    const MetricsReport b = evaluate_model(model, d, spec, quad.get());
    kernels::set_num_threads(1);
    CHECK(a == b);
    CHECK(a.dVdR > 0.0);
  }
  SUBCASE("horizon longer than the data") {
    spec.steps = 4 * 13;
    CHECK_THROWS_AS(evaluate_dynamics(truth, d, spec), std::invalid_argument);
    spec.steps = 41;
    CHECK_THROWS_AS(evaluate_dynamics(truth, d, spec), std::invalid_argument);
  }
  SUBCASE("divergence is flagged") {
    Dataset bad = d;
    for (auto& t : bad.trajectories) {
      t.snapshots[0].bodies[1].q = t.snapshots[0].bodies[0].q;
      t.snapshots[0].bodies[0].p = t.snapshots[0].bodies[1].p = {};
    }
    const MetricsReport r = evaluate_dynamics(truth, bad, spec);
    CHECK(r.diverged);
    CHECK(std::isinf(r.dq));
  }
}

TEST_CASE("metrics reports round-trip through CSV and JSON") {
  MetricsReport a;
  a.dq = 0.1;
  a.dR = 1.0 / 3.0;
  a.dp_dot = 5e-300;
  a.dPi_dot = 123456789.123;
  a.dVdq = std::numeric_limits<double>::quiet_NaN();
  a.dVdR = std::numeric_limits<double>::infinity();
  a.max_defect = std::nextafter(1.0, 2.0);
  a.max_H_error = 4.9e-324;
  a.H_absolute = true;
  a.steps = 500;
  MetricsReport b = a;
  b.diverged = true;
  b.dVdq = -0.0;

  CHECK(metrics_from_json(metrics_to_json(a)) == a);
  CHECK(metrics_from_json(metrics_to_json(b)) == b);
  CHECK_FALSE(a == b);

  const std::vector<LabeledReport> rows{{"liet2", a}, {"verlet", b}};
  std::stringstream ss;
  write_metrics_csv(ss, rows);
  CHECK(ss.str().rfind("label,dq,dR,dp_dot,dPi_dot,dVdq,dVdR,max_defect,max_H_error,H_absolute,steps,diverged\n", 0) == 0);
  const auto back = read_metrics_csv(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[0].first == "liet2");
  CHECK(back[0].second == a);
  CHECK(back[1].second == b);

  std::stringstream bad("label,dq\nx,1\n");
  CHECK_THROWS(read_metrics_csv(bad));
  const std::vector<LabeledReport> comma{{"a,b", a}};
  std::stringstream sink;
  CHECK_THROWS_AS(write_metrics_csv(sink, comma), std::invalid_argument);
}

TEST_CASE("convergence study") {
  const System sys = free_body({1, 2, 3}, {1.0, 0.1, 0.5});
  ConvergenceSpec spec;
  spec.schemes = {StepScheme::ExplicitEuler, StepScheme::LieT2, StepScheme::RK4};
  spec.h = {0.04, 0.02, 0.01};
  spec.T = 0.4;
  const ConvergenceResult r = convergence_study(sys, spec);
  REQUIRE(r.rows.size() == 9);
  MESSAGE("slopes " << r.slope(StepScheme::ExplicitEuler) << " " << r.slope(StepScheme::LieT2) << " "
                    << r.slope(StepScheme::RK4));
  CHECK(r.slope(StepScheme::ExplicitEuler) == doctest::Approx(1.0).epsilon(0.15));
  CHECK(r.slope(StepScheme::LieT2) == doctest::Approx(2.0).epsilon(0.075));
  CHECK(r.slope(StepScheme::RK4) == doctest::Approx(4.0).epsilon(0.05));
  CHECK_THROWS_AS(r.slope(StepScheme::Verlet), std::invalid_argument);

  std::stringstream ss;
  write_convergence_csv(ss, r);
  CHECK(ss.str().rfind("scheme,h,err_q,err_R,slope\n", 0) == 0);
  const auto back = read_convergence_csv(ss);
  REQUIRE(back.rows.size() == r.rows.size());
  for (std::size_t k = 0; k < r.rows.size(); ++k) {
    CHECK(back.rows[k].scheme == r.rows[k].scheme);
    CHECK(back.rows[k].h == r.rows[k].h);
    CHECK(back.rows[k].err_q == r.rows[k].err_q);
    CHECK(back.rows[k].err_R == r.rows[k].err_R);
    CHECK(back.rows[k].slope == r.rows[k].slope);
  }

  spec.h = {0.03};
  CHECK_THROWS_AS(convergence_study(sys, spec), std::invalid_argument);
  spec.h = {0.04};
  spec.h_ref = 0.001;
  CHECK_THROWS_AS(convergence_study(sys, spec), std::invalid_argument);
}
