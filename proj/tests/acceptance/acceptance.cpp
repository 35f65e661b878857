// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Arguments select a subset of criteria by number.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ad_check.hpp"
#include "srnn/config.hpp"
#include "srnn/evaluation.hpp"
#include "srnn/integrators.hpp"
#include "srnn/kernels.hpp"
#include "srnn/learning.hpp"
#include "srnn/potentials.hpp"
#include "srnn/systems.hpp"
#include "test_util.hpp"

using namespace srnn;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

template <class... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

struct Check {
  std::string what;
  bool ok = false;
};

class Criterion {
 public:
  Criterion(int id, std::string title) : id_(id), title_(std::move(title)), start_(Clock::now()) {}

  void check(bool ok, const std::string& what) { checks_.push_back({what, ok}); }
  void note(const std::string& what) { notes_.push_back(what); }
  double seconds() const { return std::chrono::duration<double>(Clock::now() - start_).count(); }

  bool finish(double time_limit_s) {
    const double s = seconds();
    if (time_limit_s > 0) check(s <= time_limit_s, fmt("runtime %.1f s <= %.0f s", s, time_limit_s));
    bool ok = true;
    for (const auto& c : checks_) ok = ok && c.ok;
    std::printf("%s [%d] %s (%.1f s)\n", ok ? "PASS" : "FAIL", id_, title_.c_str(), s);
    for (const auto& c : checks_) std::printf("    %s %s\n", c.ok ? "ok  " : "FAIL", c.what.c_str());
    for (const auto& n : notes_) std::printf("    info %s\n", n.c_str());
    std::fflush(stdout);
    return ok;
  }

 private:
  using Clock = std::chrono::steady_clock;
  int id_;
  std::string title_;
  Clock::time_point start_;
  std::vector<Check> checks_;
  std::vector<std::string> notes_;
};

double max_defect(const SystemState& s) {
  double d = 0.0;
  for (const auto& b : s.bodies) d = std::max(d, orthonormality_defect(b.R));
  return d;
}

double relative_state_distance(const SystemState& a, const SystemState& b) {
  double diff = 0.0, ref = 0.0;
  auto acc = [&](std::span<const double> x, std::span<const double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      diff = std::max(diff, std::abs(x[i] - y[i]));
      ref = std::max(ref, std::abs(y[i]));
    }
  };
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& u = a.bodies[i];
    const auto& v = b.bodies[i];
    acc(std::span<const double>(&u.q.x, 3), std::span<const double>(&v.q.x, 3));
    acc(std::span<const double>(&u.p.x, 3), std::span<const double>(&v.p.x, 3));
    acc(std::span<const double>(&u.Pi.x, 3), std::span<const double>(&v.Pi.x, 3));
    acc(u.R.m, v.R.m);
  }
  return diff / std::max(ref, 1e-300);
}

// The part of the kinetic energy the KE flow integrates exactly: translation
// plus a symmetric top with J2 replaced by J1.
double split_kinetic_energy(const SystemState& s, const SystemParams& params) {
  double e = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& b = s.bodies[i];
    const Vec3 Jinv = params.bodies[i].inverse_inertia();
    e += 0.5 * dot(b.p, b.p) / params.bodies[i].mass + 0.5 * Jinv.x * dot(b.Pi, b.Pi) +
         0.5 * (Jinv.z - Jinv.x) * b.Pi.z * b.Pi.z;
  }
  return e;
}

System spinning_toy(double spin, double tilt) { return toy_precession({.planet_spin = spin, .planet_tilt = tilt}); }

// ---- 1 ---------------------------------------------------------------------

bool manifold_preservation() {
  Criterion c(1, "SO(3) manifold preservation, free body J = diag(1,2,3), h = 1e-2, 1e5 steps");
  const System sys = free_body({1.0, 2.0, 3.0}, {4.0, 8.0, 6.0});
  const StepContext ctx{sys.params, sys.truth_V, sys.truth_F, 1e-2, {}};
  for (StepScheme s : kAllSchemes) {
    SystemState x = sys.state;
    double worst = 0.0;
    for (int k = 0; k < 100000; ++k) {
      x = step(s, x, ctx);
      const double d = max_defect(x);
      worst = std::isfinite(d) ? std::max(worst, d) : kInf;
      if (!std::isfinite(worst)) break;
    }
    const bool lie = s == StepScheme::LieT2 || s == StepScheme::LieRK2 || s == StepScheme::LieRK4;
    if (lie)
      c.check(worst <= 1e-9, fmt("%-7s max defect %.3e <= 1e-9", to_string(s).c_str(), worst));
    else
      c.check(worst > 1e-6, fmt("%-7s max defect %.3e > 1e-6", to_string(s).c_str(), worst));
  }
  return c.finish(60);
}

// ---- 2 ---------------------------------------------------------------------

struct EnergyRun {
  double slope = 0.0;      // least-squares d(rel. error)/dt
  double amplitude = 0.0;  // max |rel. error|
};

EnergyRun energy_run(const System& sys, StepScheme scheme, double h, double T) {
  const StepContext ctx{sys.params, sys.truth_V, sys.truth_F, h, {}};
  const double H0 = hamiltonian(sys.state, sys.params, *sys.truth_V);
  const auto n = static_cast<std::size_t>(std::llround(T / h));
  const std::size_t every = std::max<std::size_t>(1, n / 20000);
  SystemState x = sys.state;
  double st = 0, se = 0, stt = 0, ste = 0, m = 0;
  EnergyRun r;
  for (std::size_t k = 1; k <= n; ++k) {
    x = step(scheme, x, ctx);
    if (k % every) continue;
    const double t = static_cast<double>(k) * h;
    const double e = (hamiltonian(x, sys.params, *sys.truth_V) - H0) / std::abs(H0);
    r.amplitude = std::max(r.amplitude, std::abs(e));
    st += t, se += e, stt += t * t, ste += t * e, m += 1;
  }
  r.slope = (m * ste - st * se) / (m * stt - st * st);
  return r;
}

bool energy_behavior() {
  Criterion c(2, "Hamiltonian error: bounded for LieT2, order 2 amplitude (two rigid bodies, F = 0)");
  const System sys = spinning_toy(2.0, 0.5);
  const double h = 0.02, T = 1e5 * h;
  const EnergyRun lie = energy_run(sys, StepScheme::LieT2, h, T);
  const EnergyRun lie_half = energy_run(sys, StepScheme::LieT2, h / 2, T);
  const EnergyRun rk4 = energy_run(sys, StepScheme::RK4, h, T);
  c.check(std::abs(lie.slope) < 0.1 * std::abs(rk4.slope),
          fmt("|LieT2 slope| %.3e < 0.1 x |RK4 slope| %.3e (h = %g, 1e5 steps)", std::abs(lie.slope),
              std::abs(rk4.slope), h));
  const double ratio = lie.amplitude / lie_half.amplitude;
  c.check(ratio >= 3.0 && ratio <= 5.0,
          fmt("amplitude(h) / amplitude(h/2) = %.3e / %.3e = %.3f in [3, 5]", lie.amplitude, lie_half.amplitude, ratio));
  return c.finish(300);
}

// ---- 3 ---------------------------------------------------------------------

bool convergence_orders() {
  Criterion c(3, "global convergence orders on a rotation-coupled two-body system");
  ConvergenceSpec spec;
  spec.schemes.assign(std::begin(kAllSchemes), std::end(kAllSchemes));
  spec.h = {0.04, 0.02, 0.01, 0.005};
  spec.T = 2.0;
  const ConvergenceResult r = convergence_study(spinning_toy(2.0, 0.5), spec);
  for (StepScheme s : kAllSchemes) {
    double expect = 2.0, tol = 0.15;
    if (s == StepScheme::ExplicitEuler) expect = 1.0;
    if (s == StepScheme::RK4 || s == StepScheme::LieRK4) expect = 4.0, tol = 0.2;
    const double slope = r.slope(s);
    c.check(std::abs(slope - expect) <= tol,
            fmt("%-7s slope %.4f in %.1f +- %.2f", to_string(s).c_str(), slope, expect, tol));
  }
  ConvergenceSpec flat = spec;
  flat.schemes = {StepScheme::Verlet};
  c.note(fmt("verlet slope %.4f on the point-mass pair with Pi = 0 (no rotation)",
             convergence_study(toy_point_mass(), flat).slope(StepScheme::Verlet)));
  return c.finish(600);
}

// ---- 4 ---------------------------------------------------------------------

bool exact_flows() {
  Criterion c(4, "exact-flow identities");
  std::mt19937_64 rng(4);

  double asym = 0.0;
  const SystemParams axi{{BodyParams::make(1.0, {1.5, 1.5, 2.0}), BodyParams::make(2.0, {0.7, 0.7, 0.3})}, 1.0};
  for (int t = 0; t < 200; ++t) {
    const SystemState x = test::random_state(rng, 2);
    const SystemState y = flow_asym(x, axi, 0.37);
    asym = std::max(asym, test::state_distance(x, y));
  }
  c.check(asym <= 1e-15, fmt("asym flow with J1 = J2 moves the state by %.3e <= 1e-15", asym));

  double dnorm = 0.0, dke = 0.0;
  const SystemParams tri{{BodyParams::make(1.0, {1.0, 2.0, 3.0}), BodyParams::make(2.0, {0.4, 0.9, 1.1})}, 1.0};
  for (int t = 0; t < 200; ++t) {
    const SystemState x = test::random_state(rng, 2);
    const SystemState y = flow_ke(x, tri, 0.1);
    for (std::size_t i = 0; i < 2; ++i) {
      const double n0 = norm(x.bodies[i].Pi), n1 = norm(y.bodies[i].Pi);
      dnorm = std::max(dnorm, std::abs(n1 - n0) / n0);
    }
    const double k0 = split_kinetic_energy(x, tri), k1 = split_kinetic_energy(y, tri);
    dke = std::max(dke, std::abs(k1 - k0) / k0);
  }
  c.check(dnorm <= 1e-12, fmt("KE flow relative change of |Pi| %.3e <= 1e-12", dnorm));
  c.check(dke <= 1e-12, fmt("KE flow relative change of H_KE %.3e <= 1e-12", dke));

  double back = 0.0;
  const System sys = spinning_toy(2.0, 0.5);
  for (double h : {0.01, 0.05, 0.1}) {
    const StepContext fwd{sys.params, sys.truth_V, sys.truth_F, h, {}};
    StepContext bwd = fwd;
    bwd.h = -h;
    SystemState x = sys.state;
    for (int k = 0; k < 50; ++k) {
      const SystemState y = step_lie_t2(step_lie_t2(x, fwd), bwd);
      back = std::max(back, relative_state_distance(y, x));
      x = step_lie_t2(x, fwd);
    }
  }
  c.check(back <= 1e-10, fmt("LieT2 step(h) then step(-h) returns within %.3e <= 1e-10 relative", back));
  return c.finish(0);
}

// ---- 5 ---------------------------------------------------------------------

bool multipole_oracle() {
  Criterion c(5, "quadrupole against the point-cloud integral at a/r = 0.01");
  const double a = 0.01;
  const BodyParams body = BodyParams::make(1.0, Vec3{1.0, 1.0, 1.8} * (a * a));
  const SystemParams params{{body, BodyParams::make(0.5, {1, 1, 1})}, 1.0};
  const QuadrupolePotential quad(params);
  const PointMassPotential point(params);
  std::mt19937_64 rng(5);
  double worst = 0.0, self = 0.0;
  for (int t = 0; t < 8; ++t) {
    Vec3 dir = test::random_vec(rng);
    dir = dir * (1.0 / norm(dir));
    const std::vector<Vec3> q{{0, 0, 0}, dir};
    const std::vector<Mat3> R{test::random_rotation(rng), Mat3::identity()};
    const double residual = quad.evaluate(q, R).value;
    const double vp = point.evaluate(q, R).value;
    auto cloud = [&](int n) {
      const std::vector<BodyShape> shapes{cuboid_shape(body, n), point_shape(0.5)};
      return pointcloud_potential(q, R, shapes, params.G) - vp;
    };
    const double coarse = cloud(2), fine = cloud(16);
    worst = std::max(worst, std::abs(fine - residual) / std::abs(residual));
    self = std::max(self, std::abs(coarse - fine) / std::abs(fine));
  }
  c.check(worst <= 0.01, fmt("max |cloud - quadrupole| / |quadrupole| = %.3e <= 1e-2 (16^3 points)", worst));
  c.check(self <= 0.01, fmt("oracle self-convergence 2^3 -> 16^3 points: max relative change %.3e <= 1e-2", self));
  return c.finish(60);
}

// ---- 6 ---------------------------------------------------------------------

bool gradient_correctness() {
  Criterion c(6, "reverse-mode gradients against central differences");
  using test::random_tensor;
  std::mt19937_64 rng(6);
  double worst = 0.0;
  std::string worst_name;
  auto expect = [&](const std::string& name, const test::TapeFn& f, const std::vector<Tensor>& in,
                    double step = 1e-6) {
    const auto r = test::check_gradient(f, in, 7, step);
    const double e = r.fd_norm > 0.0 ? r.rel_error : kInf;
    if (!(e <= worst)) worst = e, worst_name = name;
  };

  const Tensor a = random_tensor(rng, 4, 3), b = random_tensor(rng, 4, 3);
  const Tensor pos = random_tensor(rng, 4, 3, 0.3, 2.0);
  expect("add", [](Tape&, auto& v) { return add(v[0], v[1]); }, {a, b});
  expect("sub", [](Tape&, auto& v) { return sub(v[0], v[1]); }, {a, b});
  expect("neg", [](Tape&, auto& v) { return neg(v[0]); }, {a});
  expect("mul", [](Tape&, auto& v) { return mul(v[0], v[1]); }, {a, b});
  expect("scale", [](Tape&, auto& v) { return scale(v[0], -2.5); }, {a});
  expect("scale_cols", [](Tape&, auto& v) { return scale_cols(v[0], {1.0, -3.0, 0.5}); }, {a});
  expect("mul_rows", [](Tape&, auto& v) { return mul_rows(v[0], v[1]); }, {a, random_tensor(rng, 4, 1)});
  expect("add_row_broadcast", [](Tape&, auto& v) { return add_row_broadcast(v[0], v[1]); },
         {a, random_tensor(rng, 1, 3)});
  expect("silu", [](Tape&, auto& v) { return silu(v[0]); }, {a});
  expect("silu_prime", [](Tape&, auto& v) { return silu_prime(v[0]); }, {a});
  expect("sum", [](Tape&, auto& v) { return sum(v[0]); }, {a});
  expect("row_sum", [](Tape&, auto& v) { return row_sum(v[0]); }, {a});
  expect("mean", [](Tape&, auto& v) { return mean(v[0]); }, {a});
  expect("square", [](Tape&, auto& v) { return square(v[0]); }, {a});
  expect("sqrt", [](Tape&, auto& v) { return sqrt(v[0]); }, {pos});
  expect("reciprocal", [](Tape&, auto& v) { return reciprocal(v[0]); }, {pos});
  expect("inv_r3", [](Tape&, auto& v) { return inv_r3(v[0]); }, {pos});
  expect("norm", [](Tape&, auto& v) { return norm(v[0]); }, {a});
  expect("cross", [](Tape&, auto& v) { return cross(v[0], v[1]); }, {a, b});
  expect("concat_cols", [](Tape&, auto& v) { return concat_cols({v[0], v[1], v[0]}); }, {a, b});
  expect("slice_cols", [](Tape&, auto& v) { return slice_cols(v[0], 1, 2); }, {a});
  expect("matmul", [](Tape&, auto& v) { return matmul(v[0], v[1]); },
         {random_tensor(rng, 5, 4), random_tensor(rng, 4, 3)});
  expect("matmul_nt", [](Tape&, auto& v) { return matmul_nt(v[0], v[1]); },
         {random_tensor(rng, 5, 4), random_tensor(rng, 3, 4)});
  const Tensor A = random_tensor(rng, 3, 9), B = random_tensor(rng, 3, 9), u = random_tensor(rng, 3, 3);
  expect("mat3_mul", [](Tape&, auto& v) { return mat3_mul(v[0], v[1]); }, {A, B});
  expect("mat3_tmul", [](Tape&, auto& v) { return mat3_tmul(v[0], v[1]); }, {A, B});
  expect("mat3_vec", [](Tape&, auto& v) { return mat3_vec(v[0], v[1]); }, {A, u});
  expect("mat3_tvec", [](Tape&, auto& v) { return mat3_tvec(v[0], v[1]); }, {A, u});
  expect("hat", [](Tape&, auto& v) { return hat(v[0]); }, {u});
  expect("skew_vee", [](Tape&, auto& v) { return skew_vee(v[0]); }, {A});
  for (double s : {2.0, 0.3, 5e-3, 1e-5})
    expect(fmt("exp_so3 |w| ~ %g", s), [](Tape&, auto& v) { return exp_so3(v[0]); }, {random_tensor(rng, 3, 3, s)},
           1e-7);

  Mlp net = Mlp::make(4, 5, 2, 1, rng);
  for (double& w : net.W.back().data) w = std::normal_distribution<double>(0.0, 0.5)(rng);
  std::vector<Tensor> in{random_tensor(rng, 3, 4)};
  for (std::size_t l = 0; l < net.W.size(); ++l) in.push_back(net.W[l]), in.push_back(net.b[l]);
  expect("mlp value and input gradient",
         [](Tape&, auto& v) {
           MlpVars m;
           for (std::size_t k = 1; k < v.size(); k += 2) m.W.push_back(v[k]), m.b.push_back(v[k + 1]);
           const ScalarWithGrad g = mlp_value_and_input_grad(m, v[0]);
           return concat_cols({g.value, g.input_grad});
         },
         in);
  c.check(worst <= 1e-5, fmt("every primitive: worst rel error %.3e (%s) <= 1e-5", worst, worst_name.c_str()));

  const System sys = spinning_toy(2.0, 0.5);
  GenerateOptions g;
  g.L = 2, g.K = 3, g.dt = 0.1, g.fine_h = 0.025, g.seed = 6;
  const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, g);
  ModelConfig mc;
  mc.width = 6, mc.depth = 2, mc.conservative_only = false, mc.init_seed = 61;
  mc.potential_output_scale = 0.05, mc.forcing_output_scale = 0.01;
  LearnedDynamics model = LearnedDynamics::make(d.params, mc);
  for (Mlp* m : {&*model.V, &*model.F})
    for (double& w : m->W.back().data) w = std::normal_distribution<double>(0.0, 0.5)(rng);
  model.fit_normalizers(d);
  const std::vector<Sample> samples{{0, 0}, {0, 1}, {1, 0}};
  for (StepScheme s : kAllSchemes) {
    const RolloutSpec spec{s, 3, 2, {}};
    const auto base = batch_loss(model, d, samples, spec, true);
    double diff2 = 0.0, fd2 = 0.0;
    auto params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k)
      for (std::size_t i = 0; i < params[k]->size(); ++i) {
        double& w = params[k]->data[i];
        const double w0 = w, hs = 1e-6 * std::max(1.0, std::abs(w0));
        w = w0 + hs;
        const double fp = batch_loss(model, d, samples, spec, false).report.total;
        w = w0 - hs;
        const double fm = batch_loss(model, d, samples, spec, false).report.total;
        w = w0;
        const double fd = (fp - fm) / (2 * hs);
        const double ad = base.grads.empty() ? 0.0 : base.grads[k].data[i];
        diff2 += (fd - ad) * (fd - ad);
        fd2 += fd * fd;
      }
    const double rel = fd2 > 0 ? std::sqrt(diff2 / fd2) : kInf;
    c.check(rel <= 1e-5, fmt("loss through a %-7s rollout (N = 2, H = 3, 2 observations): rel %.3e <= 1e-5",
                             to_string(s).c_str(), rel));
  }
  return c.finish(0);
}

// ---- 7 ---------------------------------------------------------------------

GenerateOptions learning_data() {
  GenerateOptions g;
  g.L = 20, g.K = 128, g.dt = 0.1, g.fine_h = 0.005, g.noise_sigma = 1e-3, g.seed = 7;
  return g;
}

LearnedDynamics learning_model(const Dataset& d) {
  ModelConfig mc;
  mc.width = 32, mc.depth = 3, mc.potential_output_scale = 1e-3, mc.init_seed = 1;
  LearnedDynamics m = LearnedDynamics::make(d.params, mc);
  m.fit_normalizers(d);
  return m;
}

TrainConfig learning_schedule(std::size_t epochs) {
  TrainConfig tc;
  tc.batch_size = 32, tc.adam.lr = 3e-3, tc.adam.weight_decay = 0.0;
  tc.rollout.H = 4, tc.max_epochs = epochs, tc.patience = epochs, tc.seed = 3;
  return tc;
}

bool toy_precession_learning() {
  Criterion c(7, "learning the quadrupole residual on the toy precession problem");
  const System sys = spinning_toy(2.0, 0.0);
  const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, learning_data());
  const TrainResult r = train(d, learning_model(d), learning_schedule(150));
  ModelConfig zero_cfg;
  zero_cfg.learn_potential = false;
  const LearnedDynamics zero = LearnedDynamics::make(d.params, zero_cfg);
  EvalSpec es;
  es.H = 4, es.steps = 500;
  const QuadrupolePotential quad(d.params);
  const MetricsReport learned = evaluate_model(r.model, d, es, &quad);
  const MetricsReport baseline = evaluate_model(zero, d, es, &quad);
  const double ratio = learned.dq / baseline.dq;
  c.check(ratio <= 0.1, fmt("500-step mean |dq|: learned %.3e / zero-correction %.3e = %.4f <= 0.1", learned.dq,
                            baseline.dq, ratio));
  c.note(fmt("dVdq learned %.3e vs zero-correction %.3e, best val loss %.3e at epoch %zu", learned.dVdq,
             baseline.dVdq, r.best_val_loss, r.best_epoch));
  return c.finish(3600);
}

// ---- 8 ---------------------------------------------------------------------

bool integrator_comparison() {
  Criterion c(8, "six schemes trained identically on a fast-spinning, nutating planet");
  const System sys = spinning_toy(20.0, 0.5);
  const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, learning_data());
  const auto outcomes = baseline_train_matrix(d, learning_model(d), learning_schedule(120), kAllSchemes);
  const QuadrupolePotential quad(d.params);
  std::vector<std::pair<StepScheme, MetricsReport>> rows;
  for (const auto& o : outcomes) {
    EvalSpec es;
    es.scheme = o.scheme, es.H = 4, es.steps = 500;
    rows.emplace_back(o.scheme, evaluate_model(o.result.model, d, es, &quad));
    const MetricsReport& m = rows.back().second;
    c.note(fmt("%-7s dq %.3e dR %.3e defect %.3e%s", to_string(o.scheme).c_str(), m.dq, m.dR, m.max_defect,
               m.diverged ? " diverged" : ""));
  }
  double best_q = kInf, best_R = kInf, lie_q = kInf, lie_R = kInf, verlet_R = kInf;
  for (const auto& [s, m] : rows) {
    best_q = std::min(best_q, m.dq);
    best_R = std::min(best_R, m.dR);
    if (s == StepScheme::LieT2) lie_q = m.dq, lie_R = m.dR;
    if (s == StepScheme::Verlet) verlet_R = m.dR;
  }
  c.check(lie_q <= 1.1 * best_q, fmt("LieT2 mean |dq| %.3e lowest or within 10%% of the lowest %.3e", lie_q, best_q));
  c.check(lie_R <= 1.1 * best_R, fmt("LieT2 mean |dR| %.3e lowest or within 10%% of the lowest %.3e", lie_R, best_R));
  c.check(verlet_R >= 10.0 * lie_R, fmt("Verlet |dR| %.3e >= 10 x LieT2 %.3e", verlet_R, lie_R));
  return c.finish(0);
}

// ---- 9 ---------------------------------------------------------------------

bool same_bits(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

template <class W>
std::string text_of(W&& write) {
  std::ostringstream os;
  write(os);
  return os.str();
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool determinism_and_io() {
  Criterion c(9, "determinism and bit-exact round trips");
  const System sys = spinning_toy(2.0, 0.5);
  GenerateOptions g;
  g.L = 5, g.K = 12, g.dt = 0.1, g.fine_h = 0.025, g.seed = 9;
  const Dataset d1 = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, g);
  const Dataset d2 = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, g);
  const std::string t1 = text_of([&](auto& os) { write_dataset(os, d1); });
  c.check(d1 == d2 && t1 == text_of([&](auto& os) { write_dataset(os, d2); }), "same seed, identical dataset");

  ModelConfig mc;
  mc.width = 8, mc.depth = 2, mc.conservative_only = false, mc.init_seed = 4;
  LearnedDynamics init = LearnedDynamics::make(d1.params, mc);
  init.fit_normalizers(d1);
  TrainConfig tc;
  tc.batch_size = 8, tc.max_epochs = 3, tc.rollout.H = 2, tc.seed = 5;
  kernels::set_num_threads(1);
  const TrainResult r1 = train(d1, init, tc);
  kernels::set_num_threads(4);
  const TrainResult r2 = train(d1, init, tc);
  kernels::set_num_threads(1);
  c.check(r1.curve == r2.curve && r1.model.named_tensors() == r2.model.named_tensors(),
          "same seed, identical training curve and weights (1 vs 4 threads)");

  EvalSpec es;
  es.H = 2, es.steps = 20, es.split = Split::All;
  const QuadrupolePotential quad(d1.params);
  const MetricsReport m1 = evaluate_model(r1.model, d1, es, &quad);
  const MetricsReport m2 = evaluate_model(r2.model, d1, es, &quad);
  c.check(m1 == m2, "identical metrics reports");

  const Dataset back = [&] {
    std::istringstream is(t1);
    return read_dataset(is);
  }();
  c.check(back == d1 && text_of([&](auto& os) { write_dataset(os, back); }) == t1, "dataset text round trip");

  const auto& traj = d1.trajectories[0].snapshots;
  const std::string tt = text_of([&](auto& os) { write_trajectory(os, traj); });
  std::istringstream tis(tt);
  c.check(read_trajectory(tis, 2) == traj, "trajectory text round trip");

  const auto dir = std::filesystem::temp_directory_path() / "srnn_acceptance";
  std::filesystem::create_directories(dir);
  const Checkpoint ck = make_checkpoint(r1.model, r1.optimizer, R"({"schema_version":1})");
  save_checkpoint((dir / "a.bin").string(), ck);
  const Checkpoint ck_back = load_checkpoint((dir / "a.bin").string());
  save_checkpoint((dir / "b.bin").string(), ck_back);
  LearnedDynamics restored = init;
  restore_checkpoint(ck_back, restored, nullptr);
  c.check(ck_back == ck && file_bytes(dir / "a.bin") == file_bytes(dir / "b.bin") &&
              restored.named_tensors() == r1.model.named_tensors(),
          "checkpoint binary round trip");
  std::filesystem::remove_all(dir);

  MetricsReport odd = m1;
  odd.dVdR = std::numeric_limits<double>::quiet_NaN();
  odd.dR = kInf;
  odd.dq = 0.1 + 0.2;
  const std::vector<LabeledReport> rows{{"learned", m1}, {"odd", odd}};
  const std::string csv = text_of([&](auto& os) { write_metrics_csv(os, rows); });
  std::istringstream cis(csv);
  c.check(read_metrics_csv(cis) == rows && metrics_from_json(metrics_to_json(odd)) == odd,
          "metrics CSV and JSON round trip, including nan and inf");

  ConvergenceSpec cs;
  cs.schemes = {StepScheme::LieT2, StepScheme::ExplicitEuler};
  cs.h = {0.1, 0.05};
  cs.T = 0.2;
  const ConvergenceResult cr = convergence_study(sys, cs);
  const std::string ctext = text_of([&](auto& os) { write_convergence_csv(os, cr); });
  std::istringstream ccs(ctext);
  const ConvergenceResult cr_back = read_convergence_csv(ccs);
  bool conv_ok = cr_back.rows.size() == cr.rows.size();
  for (std::size_t i = 0; conv_ok && i < cr.rows.size(); ++i) {
    const auto &x = cr.rows[i], &y = cr_back.rows[i];
    conv_ok = x.scheme == y.scheme && same_bits(x.h, y.h) && same_bits(x.err_q, y.err_q) &&
              same_bits(x.err_R, y.err_R) && same_bits(x.slope, y.slope);
  }
  c.check(conv_ok, "convergence CSV round trip");

  const std::string cfg_text = config_to_json(parse_config(R"({"schema_version": 1,
      "system": {"preset": "toy_precession", "toy": {"planet_spin": 2.0}},
      "data": {"seed": 1}, "model": {"init_seed": 2}, "training": {"seed": 3}})"));
  c.check(config_to_json(parse_config(cfg_text)) == cfg_text, "run configuration JSON round trip");
  return c.finish(0);
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<bool()>> criteria{manifold_preservation, energy_behavior,     convergence_orders,
                                                    exact_flows,           multipole_oracle,    gradient_correctness,
                                                    toy_precession_learning, integrator_comparison, determinism_and_io};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    try {
      if (!criteria[k]()) ++failed;
    } catch (const std::exception& e) {
      std::printf("FAIL [%d] threw: %s\n", id, e.what());
      ++failed;
    }
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
