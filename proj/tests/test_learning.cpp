#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "srnn/integrators.hpp"
#include "srnn/learning.hpp"
#include "srnn/systems.hpp"
#include "test_util.hpp"

using namespace srnn;
using srnn::test::random_vec;

namespace {

GenerateOptions small_gen(std::size_t L, std::uint64_t seed) {
  GenerateOptions g;
  g.L = L;
  g.K = 6;
  g.dt = 0.1;
  g.fine_h = 0.025;
  g.seed = seed;
  return g;
}

void randomize(Mlp& net, std::mt19937_64& rng, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  for (double& w : net.W.back().data) w = n(rng);
  for (double& w : net.b.back().data) w = n(rng);
}

// Small model with both heads nonzero so every term is exercised.
LearnedDynamics random_model(const SystemParams& params, std::uint64_t seed, bool forcing = true) {
  ModelConfig mc;
  mc.width = 6;
  mc.depth = 2;
  mc.conservative_only = !forcing;
  mc.init_seed = seed;
  mc.potential_output_scale = 0.05;
  mc.forcing_output_scale = 0.01;
  auto m = LearnedDynamics::make(params, mc);
  std::mt19937_64 rng(seed + 1);
  randomize(*m.V, rng, 0.5);
  if (m.F) randomize(*m.F, rng, 0.5);
  return m;
}

std::vector<SystemState> perturbed_states(const System& sys, std::size_t B, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SystemState> out;
  for (std::size_t r = 0; r < B; ++r) {
    SystemState s = sys.state;
    for (auto& b : s.bodies) {
      b.q += random_vec(rng, 0.05);
      b.p += random_vec(rng, 0.01);
      b.R = mul(b.R, exp_so3(random_vec(rng, 0.3)).matrix());
      b.Pi += random_vec(rng, 0.01);
    }
    out.push_back(s);
  }
  return out;
}

bool same_bodies(const SystemState& a, const SystemState& b) { return a.bodies == b.bodies; }

}  // namespace

TEST_CASE("dataset generation: split, subsampling, determinism") {
  const System sys = toy_precession();
  const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, small_gen(5, 3));
  CHECK(d.trajectories.size() == 5);
  CHECK(d.num_train() == 4);
  CHECK(d.trajectories[4].train == false);
  for (const auto& tr : d.trajectories) CHECK(tr.snapshots.size() == 7);

  SUBCASE("32 trajectories split 25/7") {
    auto g = small_gen(32, 1);
    g.K = 1;
    const Dataset d32 = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, g);
    CHECK(d32.num_train() == 25);
  }
  SUBCASE("snapshot k is the fine rollout state at k dt") {
    const auto& tr = d.trajectories[2];
    StepContext ctx{sys.params, sys.truth_V, sys.truth_F, 0.025, {}};
    const auto fine = rollout(tr.snapshots[0], ctx, StepScheme::LieT2, 24);
    for (std::size_t k = 1; k <= 6; ++k) CHECK(fine[4 * k - 1] == tr.snapshots[k]);
  }
  SUBCASE("zero noise gives identical trajectories") {
    auto g = small_gen(3, 9);
    g.noise_sigma = 0.0;
    const Dataset z = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, g);
    CHECK(z.trajectories[0].snapshots == z.trajectories[1].snapshots);
    CHECK(z.trajectories[0].snapshots == z.trajectories[2].snapshots);
    CHECK(z.trajectories[0].snapshots[0].bodies == sys.state.bodies);
  }
  SUBCASE("same seed, same dataset; other seed differs") {
    const Dataset again = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, small_gen(5, 3));
    CHECK(again == d);
    const Dataset other = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, small_gen(5, 4));
    CHECK_FALSE(other == d);
  }
  SUBCASE("text round trip is bit exact") {
    std::stringstream ss;
    write_dataset(ss, d);
    const std::string text = ss.str();
    const Dataset back = read_dataset(ss);
    CHECK(back == d);
    std::stringstream ss2;
    write_dataset(ss2, back);
    CHECK(ss2.str() == text);
  }
  SUBCASE("bad inputs") {
    auto g = small_gen(2, 0);
    g.fine_h = 0.03;
    CHECK_THROWS_AS(generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, g), std::invalid_argument);
    std::stringstream bad("srnn-dataset 2\n");
    CHECK_THROWS_AS(read_dataset(bad), std::runtime_error);
    std::stringstream trunc("srnn-dataset 1\nN 1\nL 1\n");
    CHECK_THROWS_AS(read_dataset(trunc), std::runtime_error);
  }
}

TEST_CASE("snapshot text preserves awkward values") {
  SystemState s;
  s.t = 0.1 + 0.2;
  BodyState b;
  b.q = {1e-300, -0.0, 123456789.123456789};
  b.p = {std::nextafter(1.0, 2.0), 5e-324, -1.0 / 3.0};
  b.R = exp_so3({0.1, 0.2, 0.3}).matrix();
  b.Pi = {1e300, -2.5, 0.0};
  s.bodies = {b};
  std::stringstream ss;
  write_snapshot(ss, s);
  const auto back = parse_snapshot(ss.str(), 1);
  CHECK(back == s);
  CHECK(std::signbit(back.bodies[0].q.y));
}

TEST_CASE("learned adapters: gradients are the value's derivatives") {
  const System sys = toy_precession();
  const auto model = random_model(sys.params, 11);
  const LearnedPotential pot(*model.V, model.V_norm);
  const StateViews v(sys.state);
  const auto e = pot.evaluate(v.q, v.R);
  auto value_at = [&](std::vector<Vec3> q, std::vector<Mat3> R) { return pot.evaluate(q, R).value; };
  const double eps = 1e-6;
  for (std::size_t i = 0; i < 2; ++i)
    for (int c = 0; c < 3; ++c) {
      auto qp = v.q, qm = v.q;
      qp[i][c] += eps;
      qm[i][c] -= eps;
      const double fd = (value_at(qp, v.R) - value_at(qm, v.R)) / (2 * eps);
      CHECK(e.grad_q[i][c] == doctest::Approx(fd).epsilon(1e-6).scale(1e-3));
    }
  for (int k = 0; k < 9; ++k) {
    auto Rp = v.R, Rm = v.R;
    Rp[1].m[k] += eps;
    Rm[1].m[k] -= eps;
    const double fd = (value_at(v.q, Rp) - value_at(v.q, Rm)) / (2 * eps);
    CHECK(e.grad_R[1].m[k] == doctest::Approx(fd).epsilon(1e-6).scale(1e-3));
  }
}

TEST_CASE("taped steps equal the plain integrators bitwise") {
  const System sys = toy_precession({.planet_spin = 3.0});
  const auto batch = perturbed_states(sys, 4, 5);
  for (bool forcing : {false, true}) {
    const auto model = random_model(sys.params, 21, forcing);
    for (StepScheme scheme : kAllSchemes) {
      for (int variant = 0; variant < 2; ++variant) {
        IntegratorOptions o;
        if (variant == 1) o = {true, true, true, true};
        INFO(to_string(scheme) << " forcing=" << forcing << " variant=" << variant);
        const double h = 0.03;
        Tape tape(false);
        const TapedDynamics dyn(tape, model, false);
        TapedState s = bind_states(tape, batch);
        for (int k = 0; k < 3; ++k) s = dyn.step(scheme, s, h, o);
        const StepContext ctx = model.context(h, o);
        bool all_equal = true;
        for (std::size_t r = 0; r < batch.size(); ++r) {
          SystemState x = batch[r];
          for (int k = 0; k < 3; ++k) x = step(scheme, x, ctx);
          all_equal = all_equal && same_bodies(x, extract_state(s, r));
        }
        CHECK(all_equal);
      }
    }
  }
}

TEST_CASE("loss examples") {
  Tape tape(false);
  SystemState a;
  a.bodies = {BodyState{}};
  SystemState b = a;
  b.bodies[0].q = {1.0, 0.0, 0.0};
  const auto pa = bind_states(tape, {a}), pb = bind_states(tape, {b});
  LossReport rep;
  CHECK(srnn_loss({pa}, {pa}, &rep).value().data[0] == 0.0);
  CHECK(srnn_loss({pb}, {pa}, &rep).value().data[0] == 1.0);
  CHECK(rep.q == 1.0);
  CHECK(rep.total == 1.0);

  // Permuting the batch leaves the mean unchanged.
  std::mt19937_64 rng(2);
  const auto xs = perturbed_states(toy_precession(), 5, 3);
  const auto ys = perturbed_states(toy_precession(), 5, 4);
  auto xr = xs, yr = ys;
  std::reverse(xr.begin(), xr.end());
  std::reverse(yr.begin(), yr.end());
  const double l1 = srnn_loss({bind_states(tape, xs)}, {bind_states(tape, ys)}).value().data[0];
  const double l2 = srnn_loss({bind_states(tape, xr)}, {bind_states(tape, yr)}).value().data[0];
  CHECK(l1 == doctest::Approx(l2).epsilon(1e-15));
}

TEST_CASE("loss-through-rollout gradient matches finite differences") {
  const System sys = toy_precession({.planet_spin = 2.0});
  auto g = small_gen(2, 6);
  g.K = 3;
  g.L = 2;
  const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, g);
  for (StepScheme scheme : {StepScheme::LieT2, StepScheme::RK4, StepScheme::Verlet, StepScheme::LieRK4}) {
    LearnedDynamics model = random_model(sys.params, 31);
    model.fit_normalizers(d);
    RolloutSpec spec{scheme, 3, 2, {}};
    const std::vector<Sample> samples{{0, 0}, {0, 1}, {1, 0}};
    const auto base = batch_loss(model, d, samples, spec, true);
    REQUIRE(base.grads.size() == model.parameters().size());
    double diff2 = 0.0, fd2 = 0.0;
    auto params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k)
      for (std::size_t i = 0; i < params[k]->size(); ++i) {
        double& w = params[k]->data[i];
        const double w0 = w;
        const double hstep = 1e-6 * std::max(1.0, std::abs(w0));
        w = w0 + hstep;
        const double fp = batch_loss(model, d, samples, spec, false).report.total;
        w = w0 - hstep;
        const double fm = batch_loss(model, d, samples, spec, false).report.total;
        w = w0;
        const double fd = (fp - fm) / (2 * hstep);
        diff2 += (fd - base.grads[k].data[i]) * (fd - base.grads[k].data[i]);
        fd2 += fd * fd;
      }
    INFO(to_string(scheme) << " |fd|=" << std::sqrt(fd2));
    CHECK(std::sqrt(fd2) > 0.0);
    CHECK(std::sqrt(diff2) / std::sqrt(fd2) <= 1e-5);
  }
}

TEST_CASE("diverged samples are dropped with a penalty") {
  const System sys = toy_point_mass();
  Dataset d;
  d.params = sys.params;
  d.K = 1;
  d.dt = 0.1;
  SystemState good = sys.state;
  SystemState bad = sys.state;
  // Coincident bodies at rest stay coincident through the drift: infinite force.
  bad.bodies[1].q = bad.bodies[0].q;
  bad.bodies[0].p = bad.bodies[1].p = {};
  d.trajectories = {{{good, good}, true}, {{bad, bad}, true}};
  const auto model = random_model(sys.params, 3, false);
  const RolloutSpec spec{StepScheme::LieT2, 2, 1, {}};
  const auto r = batch_loss(model, d, {{0, 0}, {1, 0}}, spec, true);
  CHECK(r.report.diverged == 1);
  CHECK(r.report.divergence_penalty == doctest::Approx(0.5e6));
  REQUIRE_FALSE(r.grads.empty());
  for (const auto& gt : r.grads)
    for (double x : gt.data) CHECK(std::isfinite(x));
  const auto only_good = batch_loss(model, d, {{0, 0}}, spec, true);
  CHECK(r.grads == only_good.grads);

  const auto all_bad = batch_loss(model, d, {{1, 0}}, spec, true);
  CHECK(all_bad.grads.empty());
  CHECK(all_bad.report.total == kDivergedLoss);
}

TEST_CASE("zero heads on point-mass truth: loss is the discretization floor") {
  const System sys = toy_point_mass();
  auto g = small_gen(4, 2);
  g.K = 20;
  g.dt = 0.2;
  g.fine_h = 0.2 / 64;
  const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, g);
  ModelConfig mc;
  mc.width = 8;
  mc.depth = 2;
  mc.potential_output_scale = 1e-3;
  auto model = LearnedDynamics::make(sys.params, mc);
  model.fit_normalizers(d);
  const auto samples = enumerate_samples(d, true, 1);
  auto floor_at = [&](std::size_t H) { return batch_loss(model, d, samples, {StepScheme::LieT2, H, 1, {}}, false).report.total; };
  const double f2 = floor_at(2), f4 = floor_at(4), f8 = floor_at(8);
  // Squared error, so one halving of h cuts the loss by about 16; the root ratio is the order-2 factor 4.
  CHECK(std::sqrt(f2 / f4) >= 3.0);
  CHECK(std::sqrt(f2 / f4) <= 5.0);
  CHECK(std::sqrt(f4 / f8) >= 3.0);
  CHECK(std::sqrt(f4 / f8) <= 5.0);

  SUBCASE("training from the floor does not degrade it, and is deterministic") {
    TrainConfig tc;
    tc.batch_size = 16;
    tc.max_epochs = 4;
    tc.steps_per_epoch = 3;
    tc.rollout = {StepScheme::LieT2, 4, 1, {}};
    tc.seed = 77;
    const auto r1 = train(d, model, tc);
    const auto r2 = train(d, model, tc);
    CHECK(r1.curve == r2.curve);
    CHECK_FALSE(r1.diverged);
    const auto val = enumerate_samples(d, false, 1);
    const double val_floor = batch_loss(model, d, val, tc.rollout, false).report.total;
    CHECK(r1.curve.front().val_loss == doctest::Approx(val_floor).epsilon(1e-12));
    CHECK(r1.best_val_loss <= 2.0 * r1.curve.front().val_loss);
    for (const auto& e : r1.curve) CHECK(e.val_loss <= 2.0 * r1.curve.front().val_loss);
    CHECK(r1.model.named_tensors() == r2.model.named_tensors());
  }
}

TEST_CASE("LieT2 training rollouts stay on the manifold under arbitrary learned terms") {
  const System sys = toy_precession({.planet_spin = 4.0});
  auto model = random_model(sys.params, 41);
  for (double& w : model.V->W.back().data) w *= 20.0;
  Tape tape(false);
  const TapedDynamics dyn(tape, model, false);
  TapedState s = bind_states(tape, perturbed_states(sys, 3, 8));
  for (int k = 0; k < 200; ++k) s = dyn.step(StepScheme::LieT2, s, 0.05);
  double worst = 0.0;
  for (std::size_t r = 0; r < 3; ++r) {
    const auto x = extract_state(s, r);
    for (const auto& b : x.bodies) worst = std::max(worst, orthonormality_defect(b.R));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("normalizers and checkpoints") {
  const System sys = toy_precession();
  const Dataset d = generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, small_gen(5, 1));
  ModelConfig mc;
  mc.width = 5;
  mc.depth = 2;
  mc.conservative_only = false;
  auto model = LearnedDynamics::make(sys.params, mc);
  model.fit_normalizers(d);
  // R columns are left alone, q columns are standardized.
  for (std::size_t c = 3; c < 12; ++c) {
    CHECK(model.V_norm.shift[c] == 0.0);
    CHECK(model.V_norm.inv_scale[c] == 1.0);
  }
  CHECK(model.V_norm.shift[12] != 0.0);
  CHECK(model.F_norm.inv_scale[12] != 1.0);  // body 0, p_x

  std::mt19937_64 rng(4);
  randomize(*model.V, rng, 0.3);
  AdamW opt(AdamWConfig{}, std::as_const(model).parameters());
  std::vector<Tensor> grads;
  for (const Tensor* t : std::as_const(model).parameters()) grads.emplace_back(t->rows, t->cols, 0.01);
  opt.step(model.parameters(), grads);

  const Checkpoint c = make_checkpoint(model, opt, R"({"schema_version":1})");
  LearnedDynamics restored;
  restored.params = sys.params;
  AdamW opt2;
  restore_checkpoint(c, restored, &opt2);
  CHECK(restored.named_tensors() == model.named_tensors());
  CHECK(opt2.steps() == 1);
  CHECK(opt2.first_moments() == opt.first_moments());
  const StateViews v(sys.state);
  CHECK(restored.potential()->evaluate(v.q, v.R).grad_q == model.potential()->evaluate(v.q, v.R).grad_q);

  LearnedDynamics wrong;
  wrong.params = toy_precession().params;
  wrong.params.bodies.push_back(wrong.params.bodies[0]);
  CHECK_THROWS_AS(restore_checkpoint(c, wrong, nullptr), std::runtime_error);
}
