#include "srnn/integrators.hpp"

#include <cmath>

namespace srnn {

std::string to_string(StepScheme s) {
  switch (s) {
    case StepScheme::ExplicitEuler: return "euler";
    case StepScheme::RK4: return "rk4";
    case StepScheme::Verlet: return "verlet";
    case StepScheme::LieRK2: return "cf2";
    case StepScheme::LieRK4: return "cf4";
    case StepScheme::LieT2: return "liet2";
  }
  return "?";
}

StepScheme parse_scheme(std::string_view name) {
  if (name == "euler" || name == "explicit_euler") return StepScheme::ExplicitEuler;
  if (name == "rk4") return StepScheme::RK4;
  if (name == "verlet") return StepScheme::Verlet;
  if (name == "cf2" || name == "lie_rk2" || name == "lierk2") return StepScheme::LieRK2;
  if (name == "cf4" || name == "lie_rk4" || name == "lierk4") return StepScheme::LieRK4;
  if (name == "liet2" || name == "lie_t2") return StepScheme::LieT2;
  throw std::invalid_argument("unknown scheme '" + std::string(name) + "'");
}

void StepContext::validate() const {
  if (!V) throw std::invalid_argument("StepContext: potential model is null");
  if (!F) throw std::invalid_argument("StepContext: forcing model is null");
  if (!(h != 0.0) || !std::isfinite(h)) throw std::invalid_argument("StepContext: h must be finite and nonzero");
  if (params.size() == 0) throw std::invalid_argument("StepContext: no bodies");
}

namespace {

Mat3 attach(const Mat3& R, const Vec3& omega, bool left) {
  const Rotation e = exp_so3(omega);
  return left ? mul(e.matrix(), R) : mul(R, e.matrix());
}

// x + k * a, componentwise over the flat state.
SystemState axpy(const SystemState& x, const Derivatives& k, double a) {
  SystemState out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto& b = out.bodies[i];
    b.q = b.q + k[i].dq * a;
    b.p = b.p + k[i].dp * a;
    b.R = b.R + k[i].dR * a;
    b.Pi = b.Pi + k[i].dPi * a;
  }
  return out;
}

// Euclidean part only: R is left untouched.
SystemState axpy_euclid(const SystemState& x, const Derivatives& k, double a) {
  SystemState out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto& b = out.bodies[i];
    b.q = b.q + k[i].dq * a;
    b.p = b.p + k[i].dp * a;
    b.Pi = b.Pi + k[i].dPi * a;
  }
  return out;
}

template <class T>
T rk4_combine(const T& k1, const T& k2, const T& k3, const T& k4) {
  return k1 + k2 * 2.0 + k3 * 2.0 + k4;
}

Derivatives rhs(const SystemState& s, const StepContext& ctx) { return eom(s, ctx.params, *ctx.V, *ctx.F); }

}  // namespace

SystemState flow_ke(const SystemState& state, const SystemParams& params, double h) {
  check_consistent(state, params);
  SystemState out = state;
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto& b = out.bodies[i];
    const BodyParams& bp = params.bodies[i];
    const double inv_m = 1.0 / bp.mass;
    const Vec3 Jinv = bp.inverse_inertia();
    b.q = b.q + b.p * (h * inv_m);
    const double theta = (Jinv.z - Jinv.x) * b.Pi.z;
    const Rotation Rz = exp_so3({0.0, 0.0, theta * h});
    // exp_so3(Pi h/J1) is the rotation by |Pi| h/J1 about the axis Pi.
    b.R = mul(mul(b.R, exp_so3(b.Pi * (h * Jinv.x)).matrix()), Rz.matrix());
    b.Pi = tmul(Rz.matrix(), b.Pi);
  }
  return out;
}

SystemState flow_pe(const SystemState& state, const StepContext& ctx, double h) {
  check_consistent(state, ctx.params);
  const StateViews v(state);
  const PotentialEval pe = ctx.V->evaluate(v.q, v.R);
  const bool rotational = ctx.V->has_rotation_dependence();
  SystemState out = state;
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto& b = out.bodies[i];
    b.p = b.p - pe.grad_q[i] * h;
    if (rotational) b.Pi = b.Pi - skew_project_torque(b.R, pe.grad_R[i]) * h;
  }
  return out;
}

SystemState flow_asym(const SystemState& state, const SystemParams& params, double h, bool literal_left) {
  check_consistent(state, params);
  SystemState out = state;
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto& b = out.bodies[i];
    const Vec3 Jinv = params.bodies[i].inverse_inertia();
    const double delta = Jinv.y - Jinv.x;
    const Rotation Ry = exp_so3({0.0, delta * b.Pi.y * h, 0.0});
    b.R = literal_left ? mul(Ry.matrix(), b.R) : mul(b.R, Ry.matrix());
    b.Pi = tmul(Ry.matrix(), b.Pi);
  }
  return out;
}

SystemState flow_force(const SystemState& state, const StepContext& ctx, double h) {
  check_consistent(state, ctx.params);
  if (ctx.F->is_zero()) return state;
  const StateViews v(state);
  const ForcingEval fe = ctx.F->evaluate(v.q, v.R, v.p, v.Pi);
  SystemState out = state;
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto& b = out.bodies[i];
    b.p = b.p + fe.F_p[i] * h;
    b.Pi = b.Pi + fe.F_Pi[i] * h;
  }
  return out;
}

SystemState step_lie_t2(const SystemState& state, const StepContext& ctx) {
  ctx.validate();
  const double h = ctx.h;
  const double hh = 0.5 * h;
  const bool left = ctx.options.asym_literal_left;
  SystemState s = flow_ke(state, ctx.params, hh);
  s = flow_pe(s, ctx, hh);
  s = flow_asym(s, ctx.params, hh, left);
  s = flow_force(s, ctx, h);
  s = flow_asym(s, ctx.params, hh, left);
  s = flow_pe(s, ctx, hh);
  s = flow_ke(s, ctx.params, hh);
  s.t = state.t + h;
  return s;
}

SystemState step_euler(const SystemState& state, const StepContext& ctx) {
  ctx.validate();
  SystemState s = axpy(state, rhs(state, ctx), ctx.h);
  s.t = state.t + ctx.h;
  return s;
}

SystemState step_rk4(const SystemState& state, const StepContext& ctx) {
  ctx.validate();
  const double h = ctx.h;
  const Derivatives k1 = rhs(state, ctx);
  const Derivatives k2 = rhs(axpy(state, k1, 0.5 * h), ctx);
  const Derivatives k3 = rhs(axpy(state, k2, 0.5 * h), ctx);
  const Derivatives k4 = rhs(axpy(state, k3, h), ctx);
  SystemState out = state;
  const double w = h / 6.0;
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto& b = out.bodies[i];
    b.q = b.q + rk4_combine(k1[i].dq, k2[i].dq, k3[i].dq, k4[i].dq) * w;
    b.p = b.p + rk4_combine(k1[i].dp, k2[i].dp, k3[i].dp, k4[i].dp) * w;
    b.R = b.R + rk4_combine(k1[i].dR, k2[i].dR, k3[i].dR, k4[i].dR) * w;
    b.Pi = b.Pi + rk4_combine(k1[i].dPi, k2[i].dPi, k3[i].dPi, k4[i].dPi) * w;
  }
  out.t = state.t + h;
  return out;
}

SystemState step_verlet(const SystemState& state, const StepContext& ctx) {
  ctx.validate();
  const double h = ctx.h;
  const double hd = ctx.options.verlet_literal ? h : 0.5 * h;
  const std::size_t n = state.size();

  SystemState half = state;
  for (std::size_t i = 0; i < n; ++i) {
    auto& b = half.bodies[i];
    const BodyParams& bp = ctx.params.bodies[i];
    const Vec3 omega = hadamard(b.Pi, bp.inverse_inertia());
    b.q = b.q + b.p * (hd * (1.0 / bp.mass));
    b.R = b.R + mul(b.R, hat(omega)) * hd;
  }

  const StateViews v(half);
  const PotentialEval pe = ctx.V->evaluate(v.q, v.R);
  const bool rotational = ctx.V->has_rotation_dependence();
  const bool forced = !ctx.F->is_zero();
  ForcingEval fe;
  if (forced) fe = ctx.F->evaluate(v.q, v.R, v.p, v.Pi);

  SystemState out = half;
  for (std::size_t i = 0; i < n; ++i) {
    auto& b = out.bodies[i];
    const BodyParams& bp = ctx.params.bodies[i];
    const Vec3 Jinv = bp.inverse_inertia();
    Vec3 dp = -pe.grad_q[i];
    Vec3 dPi = cross(b.Pi, hadamard(b.Pi, Jinv));
    if (rotational) dPi = dPi - skew_project_torque(b.R, pe.grad_R[i]);
    if (forced) {
      dp = dp + fe.F_p[i];
      dPi = dPi + fe.F_Pi[i];
    }
    b.p = b.p + dp * h;
    b.Pi = b.Pi + dPi * h;
    const Vec3 omega = hadamard(b.Pi, Jinv);
    b.q = b.q + b.p * (hd * (1.0 / bp.mass));
    b.R = b.R + mul(b.R, hat(omega)) * hd;
  }
  out.t = state.t + h;
  return out;
}

SystemState step_cf2(const SystemState& state, const StepContext& ctx) {
  ctx.validate();
  const double h = ctx.h;
  const bool left = ctx.options.cf_literal_left;
  const Derivatives k1 = rhs(state, ctx);
  SystemState mid = axpy_euclid(state, k1, 0.5 * h);
  for (std::size_t i = 0; i < state.size(); ++i) {
    const Vec3 w1 = hadamard(state.bodies[i].Pi, ctx.params.bodies[i].inverse_inertia());
    mid.bodies[i].R = attach(state.bodies[i].R, w1 * (0.5 * h), left);
  }
  const Derivatives k2 = rhs(mid, ctx);
  SystemState out = axpy_euclid(state, k2, h);
  for (std::size_t i = 0; i < state.size(); ++i) {
    const Vec3 w2 = hadamard(mid.bodies[i].Pi, ctx.params.bodies[i].inverse_inertia());
    out.bodies[i].R = attach(state.bodies[i].R, w2 * h, left);
  }
  out.t = state.t + h;
  return out;
}

SystemState step_cf4(const SystemState& state, const StepContext& ctx) {
  ctx.validate();
  const double h = ctx.h;
  const bool left = ctx.options.cf_literal_left;
  const std::size_t n = state.size();
  auto omega = [&](const SystemState& s, std::size_t i) {
    return hadamard(s.bodies[i].Pi, ctx.params.bodies[i].inverse_inertia());
  };

  const Derivatives k1 = rhs(state, ctx);
  SystemState s2 = axpy_euclid(state, k1, 0.5 * h);
  for (std::size_t i = 0; i < n; ++i) s2.bodies[i].R = attach(state.bodies[i].R, omega(state, i) * (0.5 * h), left);

  const Derivatives k2 = rhs(s2, ctx);
  SystemState s3 = axpy_euclid(state, k2, 0.5 * h);
  for (std::size_t i = 0; i < n; ++i) s3.bodies[i].R = attach(state.bodies[i].R, omega(s2, i) * (0.5 * h), left);

  const Derivatives k3 = rhs(s3, ctx);
  SystemState s4 = axpy_euclid(state, k3, h);
  const SystemState& base4 = ctx.options.cf4_literal_stage ? s3 : s2;
  for (std::size_t i = 0; i < n; ++i)
    s4.bodies[i].R = attach(base4.bodies[i].R, (omega(s3, i) - omega(state, i) * 0.5) * h, left);

  const Derivatives k4 = rhs(s4, ctx);
  SystemState out = state;
  const double w = h / 6.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto& b = out.bodies[i];
    b.q = b.q + rk4_combine(k1[i].dq, k2[i].dq, k3[i].dq, k4[i].dq) * w;
    b.p = b.p + rk4_combine(k1[i].dp, k2[i].dp, k3[i].dp, k4[i].dp) * w;
    b.Pi = b.Pi + rk4_combine(k1[i].dPi, k2[i].dPi, k3[i].dPi, k4[i].dPi) * w;
    const Vec3 w1 = omega(state, i), w2 = omega(s2, i), w3 = omega(s3, i), w4 = omega(s4, i);
    const Vec3 a = (w1 * 3.0 + w2 * 2.0 + w3 * 2.0 - w4) * (h / 12.0);
    const Vec3 c = (w2 * 2.0 + w3 * 2.0 + w4 * 3.0 - w1) * (h / 12.0);
    b.R = attach(attach(state.bodies[i].R, a, left), c, left);
  }
  out.t = state.t + h;
  return out;
}

SystemState step(StepScheme scheme, const SystemState& state, const StepContext& ctx) {
  switch (scheme) {
    case StepScheme::ExplicitEuler: return step_euler(state, ctx);
    case StepScheme::RK4: return step_rk4(state, ctx);
    case StepScheme::Verlet: return step_verlet(state, ctx);
    case StepScheme::LieRK2: return step_cf2(state, ctx);
    case StepScheme::LieRK4: return step_cf4(state, ctx);
    case StepScheme::LieT2: return step_lie_t2(state, ctx);
  }
  throw std::invalid_argument("step: bad scheme");
}

std::vector<SystemState> rollout(const SystemState& state, const StepContext& ctx, StepScheme scheme, std::size_t n,
                                 const RolloutOptions& opts) {
  if (n < 1) throw std::invalid_argument("rollout: n must be >= 1");
  if (opts.keep == RolloutOptions::Keep::Stride && opts.stride == 0)
    throw std::invalid_argument("rollout: stride must be >= 1");
  std::vector<SystemState> out;
  if (opts.keep == RolloutOptions::Keep::All) out.reserve(n);
  SystemState s = state;
  for (std::size_t k = 1; k <= n; ++k) {
    s = step(scheme, s, ctx);
    if (!all_finite(s))
      throw DivergenceError(to_string(scheme) + " rollout diverged at step " + std::to_string(k), k);
    const bool keep = opts.keep == RolloutOptions::Keep::All ||
                      (opts.keep == RolloutOptions::Keep::Stride && k % opts.stride == 0) || k == n;
    if (keep) out.push_back(s);
  }
  return out;
}

}  // namespace srnn
