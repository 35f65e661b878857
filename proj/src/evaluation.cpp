#include "srnn/evaluation.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <exception>
#include <istream>
#include <limits>
#include <memory>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "srnn/kernels.hpp"

namespace srnn {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

void put_real(std::ostream& os, double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  os.write(buf, r.ptr - buf);
}

double parse_real(std::string_view tok, const char* what) {
  double x = 0.0;
  const auto r = std::from_chars(tok.data(), tok.data() + tok.size(), x);
  if (r.ec != std::errc() || r.ptr != tok.data() + tok.size())
    throw std::runtime_error(std::string(what) + ": bad number '" + std::string(tok) + "'");
  return x;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

bool same_bits(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

std::vector<std::size_t> selected(const Dataset& d, Split split) {
  std::vector<std::size_t> idx;
  for (std::size_t l = 0; l < d.trajectories.size(); ++l) {
    const bool tr = d.trajectories[l].train;
    if (split == Split::All || (split == Split::Train && tr) || (split == Split::Val && !tr)) idx.push_back(l);
  }
  return idx;
}

// Runs body(i) for i < n in parallel and rethrows the first exception.
template <class F>
void parallel_for(std::size_t n, F&& body) {
  std::exception_ptr err;
#pragma omp parallel for schedule(dynamic) num_threads(kernels::num_threads())
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(srnn_eval_error)
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
}

}  // namespace

std::string format_real(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

bool operator==(const MetricsReport& a, const MetricsReport& b) {
  return same_bits(a.dq, b.dq) && same_bits(a.dR, b.dR) && same_bits(a.dp_dot, b.dp_dot) &&
         same_bits(a.dPi_dot, b.dPi_dot) && same_bits(a.dVdq, b.dVdq) && same_bits(a.dVdR, b.dVdR) &&
         same_bits(a.max_defect, b.max_defect) && same_bits(a.max_H_error, b.max_H_error) &&
         a.H_absolute == b.H_absolute && a.steps == b.steps && a.diverged == b.diverged;
}

TrajectoryErrors metric_trajectory(std::span<const SystemState> pred, std::span<const SystemState> truth) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("metric_trajectory: " + std::to_string(pred.size()) + " predicted vs " +
                                std::to_string(truth.size()) + " true snapshots");
  if (pred.empty()) throw std::invalid_argument("metric_trajectory: empty trajectories");
  double sq = 0.0, sR = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    if (pred[k].size() != truth[k].size()) throw std::invalid_argument("metric_trajectory: body counts differ");
    double e2 = 0.0, g = 0.0;
    for (std::size_t i = 0; i < pred[k].size(); ++i) {
      const Vec3 d = pred[k].bodies[i].q - truth[k].bodies[i].q;
      e2 += dot(d, d);
      g += geodesic_distance(truth[k].bodies[i].R, pred[k].bodies[i].R);
    }
    sq += std::sqrt(e2);
    sR += g;
  }
  const double n = static_cast<double>(pred.size());
  return {sq / n, sR / n};
}

std::vector<SystemState> dataset_states(const Dataset& d, Split split) {
  std::vector<SystemState> out;
  for (std::size_t l : selected(d, split))
    out.insert(out.end(), d.trajectories[l].snapshots.begin(), d.trajectories[l].snapshots.end());
  return out;
}

ForceErrors metric_force_errors(const StepContext& model, StepScheme scheme, const Dataset& d, std::size_t substeps,
                                Split split) {
  if (substeps == 0) throw std::invalid_argument("metric_force_errors: substeps must be positive");
  StepContext ctx = model;
  ctx.h = d.dt / static_cast<double>(substeps);
  ctx.validate();
  const auto idx = selected(d, split);
  struct Partial {
    double p = 0.0, Pi = 0.0;
    std::size_t n = 0;
    bool diverged = false;
  };
  std::vector<Partial> part(idx.size());
  parallel_for(idx.size(), [&](std::size_t j) {
    const auto& snaps = d.trajectories[idx[j]].snapshots;
    Partial& acc = part[j];
    for (std::size_t k = 0; k + 1 < snaps.size(); ++k) {
      SystemState s;
      try {
        s = rollout(snaps[k], ctx, scheme, substeps, {RolloutOptions::Keep::Last}).back();
      } catch (const DivergenceError&) {
        acc.diverged = true;
        return;
      } catch (const SingularConfiguration&) {
        acc.diverged = true;
        return;
      }
      double ep = 0.0, eP = 0.0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        const Vec3 dp = s.bodies[i].p - snaps[k + 1].bodies[i].p;
        const Vec3 dPi = s.bodies[i].Pi - snaps[k + 1].bodies[i].Pi;
        ep += dot(dp, dp);
        eP += dot(dPi, dPi);
      }
      acc.p += std::sqrt(ep) / d.dt;
      acc.Pi += std::sqrt(eP) / d.dt;
      ++acc.n;
    }
  });
  ForceErrors out;
  std::size_t n = 0;
  for (const auto& a : part) {
    out.dp_dot += a.p;
    out.dPi_dot += a.Pi;
    n += a.n;
    out.diverged = out.diverged || a.diverged;
  }
  if (out.diverged) return {kInf, kInf, true};
  if (n == 0) throw std::invalid_argument("metric_force_errors: no consecutive snapshot pairs");
  out.dp_dot /= static_cast<double>(n);
  out.dPi_dot /= static_cast<double>(n);
  return out;
}

GradErrors metric_potential_grad_errors(const PotentialModel& learned, const PotentialModel& truth,
                                        std::span<const SystemState> states) {
  if (states.empty()) throw std::invalid_argument("metric_potential_grad_errors: no states");
  GradErrors out;
  for (const auto& s : states) {
    const StateViews v(s);
    const PotentialEval a = learned.evaluate(v.q, v.R);
    const PotentialEval b = truth.evaluate(v.q, v.R);
    double eq = 0.0, eR = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const Vec3 dq = a.grad_q[i] - b.grad_q[i];
      eq += dot(dq, dq);
      const Mat3 ga = a.grad_R.empty() ? Mat3{} : a.grad_R[i];
      const Mat3 gb = b.grad_R.empty() ? Mat3{} : b.grad_R[i];
      const Vec3 tau = skew_project_torque(v.R[i], ga - gb);
      eR += dot(tau, tau);
    }
    out.dVdq += std::sqrt(eq);
    out.dVdR += std::sqrt(eR);
  }
  const double n = static_cast<double>(states.size());
  out.dVdq /= n;
  out.dVdR /= n;
  return out;
}

ConservationErrors metric_conservation(std::span<const SystemState> traj, const SystemParams& params,
                                       const PotentialModel& V) {
  if (traj.empty()) throw std::invalid_argument("metric_conservation: empty trajectory");
  ConservationErrors out;
  const double H0 = hamiltonian(traj.front(), params, V);
  out.H_absolute = H0 == 0.0;
  for (const auto& s : traj) {
    for (const auto& b : s.bodies) out.max_defect = std::max(out.max_defect, orthonormality_defect(b.R));
    const double e = std::abs(hamiltonian(s, params, V) - H0);
    out.max_H_error = std::max(out.max_H_error, out.H_absolute ? e : e / std::abs(H0));
  }
  return out;
}

MetricsReport evaluate_dynamics(const StepContext& model, const Dataset& d, const EvalSpec& spec,
                                const PotentialModel* learned_resid, const PotentialModel* truth_resid) {
  if (spec.H == 0 || spec.steps == 0 || spec.steps % spec.H != 0)
    throw std::invalid_argument("evaluate: steps must be a positive multiple of H");
  const std::size_t n_obs = spec.steps / spec.H;
  if (n_obs > d.K)
    throw std::invalid_argument("evaluate: " + std::to_string(spec.steps) + " steps at H = " + std::to_string(spec.H) +
                                " need " + std::to_string(n_obs) + " snapshots, dataset has K = " +
                                std::to_string(d.K));
  const auto idx = selected(d, spec.split);
  if (idx.empty()) throw std::invalid_argument("evaluate: no trajectories in the selected split");

  StepContext ctx = model;
  ctx.h = d.dt / static_cast<double>(spec.H);
  ctx.options = spec.options;
  ctx.validate();
  const bool conservative = ctx.F->is_zero();

  struct Partial {
    TrajectoryErrors err;
    ConservationErrors cons;
    bool diverged = false;
  };
  std::vector<Partial> part(idx.size());
  parallel_for(idx.size(), [&](std::size_t j) {
    const auto& snaps = d.trajectories[idx[j]].snapshots;
    std::vector<SystemState> pred;
    try {
      pred = rollout(snaps.front(), ctx, spec.scheme, spec.steps, {RolloutOptions::Keep::Stride, spec.H});
    } catch (const DivergenceError&) {
      part[j].diverged = true;
      return;
    } catch (const SingularConfiguration&) {
      part[j].diverged = true;
      return;
    }
    part[j].err = metric_trajectory(pred, std::span(snaps).subspan(1, n_obs));
    pred.insert(pred.begin(), snaps.front());
    part[j].cons = metric_conservation(pred, ctx.params, *ctx.V);
  });

  MetricsReport r;
  r.steps = spec.steps;
  r.max_H_error = conservative ? 0.0 : kNaN;
  for (const auto& p : part) {
    r.diverged = r.diverged || p.diverged;
    r.dq += p.err.dq;
    r.dR += p.err.dR;
    r.max_defect = std::max(r.max_defect, p.cons.max_defect);
    if (conservative) r.max_H_error = std::max(r.max_H_error, p.cons.max_H_error);
    r.H_absolute = r.H_absolute || p.cons.H_absolute;
  }
  const double n = static_cast<double>(idx.size());
  r.dq /= n;
  r.dR /= n;
  if (r.diverged) {
    r.dq = r.dR = r.max_defect = kInf;
    if (conservative) r.max_H_error = kInf;
  }

  const ForceErrors fe = metric_force_errors(ctx, spec.scheme, d, spec.H, spec.split);
  r.dp_dot = fe.dp_dot;
  r.dPi_dot = fe.dPi_dot;
  r.diverged = r.diverged || fe.diverged;

  if (learned_resid && truth_resid) {
    const GradErrors ge = metric_potential_grad_errors(*learned_resid, *truth_resid, dataset_states(d, spec.split));
    r.dVdq = ge.dVdq;
    r.dVdR = ge.dVdR;
  } else {
    r.dVdq = r.dVdR = kNaN;
  }
  return r;
}

MetricsReport evaluate_model(const LearnedDynamics& model, const Dataset& d, const EvalSpec& spec,
                             const PotentialModel* truth_resid) {
  std::shared_ptr<const PotentialModel> resid;
  if (model.V)
    resid = std::make_shared<LearnedPotential>(*model.V, model.V_norm);
  else
    resid = std::make_shared<ZeroPotential>();
  return evaluate_dynamics(model.context(d.dt / static_cast<double>(std::max<std::size_t>(spec.H, 1)), spec.options),
                           d, spec, resid.get(), truth_resid);
}

// ---- report I/O ------------------------------------------------------------------

namespace {

constexpr const char* kMetricsHeader =
    "label,dq,dR,dp_dot,dPi_dot,dVdq,dVdR,max_defect,max_H_error,H_absolute,steps,diverged";

nlohmann::json real_json(double x) {
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

double json_real(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "nan") return kNaN;
    if (s == "inf") return kInf;
    if (s == "-inf") return -kInf;
  }
  throw std::runtime_error(std::string("metrics json: bad value for ") + key);
}

}  // namespace

void write_metrics_csv(std::ostream& os, std::span<const LabeledReport> rows) {
  os << kMetricsHeader << '\n';
  for (const auto& [label, r] : rows) {
    if (label.find_first_of(",\n\r") != std::string::npos)
      throw std::invalid_argument("write_metrics_csv: label '" + label + "' contains a separator");
    os << label;
    for (double x : {r.dq, r.dR, r.dp_dot, r.dPi_dot, r.dVdq, r.dVdR, r.max_defect, r.max_H_error}) {
      os << ',';
      put_real(os, x);
    }
    os << ',' << (r.H_absolute ? 1 : 0) << ',' << r.steps << ',' << (r.diverged ? 1 : 0) << '\n';
  }
}

std::vector<LabeledReport> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || split_csv(line) != split_csv(kMetricsHeader))
    throw std::runtime_error("metrics csv: missing or wrong header");
  std::vector<LabeledReport> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 12) throw std::runtime_error("metrics csv: expected 12 fields in '" + line + "'");
    MetricsReport r;
    double* reals[] = {&r.dq, &r.dR, &r.dp_dot, &r.dPi_dot, &r.dVdq, &r.dVdR, &r.max_defect, &r.max_H_error};
    for (int k = 0; k < 8; ++k) *reals[k] = parse_real(f[1 + k], "metrics csv");
    r.H_absolute = f[9] == "1";
    const auto s = std::from_chars(f[10].data(), f[10].data() + f[10].size(), r.steps);
    if (s.ec != std::errc() || s.ptr != f[10].data() + f[10].size())
      throw std::runtime_error("metrics csv: bad step count '" + f[10] + "'");
    r.diverged = f[11] == "1";
    out.emplace_back(f[0], r);
  }
  return out;
}

std::string metrics_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["dq"] = real_json(r.dq);
  j["dR"] = real_json(r.dR);
  j["dp_dot"] = real_json(r.dp_dot);
  j["dPi_dot"] = real_json(r.dPi_dot);
  j["dVdq"] = real_json(r.dVdq);
  j["dVdR"] = real_json(r.dVdR);
  j["max_defect"] = real_json(r.max_defect);
  j["max_H_error"] = real_json(r.max_H_error);
  j["H_absolute"] = r.H_absolute;
  j["steps"] = r.steps;
  j["diverged"] = r.diverged;
  return j.dump(2);
}

MetricsReport metrics_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetricsReport r;
  r.dq = json_real(j, "dq");
  r.dR = json_real(j, "dR");
  r.dp_dot = json_real(j, "dp_dot");
  r.dPi_dot = json_real(j, "dPi_dot");
  r.dVdq = json_real(j, "dVdq");
  r.dVdR = json_real(j, "dVdR");
  r.max_defect = json_real(j, "max_defect");
  r.max_H_error = json_real(j, "max_H_error");
  r.H_absolute = j.at("H_absolute").get<bool>();
  r.steps = j.at("steps").get<std::size_t>();
  r.diverged = j.at("diverged").get<bool>();
  return r;
}

// ---- convergence -----------------------------------------------------------------

double ConvergenceResult::slope(StepScheme s) const {
  for (const auto& r : rows)
    if (r.scheme == s) return r.slope;
  throw std::invalid_argument("ConvergenceResult: no rows for " + to_string(s));
}

namespace {

std::size_t step_count(double T, double h) {
  const double n = T / h;
  const double r = std::round(n);
  if (!(r >= 1.0) || std::abs(n - r) > 1e-9 * r)
    throw std::invalid_argument("convergence: T / h must be a positive integer (h = " + std::to_string(h) + ")");
  return static_cast<std::size_t>(r);
}

double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  if (x.size() < 2) return kNaN;
  double mx = 0.0, my = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxy += (x[k] - mx) * (y[k] - my);
    sxx += (x[k] - mx) * (x[k] - mx);
  }
  return sxy / sxx;
}

}  // namespace

ConvergenceResult convergence_study(const System& sys, const ConvergenceSpec& spec) {
  if (spec.schemes.empty() || spec.h.empty()) throw std::invalid_argument("convergence: need schemes and step sizes");
  const double h_min = *std::min_element(spec.h.begin(), spec.h.end());
  const double h_ref = spec.h_ref > 0.0 ? spec.h_ref : h_min / 100.0;
  if (h_ref > h_min / 100.0 * (1.0 + 1e-12))
    throw std::invalid_argument("convergence: h_ref must be at most min(h) / 100");

  StepContext ref_ctx{sys.params, sys.truth_V, sys.truth_F, h_ref, spec.options};
  ref_ctx.validate();
  const SystemState ref =
      rollout(sys.state, ref_ctx, spec.reference, step_count(spec.T, h_ref), {RolloutOptions::Keep::Last}).back();

  ConvergenceResult out;
  for (StepScheme s : spec.schemes)
    for (double h : spec.h) out.rows.push_back({s, h, 0.0, 0.0, 0.0, false});

  parallel_for(out.rows.size(), [&](std::size_t k) {
    ConvergenceRow& row = out.rows[k];
    StepContext ctx = ref_ctx;
    ctx.h = row.h;
    try {
      const SystemState s =
          rollout(sys.state, ctx, row.scheme, step_count(spec.T, row.h), {RolloutOptions::Keep::Last}).back();
      double e2 = 0.0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        const Vec3 d = s.bodies[i].q - ref.bodies[i].q;
        e2 += dot(d, d);
        row.err_R += geodesic_distance(ref.bodies[i].R, s.bodies[i].R);
      }
      row.err_q = std::sqrt(e2);
    } catch (const DivergenceError&) {
      row.diverged = true;
      row.err_q = row.err_R = kInf;
    } catch (const SingularConfiguration&) {
      row.diverged = true;
      row.err_q = row.err_R = kInf;
    }
  });

  for (StepScheme s : spec.schemes) {
    std::vector<double> x, y;
    for (const auto& r : out.rows) {
      const double e = r.err_q + r.err_R;
      if (r.scheme == s && !r.diverged && e > 0.0 && std::isfinite(e)) {
        x.push_back(std::log(r.h));
        y.push_back(std::log(e));
      }
    }
    const double slope = fit_slope(x, y);
    for (auto& r : out.rows)
      if (r.scheme == s) r.slope = slope;
  }
  return out;
}

void write_convergence_csv(std::ostream& os, const ConvergenceResult& r) {
  os << "scheme,h,err_q,err_R,slope\n";
  for (const auto& row : r.rows) {
    os << to_string(row.scheme);
    for (double x : {row.h, row.err_q, row.err_R, row.slope}) {
      os << ',';
      put_real(os, x);
    }
    os << '\n';
  }
}

ConvergenceResult read_convergence_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "scheme,h,err_q,err_R,slope")
    throw std::runtime_error("convergence csv: missing or wrong header");
  ConvergenceResult out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 5) throw std::runtime_error("convergence csv: expected 5 fields in '" + line + "'");
    ConvergenceRow row;
    row.scheme = parse_scheme(f[0]);
    row.h = parse_real(f[1], "convergence csv");
    row.err_q = parse_real(f[2], "convergence csv");
    row.err_R = parse_real(f[3], "convergence csv");
    row.slope = parse_real(f[4], "convergence csv");
    row.diverged = !std::isfinite(row.err_q) || !std::isfinite(row.err_R);
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace srnn
