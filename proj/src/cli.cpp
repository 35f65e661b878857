#include "srnn/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "srnn/config.hpp"
#include "srnn/evaluation.hpp"
#include "srnn/learning.hpp"

namespace srnn {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct Flags {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  std::string scheme;
  std::size_t steps = 0;
  double h = 0.0;
  std::size_t substeps = 0;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* scheme_opt = nullptr;
  CLI::Option* steps_opt = nullptr;
  CLI::Option* h_opt = nullptr;
  CLI::Option* substeps_opt = nullptr;
  CLI::Option* out_opt = nullptr;
};

RunConfig resolve(const Flags& f) {
  RunConfig c = load_config(f.config);
  if (f.seed_opt->count()) c.data.seed = c.model.init_seed = c.training.seed = f.seed;
  if (f.scheme_opt->count()) {
    try {
      c.scheme = parse_scheme(f.scheme);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("--scheme: ") + e.what());
    }
  }
  if (f.steps_opt->count()) c.steps = c.eval_steps = f.steps;
  if (f.h_opt->count()) c.h = f.h;
  if (f.substeps_opt->count()) {
    if (f.substeps == 0) throw ConfigError("--substeps must be positive");
    c.substeps = f.substeps;
  }
  if (f.out_opt->count()) c.out_dir = f.out;
  return c;
}

fs::path out_dir(const RunConfig& c) {
  fs::path p(c.out_dir);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + p.string() + " for writing");
  os << text;
  if (!os) throw std::runtime_error("write failed for " + p.string());
}

template <class F>
void write_with(const fs::path& p, F&& emit) {
  std::ostringstream ss;
  emit(ss);
  write_text(p, ss.str());
}

std::vector<SystemState> read_trajectory_file(const std::string& path, std::size_t n_bodies) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open trajectory " + path);
  return read_trajectory(is, n_bodies);
}

Dataset obtain_dataset(const RunConfig& c, const System& sys, std::ostream& out) {
  if (!c.dataset_path.empty()) {
    out << "loading dataset " << c.dataset_path << '\n';
    return load_dataset(c.dataset_path);
  }
  out << "generating dataset: L=" << c.data.L << " K=" << c.data.K << " dt=" << c.data.dt << '\n';
  GenerateOptions g = c.data;
  g.units = sys.units;
  return generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, g);
}

LearnedDynamics fresh_model(const RunConfig& c, const Dataset& d) {
  LearnedDynamics m = LearnedDynamics::make(d.params, c.model);
  if (c.model.normalize_inputs) m.fit_normalizers(d);
  return m;
}

LearnedDynamics model_from_checkpoint(const std::string& path, const SystemParams& params) {
  const Checkpoint ck = load_checkpoint(path);
  LearnedDynamics m;
  m.params = params;
  restore_checkpoint(ck, m, nullptr);
  return m;
}

// Config stored in checkpoints; the output location does not affect the model.
std::string provenance_json(RunConfig c) {
  c.out_dir.clear();
  return config_to_json(c);
}

std::string curve_csv(const std::vector<EpochRecord>& curve) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,diverged\n";
  for (const auto& r : curve)
    os << r.epoch << ',' << format_real(r.train_loss) << ',' << format_real(r.val_loss) << ',' << r.diverged << '\n';
  return os.str();
}

// ---- subcommands -------------------------------------------------------------

int cmd_simulate(const RunConfig& c, std::ostream& out) {
  const System sys = build_system(c);
  StepContext ctx{sys.params, sys.truth_V, sys.truth_F, c.h, c.options};
  ctx.validate();
  auto traj = rollout(sys.state, ctx, c.scheme, c.steps, {RolloutOptions::Keep::Stride, c.substeps});
  traj.insert(traj.begin(), sys.state);
  const auto dir = out_dir(c);
  write_with(dir / "trajectory.txt", [&](std::ostream& os) { write_trajectory(os, traj); });
  const ConservationErrors cons = metric_conservation(traj, sys.params, *sys.truth_V);
  json j;
  j["system"] = sys.name;
  j["scheme"] = to_string(c.scheme);
  j["h"] = c.h;
  j["steps"] = c.steps;
  j["snapshots"] = traj.size();
  j["max_defect"] = cons.max_defect;
  if (sys.truth_F->is_zero()) {
    j["max_H_error"] = cons.max_H_error;
    j["H_absolute"] = cons.H_absolute;
  }
  write_text(dir / "simulate.json", j.dump(2) + "\n");
  out << "simulate: " << sys.name << ", " << c.steps << " " << to_string(c.scheme) << " steps, max defect "
      << cons.max_defect << ", wrote " << (dir / "trajectory.txt").string() << '\n';
  return kExitOk;
}

int cmd_gen_data(const RunConfig& c, std::ostream& out) {
  const System sys = build_system(c);
  const Dataset d = obtain_dataset(c, sys, out);
  const auto dir = out_dir(c);
  save_dataset((dir / "dataset.txt").string(), d);
  out << "gen-data: " << d.trajectories.size() << " trajectories (" << d.num_train() << " train), wrote "
      << (dir / "dataset.txt").string() << '\n';
  return kExitOk;
}

int cmd_train(const RunConfig& c, std::ostream& out) {
  const System sys = build_system(c);
  const Dataset d = obtain_dataset(c, sys, out);
  const TrainResult r = train(d, fresh_model(c, d), training_config(c));
  const auto dir = out_dir(c);
  save_checkpoint((dir / "checkpoint.bin").string(), make_checkpoint(r.model, r.optimizer, provenance_json(c)));
  write_text(dir / "curve.csv", curve_csv(r.curve));
  json j;
  j["scheme"] = to_string(c.scheme);
  j["epochs"] = r.curve.empty() ? 0 : r.curve.back().epoch;
  j["best_epoch"] = r.best_epoch;
  j["best_val_loss"] = format_real(r.best_val_loss);
  j["diverged"] = r.diverged;
  if (r.diverged) j["divergence_report"] = r.divergence_report;
  write_text(dir / "train.json", j.dump(2) + "\n");
  out << "train: best val loss " << r.best_val_loss << " at epoch " << r.best_epoch << ", wrote "
      << (dir / "checkpoint.bin").string() << '\n';
  if (r.diverged) {
    out << "train: diverged: " << r.divergence_report << '\n';
    return kExitDiverged;
  }
  return kExitOk;
}

void write_reports(const fs::path& dir, const std::string& stem, const std::vector<LabeledReport>& rows) {
  write_with(dir / (stem + ".csv"), [&](std::ostream& os) { write_metrics_csv(os, rows); });
  if (rows.size() == 1) {
    write_text(dir / (stem + ".json"), metrics_to_json(rows.front().second) + "\n");
    return;
  }
  json arr = json::array();
  for (const auto& [label, r] : rows) arr.push_back({{"label", label}, {"report", json::parse(metrics_to_json(r))}});
  write_text(dir / (stem + ".json"), arr.dump(2) + "\n");
}

void print_report(std::ostream& out, const std::string& label, const MetricsReport& r) {
  out << label << ": dq " << r.dq << "  dR " << r.dR << "  dp_dot " << r.dp_dot << "  dPi_dot " << r.dPi_dot
      << "  dVdq " << r.dVdq << "  dVdR " << r.dVdR << "  defect " << r.max_defect << "  H " << r.max_H_error
      << (r.diverged ? "  DIVERGED" : "") << '\n';
}

int cmd_evaluate(const RunConfig& c, std::ostream& out) {
  const System sys = build_system(c);
  const auto dir = out_dir(c);
  MetricsReport r;
  std::string label;
  if (!c.trajectory.empty() || !c.reference.empty()) {
    if (c.trajectory.empty() || c.reference.empty())
      throw ConfigError("evaluate: evaluation.trajectory and evaluation.reference go together");
    const auto pred = read_trajectory_file(c.trajectory, sys.params.size());
    const auto ref = read_trajectory_file(c.reference, sys.params.size());
    const TrajectoryErrors e = metric_trajectory(pred, ref);
    r.dq = e.dq;
    r.dR = e.dR;
    r.dp_dot = r.dPi_dot = r.dVdq = r.dVdR = std::nan("");
    for (const auto& s : pred)
      for (const auto& b : s.bodies) r.max_defect = std::max(r.max_defect, orthonormality_defect(b.R));
    r.max_H_error = std::nan("");
    r.steps = pred.empty() ? 0 : pred.size() - 1;
    label = "trajectory";
  } else {
    const Dataset d = obtain_dataset(c, sys, out);
    LearnedDynamics model;
    if (!c.checkpoint.empty()) {
      model = model_from_checkpoint(c.checkpoint, d.params);
      label = to_string(c.scheme);
    } else {
      ModelConfig mc = c.model;
      mc.learn_potential = false;
      mc.conservative_only = true;
      model = LearnedDynamics::make(d.params, mc);
      label = "zero_correction";
    }
    EvalSpec spec{c.scheme, c.substeps, c.eval_steps, c.options, c.eval_split};
    const PotentialPtr resid = truth_residual(c);
    r = evaluate_model(model, d, spec, resid.get());
  }
  write_reports(dir, "metrics", {{label, r}});
  print_report(out, label, r);
  return r.diverged ? kExitDiverged : kExitOk;
}

int cmd_compare(const RunConfig& c, std::ostream& out) {
  const System sys = build_system(c);
  const Dataset d = obtain_dataset(c, sys, out);
  const LearnedDynamics init = fresh_model(c, d);
  const auto dir = out_dir(c);
  const PotentialPtr resid = truth_residual(c);
  std::vector<LabeledReport> rows;
  {
    ModelConfig mc = c.model;
    mc.learn_potential = false;
    const auto zero = LearnedDynamics::make(d.params, mc);
    const MetricsReport r =
        evaluate_model(zero, d, {StepScheme::LieT2, c.substeps, c.eval_steps, c.options, c.eval_split}, resid.get());
    rows.emplace_back("zero_correction", r);
    print_report(out, "zero_correction", r);
  }
  const auto outcomes = baseline_train_matrix(d, init, training_config(c), c.compare_schemes);
  for (const auto& o : outcomes) {
    const std::string name = to_string(o.scheme);
    save_checkpoint((dir / ("checkpoint_" + name + ".bin")).string(),
                    make_checkpoint(o.result.model, o.result.optimizer, provenance_json(c)));
    write_text(dir / ("curve_" + name + ".csv"), curve_csv(o.result.curve));
    MetricsReport r;
    if (o.result.diverged) {
      r.dq = r.dR = r.dp_dot = r.dPi_dot = r.dVdq = r.dVdR = r.max_defect = r.max_H_error =
          std::numeric_limits<double>::infinity();
      r.steps = c.eval_steps;
      r.diverged = true;
    } else {
      r = evaluate_model(o.result.model, d, {o.scheme, c.substeps, c.eval_steps, c.options, c.eval_split},
                         resid.get());
    }
    rows.emplace_back(name, r);
    print_report(out, name, r);
  }
  write_reports(dir, "compare", rows);
  return kExitOk;
}

int cmd_convergence(const RunConfig& c, std::ostream& out) {
  ConvergenceSpec spec = c.convergence;
  if (spec.schemes.empty()) spec.schemes.assign(std::begin(kAllSchemes), std::end(kAllSchemes));
  if (spec.h.empty()) throw ConfigError("convergence: convergence.h is required");
  spec.options = c.options;
  const ConvergenceResult r = convergence_study(build_system(c), spec);
  const auto dir = out_dir(c);
  std::ostringstream ss;
  write_convergence_csv(ss, r);
  write_text(dir / "convergence.csv", ss.str());
  out << ss.str();
  return kExitOk;
}

struct Periapsis {
  std::size_t orbit;
  double t;
  double angle;
};

// Local minima of |q1 - q0| and the in-plane angle of q1 - q0 there.
std::vector<Periapsis> periapses(const std::vector<SystemState>& traj) {
  std::vector<Periapsis> out;
  auto r = [&](std::size_t k) { return norm(traj[k].bodies[1].q - traj[k].bodies[0].q); };
  for (std::size_t k = 1; k + 1 < traj.size(); ++k) {
    if (r(k) < r(k - 1) && r(k) <= r(k + 1)) {
      const Vec3 d = traj[k].bodies[1].q - traj[k].bodies[0].q;
      out.push_back({out.size(), traj[k].t, std::atan2(d.y, d.x)});
    }
  }
  return out;
}

int cmd_precess(const RunConfig& c, std::ostream& out) {
  const System sys = build_system(c);
  if (sys.params.size() != 2) throw ConfigError("precess-demo: needs a two-body system");
  struct Run {
    std::string name;
    StepContext ctx;
    std::vector<SystemState> traj;
  };
  std::vector<Run> runs;
  runs.push_back({"point", {sys.params, std::make_shared<PointMassPotential>(sys.params), sys.truth_F, c.h, c.options}, {}});
  runs.push_back({"rigid", {sys.params, sys.truth_V, sys.truth_F, c.h, c.options}, {}});
  if (!c.checkpoint.empty()) {
    const LearnedDynamics m = model_from_checkpoint(c.checkpoint, sys.params);
    runs.push_back({"learned", m.context(c.h, c.options), {}});
  }
  const auto dir = out_dir(c);
  for (auto& run : runs) {
    run.traj = rollout(sys.state, run.ctx, c.scheme, c.steps, {RolloutOptions::Keep::Stride, c.substeps});
    run.traj.insert(run.traj.begin(), sys.state);
    write_with(dir / (run.name + ".txt"), [&](std::ostream& os) { write_trajectory(os, run.traj); });
  }
  write_with(dir / "precession.csv", [&](std::ostream& os) {
    os << 't';
    for (const auto& run : runs) os << ",x_" << run.name << ",y_" << run.name;
    os << '\n';
    for (std::size_t k = 0; k < runs.front().traj.size(); ++k) {
      os << format_real(runs.front().traj[k].t);
      for (const auto& run : runs) {
        const Vec3 d = run.traj[k].bodies[1].q - run.traj[k].bodies[0].q;
        os << ',' << format_real(d.x) << ',' << format_real(d.y);
      }
      os << '\n';
    }
  });
  write_with(dir / "periapsis.csv", [&](std::ostream& os) {
    os << "model,orbit,t,angle\n";
    for (const auto& run : runs) {
      const auto peri = periapses(run.traj);
      for (const auto& p : peri)
        os << run.name << ',' << p.orbit << ',' << format_real(p.t) << ',' << format_real(p.angle) << '\n';
      if (peri.size() >= 2) {
        const double adv = (peri.back().angle - peri.front().angle) / static_cast<double>(peri.size() - 1);
        out << "precess-demo: " << run.name << " periapsis advance per orbit " << adv << " rad over " << peri.size()
            << " periapses\n";
      } else {
        out << "precess-demo: " << run.name << " completed fewer than two orbits\n";
      }
    }
  });
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"srnn: rigid-body N-body simulation with learned residual dynamics"};
  app.name("srnn");
  app.require_subcommand(1);
  // -h would clash with --h (step size).
  app.set_help_flag("--help", "print this help message and exit");

  struct Sub {
    const char* name;
    const char* help;
    int (*run)(const RunConfig&, std::ostream&);
  };
  static const Sub subs[] = {
      {"simulate", "integrate the configured system and write its trajectory", cmd_simulate},
      {"gen-data", "generate a training dataset from the truth model", cmd_gen_data},
      {"train", "train the learned residual on a dataset", cmd_train},
      {"evaluate", "metrics for a checkpoint on a dataset, or for a trajectory against a reference", cmd_evaluate},
      {"compare-integrators", "train and evaluate once per integrator", cmd_compare},
      {"convergence", "global error against step size, with fitted orders", cmd_convergence},
      {"precess-demo", "point-mass, rigid and learned two-body trajectories for plotting", cmd_precess},
  };
  std::vector<Flags> flags(std::size(subs));
  std::vector<CLI::App*> apps;
  for (std::size_t k = 0; k < std::size(subs); ++k) {
    Flags& f = flags[k];
    CLI::App* sub = app.add_subcommand(subs[k].name, subs[k].help);
    sub->set_help_flag("--help", "print this help message and exit");
    sub->add_option("--config", f.config, "run configuration (JSON)")->required();
    f.out_opt = sub->add_option("--out", f.out, "output directory");
    f.seed_opt = sub->add_option("--seed", f.seed, "seed for data, initialization and training");
    f.scheme_opt = sub->add_option("--scheme", f.scheme, "euler, rk4, verlet, cf2, cf4, liet2");
    f.steps_opt = sub->add_option("--steps", f.steps, "integrator steps");
    f.h_opt = sub->add_option("--h", f.h, "integrator step size");
    f.substeps_opt = sub->add_option("--substeps", f.substeps, "integrator steps per recorded snapshot");
    apps.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (std::size_t k = 0; k < apps.size(); ++k) {
    if (!apps[k]->parsed()) continue;
    const char* name = subs[k].name;
    try {
      return subs[k].run(resolve(flags[k]), out);
    } catch (const DivergenceError& e) {
      err << "srnn " << name << ": numerical divergence at step " << e.step() << ": " << e.what() << '\n';
      return kExitDiverged;
    } catch (const SingularConfiguration& e) {
      err << "srnn " << name << ": numerical divergence: " << e.what() << '\n';
      return kExitDiverged;
    } catch (const ConfigError& e) {
      err << "srnn " << name << ": config error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const std::logic_error& e) {
      err << "srnn " << name << ": invalid input: " << e.what() << '\n';
      return kExitUsage;
    } catch (const std::exception& e) {
      err << "srnn " << name << ": I/O error: " << e.what() << '\n';
      return kExitIo;
    }
  }
  return kExitUsage;
}

}  // namespace srnn
