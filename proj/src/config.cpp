#include "srnn/config.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <memory>
#include <sstream>

#include <json.hpp>

namespace srnn {

using json = nlohmann::ordered_json;

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
T as(const json& v, const std::string& where) {
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected true/false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError(where + ": expected a non-negative integer");
    } else {
      if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
    }
    return v.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

template <class T>
void opt(const json& j, const char* key, T& out, const std::string& where) {
  if (j.contains(key)) out = as<T>(j.at(key), where + "." + key);
}

template <class T>
void req(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing required key '" + key + "'");
  out = as<T>(j.at(key), where + "." + key);
}

std::vector<double> reals(const json& v, const std::string& where, std::size_t n = 0) {
  if (!v.is_array()) throw ConfigError(where + ": expected an array");
  if (n && v.size() != n) throw ConfigError(where + ": expected " + std::to_string(n) + " numbers");
  std::vector<double> out;
  for (std::size_t k = 0; k < v.size(); ++k) out.push_back(as<double>(v[k], where + "[" + std::to_string(k) + "]"));
  return out;
}

void opt_vec3(const json& j, const char* key, Vec3& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto x = reals(j.at(key), where + "." + key, 3);
  out = {x[0], x[1], x[2]};
}

StepScheme scheme_of(const json& v, const std::string& where) {
  try {
    return parse_scheme(as<std::string>(v, where));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

std::vector<StepScheme> schemes_of(const json& v, const std::string& where) {
  if (!v.is_array() || v.empty()) throw ConfigError(where + ": expected a non-empty array of scheme names");
  std::vector<StepScheme> out;
  for (std::size_t k = 0; k < v.size(); ++k) out.push_back(scheme_of(v[k], where + "[" + std::to_string(k) + "]"));
  return out;
}

json vec3_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

json schemes_json(const std::vector<StepScheme>& s) {
  json a = json::array();
  for (StepScheme x : s) a.push_back(to_string(x));
  return a;
}

void parse_system(const json& j, SystemSpec& s) {
  const std::string w = "system";
  check_keys(j, w, {"preset", "toy", "free_body", "G", "bodies"});
  opt(j, "preset", s.preset, w);
  static const char* presets[] = {"toy_precession", "toy_point_mass", "free_body", "trappist_like", "custom"};
  if (std::none_of(std::begin(presets), std::end(presets), [&](const char* p) { return s.preset == p; }))
    throw ConfigError("system.preset: unknown preset '" + s.preset + "'");
  if (j.contains("toy")) {
    const auto& t = j.at("toy");
    const std::string wt = w + ".toy";
    check_keys(t, wt,
               {"star_mass", "planet_mass", "star_inertia", "planet_inertia", "a", "e", "planet_spin", "planet_tilt"});
    opt(t, "star_mass", s.toy.star_mass, wt);
    opt(t, "planet_mass", s.toy.planet_mass, wt);
    opt_vec3(t, "star_inertia", s.toy.star_inertia, wt);
    opt_vec3(t, "planet_inertia", s.toy.planet_inertia, wt);
    opt(t, "a", s.toy.a, wt);
    opt(t, "e", s.toy.e, wt);
    opt(t, "planet_spin", s.toy.planet_spin, wt);
    opt(t, "planet_tilt", s.toy.planet_tilt, wt);
  }
  if (j.contains("free_body")) {
    const auto& f = j.at("free_body");
    check_keys(f, w + ".free_body", {"J", "Pi"});
    opt_vec3(f, "J", s.free_J, w + ".free_body");
    opt_vec3(f, "Pi", s.free_Pi, w + ".free_body");
  }
  opt(j, "G", s.G, w);
  if (j.contains("bodies")) {
    const auto& b = j.at("bodies");
    if (!b.is_array()) throw ConfigError("system.bodies: expected an array");
    s.bodies.clear();
    for (std::size_t k = 0; k < b.size(); ++k) {
      const std::string wb = "system.bodies[" + std::to_string(k) + "]";
      check_keys(b[k], wb, {"mass", "inertia", "shape", "q", "p", "R", "Pi"});
      BodySpec body;
      req(b[k], "mass", body.mass, wb);
      if (!b[k].contains("inertia")) throw ConfigError(wb + ": missing required key 'inertia'");
      opt_vec3(b[k], "inertia", body.inertia, wb);
      opt(b[k], "shape", body.shape, wb);
      if (body.shape != "point" && body.shape != "cuboid")
        throw ConfigError(wb + ".shape: expected point or cuboid");
      opt_vec3(b[k], "q", body.q, wb);
      opt_vec3(b[k], "p", body.p, wb);
      opt_vec3(b[k], "Pi", body.Pi, wb);
      if (b[k].contains("R")) {
        const auto r = reals(b[k].at("R"), wb + ".R", 9);
        std::copy(r.begin(), r.end(), body.R.m.begin());
      }
      s.bodies.push_back(body);
    }
  }
  if (s.preset == "custom" && s.bodies.empty()) throw ConfigError("system: preset 'custom' needs bodies");
  if (s.preset != "custom" && !s.bodies.empty()) throw ConfigError("system: bodies are only allowed with preset 'custom'");
}

}  // namespace

std::string to_string(Split s) {
  switch (s) {
    case Split::All: return "all";
    case Split::Train: return "train";
    case Split::Val: return "val";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "all") return Split::All;
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  throw ConfigError("unknown split '" + s + "' (all, train, val)");
}

RunConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  check_keys(j, "config", {"schema_version", "system", "truth", "integrator", "data", "model", "training",
                           "evaluation", "convergence", "output"});
  RunConfig c;
  req(j, "schema_version", c.schema_version, "config");
  if (c.schema_version != 1)
    throw ConfigError("config: unsupported schema_version " + std::to_string(c.schema_version));

  if (j.contains("system")) parse_system(j.at("system"), c.system);

  if (j.contains("truth")) {
    const auto& t = j.at("truth");
    check_keys(t, "truth", {"potential", "drag_p", "drag_Pi"});
    opt(t, "potential", c.truth_potential, "truth");
    static const char* names[] = {"preset", "zero", "point_mass", "point_quadrupole"};
    if (std::none_of(std::begin(names), std::end(names), [&](const char* n) { return c.truth_potential == n; }))
      throw ConfigError("truth.potential: unknown model '" + c.truth_potential + "'");
    opt(t, "drag_p", c.drag_p, "truth");
    opt(t, "drag_Pi", c.drag_Pi, "truth");
  }

  if (j.contains("integrator")) {
    const auto& t = j.at("integrator");
    const std::string w = "integrator";
    check_keys(t, w, {"scheme", "h", "steps", "substeps", "options"});
    if (t.contains("scheme")) c.scheme = scheme_of(t.at("scheme"), w + ".scheme");
    opt(t, "h", c.h, w);
    opt(t, "steps", c.steps, w);
    opt(t, "substeps", c.substeps, w);
    if (c.substeps == 0) throw ConfigError("integrator.substeps: must be positive");
    if (t.contains("options")) {
      const auto& o = t.at("options");
      const std::string wo = w + ".options";
      check_keys(o, wo, {"verlet_literal", "asym_literal_left", "cf_literal_left", "cf4_literal_stage"});
      opt(o, "verlet_literal", c.options.verlet_literal, wo);
      opt(o, "asym_literal_left", c.options.asym_literal_left, wo);
      opt(o, "cf_literal_left", c.options.cf_literal_left, wo);
      opt(o, "cf4_literal_stage", c.options.cf4_literal_stage, wo);
    }
  }

  if (j.contains("data")) {
    const auto& t = j.at("data");
    const std::string w = "data";
    check_keys(t, w, {"L", "K", "dt", "fine_h", "noise_sigma", "seed", "max_retries", "path"});
    opt(t, "L", c.data.L, w);
    opt(t, "K", c.data.K, w);
    opt(t, "dt", c.data.dt, w);
    opt(t, "fine_h", c.data.fine_h, w);
    opt(t, "noise_sigma", c.data.noise_sigma, w);
    req(t, "seed", c.data.seed, w);
    opt(t, "max_retries", c.data.max_retries, w);
    opt(t, "path", c.dataset_path, w);
  }

  if (j.contains("model")) {
    const auto& t = j.at("model");
    const std::string w = "model";
    check_keys(t, w, {"width", "depth", "learn_potential", "conservative_only", "potential_output_scale",
                      "forcing_output_scale", "normalize_inputs", "init_seed"});
    opt(t, "width", c.model.width, w);
    opt(t, "depth", c.model.depth, w);
    opt(t, "learn_potential", c.model.learn_potential, w);
    opt(t, "conservative_only", c.model.conservative_only, w);
    opt(t, "potential_output_scale", c.model.potential_output_scale, w);
    opt(t, "forcing_output_scale", c.model.forcing_output_scale, w);
    opt(t, "normalize_inputs", c.model.normalize_inputs, w);
    req(t, "init_seed", c.model.init_seed, w);
  }

  if (j.contains("training")) {
    const auto& t = j.at("training");
    const std::string w = "training";
    check_keys(t, w, {"batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "K_loss", "max_epochs",
                      "steps_per_epoch", "patience", "min_improvement", "seed"});
    auto& tc = c.training;
    opt(t, "batch_size", tc.batch_size, w);
    opt(t, "lr", tc.adam.lr, w);
    opt(t, "beta1", tc.adam.beta1, w);
    opt(t, "beta2", tc.adam.beta2, w);
    opt(t, "eps", tc.adam.eps, w);
    opt(t, "weight_decay", tc.adam.weight_decay, w);
    opt(t, "K_loss", tc.rollout.K_loss, w);
    opt(t, "max_epochs", tc.max_epochs, w);
    opt(t, "steps_per_epoch", tc.steps_per_epoch, w);
    opt(t, "patience", tc.patience, w);
    opt(t, "min_improvement", tc.min_improvement, w);
    req(t, "seed", tc.seed, w);
  }

  if (j.contains("evaluation")) {
    const auto& t = j.at("evaluation");
    const std::string w = "evaluation";
    check_keys(t, w, {"steps", "split", "schemes", "checkpoint", "trajectory", "reference"});
    opt(t, "steps", c.eval_steps, w);
    if (t.contains("split")) c.eval_split = parse_split(as<std::string>(t.at("split"), w + ".split"));
    if (t.contains("schemes")) c.compare_schemes = schemes_of(t.at("schemes"), w + ".schemes");
    opt(t, "checkpoint", c.checkpoint, w);
    opt(t, "trajectory", c.trajectory, w);
    opt(t, "reference", c.reference, w);
  }

  if (j.contains("convergence")) {
    const auto& t = j.at("convergence");
    const std::string w = "convergence";
    check_keys(t, w, {"schemes", "h", "T", "h_ref", "reference"});
    if (t.contains("schemes")) c.convergence.schemes = schemes_of(t.at("schemes"), w + ".schemes");
    if (t.contains("h")) c.convergence.h = reals(t.at("h"), w + ".h");
    opt(t, "T", c.convergence.T, w);
    opt(t, "h_ref", c.convergence.h_ref, w);
    if (t.contains("reference")) c.convergence.reference = scheme_of(t.at("reference"), w + ".reference");
  }

  if (j.contains("output")) {
    const auto& t = j.at("output");
    check_keys(t, "output", {"dir"});
    opt(t, "dir", c.out_dir, "output");
  }
  c.convergence.options = c.options;
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const RunConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;

  json sys;
  sys["preset"] = c.system.preset;
  sys["toy"] = {{"star_mass", c.system.toy.star_mass},
                {"planet_mass", c.system.toy.planet_mass},
                {"star_inertia", vec3_json(c.system.toy.star_inertia)},
                {"planet_inertia", vec3_json(c.system.toy.planet_inertia)},
                {"a", c.system.toy.a},
                {"e", c.system.toy.e},
                {"planet_spin", c.system.toy.planet_spin},
                {"planet_tilt", c.system.toy.planet_tilt}};
  sys["free_body"] = {{"J", vec3_json(c.system.free_J)}, {"Pi", vec3_json(c.system.free_Pi)}};
  sys["G"] = c.system.G;
  json bodies = json::array();
  for (const auto& b : c.system.bodies) {
    json R = json::array();
    for (double x : b.R.m) R.push_back(x);
    bodies.push_back({{"mass", b.mass},
                      {"inertia", vec3_json(b.inertia)},
                      {"shape", b.shape},
                      {"q", vec3_json(b.q)},
                      {"p", vec3_json(b.p)},
                      {"R", R},
                      {"Pi", vec3_json(b.Pi)}});
  }
  if (!bodies.empty()) sys["bodies"] = bodies;
  j["system"] = sys;

  j["truth"] = {{"potential", c.truth_potential}, {"drag_p", c.drag_p}, {"drag_Pi", c.drag_Pi}};
  j["integrator"] = {{"scheme", to_string(c.scheme)},
                     {"h", c.h},
                     {"steps", c.steps},
                     {"substeps", c.substeps},
                     {"options",
                      {{"verlet_literal", c.options.verlet_literal},
                       {"asym_literal_left", c.options.asym_literal_left},
                       {"cf_literal_left", c.options.cf_literal_left},
                       {"cf4_literal_stage", c.options.cf4_literal_stage}}}};
  j["data"] = {{"L", c.data.L},
               {"K", c.data.K},
               {"dt", c.data.dt},
               {"fine_h", c.data.fine_h},
               {"noise_sigma", c.data.noise_sigma},
               {"seed", c.data.seed},
               {"max_retries", c.data.max_retries},
               {"path", c.dataset_path}};
  j["model"] = {{"width", c.model.width},
                {"depth", c.model.depth},
                {"learn_potential", c.model.learn_potential},
                {"conservative_only", c.model.conservative_only},
                {"potential_output_scale", c.model.potential_output_scale},
                {"forcing_output_scale", c.model.forcing_output_scale},
                {"normalize_inputs", c.model.normalize_inputs},
                {"init_seed", c.model.init_seed}};
  const auto& tc = c.training;
  j["training"] = {{"batch_size", tc.batch_size},
                   {"lr", tc.adam.lr},
                   {"beta1", tc.adam.beta1},
                   {"beta2", tc.adam.beta2},
                   {"eps", tc.adam.eps},
                   {"weight_decay", tc.adam.weight_decay},
                   {"K_loss", tc.rollout.K_loss},
                   {"max_epochs", tc.max_epochs},
                   {"steps_per_epoch", tc.steps_per_epoch},
                   {"patience", tc.patience},
                   {"min_improvement", tc.min_improvement},
                   {"seed", tc.seed}};
  j["evaluation"] = {{"steps", c.eval_steps},
                     {"split", to_string(c.eval_split)},
                     {"schemes", schemes_json(c.compare_schemes)},
                     {"checkpoint", c.checkpoint},
                     {"trajectory", c.trajectory},
                     {"reference", c.reference}};
  json conv = {{"h", c.convergence.h},
               {"T", c.convergence.T},
               {"h_ref", c.convergence.h_ref},
               {"reference", to_string(c.convergence.reference)}};
  if (!c.convergence.schemes.empty()) conv["schemes"] = schemes_json(c.convergence.schemes);
  j["convergence"] = conv;
  j["output"] = {{"dir", c.out_dir}};
  return j.dump(2);
}

namespace {

std::string effective_truth(const RunConfig& c) {
  if (c.truth_potential != "preset") return c.truth_potential;
  const auto& p = c.system.preset;
  if (p == "toy_precession" || p == "trappist_like") return "point_quadrupole";
  if (p == "free_body") return "zero";
  return "point_mass";
}

}  // namespace

System build_system(const RunConfig& c) {
  System s;
  const auto& p = c.system.preset;
  if (p == "toy_precession") {
    s = toy_precession(c.system.toy);
  } else if (p == "toy_point_mass") {
    s = toy_point_mass(c.system.toy);
  } else if (p == "free_body") {
    s = free_body(c.system.free_J, c.system.free_Pi);
  } else if (p == "trappist_like") {
    s = trappist_like();
  } else {
    s.name = "custom";
    s.description = "bodies from the configuration";
    s.params.G = c.system.G;
    for (const auto& b : c.system.bodies) {
      s.params.bodies.push_back(BodyParams::make(b.mass, b.inertia));
      s.state.bodies.push_back({b.q, b.p, Rotation(b.R).matrix(), b.Pi});
    }
  }
  const std::string truth = effective_truth(c);
  if (truth == "zero") {
    s.truth_V = std::make_shared<ZeroPotential>();
  } else if (truth == "point_mass") {
    s.truth_V = std::make_shared<PointMassPotential>(s.params);
  } else {
    s.truth_V = composite_potential(
        {std::make_shared<PointMassPotential>(s.params), std::make_shared<QuadrupolePotential>(s.params)});
  }
  s.truth_F = synthetic_drag_forcing(c.drag_p, c.drag_Pi);
  check_consistent(s.state, s.params);
  return s;
}

PotentialPtr truth_residual(const RunConfig& c) {
  const std::string truth = effective_truth(c);
  if (truth == "point_mass") return std::make_shared<ZeroPotential>();
  if (truth == "point_quadrupole") return std::make_shared<QuadrupolePotential>(build_system(c).params);
  return nullptr;
}

TrainConfig training_config(const RunConfig& c) {
  TrainConfig t = c.training;
  t.rollout.scheme = c.scheme;
  t.rollout.H = c.substeps;
  t.rollout.options = c.options;
  return t;
}

}  // namespace srnn
