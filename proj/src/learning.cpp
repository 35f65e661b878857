#include "srnn/learning.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include "srnn/kernels.hpp"

namespace srnn {

// ---- text I/O -----------------------------------------------------------------

namespace {

void put_real(std::ostream& os, double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  os.write(buf, r.ptr - buf);
}

double parse_real(std::string_view tok) {
  double x = 0.0;
  const auto r = std::from_chars(tok.data(), tok.data() + tok.size(), x);
  if (r.ec != std::errc() || r.ptr != tok.data() + tok.size())
    throw std::runtime_error("dataset: bad number '" + std::string(tok) + "'");
  return x;
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }

// The views point into `line`, which must outlive them.
std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    const std::size_t j = i;
    while (i < line.size() && !is_space(line[i])) ++i;
    if (i > j) out.push_back(line.substr(j, i - j));
  }
  return out;
}

std::string next_line(std::istream& is, const char* what) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(std::string("dataset: unexpected end of input, wanted ") + what);
  return line;
}

// "key value..." -> value text (rest of line).
std::string keyed(std::istream& is, const std::string& key) {
  const std::string line = next_line(is, key.c_str());
  if (line.compare(0, key.size(), key) != 0 || (line.size() > key.size() && line[key.size()] != ' '))
    throw std::runtime_error("dataset: expected '" + key + "', got '" + line + "'");
  return line.size() > key.size() ? line.substr(key.size() + 1) : std::string();
}

std::size_t parse_count(const std::string& s) {
  std::size_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::runtime_error("dataset: bad integer '" + s + "'");
  return v;
}

void check_single_line(const std::string& s, const char* what) {
  if (s.find('\n') != std::string::npos) throw std::invalid_argument(std::string("dataset: ") + what + " contains a newline");
}

}  // namespace

void write_snapshot(std::ostream& os, const SystemState& s) {
  put_real(os, s.t);
  for (const auto& b : s.bodies) {
    for (double x : {b.q.x, b.q.y, b.q.z, b.p.x, b.p.y, b.p.z}) {
      os << ' ';
      put_real(os, x);
    }
    for (double x : b.R.m) {
      os << ' ';
      put_real(os, x);
    }
    for (double x : {b.Pi.x, b.Pi.y, b.Pi.z}) {
      os << ' ';
      put_real(os, x);
    }
  }
  os << '\n';
}

SystemState parse_snapshot(const std::string& line, std::size_t n_bodies) {
  const auto tok = split_ws(line);
  if (tok.size() != 1 + 18 * n_bodies)
    throw std::runtime_error("snapshot: expected " + std::to_string(1 + 18 * n_bodies) + " fields, got " +
                             std::to_string(tok.size()));
  SystemState s;
  s.t = parse_real(tok[0]);
  std::size_t k = 1;
  for (std::size_t i = 0; i < n_bodies; ++i) {
    BodyState b;
    for (int c = 0; c < 3; ++c) b.q[c] = parse_real(tok[k++]);
    for (int c = 0; c < 3; ++c) b.p[c] = parse_real(tok[k++]);
    for (int c = 0; c < 9; ++c) b.R.m[c] = parse_real(tok[k++]);
    for (int c = 0; c < 3; ++c) b.Pi[c] = parse_real(tok[k++]);
    s.bodies.push_back(b);
  }
  return s;
}

void write_trajectory(std::ostream& os, const std::vector<SystemState>& traj) {
  for (const auto& s : traj) write_snapshot(os, s);
}

std::vector<SystemState> read_trajectory(std::istream& is, std::size_t n_bodies) {
  std::vector<SystemState> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    out.push_back(parse_snapshot(line, n_bodies));
  }
  return out;
}

std::size_t Dataset::num_train() const {
  return static_cast<std::size_t>(std::count_if(trajectories.begin(), trajectories.end(),
                                                [](const Trajectory& t) { return t.train; }));
}

bool operator==(const Dataset& a, const Dataset& b) {
  if (a.params.G != b.params.G || a.params.size() != b.params.size()) return false;
  for (std::size_t i = 0; i < a.params.size(); ++i)
    if (a.params.bodies[i].mass != b.params.bodies[i].mass || a.params.bodies[i].inertia != b.params.bodies[i].inertia)
      return false;
  return a.K == b.K && a.dt == b.dt && a.units == b.units && a.seed == b.seed && a.truth == b.truth &&
         a.trajectories == b.trajectories;
}

void write_dataset(std::ostream& os, const Dataset& d) {
  check_single_line(d.units, "units");
  check_single_line(d.truth, "truth");
  os << "srnn-dataset 1\n";
  os << "N " << d.num_bodies() << '\n';
  os << "L " << d.trajectories.size() << '\n';
  os << "K " << d.K << '\n';
  os << "dt ";
  put_real(os, d.dt);
  os << "\nunits " << d.units << '\n';
  os << "seed " << d.seed << '\n';
  os << "truth " << d.truth << '\n';
  os << "G ";
  put_real(os, d.params.G);
  os << '\n';
  for (const auto& b : d.params.bodies) {
    os << "body";
    for (double x : {b.mass, b.inertia.x, b.inertia.y, b.inertia.z}) {
      os << ' ';
      put_real(os, x);
    }
    os << '\n';
  }
  for (std::size_t l = 0; l < d.trajectories.size(); ++l) {
    const auto& tr = d.trajectories[l];
    if (tr.snapshots.size() != d.K + 1) throw std::invalid_argument("write_dataset: trajectory length is not K+1");
    os << "trajectory " << l << ' ' << (tr.train ? "train" : "val") << '\n';
    write_trajectory(os, tr.snapshots);
  }
}

Dataset read_dataset(std::istream& is) {
  const std::string magic = next_line(is, "header");
  if (magic != "srnn-dataset 1") throw std::runtime_error("dataset: unsupported header '" + magic + "'");
  Dataset d;
  const std::size_t N = parse_count(keyed(is, "N"));
  const std::size_t L = parse_count(keyed(is, "L"));
  d.K = parse_count(keyed(is, "K"));
  d.dt = parse_real(keyed(is, "dt"));
  d.units = keyed(is, "units");
  d.seed = parse_count(keyed(is, "seed"));
  d.truth = keyed(is, "truth");
  d.params.G = parse_real(keyed(is, "G"));
  for (std::size_t i = 0; i < N; ++i) {
    const std::string line = keyed(is, "body");
    const auto tok = split_ws(line);
    if (tok.size() != 4) throw std::runtime_error("dataset: body line needs 4 numbers");
    d.params.bodies.push_back(
        BodyParams::make(parse_real(tok[0]), {parse_real(tok[1]), parse_real(tok[2]), parse_real(tok[3])}));
  }
  for (std::size_t l = 0; l < L; ++l) {
    const auto head = keyed(is, "trajectory");
    const auto tok = split_ws(head);
    if (tok.size() != 2 || parse_count(std::string(tok[0])) != l || (tok[1] != "train" && tok[1] != "val"))
      throw std::runtime_error("dataset: bad trajectory header '" + head + "'");
    Trajectory tr;
    tr.train = tok[1] == "train";
    for (std::size_t k = 0; k <= d.K; ++k) tr.snapshots.push_back(parse_snapshot(next_line(is, "snapshot"), N));
    d.trajectories.push_back(std::move(tr));
  }
  return d;
}

void save_dataset(const std::string& path, const Dataset& d) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_dataset: cannot open " + path);
  write_dataset(os, d);
  if (!os) throw std::runtime_error("save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_dataset: cannot open " + path);
  return read_dataset(is);
}

// ---- generation ---------------------------------------------------------------

namespace {

SystemState perturb(const SystemState& init, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> xi(0.0, 1.0);
  SystemState s = init;
  for (auto& b : s.bodies) {
    for (int c = 0; c < 3; ++c) b.q[c] = b.q[c] * (1.0 + sigma * xi(rng));
    for (int c = 0; c < 3; ++c) b.p[c] = b.p[c] * (1.0 + sigma * xi(rng));
    for (int c = 0; c < 3; ++c) b.Pi[c] = b.Pi[c] * (1.0 + sigma * xi(rng));
    Vec3 w;
    for (int c = 0; c < 3; ++c) w[c] = sigma * xi(rng);
    b.R = mul(b.R, exp_so3(w).matrix());
  }
  return s;
}

}  // namespace

Dataset generate_dataset(const PotentialPtr& truth_V, const ForcingPtr& truth_F, const SystemParams& params,
                         const SystemState& init, const GenerateOptions& opts) {
  if (opts.L < 1 || opts.K < 1) throw std::invalid_argument("generate_dataset: L and K must be >= 1");
  if (!(opts.dt > 0.0) || !(opts.fine_h > 0.0)) throw std::invalid_argument("generate_dataset: dt and fine_h must be > 0");
  const double ratio = opts.dt / opts.fine_h;
  const auto sub = static_cast<std::size_t>(std::llround(ratio));
  if (sub < 1 || std::abs(ratio - static_cast<double>(sub)) > 1e-9 * ratio)
    throw std::invalid_argument("generate_dataset: fine_h must divide dt");
  check_consistent(init, params);

  StepContext ctx{params, truth_V, truth_F, opts.fine_h, {}};
  ctx.validate();

  Dataset d;
  d.params = params;
  d.K = opts.K;
  d.dt = opts.dt;
  d.units = opts.units;
  d.seed = opts.seed;
  d.truth = truth_V->describe() + (truth_F->is_zero() ? "" : " + " + truth_F->describe()) + "; LieT2 at h=" +
            std::to_string(opts.fine_h);
  d.trajectories.resize(opts.L);
  const std::size_t n_train = opts.L * 4 / 5;

  std::vector<std::exception_ptr> errors(opts.L);
  const long L = static_cast<long>(opts.L);
#pragma omp parallel for schedule(dynamic) num_threads(kernels::num_threads())
  for (long li = 0; li < L; ++li) {
    const auto l = static_cast<std::size_t>(li);
    try {
      std::seed_seq seq{static_cast<std::uint32_t>(opts.seed), static_cast<std::uint32_t>(opts.seed >> 32),
                        static_cast<std::uint32_t>(l)};
      std::mt19937_64 rng(seq);
      for (std::size_t attempt = 0;; ++attempt) {
        const SystemState s0 = perturb(init, opts.noise_sigma, rng);
        try {
          auto states = rollout(s0, ctx, StepScheme::LieT2, opts.K * sub, {RolloutOptions::Keep::Stride, sub});
          Trajectory& tr = d.trajectories[l];
          tr.snapshots.clear();
          tr.snapshots.push_back(s0);
          tr.snapshots.insert(tr.snapshots.end(), states.begin(), states.end());
          tr.train = l < n_train;
          break;
        } catch (const DivergenceError&) {
          if (attempt + 1 >= opts.max_retries) throw;
        } catch (const SingularConfiguration&) {
          if (attempt + 1 >= opts.max_retries) throw;
        }
      }
    } catch (...) {
      errors[l] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return d;
}

// ---- learned model ------------------------------------------------------------

Normalizer Normalizer::identity(std::size_t dim) { return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)}; }

LearnedDynamics LearnedDynamics::make(const SystemParams& params, const ModelConfig& cfg) {
  if (params.size() == 0) throw std::invalid_argument("LearnedDynamics: no bodies");
  LearnedDynamics m;
  m.params = params;
  std::mt19937_64 rng(cfg.init_seed);
  const std::size_t N = params.size();
  if (cfg.learn_potential) {
    m.V = Mlp::make(12 * N, cfg.width, cfg.depth, 1, rng);
    m.V->output_scale = cfg.potential_output_scale;
    if (cfg.normalize_inputs) m.V_norm = Normalizer::identity(12 * N);
  }
  if (!cfg.conservative_only) {
    m.F = Mlp::make(18 * N, cfg.width, cfg.depth, 6 * N, rng);
    m.F->output_scale = cfg.forcing_output_scale;
    if (cfg.normalize_inputs) m.F_norm = Normalizer::identity(18 * N);
  }
  return m;
}

namespace {

// Column layout of the network inputs, per body: q(3) R(9) [p(3) Pi(3)].
enum class Field { q, R, p, Pi };

struct ColumnStats {
  std::vector<double> sum, sum2;
  std::size_t n = 0;
};

void fit_block(Normalizer& norm, const Dataset& d, bool forcing) {
  if (norm.empty()) return;
  const std::size_t N = d.num_bodies();
  const std::size_t per = forcing ? 18 : 12;
  ColumnStats st{std::vector<double>(per * N, 0.0), std::vector<double>(per * N, 0.0), 0};
  for (const auto& tr : d.trajectories) {
    if (!tr.train) continue;
    for (const auto& s : tr.snapshots) {
      for (std::size_t i = 0; i < N; ++i) {
        const auto& b = s.bodies[i];
        const std::size_t o = per * i;
        for (int c = 0; c < 3; ++c) {
          st.sum[o + c] += b.q[c];
          st.sum2[o + c] += b.q[c] * b.q[c];
          if (forcing) {
            st.sum[o + 12 + c] += b.p[c];
            st.sum2[o + 12 + c] += b.p[c] * b.p[c];
            st.sum[o + 15 + c] += b.Pi[c];
            st.sum2[o + 15 + c] += b.Pi[c] * b.Pi[c];
          }
        }
      }
      ++st.n;
    }
  }
  if (st.n == 0) throw std::invalid_argument("fit_normalizers: no training snapshots");
  // Per field type, a floor on the std of 1e-2 times the RMS magnitude keeps
  // near-constant coordinates from being blown up.
  auto fit_field = [&](std::size_t first) {
    double rms2 = 0.0;
    for (std::size_t i = 0; i < N; ++i)
      for (int c = 0; c < 3; ++c) rms2 += st.sum2[per * i + first + c] / static_cast<double>(st.n);
    const double floor = std::max(1e-2 * std::sqrt(rms2 / (3.0 * static_cast<double>(N))), 1e-300);
    for (std::size_t i = 0; i < N; ++i)
      for (int c = 0; c < 3; ++c) {
        const std::size_t col = per * i + first + c;
        const double mean = st.sum[col] / static_cast<double>(st.n);
        const double var = std::max(st.sum2[col] / static_cast<double>(st.n) - mean * mean, 0.0);
        norm.shift[col] = mean;
        norm.inv_scale[col] = rms2 > 0.0 ? 1.0 / std::max(std::sqrt(var), floor) : 1.0;
      }
  };
  fit_field(0);
  if (forcing) {
    fit_field(12);
    fit_field(15);
  }
}

}  // namespace

void LearnedDynamics::fit_normalizers(const Dataset& d) {
  if (d.num_bodies() != params.size()) throw std::invalid_argument("fit_normalizers: body count mismatch");
  if (V) fit_block(V_norm, d, false);
  if (F) fit_block(F_norm, d, true);
}

PotentialPtr LearnedDynamics::potential() const {
  auto point = std::make_shared<PointMassPotential>(params);
  if (!V) return point;
  return composite_potential({point, std::make_shared<LearnedPotential>(*V, V_norm)});
}

ForcingPtr LearnedDynamics::forcing() const {
  if (!F) return std::make_shared<ZeroForcing>();
  return std::make_shared<LearnedForcing>(*F, F_norm);
}

StepContext LearnedDynamics::context(double h, const IntegratorOptions& options) const {
  return StepContext{params, potential(), forcing(), h, options};
}

namespace {

void add_named(std::vector<NamedTensor>& out, const std::string& prefix, const Mlp& net, const Normalizer& norm) {
  for (std::size_t l = 0; l < net.W.size(); ++l) {
    out.push_back({prefix + ".W" + std::to_string(l), net.W[l]});
    out.push_back({prefix + ".b" + std::to_string(l), net.b[l]});
  }
  out.push_back({prefix + ".output_scale", Tensor(1, 1, net.output_scale)});
  if (!norm.empty()) {
    out.push_back({prefix + ".shift", Tensor(1, norm.shift.size(), norm.shift)});
    out.push_back({prefix + ".inv_scale", Tensor(1, norm.inv_scale.size(), norm.inv_scale)});
  }
}

const Tensor* find_named(const std::vector<NamedTensor>& ts, const std::string& name) {
  for (const auto& t : ts)
    if (t.name == name) return &t.value;
  return nullptr;
}

void read_named(const std::vector<NamedTensor>& ts, const std::string& prefix, std::optional<Mlp>& net,
                Normalizer& norm) {
  net.reset();
  norm = Normalizer();
  if (!find_named(ts, prefix + ".W0")) return;
  Mlp m;
  for (std::size_t l = 0;; ++l) {
    const Tensor* W = find_named(ts, prefix + ".W" + std::to_string(l));
    if (!W) break;
    const Tensor* b = find_named(ts, prefix + ".b" + std::to_string(l));
    if (!b || b->rows != 1 || b->cols != W->cols) throw std::runtime_error("checkpoint: bad bias for " + prefix);
    if (l > 0 && W->rows != m.W.back().cols) throw std::runtime_error("checkpoint: layer shapes do not chain");
    m.W.push_back(*W);
    m.b.push_back(*b);
  }
  if (const Tensor* s = find_named(ts, prefix + ".output_scale")) m.output_scale = s->data.at(0);
  const Tensor* shift = find_named(ts, prefix + ".shift");
  const Tensor* inv = find_named(ts, prefix + ".inv_scale");
  if (shift && inv) {
    if (shift->size() != m.in_dim() || inv->size() != m.in_dim())
      throw std::runtime_error("checkpoint: normalizer width mismatch for " + prefix);
    norm.shift = shift->data;
    norm.inv_scale = inv->data;
  }
  net = std::move(m);
}

}  // namespace

std::vector<NamedTensor> LearnedDynamics::named_tensors() const {
  std::vector<NamedTensor> out;
  if (V) add_named(out, "V", *V, V_norm);
  if (F) add_named(out, "F", *F, F_norm);
  return out;
}

void LearnedDynamics::assign_tensors(const std::vector<NamedTensor>& tensors) {
  read_named(tensors, "V", V, V_norm);
  read_named(tensors, "F", F, F_norm);
  const std::size_t N = params.size();
  if (V && (V->in_dim() != 12 * N || V->out_dim() != 1))
    throw std::runtime_error("checkpoint: potential network does not fit " + std::to_string(N) + " bodies");
  if (F && (F->in_dim() != 18 * N || F->out_dim() != 6 * N))
    throw std::runtime_error("checkpoint: forcing network does not fit " + std::to_string(N) + " bodies");
}

std::vector<Tensor*> LearnedDynamics::parameters() {
  std::vector<Tensor*> out;
  if (V)
    for (Tensor* t : V->tensors()) out.push_back(t);
  if (F)
    for (Tensor* t : F->tensors()) out.push_back(t);
  return out;
}

std::vector<const Tensor*> LearnedDynamics::parameters() const {
  std::vector<const Tensor*> out;
  if (V)
    for (const Tensor* t : std::as_const(*V).tensors()) out.push_back(t);
  if (F)
    for (const Tensor* t : std::as_const(*F).tensors()) out.push_back(t);
  return out;
}

// ---- taped model terms ------------------------------------------------------

namespace {

Var normalize(Var x, const Normalizer& norm) {
  if (norm.empty()) return x;
  if (norm.shift.size() != x.cols()) throw ShapeError("normalizer width does not match the network input");
  Tensor neg(1, norm.shift.size());
  for (std::size_t j = 0; j < neg.cols; ++j) neg.data[j] = -norm.shift[j];
  return scale_cols(add_row_broadcast(x, x.tape->constant(std::move(neg))), norm.inv_scale);
}

Var zeros(Tape& t, std::size_t rows, std::size_t cols) { return t.constant(Tensor(rows, cols)); }

Tensor row_tensor(const Vec3& v) { return Tensor(1, 3, std::vector<double>{v.x, v.y, v.z}); }
Tensor row_tensor(const Mat3& m) { return Tensor(1, 9, std::vector<double>(m.m.begin(), m.m.end())); }

}  // namespace

TapedPotentialGrads learned_potential_terms(const MlpVars& net, const Normalizer& norm, const std::vector<Var>& q,
                                            const std::vector<Var>& R) {
  const std::size_t N = q.size();
  std::vector<Var> parts;
  for (std::size_t i = 0; i < N; ++i) {
    parts.push_back(q[i]);
    parts.push_back(R[i]);
  }
  const auto vg = mlp_value_and_input_grad(net, normalize(concat_cols(parts), norm));
  const Var g = norm.empty() ? vg.input_grad : scale_cols(vg.input_grad, norm.inv_scale);
  TapedPotentialGrads out;
  for (std::size_t i = 0; i < N; ++i) {
    out.grad_q.push_back(slice_cols(g, 12 * i, 3));
    out.grad_R.push_back(slice_cols(g, 12 * i + 3, 9));
  }
  out.value = vg.value;
  return out;
}

TapedForcing learned_forcing_terms(const MlpVars& net, const Normalizer& norm, const std::vector<Var>& q,
                                   const std::vector<Var>& R, const std::vector<Var>& p, const std::vector<Var>& Pi) {
  const std::size_t N = q.size();
  std::vector<Var> parts;
  for (std::size_t i = 0; i < N; ++i) {
    parts.push_back(q[i]);
    parts.push_back(R[i]);
    parts.push_back(p[i]);
    parts.push_back(Pi[i]);
  }
  const Var out = mlp_forward(net, normalize(concat_cols(parts), norm));
  TapedForcing f;
  for (std::size_t i = 0; i < N; ++i) {
    f.F_p.push_back(slice_cols(out, 6 * i, 3));
    f.F_Pi.push_back(slice_cols(out, 6 * i + 3, 3));
  }
  return f;
}

std::vector<Var> point_mass_grad(Tape& tape, const SystemParams& params, const std::vector<Var>& q) {
  const std::size_t N = q.size();
  const std::size_t B = q.front().rows();
  std::vector<Var> g;
  for (std::size_t i = 0; i < N; ++i) g.push_back(zeros(tape, B, 3));
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) {
      const Var d = sub(q[i], q[j]);
      const double gmm = params.G * params.bodies[i].mass * params.bodies[j].mass;
      const Var gij = mul_rows(d, scale(inv_r3(row_sum(square(d))), gmm));
      g[i] = add(g[i], gij);
      g[j] = sub(g[j], gij);
    }
  return g;
}

LearnedPotential::LearnedPotential(Mlp net, Normalizer norm) : net_(std::move(net)), norm_(std::move(norm)) {
  if (net_.out_dim() != 1) throw std::invalid_argument("LearnedPotential: network must have one output");
}

PotentialEval LearnedPotential::evaluate(std::span<const Vec3> q, std::span<const Mat3> R) const {
  const std::size_t N = q.size();
  if (R.size() != N || net_.in_dim() != 12 * N) throw ShapeError("LearnedPotential: input size mismatch");
  Tape tape(false);
  std::vector<Var> vq, vR;
  for (std::size_t i = 0; i < N; ++i) {
    vq.push_back(tape.constant(row_tensor(q[i])));
    vR.push_back(tape.constant(row_tensor(R[i])));
  }
  const auto t = learned_potential_terms(bind(tape, net_, false), norm_, vq, vR);
  PotentialEval out;
  out.value = t.value->value().data[0];
  for (std::size_t i = 0; i < N; ++i) {
    out.grad_q.push_back(t.grad_q[i].value().vec3(0));
    out.grad_R.push_back(t.grad_R[i].value().mat3(0));
  }
  return out;
}

LearnedForcing::LearnedForcing(Mlp net, Normalizer norm) : net_(std::move(net)), norm_(std::move(norm)) {}

ForcingEval LearnedForcing::evaluate(std::span<const Vec3> q, std::span<const Mat3> R, std::span<const Vec3> p,
                                     std::span<const Vec3> Pi) const {
  const std::size_t N = q.size();
  if (net_.in_dim() != 18 * N || net_.out_dim() != 6 * N) throw ShapeError("LearnedForcing: input size mismatch");
  Tape tape(false);
  std::vector<Var> vq, vR, vp, vPi;
  for (std::size_t i = 0; i < N; ++i) {
    vq.push_back(tape.constant(row_tensor(q[i])));
    vR.push_back(tape.constant(row_tensor(R[i])));
    vp.push_back(tape.constant(row_tensor(p[i])));
    vPi.push_back(tape.constant(row_tensor(Pi[i])));
  }
  const auto f = learned_forcing_terms(bind(tape, net_, false), norm_, vq, vR, vp, vPi);
  ForcingEval out;
  for (std::size_t i = 0; i < N; ++i) {
    out.F_p.push_back(f.F_p[i].value().vec3(0));
    out.F_Pi.push_back(f.F_Pi[i].value().vec3(0));
  }
  return out;
}

// ---- taped states ---------------------------------------------------------------

TapedState bind_states(Tape& tape, const std::vector<SystemState>& batch) {
  if (batch.empty()) throw std::invalid_argument("bind_states: empty batch");
  const std::size_t N = batch.front().size();
  const std::size_t B = batch.size();
  TapedState s;
  for (std::size_t i = 0; i < N; ++i) {
    Tensor q(B, 3), p(B, 3), R(B, 9), Pi(B, 3);
    for (std::size_t r = 0; r < B; ++r) {
      if (batch[r].size() != N) throw ShapeError("bind_states: body counts differ within the batch");
      const auto& b = batch[r].bodies[i];
      q.set_vec3(r, b.q);
      p.set_vec3(r, b.p);
      R.set_mat3(r, b.R);
      Pi.set_vec3(r, b.Pi);
    }
    s.q.push_back(tape.constant(std::move(q)));
    s.p.push_back(tape.constant(std::move(p)));
    s.R.push_back(tape.constant(std::move(R)));
    s.Pi.push_back(tape.constant(std::move(Pi)));
  }
  return s;
}

SystemState extract_state(const TapedState& s, std::size_t row) {
  SystemState out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    BodyState b;
    b.q = s.q[i].value().vec3(row);
    b.p = s.p[i].value().vec3(row);
    b.R = s.R[i].value().mat3(row);
    b.Pi = s.Pi[i].value().vec3(row);
    out.bodies.push_back(b);
  }
  return out;
}

std::vector<bool> finite_rows(const TapedState& s) {
  std::vector<bool> ok(s.batch(), true);
  auto scan = [&](const std::vector<Var>& vs) {
    for (const Var& v : vs) {
      const Tensor& t = v.value();
      for (std::size_t r = 0; r < t.rows; ++r)
        for (std::size_t j = 0; j < t.cols; ++j)
          if (!std::isfinite(t(r, j))) ok[r] = false;
    }
  };
  scan(s.q);
  scan(s.p);
  scan(s.R);
  scan(s.Pi);
  return ok;
}

// ---- taped integrators -------------------------------------------------------
// Each routine mirrors its counterpart in integrators.cpp operation for
// operation so that the values agree bitwise.

TapedDynamics::TapedDynamics(Tape& tape, const LearnedDynamics& model, bool trainable) : tape_(&tape), model_(&model) {
  if (model.V) V_ = bind(tape, *model.V, trainable);
  if (model.F) F_ = bind(tape, *model.F, trainable);
}

std::vector<Var> TapedDynamics::parameters() const {
  std::vector<Var> out;
  if (V_)
    for (const Var& v : V_->all()) out.push_back(v);
  if (F_)
    for (const Var& v : F_->all()) out.push_back(v);
  return out;
}

TapedPotentialGrads TapedDynamics::potential(const TapedState& s) const {
  TapedPotentialGrads out;
  out.grad_q = point_mass_grad(*tape_, model_->params, s.q);
  if (!V_) return out;
  const auto learned = learned_potential_terms(*V_, model_->V_norm, s.q, s.R);
  for (std::size_t i = 0; i < s.size(); ++i) {
    out.grad_q[i] = add(out.grad_q[i], learned.grad_q[i]);
    out.grad_R.push_back(add(zeros(*tape_, s.batch(), 9), learned.grad_R[i]));
  }
  out.value = learned.value;
  return out;
}

std::optional<TapedForcing> TapedDynamics::forcing(const TapedState& s) const {
  if (!F_) return std::nullopt;
  return learned_forcing_terms(*F_, model_->F_norm, s.q, s.R, s.p, s.Pi);
}

namespace {

Var torque(Var R, Var dVdR) { return skew_vee(mat3_tmul(R, dVdR)); }

std::vector<double> inv_inertia(const BodyParams& b) {
  const Vec3 j = b.inverse_inertia();
  return {j.x, j.y, j.z};
}

Var attach(Var R, Var omega, bool left) {
  const Var e = exp_so3(omega);
  return left ? mat3_mul(e, R) : mat3_mul(R, e);
}

Var combine4(Var k1, Var k2, Var k3, Var k4) { return add(add(add(k1, scale(k2, 2.0)), scale(k3, 2.0)), k4); }

}  // namespace

TapedState TapedDynamics::flow_ke(const TapedState& s, double h) const {
  TapedState out = s;
  const std::size_t B = s.batch();
  for (std::size_t i = 0; i < s.size(); ++i) {
    const BodyParams& bp = model_->params.bodies[i];
    const double inv_m = 1.0 / bp.mass;
    const Vec3 Jinv = bp.inverse_inertia();
    out.q[i] = add(s.q[i], scale(s.p[i], h * inv_m));
    const Var theta_h = scale(scale(slice_cols(s.Pi[i], 2, 1), Jinv.z - Jinv.x), h);
    const Var Rz = exp_so3(concat_cols({zeros(*tape_, B, 2), theta_h}));
    out.R[i] = mat3_mul(mat3_mul(s.R[i], exp_so3(scale(s.Pi[i], h * Jinv.x))), Rz);
    out.Pi[i] = mat3_tvec(Rz, s.Pi[i]);
  }
  return out;
}

TapedState TapedDynamics::flow_pe(const TapedState& s, double h) const {
  const auto pg = potential(s);
  TapedState out = s;
  for (std::size_t i = 0; i < s.size(); ++i) {
    out.p[i] = sub(s.p[i], scale(pg.grad_q[i], h));
    if (!pg.grad_R.empty()) out.Pi[i] = sub(s.Pi[i], scale(torque(s.R[i], pg.grad_R[i]), h));
  }
  return out;
}

TapedState TapedDynamics::flow_asym(const TapedState& s, double h, bool left) const {
  TapedState out = s;
  const std::size_t B = s.batch();
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Vec3 Jinv = model_->params.bodies[i].inverse_inertia();
    const Var a = scale(scale(slice_cols(s.Pi[i], 1, 1), Jinv.y - Jinv.x), h);
    const Var Ry = exp_so3(concat_cols({zeros(*tape_, B, 1), a, zeros(*tape_, B, 1)}));
    out.R[i] = left ? mat3_mul(Ry, s.R[i]) : mat3_mul(s.R[i], Ry);
    out.Pi[i] = mat3_tvec(Ry, s.Pi[i]);
  }
  return out;
}

TapedState TapedDynamics::flow_force(const TapedState& s, double h) const {
  const auto f = forcing(s);
  if (!f) return s;
  TapedState out = s;
  for (std::size_t i = 0; i < s.size(); ++i) {
    out.p[i] = add(s.p[i], scale(f->F_p[i], h));
    out.Pi[i] = add(s.Pi[i], scale(f->F_Pi[i], h));
  }
  return out;
}

TapedState TapedDynamics::lie_t2(const TapedState& s0, double h, const IntegratorOptions& o) const {
  const double hh = 0.5 * h;
  const bool left = o.asym_literal_left;
  TapedState s = flow_ke(s0, hh);
  s = flow_pe(s, hh);
  s = flow_asym(s, hh, left);
  s = flow_force(s, h);
  s = flow_asym(s, hh, left);
  s = flow_pe(s, hh);
  return flow_ke(s, hh);
}

TapedDynamics::Rhs TapedDynamics::rhs(const TapedState& s) const {
  const auto pg = potential(s);
  const auto f = forcing(s);
  Rhs d;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const BodyParams& bp = model_->params.bodies[i];
    const Var omega = scale_cols(s.Pi[i], inv_inertia(bp));
    Var dp = neg(pg.grad_q[i]);
    Var dPi = cross(s.Pi[i], omega);
    if (!pg.grad_R.empty()) dPi = sub(dPi, torque(s.R[i], pg.grad_R[i]));
    if (f) {
      dp = add(dp, f->F_p[i]);
      dPi = add(dPi, f->F_Pi[i]);
    }
    d.dq.push_back(scale(s.p[i], 1.0 / bp.mass));
    d.dp.push_back(dp);
    d.dR.push_back(mat3_mul(s.R[i], hat(omega)));
    d.dPi.push_back(dPi);
  }
  return d;
}

namespace {

TapedState axpy(const TapedState& x, const std::vector<Var>& dq, const std::vector<Var>& dp,
                const std::vector<Var>* dR, const std::vector<Var>& dPi, double a) {
  TapedState out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.q[i] = add(x.q[i], scale(dq[i], a));
    out.p[i] = add(x.p[i], scale(dp[i], a));
    if (dR) out.R[i] = add(x.R[i], scale((*dR)[i], a));
    out.Pi[i] = add(x.Pi[i], scale(dPi[i], a));
  }
  return out;
}

}  // namespace

TapedState TapedDynamics::euler(const TapedState& s, double h) const {
  const Rhs k = rhs(s);
  return axpy(s, k.dq, k.dp, &k.dR, k.dPi, h);
}

TapedState TapedDynamics::rk4(const TapedState& s, double h) const {
  const Rhs k1 = rhs(s);
  const Rhs k2 = rhs(axpy(s, k1.dq, k1.dp, &k1.dR, k1.dPi, 0.5 * h));
  const Rhs k3 = rhs(axpy(s, k2.dq, k2.dp, &k2.dR, k2.dPi, 0.5 * h));
  const Rhs k4 = rhs(axpy(s, k3.dq, k3.dp, &k3.dR, k3.dPi, h));
  const double w = h / 6.0;
  TapedState out = s;
  for (std::size_t i = 0; i < s.size(); ++i) {
    out.q[i] = add(s.q[i], scale(combine4(k1.dq[i], k2.dq[i], k3.dq[i], k4.dq[i]), w));
    out.p[i] = add(s.p[i], scale(combine4(k1.dp[i], k2.dp[i], k3.dp[i], k4.dp[i]), w));
    out.R[i] = add(s.R[i], scale(combine4(k1.dR[i], k2.dR[i], k3.dR[i], k4.dR[i]), w));
    out.Pi[i] = add(s.Pi[i], scale(combine4(k1.dPi[i], k2.dPi[i], k3.dPi[i], k4.dPi[i]), w));
  }
  return out;
}

TapedState TapedDynamics::verlet(const TapedState& s, double h, const IntegratorOptions& o) const {
  const double hd = o.verlet_literal ? h : 0.5 * h;
  TapedState half = s;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const BodyParams& bp = model_->params.bodies[i];
    const Var omega = scale_cols(s.Pi[i], inv_inertia(bp));
    half.q[i] = add(s.q[i], scale(s.p[i], hd * (1.0 / bp.mass)));
    half.R[i] = add(s.R[i], scale(mat3_mul(s.R[i], hat(omega)), hd));
  }
  const auto pg = potential(half);
  const auto f = forcing(half);
  TapedState out = half;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const BodyParams& bp = model_->params.bodies[i];
    const auto Jinv = inv_inertia(bp);
    Var dp = neg(pg.grad_q[i]);
    Var dPi = cross(half.Pi[i], scale_cols(half.Pi[i], Jinv));
    if (!pg.grad_R.empty()) dPi = sub(dPi, torque(half.R[i], pg.grad_R[i]));
    if (f) {
      dp = add(dp, f->F_p[i]);
      dPi = add(dPi, f->F_Pi[i]);
    }
    out.p[i] = add(half.p[i], scale(dp, h));
    out.Pi[i] = add(half.Pi[i], scale(dPi, h));
    const Var omega = scale_cols(out.Pi[i], Jinv);
    out.q[i] = add(half.q[i], scale(out.p[i], hd * (1.0 / bp.mass)));
    out.R[i] = add(half.R[i], scale(mat3_mul(half.R[i], hat(omega)), hd));
  }
  return out;
}

TapedState TapedDynamics::cf2(const TapedState& s, double h, const IntegratorOptions& o) const {
  const bool left = o.cf_literal_left;
  const Rhs k1 = rhs(s);
  TapedState mid = axpy(s, k1.dq, k1.dp, nullptr, k1.dPi, 0.5 * h);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Var w1 = scale_cols(s.Pi[i], inv_inertia(model_->params.bodies[i]));
    mid.R[i] = attach(s.R[i], scale(w1, 0.5 * h), left);
  }
  const Rhs k2 = rhs(mid);
  TapedState out = axpy(s, k2.dq, k2.dp, nullptr, k2.dPi, h);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Var w2 = scale_cols(mid.Pi[i], inv_inertia(model_->params.bodies[i]));
    out.R[i] = attach(s.R[i], scale(w2, h), left);
  }
  return out;
}

TapedState TapedDynamics::cf4(const TapedState& s, double h, const IntegratorOptions& o) const {
  const bool left = o.cf_literal_left;
  const std::size_t n = s.size();
  auto omega = [&](const TapedState& x, std::size_t i) {
    return scale_cols(x.Pi[i], inv_inertia(model_->params.bodies[i]));
  };
  const Rhs k1 = rhs(s);
  TapedState s2 = axpy(s, k1.dq, k1.dp, nullptr, k1.dPi, 0.5 * h);
  for (std::size_t i = 0; i < n; ++i) s2.R[i] = attach(s.R[i], scale(omega(s, i), 0.5 * h), left);

  const Rhs k2 = rhs(s2);
  TapedState s3 = axpy(s, k2.dq, k2.dp, nullptr, k2.dPi, 0.5 * h);
  for (std::size_t i = 0; i < n; ++i) s3.R[i] = attach(s.R[i], scale(omega(s2, i), 0.5 * h), left);

  const Rhs k3 = rhs(s3);
  TapedState s4 = axpy(s, k3.dq, k3.dp, nullptr, k3.dPi, h);
  const TapedState& base4 = o.cf4_literal_stage ? s3 : s2;
  for (std::size_t i = 0; i < n; ++i)
    s4.R[i] = attach(base4.R[i], scale(sub(omega(s3, i), scale(omega(s, i), 0.5)), h), left);

  const Rhs k4 = rhs(s4);
  const double w = h / 6.0;
  TapedState out = s;
  for (std::size_t i = 0; i < n; ++i) {
    out.q[i] = add(s.q[i], scale(combine4(k1.dq[i], k2.dq[i], k3.dq[i], k4.dq[i]), w));
    out.p[i] = add(s.p[i], scale(combine4(k1.dp[i], k2.dp[i], k3.dp[i], k4.dp[i]), w));
    out.Pi[i] = add(s.Pi[i], scale(combine4(k1.dPi[i], k2.dPi[i], k3.dPi[i], k4.dPi[i]), w));
    const Var w1 = omega(s, i), w2 = omega(s2, i), w3 = omega(s3, i), w4 = omega(s4, i);
    const Var a = scale(sub(add(add(scale(w1, 3.0), scale(w2, 2.0)), scale(w3, 2.0)), w4), h / 12.0);
    const Var c = scale(sub(add(add(scale(w2, 2.0), scale(w3, 2.0)), scale(w4, 3.0)), w1), h / 12.0);
    out.R[i] = attach(attach(s.R[i], a, left), c, left);
  }
  return out;
}

TapedState TapedDynamics::step(StepScheme scheme, const TapedState& s, double h, const IntegratorOptions& opts) const {
  if (s.size() != model_->params.size()) throw ShapeError("TapedDynamics::step: body count mismatch");
  switch (scheme) {
    case StepScheme::ExplicitEuler: return euler(s, h);
    case StepScheme::RK4: return rk4(s, h);
    case StepScheme::Verlet: return verlet(s, h, opts);
    case StepScheme::LieRK2: return cf2(s, h, opts);
    case StepScheme::LieRK4: return cf4(s, h, opts);
    case StepScheme::LieT2: return lie_t2(s, h, opts);
  }
  throw std::invalid_argument("TapedDynamics::step: bad scheme");
}

// ---- loss --------------------------------------------------------------------

std::vector<Sample> enumerate_samples(const Dataset& d, bool train, std::size_t K_loss) {
  if (K_loss < 1 || K_loss > d.K) throw std::invalid_argument("enumerate_samples: K_loss must be in [1, K]");
  std::vector<Sample> out;
  for (std::size_t l = 0; l < d.trajectories.size(); ++l) {
    if (d.trajectories[l].train != train) continue;
    for (std::size_t k = 0; k + K_loss <= d.K; ++k) out.push_back({l, k});
  }
  return out;
}

std::vector<TapedState> predict_rollout(const TapedDynamics& dyn, const TapedState& start, double dt,
                                        const RolloutSpec& spec, std::vector<bool>* finite) {
  if (spec.H < 1 || spec.K_loss < 1) throw std::invalid_argument("predict_rollout: H and K_loss must be >= 1");
  const double h = dt / static_cast<double>(spec.H);
  std::vector<TapedState> out;
  TapedState s = start;
  if (finite) finite->assign(start.batch(), true);
  for (std::size_t k = 0; k < spec.K_loss; ++k) {
    for (std::size_t j = 0; j < spec.H; ++j) {
      s = dyn.step(spec.scheme, s, h, spec.options);
      if (finite) {
        const auto ok = finite_rows(s);
        for (std::size_t r = 0; r < ok.size(); ++r) (*finite)[r] = (*finite)[r] && ok[r];
      }
    }
    out.push_back(s);
  }
  return out;
}

Var srnn_loss(const std::vector<TapedState>& pred, const std::vector<TapedState>& target, LossReport* report,
              std::vector<double>* per_sample) {
  if (pred.size() != target.size() || pred.empty()) throw std::invalid_argument("srnn_loss: horizon mismatch");
  const std::size_t B = pred.front().batch();
  std::optional<Var> tq, tp, tR, tPi;
  auto acc = [](std::optional<Var>& total, Var a, Var b) {
    const Var e = row_sum(square(sub(a, b)));
    total = total ? add(*total, e) : e;
  };
  for (std::size_t k = 0; k < pred.size(); ++k) {
    if (pred[k].size() != target[k].size() || pred[k].batch() != target[k].batch())
      throw ShapeError("srnn_loss: prediction and target shapes differ");
    for (std::size_t i = 0; i < pred[k].size(); ++i) {
      acc(tq, pred[k].q[i], target[k].q[i]);
      acc(tp, pred[k].p[i], target[k].p[i]);
      acc(tR, pred[k].R[i], target[k].R[i]);
      acc(tPi, pred[k].Pi[i], target[k].Pi[i]);
    }
  }
  const Var per = add(add(add(*tq, *tp), *tR), *tPi);
  const double norm = 1.0 / (static_cast<double>(B) * static_cast<double>(pred.size()));
  const Var loss = scale(sum(per), norm);
  if (per_sample) per_sample->assign(per.value().data.begin(), per.value().data.end());
  if (report) {
    auto total_of = [&](Var v) {
      double s = 0.0;
      for (double x : v.value().data) s += x;
      return s * norm;
    };
    report->q = total_of(*tq);
    report->p = total_of(*tp);
    report->R = total_of(*tR);
    report->Pi = total_of(*tPi);
    report->divergence_penalty = 0.0;
    report->diverged = 0;
    report->samples = B;
    report->total = loss.value().data[0];
  }
  return loss;
}

namespace {

struct BatchRun {
  LossReport report;
  std::vector<bool> keep;  // finite and below kDivergedLoss
  std::vector<Tensor> grads;
};

// Forward pass; the backward sweep runs only if every row is kept.
BatchRun run_batch(const LearnedDynamics& model, const Dataset& d, const std::vector<Sample>& samples,
                   const RolloutSpec& spec, bool with_grad) {
  Tape tape(with_grad);
  const TapedDynamics dyn(tape, model, with_grad);
  std::vector<SystemState> starts;
  std::vector<std::vector<SystemState>> targets(spec.K_loss);
  for (const auto& s : samples) {
    const auto& snaps = d.trajectories.at(s.traj).snapshots;
    if (s.start + spec.K_loss >= snaps.size()) throw std::out_of_range("batch: sample runs past the trajectory end");
    starts.push_back(snaps[s.start]);
    for (std::size_t k = 0; k < spec.K_loss; ++k) targets[k].push_back(snaps[s.start + k + 1]);
  }
  BatchRun out;
  const TapedState start = bind_states(tape, starts);
  const auto pred = predict_rollout(dyn, start, d.dt, spec, &out.keep);
  std::vector<TapedState> tgt;
  for (const auto& t : targets) tgt.push_back(bind_states(tape, t));
  std::vector<double> per_sample;
  const Var loss = srnn_loss(pred, tgt, &out.report, &per_sample);
  bool clean = true;
  for (std::size_t r = 0; r < out.keep.size(); ++r) {
    out.keep[r] = out.keep[r] && per_sample[r] <= kDivergedLoss;
    clean = clean && out.keep[r];
  }
  if (with_grad && clean) {
    tape.backward(loss);
    for (const Var& p : dyn.parameters()) out.grads.push_back(tape.grad(p));
  }
  return out;
}

}  // namespace

BatchResult batch_loss(const LearnedDynamics& model, const Dataset& d, const std::vector<Sample>& samples,
                       const RolloutSpec& spec, bool with_grad) {
  if (samples.empty()) throw std::invalid_argument("batch_loss: empty batch");
  const std::size_t B = samples.size();
  BatchRun run = run_batch(model, d, samples, spec, with_grad);
  std::vector<Sample> good;
  for (std::size_t r = 0; r < B; ++r)
    if (run.keep[r]) good.push_back(samples[r]);
  const std::size_t bad = B - good.size();

  BatchResult out;
  if (good.empty()) {
    out.report.samples = B;
    out.report.diverged = B;
    out.report.divergence_penalty = kDivergedLoss;
    out.report.total = kDivergedLoss;
    return out;
  }
  // Rows are independent, so the surviving rows keep their values on the re-run.
  if (bad > 0) run = run_batch(model, d, good, spec, with_grad);
  const double w = static_cast<double>(good.size()) / static_cast<double>(B);
  LossReport r = run.report;
  r.q *= w;
  r.p *= w;
  r.R *= w;
  r.Pi *= w;
  r.samples = B;
  r.diverged = bad;
  r.divergence_penalty = kDivergedLoss * static_cast<double>(bad) / static_cast<double>(B);
  r.total = r.q + r.p + r.R + r.Pi + r.divergence_penalty;
  out.report = r;
  out.grads = std::move(run.grads);
  return out;
}

// ---- training --------------------------------------------------------------

namespace {

// Sample-weighted mean of batch totals over a whole split.
LossReport evaluate_split(const LearnedDynamics& model, const Dataset& d, const std::vector<Sample>& samples,
                          const RolloutSpec& spec, std::size_t chunk) {
  LossReport acc;
  for (std::size_t i = 0; i < samples.size(); i += chunk) {
    const std::vector<Sample> part(samples.begin() + static_cast<long>(i),
                                   samples.begin() + static_cast<long>(std::min(samples.size(), i + chunk)));
    const auto r = batch_loss(model, d, part, spec, false).report;
    const double w = static_cast<double>(part.size());
    acc.q += r.q * w;
    acc.p += r.p * w;
    acc.R += r.R * w;
    acc.Pi += r.Pi * w;
    acc.divergence_penalty += r.divergence_penalty * w;
    acc.diverged += r.diverged;
    acc.samples += part.size();
  }
  const double inv = 1.0 / static_cast<double>(acc.samples);
  acc.q *= inv;
  acc.p *= inv;
  acc.R *= inv;
  acc.Pi *= inv;
  acc.divergence_penalty *= inv;
  acc.total = acc.q + acc.p + acc.R + acc.Pi + acc.divergence_penalty;
  return acc;
}

bool all_finite_params(const LearnedDynamics& m) {
  for (const Tensor* t : m.parameters())
    for (double x : t->data)
      if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

TrainResult train(const Dataset& d, LearnedDynamics model, const TrainConfig& cfg) {
  if (d.trajectories.empty()) throw std::invalid_argument("train: empty dataset");
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (model.parameters().empty()) throw std::invalid_argument("train: model has no trainable networks");
  const auto train_samples = enumerate_samples(d, true, cfg.rollout.K_loss);
  auto val_samples = enumerate_samples(d, false, cfg.rollout.K_loss);
  if (train_samples.empty()) throw std::invalid_argument("train: no training samples");
  const bool have_val = !val_samples.empty();
  const auto& monitor = have_val ? val_samples : train_samples;

  TrainResult res;
  res.optimizer = AdamW(cfg.adam, std::as_const(model).parameters());
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, train_samples.size() - 1);
  const std::size_t steps = cfg.steps_per_epoch
                                ? cfg.steps_per_epoch
                                : (train_samples.size() + cfg.batch_size - 1) / cfg.batch_size;

  const auto e0_train = evaluate_split(model, d, train_samples, cfg.rollout, cfg.batch_size);
  const auto e0_val = have_val ? evaluate_split(model, d, val_samples, cfg.rollout, cfg.batch_size) : e0_train;
  res.curve.push_back({0, e0_train.total, e0_val.total, e0_train.diverged});
  res.best_val_loss = e0_val.total;
  res.best_epoch = 0;
  LearnedDynamics best = model;
  AdamW best_opt = res.optimizer;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t used = 0, diverged = 0, dead_batches = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<Sample> batch;
      batch.reserve(cfg.batch_size);
      for (std::size_t b = 0; b < cfg.batch_size; ++b) batch.push_back(train_samples[pick(rng)]);
      auto br = batch_loss(model, d, batch, cfg.rollout, true);
      diverged += br.report.diverged;
      loss_sum += br.report.total;
      ++used;
      if (br.grads.empty()) {
        ++dead_batches;
        continue;
      }
      res.optimizer.step(model.parameters(), br.grads);
    }
    if (dead_batches == steps || !all_finite_params(model)) {
      res.diverged = true;
      std::ostringstream msg;
      msg << to_string(cfg.rollout.scheme) << ": "
          << (dead_batches == steps ? "every training sample diverged" : "parameters became non-finite")
          << " in epoch " << epoch << " (h = " << d.dt / static_cast<double>(cfg.rollout.H) << ")";
      res.divergence_report = msg.str();
      res.curve.push_back({epoch, kDivergedLoss, kDivergedLoss, diverged});
      break;
    }
    const double val = evaluate_split(model, d, monitor, cfg.rollout, cfg.batch_size).total;
    res.curve.push_back({epoch, loss_sum / static_cast<double>(used), val, diverged});
    if (cfg.verbose)
      std::fprintf(stderr, "epoch %zu train %.6e val %.6e diverged %zu\n", epoch, res.curve.back().train_loss, val,
                   diverged);
    if (val < res.best_val_loss * (1.0 - cfg.min_improvement)) {
      res.best_val_loss = val;
      res.best_epoch = epoch;
      best = model;
      best_opt = res.optimizer;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  res.model = std::move(best);
  res.optimizer = std::move(best_opt);
  return res;
}

std::vector<SchemeOutcome> baseline_train_matrix(const Dataset& d, const LearnedDynamics& init,
                                                 const TrainConfig& cfg, std::span<const StepScheme> schemes) {
  std::vector<SchemeOutcome> out;
  for (StepScheme s : schemes) {
    TrainConfig c = cfg;
    c.rollout.scheme = s;
    out.push_back({s, train(d, init, c)});
  }
  return out;
}

Checkpoint make_checkpoint(const LearnedDynamics& model, const AdamW& opt, const std::string& config_json) {
  Checkpoint c;
  c.params = model.named_tensors();
  c.adam = opt.config();
  c.adam_step = opt.steps();
  c.adam_m = opt.first_moments();
  c.adam_v = opt.second_moments();
  c.config_json = config_json;
  return c;
}

void restore_checkpoint(const Checkpoint& c, LearnedDynamics& model, AdamW* opt) {
  model.assign_tensors(c.params);
  if (opt) {
    *opt = AdamW(c.adam, std::as_const(model).parameters());
    if (c.adam_m.size() != model.parameters().size() && c.adam_step > 0)
      throw std::runtime_error("checkpoint: optimizer state does not match the networks");
    if (c.adam_step > 0 || !c.adam_m.empty()) opt->restore(c.adam_step, c.adam_m, c.adam_v);
  }
}

}  // namespace srnn
