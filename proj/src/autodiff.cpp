#include "srnn/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <string>
#include <string_view>

#include "srnn/kernels.hpp"

namespace srnn {

Tensor::Tensor(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) throw ShapeError("Tensor: data length does not match shape");
}

Vec3 Tensor::vec3(std::size_t r) const {
  const double* p = row(r);
  return {p[0], p[1], p[2]};
}

void Tensor::set_vec3(std::size_t r, const Vec3& v) {
  double* p = row(r);
  p[0] = v.x;
  p[1] = v.y;
  p[2] = v.z;
}

Mat3 Tensor::mat3(std::size_t r) const {
  Mat3 m;
  const double* p = row(r);
  for (int i = 0; i < 9; ++i) m.m[i] = p[i];
  return m;
}

void Tensor::set_mat3(std::size_t r, const Mat3& m) {
  double* p = row(r);
  for (int i = 0; i < 9; ++i) p[i] = m.m[i];
}

const Tensor& Var::value() const { return tape->value(*this); }

// ---- tape -------------------------------------------------------------------

Var Tape::leaf(Tensor value) {
  nodes_.push_back({std::move(value), {}, {}, recording_});
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  nodes_.push_back({std::move(value), {}, {}, false});
  return {this, nodes_.size() - 1};
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, Backward rule) {
  return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(rule));
}

Var Tape::push(Tensor value, std::span<const Var> inputs, Backward rule) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw std::invalid_argument("Tape: operand belongs to another tape");
    needs = needs || nodes_[v.id].needs_grad;
  }
  needs = needs && recording_;
  nodes_.push_back({std::move(value), {}, needs ? std::move(rule) : Backward{}, needs});
  return {this, nodes_.size() - 1};
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = nodes_[v.id];
  if (!n.needs_grad) return;
  if (!g.same_shape(n.value)) throw ShapeError("Tape: gradient shape mismatch");
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) n.grad.data[i] += g.data[i];
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor(n.value.rows, n.value.cols);
  return n.grad;
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad = Tensor();
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::invalid_argument("Tape::backward: loss belongs to another tape");
  const Tensor& lv = nodes_.at(loss.id).value;
  if (lv.rows != 1 || lv.cols != 1) throw ShapeError("Tape::backward: loss must be a [1,1] scalar");
  if (!recording_) throw std::logic_error("Tape::backward: tape was not recording");
  accumulate(loss, Tensor(1, 1, 1.0));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    // The rule may append to nothing but may touch other nodes' grads; copy
    // the incoming gradient so the reference stays valid.
    const Tensor g = n.grad;
    n.backward(*this, g);
  }
}

// ---- primitives ---------------------------------------------------------------

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

void require_same(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  if (!a.value().same_shape(b.value()))
    throw ShapeError(std::string(op) + ": shape mismatch [" + std::to_string(a.rows()) + "," +
                     std::to_string(a.cols()) + "] vs [" + std::to_string(b.rows()) + "," + std::to_string(b.cols()) +
                     "]");
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var add(Var a, Var b) {
  require_same(a, b, "add");
  Tensor v = zip(a.value(), b.value(), [](double x, double y) { return x + y; });
  return a.tape->push(std::move(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  Tensor v = zip(a.value(), b.value(), [](double x, double y) { return x - y; });
  return a.tape->push(std::move(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.needs_grad(b)) t.accumulate(b, map(g, [](double x) { return -x; }));
  });
}

Var neg(Var a) {
  Tensor v = map(a.value(), [](double x) { return -x; });
  return a.tape->push(std::move(v), {a},
                      [a](Tape& t, const Tensor& g) { t.accumulate(a, map(g, [](double x) { return -x; })); });
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  Tensor v = zip(a.value(), b.value(), [](double x, double y) { return x * y; });
  return a.tape->push(std::move(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) t.accumulate(a, zip(g, b.value(), [](double x, double y) { return x * y; }));
    if (t.needs_grad(b)) t.accumulate(b, zip(g, a.value(), [](double x, double y) { return x * y; }));
  });
}

Var scale(Var a, double c) {
  Tensor v = map(a.value(), [c](double x) { return x * c; });
  return a.tape->push(std::move(v), {a},
                      [a, c](Tape& t, const Tensor& g) { t.accumulate(a, map(g, [c](double x) { return x * c; })); });
}

Var scale_cols(Var a, const std::vector<double>& c) {
  require(c.size() == a.cols(), "scale_cols: factor count must equal column count");
  const Tensor& av = a.value();
  Tensor v(av.rows, av.cols);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t j = 0; j < av.cols; ++j) v(r, j) = av(r, j) * c[j];
  return a.tape->push(std::move(v), {a}, [a, c](Tape& t, const Tensor& g) {
    Tensor ga(g.rows, g.cols);
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t j = 0; j < g.cols; ++j) ga(r, j) = g(r, j) * c[j];
    t.accumulate(a, ga);
  });
}

Var mul_rows(Var a, Var s) {
  require(s.cols() == 1 && s.rows() == a.rows(), "mul_rows: expected a[B,k] and s[B,1]");
  const Tensor& av = a.value();
  const Tensor& sv = s.value();
  Tensor v(av.rows, av.cols);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t j = 0; j < av.cols; ++j) v(r, j) = av(r, j) * sv(r, 0);
  return a.tape->push(std::move(v), {a, s}, [a, s](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& sv = s.value();
    if (t.needs_grad(a)) {
      Tensor ga(g.rows, g.cols);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t j = 0; j < g.cols; ++j) ga(r, j) = g(r, j) * sv(r, 0);
      t.accumulate(a, ga);
    }
    if (t.needs_grad(s)) {
      Tensor gs(g.rows, 1);
      for (std::size_t r = 0; r < g.rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < g.cols; ++j) acc += g(r, j) * av(r, j);
        gs(r, 0) = acc;
      }
      t.accumulate(s, gs);
    }
  });
}

Var add_row_broadcast(Var a, Var bias) {
  require(bias.rows() == 1 && bias.cols() == a.cols(), "add_row_broadcast: bias must be [1, cols]");
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  Tensor v(av.rows, av.cols);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t j = 0; j < av.cols; ++j) v(r, j) = av(r, j) + bv(0, j);
  return a.tape->push(std::move(v), {a, bias}, [a, bias](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.needs_grad(bias)) {
      Tensor gb(1, g.cols);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t j = 0; j < g.cols; ++j) gb(0, j) += g(r, j);
      t.accumulate(bias, gb);
    }
  });
}

Var matmul(Var a, Var w) {
  require(a.cols() == w.rows(), "matmul: inner dimensions differ");
  const std::size_t B = a.rows(), K = a.cols(), N = w.cols();
  Tensor v(B, N);
  kernels::matmul(a.value().data.data(), w.value().data.data(), v.data.data(), B, K, N);
  return a.tape->push(std::move(v), {a, w}, [a, w, B, K, N](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) {
      Tensor ga(B, K);
      kernels::matmul_nt(g.data.data(), w.value().data.data(), ga.data.data(), B, N, K);
      t.accumulate(a, ga);
    }
    if (t.needs_grad(w)) {
      Tensor gw(K, N);
      kernels::matmul_tn(a.value().data.data(), g.data.data(), gw.data.data(), B, K, N);
      t.accumulate(w, gw);
    }
  });
}

Var matmul_nt(Var a, Var w) {
  require(a.cols() == w.cols(), "matmul_nt: inner dimensions differ");
  const std::size_t B = a.rows(), N = a.cols(), K = w.rows();
  Tensor v(B, K);
  kernels::matmul_nt(a.value().data.data(), w.value().data.data(), v.data.data(), B, N, K);
  return a.tape->push(std::move(v), {a, w}, [a, w, B, N, K](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) {
      Tensor ga(B, N);
      kernels::matmul(g.data.data(), w.value().data.data(), ga.data.data(), B, K, N);
      t.accumulate(a, ga);
    }
    if (t.needs_grad(w)) {
      Tensor gw(K, N);
      kernels::matmul_tn(g.data.data(), a.value().data.data(), gw.data.data(), B, K, N);
      t.accumulate(w, gw);
    }
  });
}

Var silu(Var x) {
  Tensor v = map(x.value(), [](double z) { return z * sigmoid(z); });
  return x.tape->push(std::move(v), {x}, [x](Tape& t, const Tensor& g) {
    t.accumulate(x, zip(g, x.value(), [](double gi, double z) {
                   const double s = sigmoid(z);
                   return gi * (s * (1.0 + z * (1.0 - s)));
                 }));
  });
}

Var silu_prime(Var x) {
  Tensor v = map(x.value(), [](double z) {
    const double s = sigmoid(z);
    return s * (1.0 + z * (1.0 - s));
  });
  return x.tape->push(std::move(v), {x}, [x](Tape& t, const Tensor& g) {
    t.accumulate(x, zip(g, x.value(), [](double gi, double z) {
                   const double s = sigmoid(z);
                   return gi * (s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s)));
                 }));
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data) s += x;
  return a.tape->push(Tensor(1, 1, s), {a}, [a](Tape& t, const Tensor& g) {
    t.accumulate(a, Tensor(a.rows(), a.cols(), g.data[0]));
  });
}

Var row_sum(Var a) {
  const Tensor& av = a.value();
  Tensor v(av.rows, 1);
  for (std::size_t r = 0; r < av.rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < av.cols; ++j) s += av(r, j);
    v(r, 0) = s;
  }
  return a.tape->push(std::move(v), {a}, [a](Tape& t, const Tensor& g) {
    Tensor ga(a.rows(), a.cols());
    for (std::size_t r = 0; r < ga.rows; ++r)
      for (std::size_t j = 0; j < ga.cols; ++j) ga(r, j) = g(r, 0);
    t.accumulate(a, ga);
  });
}

Var mean(Var a) {
  require(a.value().size() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var square(Var a) {
  Tensor v = map(a.value(), [](double x) { return x * x; });
  return a.tape->push(std::move(v), {a}, [a](Tape& t, const Tensor& g) {
    t.accumulate(a, zip(g, a.value(), [](double gi, double x) { return gi * (2.0 * x); }));
  });
}

Var sqrt(Var a) {
  Tensor v = map(a.value(), [](double x) { return std::sqrt(x); });
  const Var out{a.tape, a.tape->size()};
  return a.tape->push(std::move(v), {a}, [a, out](Tape& t, const Tensor& g) {
    t.accumulate(a, zip(g, out.value(), [](double gi, double y) { return gi * (0.5 / y); }));
  });
}

Var reciprocal(Var a) {
  Tensor v = map(a.value(), [](double x) { return 1.0 / x; });
  const Var out{a.tape, a.tape->size()};
  return a.tape->push(std::move(v), {a}, [a, out](Tape& t, const Tensor& g) {
    t.accumulate(a, zip(g, out.value(), [](double gi, double y) { return -gi * (y * y); }));
  });
}

Var inv_r3(Var r2) {
  Tensor v = map(r2.value(), [](double x) { return 1.0 / (x * std::sqrt(x)); });
  const Var out{r2.tape, r2.tape->size()};
  return r2.tape->push(std::move(v), {r2}, [r2, out](Tape& t, const Tensor& g) {
    Tensor ga(g.rows, g.cols);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] = g.data[i] * (-1.5 * out.value().data[i] / r2.value().data[i]);
    t.accumulate(r2, ga);
  });
}

Var norm(Var a) {
  const Tensor& av = a.value();
  Tensor v(av.rows, 1);
  for (std::size_t r = 0; r < av.rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < av.cols; ++j) s += av(r, j) * av(r, j);
    v(r, 0) = std::sqrt(s);
  }
  const Var out{a.tape, a.tape->size()};
  return a.tape->push(std::move(v), {a}, [a, out](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    Tensor ga(av.rows, av.cols);
    for (std::size_t r = 0; r < av.rows; ++r) {
      const double k = g(r, 0) / out.value()(r, 0);
      for (std::size_t j = 0; j < av.cols; ++j) ga(r, j) = av(r, j) * k;
    }
    t.accumulate(a, ga);
  });
}

namespace {

// Row-wise op helpers for [B,3] / [B,9] operands.
void require_rows(Var a, std::size_t cols, const char* op) {
  if (a.cols() != cols)
    throw ShapeError(std::string(op) + ": expected " + std::to_string(cols) + " columns, got " +
                     std::to_string(a.cols()));
}

void require_batch(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  if (a.rows() != b.rows()) throw ShapeError(std::string(op) + ": batch sizes differ");
}

}  // namespace

Var cross(Var a, Var b) {
  require_rows(a, 3, "cross");
  require_rows(b, 3, "cross");
  require_batch(a, b, "cross");
  Tensor v(a.rows(), 3);
  for (std::size_t r = 0; r < v.rows; ++r) v.set_vec3(r, cross(a.value().vec3(r), b.value().vec3(r)));
  return a.tape->push(std::move(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
    Tensor ga(g.rows, 3), gb(g.rows, 3);
    for (std::size_t r = 0; r < g.rows; ++r) {
      const Vec3 gr = g.vec3(r);
      ga.set_vec3(r, cross(b.value().vec3(r), gr));
      gb.set_vec3(r, cross(gr, a.value().vec3(r)));
    }
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no operands");
  const std::size_t B = parts.front().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    require(p.rows() == B, "concat_cols: row counts differ");
    total += p.cols();
  }
  Tensor v(B, total);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t j = 0; j < pv.cols; ++j) v(r, off + j) = pv(r, j);
    off += pv.cols;
  }
  Tape* tape = parts.front().tape;
  return tape->push(std::move(v), std::span<const Var>(parts), [parts](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t c = p.cols();
      if (t.needs_grad(p)) {
        Tensor gp(g.rows, c);
        for (std::size_t r = 0; r < g.rows; ++r)
          for (std::size_t j = 0; j < c; ++j) gp(r, j) = g(r, off + j);
        t.accumulate(p, gp);
      }
      off += c;
    }
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  require(start + count <= a.cols(), "slice_cols: range out of bounds");
  const Tensor& av = a.value();
  Tensor v(av.rows, count);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t j = 0; j < count; ++j) v(r, j) = av(r, start + j);
  return a.tape->push(std::move(v), {a}, [a, start, count](Tape& t, const Tensor& g) {
    Tensor ga(a.rows(), a.cols());
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t j = 0; j < count; ++j) ga(r, start + j) = g(r, j);
    t.accumulate(a, ga);
  });
}

Var mat3_mul(Var A, Var B) {
  require_rows(A, 9, "mat3_mul");
  require_rows(B, 9, "mat3_mul");
  require_batch(A, B, "mat3_mul");
  Tensor v(A.rows(), 9);
  for (std::size_t r = 0; r < v.rows; ++r) v.set_mat3(r, mul(A.value().mat3(r), B.value().mat3(r)));
  return A.tape->push(std::move(v), {A, B}, [A, B](Tape& t, const Tensor& g) {
    Tensor gA(g.rows, 9), gB(g.rows, 9);
    for (std::size_t r = 0; r < g.rows; ++r) {
      const Mat3 G = g.mat3(r);
      gA.set_mat3(r, mul(G, transpose(B.value().mat3(r))));
      gB.set_mat3(r, tmul(A.value().mat3(r), G));
    }
    t.accumulate(A, gA);
    t.accumulate(B, gB);
  });
}

Var mat3_tmul(Var A, Var B) {
  require_rows(A, 9, "mat3_tmul");
  require_rows(B, 9, "mat3_tmul");
  require_batch(A, B, "mat3_tmul");
  Tensor v(A.rows(), 9);
  for (std::size_t r = 0; r < v.rows; ++r) v.set_mat3(r, tmul(A.value().mat3(r), B.value().mat3(r)));
  return A.tape->push(std::move(v), {A, B}, [A, B](Tape& t, const Tensor& g) {
    Tensor gA(g.rows, 9), gB(g.rows, 9);
    for (std::size_t r = 0; r < g.rows; ++r) {
      const Mat3 G = g.mat3(r);
      gA.set_mat3(r, mul(B.value().mat3(r), transpose(G)));
      gB.set_mat3(r, mul(A.value().mat3(r), G));
    }
    t.accumulate(A, gA);
    t.accumulate(B, gB);
  });
}

Var mat3_vec(Var A, Var v) {
  require_rows(A, 9, "mat3_vec");
  require_rows(v, 3, "mat3_vec");
  require_batch(A, v, "mat3_vec");
  Tensor out(A.rows(), 3);
  for (std::size_t r = 0; r < out.rows; ++r) out.set_vec3(r, mul(A.value().mat3(r), v.value().vec3(r)));
  return A.tape->push(std::move(out), {A, v}, [A, v](Tape& t, const Tensor& g) {
    Tensor gA(g.rows, 9), gv(g.rows, 3);
    for (std::size_t r = 0; r < g.rows; ++r) {
      const Vec3 gr = g.vec3(r);
      gA.set_mat3(r, outer(gr, v.value().vec3(r)));
      gv.set_vec3(r, tmul(A.value().mat3(r), gr));
    }
    t.accumulate(A, gA);
    t.accumulate(v, gv);
  });
}

Var mat3_tvec(Var A, Var v) {
  require_rows(A, 9, "mat3_tvec");
  require_rows(v, 3, "mat3_tvec");
  require_batch(A, v, "mat3_tvec");
  Tensor out(A.rows(), 3);
  for (std::size_t r = 0; r < out.rows; ++r) out.set_vec3(r, tmul(A.value().mat3(r), v.value().vec3(r)));
  return A.tape->push(std::move(out), {A, v}, [A, v](Tape& t, const Tensor& g) {
    Tensor gA(g.rows, 9), gv(g.rows, 3);
    for (std::size_t r = 0; r < g.rows; ++r) {
      const Vec3 gr = g.vec3(r);
      gA.set_mat3(r, outer(v.value().vec3(r), gr));
      gv.set_vec3(r, mul(A.value().mat3(r), gr));
    }
    t.accumulate(A, gA);
    t.accumulate(v, gv);
  });
}

Var hat(Var u) {
  require_rows(u, 3, "hat");
  Tensor v(u.rows(), 9);
  for (std::size_t r = 0; r < v.rows; ++r) v.set_mat3(r, hat(u.value().vec3(r)));
  return u.tape->push(std::move(v), {u}, [u](Tape& t, const Tensor& g) {
    Tensor gu(g.rows, 3);
    for (std::size_t r = 0; r < g.rows; ++r) gu.set_vec3(r, skew_vee(g.mat3(r)));
    t.accumulate(u, gu);
  });
}

Var skew_vee(Var M) {
  require_rows(M, 9, "skew_vee");
  Tensor v(M.rows(), 3);
  for (std::size_t r = 0; r < v.rows; ++r) v.set_vec3(r, skew_vee(M.value().mat3(r)));
  return M.tape->push(std::move(v), {M}, [M](Tape& t, const Tensor& g) {
    Tensor gM(g.rows, 9);
    for (std::size_t r = 0; r < g.rows; ++r) gM.set_mat3(r, hat(g.vec3(r)));
    t.accumulate(M, gM);
  });
}

namespace {

// Coefficients of exp(W) = I + a W + b W^2 and (da/dtheta)/theta, (db/dtheta)/theta.
struct ExpCoeffs {
  double a, b, da, db;
};

ExpCoeffs exp_coeffs(double theta) {
  const double t2 = theta * theta;
  ExpCoeffs c{};
  if (theta < 1e-8) {
    c.a = 1.0 - t2 / 6.0;
    c.b = 0.5 - t2 / 24.0;
  } else {
    const double s = std::sin(0.5 * theta);
    c.a = std::sin(theta) / theta;
    c.b = 2.0 * s * s / t2;
  }
  if (theta < 1e-2) {
    const double t4 = t2 * t2;
    c.da = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0;
    c.db = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0;
  } else {
    const double t3 = t2 * theta;
    c.da = (theta * std::cos(theta) - std::sin(theta)) / t3;
    c.db = (theta * std::sin(theta) - 2.0 * (1.0 - std::cos(theta))) / (t3 * theta);
  }
  return c;
}

}  // namespace

Var exp_so3(Var omega) {
  require_rows(omega, 3, "exp_so3");
  Tensor v(omega.rows(), 9);
  for (std::size_t r = 0; r < v.rows; ++r) v.set_mat3(r, exp_so3(omega.value().vec3(r)).matrix());
  return omega.tape->push(std::move(v), {omega}, [omega](Tape& t, const Tensor& g) {
    Tensor gw(g.rows, 3);
    for (std::size_t r = 0; r < g.rows; ++r) {
      const Vec3 w = omega.value().vec3(r);
      const double theta = srnn::norm(w);
      const ExpCoeffs c = exp_coeffs(theta);
      const Mat3 G = g.mat3(r);
      const Mat3 W = hat(w);
      const Mat3 W2 = mul(W, W);
      // <G, W^2> varies as skew_vee(G W^T + W^T G) = -skew_vee(G W + W G).
      const Vec3 dW2 = skew_vee(mul(G, W) + mul(W, G)) * -1.0;
      const Vec3 grad = w * (c.da * inner(G, W) + c.db * inner(G, W2)) + skew_vee(G) * c.a + dW2 * c.b;
      gw.set_vec3(r, grad);
    }
    t.accumulate(omega, gw);
  });
}

// ---- MLP ---------------------------------------------------------------------

Mlp Mlp::make(std::size_t in, std::size_t width, std::size_t depth, std::size_t out, std::mt19937_64& rng) {
  if (in == 0 || width == 0 || out == 0) throw std::invalid_argument("Mlp::make: dimensions must be positive");
  Mlp m;
  std::size_t fan_in = in;
  for (std::size_t l = 0; l <= depth; ++l) {
    const bool last = l == depth;
    const std::size_t fan_out = last ? out : width;
    Tensor W(fan_in, fan_out), b(1, fan_out);
    if (!last) {
      const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (double& x : W.data) x = u(rng);
      for (double& x : b.data) x = u(rng);
    }
    m.W.push_back(std::move(W));
    m.b.push_back(std::move(b));
    fan_in = fan_out;
  }
  return m;
}

std::size_t Mlp::num_params() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < W.size(); ++l) n += W[l].size() + b[l].size();
  return n;
}

std::vector<Tensor*> Mlp::tensors() {
  std::vector<Tensor*> out;
  for (std::size_t l = 0; l < W.size(); ++l) {
    out.push_back(&W[l]);
    out.push_back(&b[l]);
  }
  return out;
}

std::vector<const Tensor*> Mlp::tensors() const {
  std::vector<const Tensor*> out;
  for (std::size_t l = 0; l < W.size(); ++l) {
    out.push_back(&W[l]);
    out.push_back(&b[l]);
  }
  return out;
}

std::vector<Var> MlpVars::all() const {
  std::vector<Var> out;
  for (std::size_t l = 0; l < W.size(); ++l) {
    out.push_back(W[l]);
    out.push_back(b[l]);
  }
  return out;
}

MlpVars bind(Tape& tape, const Mlp& mlp, bool trainable) {
  MlpVars v;
  v.output_scale = mlp.output_scale;
  for (std::size_t l = 0; l < mlp.W.size(); ++l) {
    v.W.push_back(trainable ? tape.leaf(mlp.W[l]) : tape.constant(mlp.W[l]));
    v.b.push_back(trainable ? tape.leaf(mlp.b[l]) : tape.constant(mlp.b[l]));
  }
  return v;
}

Var mlp_forward(const MlpVars& net, Var x) {
  Var h = x;
  const std::size_t L = net.W.size();
  for (std::size_t l = 0; l + 1 < L; ++l) h = silu(add_row_broadcast(matmul(h, net.W[l]), net.b[l]));
  return scale(add_row_broadcast(matmul(h, net.W[L - 1]), net.b[L - 1]), net.output_scale);
}

ScalarWithGrad mlp_value_and_input_grad(const MlpVars& net, Var x) {
  const std::size_t L = net.W.size();
  if (net.W.back().cols() != 1) throw ShapeError("mlp_value_and_input_grad: network must have a scalar head");
  std::vector<Var> pre;
  Var h = x;
  for (std::size_t l = 0; l + 1 < L; ++l) {
    const Var z = add_row_broadcast(matmul(h, net.W[l]), net.b[l]);
    pre.push_back(z);
    h = silu(z);
  }
  const Var value = scale(add_row_broadcast(matmul(h, net.W[L - 1]), net.b[L - 1]), net.output_scale);

  // dV/dh_{L-1} = s * W_L^T for every row.
  Tape& tape = *x.tape;
  const Var ones = tape.constant(Tensor(x.rows(), 1, net.output_scale));
  Var g = matmul_nt(ones, net.W[L - 1]);
  for (std::size_t l = L - 1; l-- > 0;) {
    const Var d = mul(g, silu_prime(pre[l]));
    g = matmul_nt(d, net.W[l]);
  }
  return {value, g};
}

// ---- AdamW ---------------------------------------------------------------------

AdamW::AdamW(AdamWConfig cfg, const std::vector<const Tensor*>& params) : cfg_(cfg) {
  for (const Tensor* p : params) {
    m_.emplace_back(p->rows, p->cols);
    v_.emplace_back(p->rows, p->cols);
  }
}

void AdamW::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw ShapeError("AdamW::step: parameter count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = grads[k];
    if (!p.same_shape(g) || !p.same_shape(m_[k])) throw ShapeError("AdamW::step: shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m_[k].data[i] = cfg_.beta1 * m_[k].data[i] + (1.0 - cfg_.beta1) * g.data[i];
      v_[k].data[i] = cfg_.beta2 * v_[k].data[i] + (1.0 - cfg_.beta2) * g.data[i] * g.data[i];
      const double mhat = m_[k].data[i] / bc1;
      const double vhat = v_[k].data[i] / bc2;
      p.data[i] = p.data[i] * (1.0 - cfg_.lr * cfg_.weight_decay) - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void AdamW::restore(std::uint64_t t, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != v.size()) throw ShapeError("AdamW::restore: moment counts differ");
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---- checkpoint ------------------------------------------------------------

bool operator==(const Checkpoint& a, const Checkpoint& b) {
  return a.params == b.params && a.adam.lr == b.adam.lr && a.adam.beta1 == b.adam.beta1 &&
         a.adam.beta2 == b.adam.beta2 && a.adam.eps == b.adam.eps && a.adam.weight_decay == b.adam.weight_decay &&
         a.adam_step == b.adam_step && a.adam_m == b.adam_m && a.adam_v == b.adam_v && a.config_json == b.config_json;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

constexpr char kMagic[8] = {'S', 'R', 'N', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint64_t>(os, t.rows);
  put<std::uint64_t>(os, t.cols);
  os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

NamedTensor get_tensor(std::istream& is) {
  NamedTensor nt;
  const auto len = get<std::uint32_t>(is);
  if (len > (1u << 16)) throw std::runtime_error("checkpoint: implausible tensor name length");
  nt.name.resize(len);
  if (len && !is.read(nt.name.data(), len)) throw std::runtime_error("checkpoint: truncated file");
  const auto rows = get<std::uint64_t>(is);
  const auto cols = get<std::uint64_t>(is);
  if (rows > (1ull << 28) || cols > (1ull << 28) || rows * cols > (1ull << 28))
    throw std::runtime_error("checkpoint: implausible tensor shape");
  nt.value = Tensor(rows, cols);
  const auto bytes = static_cast<std::streamsize>(nt.value.size() * sizeof(double));
  if (bytes && !is.read(reinterpret_cast<char*>(nt.value.data.data()), bytes))
    throw std::runtime_error("checkpoint: truncated file");
  return nt;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  if (ckpt.adam_m.size() != ckpt.adam_v.size()) throw std::invalid_argument("save_checkpoint: moment counts differ");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, fnv1a64(ckpt.config_json));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& p : ckpt.params) put_tensor(os, p.name, p.value);
  put<double>(os, ckpt.adam.lr);
  put<double>(os, ckpt.adam.beta1);
  put<double>(os, ckpt.adam.beta2);
  put<double>(os, ckpt.adam.eps);
  put<double>(os, ckpt.adam.weight_decay);
  put<std::uint64_t>(os, ckpt.adam_step);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.adam_m.size()));
  for (const auto& m : ckpt.adam_m) put_tensor(os, "m", m);
  for (const auto& v : ckpt.adam_v) put_tensor(os, "v", v);
  put<std::uint64_t>(os, ckpt.config_json.size());
  os.write(ckpt.config_json.data(), static_cast<std::streamsize>(ckpt.config_json.size()));
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  if (!is.read(magic, sizeof magic) || !std::equal(magic, magic + 8, kMagic))
    throw std::runtime_error("load_checkpoint: not a checkpoint file: " + path);
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion) throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
  const auto hash = get<std::uint64_t>(is);
  Checkpoint c;
  const auto np = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < np; ++i) c.params.push_back(get_tensor(is));
  c.adam.lr = get<double>(is);
  c.adam.beta1 = get<double>(is);
  c.adam.beta2 = get<double>(is);
  c.adam.eps = get<double>(is);
  c.adam.weight_decay = get<double>(is);
  c.adam_step = get<std::uint64_t>(is);
  const auto nm = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nm; ++i) c.adam_m.push_back(get_tensor(is).value);
  for (std::uint32_t i = 0; i < nm; ++i) c.adam_v.push_back(get_tensor(is).value);
  const auto jl = get<std::uint64_t>(is);
  if (jl > (1ull << 30)) throw std::runtime_error("load_checkpoint: implausible config length");
  c.config_json.resize(jl);
  if (jl && !is.read(c.config_json.data(), static_cast<std::streamsize>(jl)))
    throw std::runtime_error("load_checkpoint: truncated file");
  if (fnv1a64(c.config_json) != hash) throw std::runtime_error("load_checkpoint: config hash mismatch");
  return c;
}

}  // namespace srnn
