#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "srnn/geometry.hpp"

namespace srnn {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major 2-D array. Batched quantities are [batch, features]; a
/// Vec3 per sample is [B, 3] and a Mat3 per sample is [B, 9].
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }

  Vec3 vec3(std::size_t r) const;
  void set_vec3(std::size_t r, const Vec3& v);
  Mat3 mat3(std::size_t r) const;
  void set_mat3(std::size_t r, const Mat3& m);

  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
};

/// Reverse-mode tape. Nodes are kept in creation order, which is a
/// topological order; backward() walks them in reverse. With recording off
/// the same primitives run but no backward rules are stored.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  /// Differentiable input (parameters, or inputs under a gradient check).
  Var leaf(Tensor value);
  /// Input that never receives a gradient.
  Var constant(Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Accumulated gradient; zeros of the value's shape if nothing reached it.
  Tensor grad(Var v) const;
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  /// Reverse sweep from a [1,1] node. Throws ShapeError for non-scalar loss.
  void backward(Var loss);
  void zero_grad();

  /// Used by primitives: create a node whose backward rule is kept only if
  /// recording and some input needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, Backward rule);
  Var push(Tensor value, std::span<const Var> inputs, Backward rule);
  void accumulate(Var v, const Tensor& g);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  bool recording_;
};

// ---- primitives ---------------------------------------------------------
// All binary elementwise ops require identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var neg(Var a);
Var mul(Var a, Var b);
Var scale(Var a, double c);
/// Column j multiplied by c[j].
Var scale_cols(Var a, const std::vector<double>& c);
/// a[B,k] times s[B,1], row by row.
Var mul_rows(Var a, Var s);
/// a[B,n] + bias[1,n].
Var add_row_broadcast(Var a, Var bias);
/// a[B,K] * w[K,N]
Var matmul(Var a, Var w);
/// a[B,N] * w[K,N]^T
Var matmul_nt(Var a, Var w);
Var silu(Var x);
/// d silu / dx, itself differentiable (its VJP uses silu'').
Var silu_prime(Var x);
Var sum(Var a);       // -> [1,1]
Var row_sum(Var a);   // -> [B,1]
Var mean(Var a);      // -> [1,1]
Var square(Var a);
Var sqrt(Var a);
Var reciprocal(Var a);
/// 1 / (x * sqrt(x)), i.e. r^-3 from r^2.
Var inv_r3(Var r2);
/// Row-wise Euclidean norm, [B,k] -> [B,1].
Var norm(Var a);
/// Row-wise cross product of [B,3] tensors.
Var cross(Var a, Var b);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, std::size_t start, std::size_t count);
// Row-wise 3x3 algebra on [B,9] (row-major) and [B,3] tensors, computed with
// the same geometry routines as the plain code so values agree bitwise.
Var mat3_mul(Var A, Var B);    // A B
Var mat3_tmul(Var A, Var B);   // A^T B
Var mat3_vec(Var A, Var v);    // A v
Var mat3_tvec(Var A, Var v);   // A^T v
Var hat(Var u);
Var skew_vee(Var M);
Var exp_so3(Var omega);

// ---- MLP ----------------------------------------------------------------

/// Fully connected network with SiLU hidden activations and a linear head
/// multiplied by output_scale. Weights are [in, out], biases [1, out].
struct Mlp {
  std::vector<Tensor> W;
  std::vector<Tensor> b;
  double output_scale = 1.0;

  /// Hidden layers uniform(+-sqrt(1/fan_in)); output layer all zeros.
  static Mlp make(std::size_t in, std::size_t width, std::size_t depth, std::size_t out, std::mt19937_64& rng);

  std::size_t in_dim() const { return W.front().rows; }
  std::size_t out_dim() const { return W.back().cols; }
  std::size_t num_params() const;
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
};

struct MlpVars {
  std::vector<Var> W;
  std::vector<Var> b;
  double output_scale = 1.0;

  std::vector<Var> all() const;
};

/// Puts the weights on the tape, as leaves if `trainable`, else constants.
MlpVars bind(Tape& tape, const Mlp& mlp, bool trainable);

Var mlp_forward(const MlpVars& net, Var x);

struct ScalarWithGrad {
  Var value;       // [B,1]
  Var input_grad;  // [B,in]: d value / d x, built from differentiable ops
};

/// Scalar-head network and its input gradient, both on the tape so that the
/// gradient can itself be differentiated with respect to the weights.
ScalarWithGrad mlp_value_and_input_grad(const MlpVars& net, Var x);

// ---- optimizer ------------------------------------------------------------

struct AdamWConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Decoupled weight decay: theta <- theta (1 - lr wd) - lr mhat / (sqrt(vhat) + eps).
class AdamW {
 public:
  AdamW() = default;
  AdamW(AdamWConfig cfg, const std::vector<const Tensor*>& params);

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(std::uint64_t t, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

// ---- checkpoint -----------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Binary container, little-endian:
///   "SRNNCKPT" (8 bytes), u32 version (=1), u64 FNV-1a hash of config_json,
///   u32 n_params, n_params x tensor,
///   AdamW: f64 lr, beta1, beta2, eps, weight_decay, u64 step,
///          u32 n_moments, n_moments x tensor (first), n_moments x tensor (second),
///   u64 json length, json bytes.
/// tensor := u32 name length, name bytes, u64 rows, u64 cols, rows*cols f64.
struct Checkpoint {
  std::vector<NamedTensor> params;
  AdamWConfig adam;
  std::uint64_t adam_step = 0;
  std::vector<Tensor> adam_m;
  std::vector<Tensor> adam_v;
  std::string config_json;

  friend bool operator==(const Checkpoint&, const Checkpoint&);
};

std::uint64_t fnv1a64(std::string_view bytes);
/// Throws std::runtime_error on I/O failure or a malformed file.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace srnn
