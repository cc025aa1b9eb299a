#pragma once

#include "cam/core.hpp"

#include <deque>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace cam {

// A trainable matrix. `grad` is an accumulation buffer that only
// grad-enabled tapes write to; inference tapes never touch it, which is what
// makes concurrent generation over a shared model safe.
struct Parameter {
  std::string name;
  Matrix value;
  mutable Matrix grad;

  Parameter(std::string n, Index rows, Index cols)
      : name(std::move(n)),
        value(Matrix::Zero(rows, cols)),
        grad(Matrix::Zero(rows, cols)) {}
};

// Owns parameters with stable addresses, in creation order.
// Not copyable: layers hold pointers to its parameters. Moves keep element
// addresses (std::deque move), so owners may be returned by value.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  Parameter& add(const std::string& name, Index rows, Index cols);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  void zero_grad();

 private:
  std::deque<Parameter> params_;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
// sweep over the node list is a valid topological order.
class Tape {
 public:
  using Backward = std::function<void(const Matrix& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Differentiable leaf whose gradient is read back with grad().
  Var input(Matrix value);
  Var param(const Parameter& p);

  void backward(const Var& loss);
  const Matrix& grad(const Var& v) const;

  bool grad_enabled() const { return grad_enabled_; }
  bool requires_grad(const Var& v) const;
  std::size_t size() const { return nodes_.size(); }

  // Op construction API.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward fn);
  Var record(Matrix value, std::span<const Var> inputs, Backward fn);
  const Matrix& value_of(int id) const;
  // Gradient buffer of `v`, zero-allocated on first use.
  Matrix& grad_buffer(const Var& v);

 private:
  struct Node {
    Matrix own;
    const Matrix* ref = nullptr;
    const Parameter* param = nullptr;
    bool requires_grad = false;
    Matrix grad;
    Backward backward;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

// Tape operations. All shape errors raise ShapeError naming the op.
namespace ops {

Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);  // broadcast 1xC over rows
Var mul_row(const Var& a, const Var& row);
Var broadcast_rows(const Var& row, Index rows);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, const Var& s);  // s is 1x1
Var div_scalar(const Var& a, const Var& s);
Var add_const(const Var& a, const Matrix& c);
Var mul_const(const Var& a, const Matrix& c);
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);  // column sums, 1xC
Var mean_rows(const Var& a);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
// Row-wise (x - mean) / sqrt(var + eps), no affine part.
Var layer_norm_rows(const Var& x, double eps = 1e-5);
Var embedding(const Var& table, std::span<const int> ids);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var slice_cols(const Var& a, Index start, Index count);
Var slice_rows(const Var& a, Index start, Index count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
// Mean negative log-likelihood of integer targets under softmax(logits).
Var cross_entropy(const Var& logits, std::span<const int> targets);
// Sum (not mean) of per-row NLLs.
Var cross_entropy_sum(const Var& logits, std::span<const int> targets);
Var bce_with_logits(const Var& logits, const Matrix& targets);  // mean
Var mse(const Var& pred, const Matrix& target);                  // mean
Var affine(const Var& x, const Var& w, const Var& b);

}  // namespace ops

struct GruWeights {
  const Parameter* input;      // in x 3h  (reset | update | candidate)
  const Parameter* recurrent;  // h x 3h
  const Parameter* bias_input;      // 1 x 3h
  const Parameter* bias_recurrent;  // 1 x 3h
};

// Standard GRU: r = s(x Wr + h Ur + b), u = s(x Wu + h Uu + b),
// n = tanh(x Wn + b + r * (h Un + b)), h' = (1 - u) * n + u * h.
Var gru_cell(Tape& tape, const Var& x, const Var& h, const GruWeights& w);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config = {});

  // Bias-corrected update of every parameter, then zeroes the gradients.
  // A non-finite gradient aborts before any parameter is modified.
  void step();
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  double learning_rate() const { return config_.learning_rate; }
  long steps() const { return step_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> first_;
  std::vector<Matrix> second_;
  AdamConfig config_;
  long step_ = 0;
};

void xavier_uniform(Parameter& p, Rng& rng);

// Flat binary checkpoint: "CAMP" magic, u32 version, u64 count, then per
// parameter u32 name length, name bytes, u32 rank, u64 dims, f64 payload.
// All integers and floats little-endian.
struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  Matrix value;
};

void save_tensors(const std::filesystem::path& path,
                  const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);
void save_parameters(const std::filesystem::path& path,
                     const ParameterSet& params);
// Every parameter in `params` must be present with a matching shape.
void load_parameters(const std::filesystem::path& path, ParameterSet& params);

}  // namespace cam
