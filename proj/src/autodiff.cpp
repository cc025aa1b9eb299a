#include "cam/autodiff.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace cam {

// ---------------------------------------------------------------------------
// ParameterSet

Parameter& ParameterSet::add(const std::string& name, Index rows, Index cols) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  return params_.emplace_back(name, rows, cols);
}

Parameter& ParameterSet::get(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown parameter '" + name + "'");
}

const Parameter& ParameterSet::get(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown parameter '" + name + "'");
}

bool ParameterSet::contains(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return true;
  }
  return false;
}

std::vector<Parameter*> ParameterSet::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ParameterSet::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

// ---------------------------------------------------------------------------
// Tape

const Matrix& Var::value() const { return tape_->value_of(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) {
    throw ShapeError("scalar: expected 1x1, got " + shape_string(v));
  }
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.own = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::input(Matrix value) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(const Parameter& p) {
  Node n;
  n.ref = &p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward fn) {
  Node n;
  n.own = std::move(value);
  if (grad_enabled_) {
    for (const Var& v : inputs) {
      if (nodes_[v.id()].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

const Matrix& Tape::value_of(int id) const {
  const Node& n = nodes_[id];
  return n.ref ? *n.ref : n.own;
}

bool Tape::requires_grad(const Var& v) const {
  return nodes_[v.id()].requires_grad;
}

Matrix& Tape::grad_buffer(const Var& v) {
  Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) {
    const Matrix& val = value_of(v.id());
    n.grad = Matrix::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

const Matrix& Tape::grad(const Var& v) const {
  static const Matrix empty;
  const Node& n = nodes_[v.id()];
  return n.grad.size() ? n.grad : empty;
}

void Tape::backward(const Var& loss) {
  if (loss.tape_ != this) throw Error("backward: variable from another tape");
  const Matrix& lv = value_of(loss.id());
  if (lv.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_string(lv));
  }
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss).setConstant(1.0);
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(n.grad);
    if (n.param) n.param->grad += n.grad;
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace ops {
namespace {

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": shape mismatch " + detail);
}

std::string both(const Var& a, const Var& b) {
  return shape_string(a.value()) + " vs " + shape_string(b.value());
}

template <typename Expr>
void acc(const Var& v, const Expr& e) {
  Tape& t = v.tape();
  if (t.requires_grad(v)) t.grad_buffer(v) += e;
}

void same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": mixed tapes");
}

void require_scalar(const Var& s, const char* op) {
  if (s.value().size() != 1) {
    shape_fail(op, "expected 1x1 scalar, got " + shape_string(s.value()));
  }
}

void require_row(const Var& a, const Var& row, const char* op) {
  if (row.rows() != 1 || row.cols() != a.cols()) shape_fail(op, both(a, row));
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) shape_fail("matmul", both(a, b));
  Matrix out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](const Matrix& g) {
    acc(a, g * b.value().transpose());
    acc(b, a.value().transpose() * g);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  same_tape(a, b, "matmul_nt");
  if (a.cols() != b.cols()) shape_fail("matmul_nt", both(a, b));
  Matrix out = a.value() * b.value().transpose();
  return a.tape().record(std::move(out), {a, b}, [a, b](const Matrix& g) {
    acc(a, g * b.value());
    acc(b, g.transpose() * a.value());
  });
}

Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return a.tape().record(std::move(out), {a},
                         [a](const Matrix& g) { acc(a, g.transpose()); });
}

Var add(const Var& a, const Var& b) {
  same_tape(a, b, "add");
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("add", both(a, b));
  Matrix out = a.value() + b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](const Matrix& g) {
    acc(a, g);
    acc(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  same_tape(a, b, "sub");
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("sub", both(a, b));
  Matrix out = a.value() - b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](const Matrix& g) {
    acc(a, g);
    acc(b, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  same_tape(a, b, "mul");
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("mul", both(a, b));
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](const Matrix& g) {
    acc(a, g.cwiseProduct(b.value()));
    acc(b, g.cwiseProduct(a.value()));
  });
}

Var add_row(const Var& a, const Var& row) {
  same_tape(a, row, "add_row");
  require_row(a, row, "add_row");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape().record(std::move(out), {a, row}, [a, row](const Matrix& g) {
    acc(a, g);
    acc(row, g.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  same_tape(a, row, "mul_row");
  require_row(a, row, "mul_row");
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape().record(std::move(out), {a, row}, [a, row](const Matrix& g) {
    acc(a, (g.array().rowwise() * row.value().row(0).array()).matrix());
    acc(row, g.cwiseProduct(a.value()).colwise().sum());
  });
}

Var broadcast_rows(const Var& row, Index rows) {
  if (row.rows() != 1) {
    shape_fail("broadcast_rows", "expected 1xC, got " + shape_string(row.value()));
  }
  Matrix out = row.value().replicate(rows, 1);
  return row.tape().record(std::move(out), {row}, [row](const Matrix& g) {
    acc(row, g.colwise().sum());
  });
}

Var scale(const Var& a, double c) {
  Matrix out = a.value() * c;
  return a.tape().record(std::move(out), {a},
                         [a, c](const Matrix& g) { acc(a, g * c); });
}

Var add_scalar(const Var& a, double c) {
  Matrix out = a.value().array() + c;
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g) { acc(a, g); });
}

Var mul_scalar(const Var& a, const Var& s) {
  same_tape(a, s, "mul_scalar");
  require_scalar(s, "mul_scalar");
  const double sv = s.value()(0, 0);
  Matrix out = a.value() * sv;
  return a.tape().record(std::move(out), {a, s}, [a, s](const Matrix& g) {
    const double sv = s.value()(0, 0);
    acc(a, g * sv);
    acc(s, Matrix::Constant(1, 1, g.cwiseProduct(a.value()).sum()));
  });
}

Var div_scalar(const Var& a, const Var& s) {
  same_tape(a, s, "div_scalar");
  require_scalar(s, "div_scalar");
  const double sv = s.value()(0, 0);
  Matrix out = a.value() / sv;
  return a.tape().record(std::move(out), {a, s}, [a, s](const Matrix& g) {
    const double sv = s.value()(0, 0);
    acc(a, g / sv);
    acc(s, Matrix::Constant(1, 1, -g.cwiseProduct(a.value()).sum() / (sv * sv)));
  });
}

Var add_const(const Var& a, const Matrix& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) {
    shape_fail("add_const", shape_string(a.value()) + " vs " + shape_string(c));
  }
  Matrix out = a.value() + c;
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g) { acc(a, g); });
}

Var mul_const(const Var& a, const Matrix& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) {
    shape_fail("mul_const", shape_string(a.value()) + " vs " + shape_string(c));
  }
  Matrix out = a.value().cwiseProduct(c);
  return a.tape().record(std::move(out), {a},
                         [a, c](const Matrix& g) { acc(a, g.cwiseProduct(c)); });
}

Var sum(const Var& a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g) {
    acc(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) shape_fail("mean", "empty input");
  Matrix out = Matrix::Constant(1, 1, a.value().sum() / n);
  return a.tape().record(std::move(out), {a}, [a, n](const Matrix& g) {
    acc(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0) / n));
  });
}

Var sum_rows(const Var& a) {
  Matrix out = a.value().colwise().sum();
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g) {
    acc(a, g.replicate(a.rows(), 1));
  });
}

Var mean_rows(const Var& a) {
  const double n = static_cast<double>(a.rows());
  if (n == 0) shape_fail("mean_rows", "empty input");
  Matrix out = a.value().colwise().sum() / n;
  return a.tape().record(std::move(out), {a}, [a, n](const Matrix& g) {
    acc(a, g.replicate(a.rows(), 1) / n);
  });
}

namespace {

Matrix softmax_value(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Matrix log_softmax_value(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

}  // namespace

Var softmax_rows(const Var& a) {
  Matrix out = softmax_value(a.value());
  return a.tape().record(std::move(out), {a}, [a, id = a.tape().size()](const Matrix& g) {
    const Matrix& y = a.tape().value_of(static_cast<int>(id));
    Vector dots = g.cwiseProduct(y).rowwise().sum();
    acc(a, (y.array() * (g.colwise() - dots).array()).matrix());
  });
}

Var log_softmax_rows(const Var& a) {
  Matrix out = log_softmax_value(a.value());
  return a.tape().record(std::move(out), {a}, [a, id = a.tape().size()](const Matrix& g) {
    const Matrix p = a.tape().value_of(static_cast<int>(id)).array().exp();
    Vector sums = g.rowwise().sum();
    acc(a, g - (p.array().colwise() * sums.array()).matrix());
  });
}

Var layer_norm_rows(const Var& x, double eps) {
  const Matrix& xv = x.value();
  const Index n = xv.rows();
  const Index d = xv.cols();
  if (d == 0) shape_fail("layer_norm", "zero-width input");
  Matrix out(n, d);
  Vector inv_std(n);
  for (Index r = 0; r < n; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    out.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  return x.tape().record(
      std::move(out), {x}, [x, inv_std, id = x.tape().size()](const Matrix& g) {
        const Matrix& xhat = x.tape().value_of(static_cast<int>(id));
        const double d = static_cast<double>(g.cols());
        Matrix dx(g.rows(), g.cols());
        for (Index r = 0; r < g.rows(); ++r) {
          const double gm = g.row(r).sum() / d;
          const double gx = g.row(r).dot(xhat.row(r)) / d;
          dx.row(r) = inv_std(r) * (g.row(r).array() - gm - xhat.row(r).array() * gx);
        }
        acc(x, dx);
      });
}

Var embedding(const Var& table, std::span<const int> ids) {
  const Matrix& t = table.value();
  Matrix out(static_cast<Index>(ids.size()), t.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || ids[k] >= t.rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[k]) +
                       " out of range for table " + shape_string(t));
    }
    out.row(static_cast<Index>(k)) = t.row(ids[k]);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {table}, [table, idv](const Matrix& g) {
    Tape& tp = table.tape();
    if (!tp.requires_grad(table)) return;
    Matrix& buf = tp.grad_buffer(table);
    for (std::size_t k = 0; k < idv.size(); ++k) {
      buf.row(idv[k]) += g.row(static_cast<Index>(k));
    }
  });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh();
  return a.tape().record(std::move(out), {a}, [a, id = a.tape().size()](const Matrix& g) {
    const Matrix& y = a.tape().value_of(static_cast<int>(id));
    acc(a, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var sigmoid(const Var& a) {
  Matrix out = (1.0 + (-a.value().array()).exp()).inverse();
  return a.tape().record(std::move(out), {a}, [a, id = a.tape().size()](const Matrix& g) {
    const Matrix& y = a.tape().value_of(static_cast<int>(id));
    acc(a, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g) {
    acc(a, (g.array() * (a.value().array() > 0.0).cast<double>()).matrix());
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluK = 0.044715;

Var gelu(const Var& a) {
  const auto x = a.value().array();
  Matrix out = (0.5 * x * (1.0 + (kGeluC * (x + kGeluK * x.cube())).tanh())).matrix();
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g) {
    const auto x = a.value().array();
    const Matrix t = (kGeluC * (x + kGeluK * x.cube())).tanh().matrix();
    const Matrix dt = (kGeluC * (1.0 + 3.0 * kGeluK * x.square())).matrix();
    const Matrix d = (0.5 * (1.0 + t.array()) +
                      0.5 * x * (1.0 - t.array().square()) * dt.array()).matrix();
    acc(a, g.cwiseProduct(d));
  });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp();
  return a.tape().record(std::move(out), {a}, [a, id = a.tape().size()](const Matrix& g) {
    acc(a, g.cwiseProduct(a.tape().value_of(static_cast<int>(id))));
  });
}

Var log(const Var& a) {
  Matrix out = a.value().array().log();
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g) {
    acc(a, g.cwiseQuotient(a.value()));
  });
}

Var square(const Var& a) {
  Matrix out = a.value().array().square();
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g) {
    acc(a, 2.0 * g.cwiseProduct(a.value()));
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    shape_fail("slice_cols", shape_string(a.value()) + " [" + std::to_string(start) +
                                 ", +" + std::to_string(count) + ")");
  }
  Matrix out = a.value().middleCols(start, count);
  return a.tape().record(std::move(out), {a}, [a, start, count](const Matrix& g) {
    Tape& tp = a.tape();
    if (tp.requires_grad(a)) tp.grad_buffer(a).middleCols(start, count) += g;
  });
}

Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    shape_fail("slice_rows", shape_string(a.value()) + " [" + std::to_string(start) +
                                 ", +" + std::to_string(count) + ")");
  }
  Matrix out = a.value().middleRows(start, count);
  return a.tape().record(std::move(out), {a}, [a, start, count](const Matrix& g) {
    Tape& tp = a.tape();
    if (tp.requires_grad(a)) tp.grad_buffer(a).middleRows(start, count) += g;
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) shape_fail("concat_cols", "no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_fail("concat_cols", both(parts[0], p));
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> pv(parts.begin(), parts.end());
  Tape& tp = parts[0].tape();
  return tp.record(std::move(out), std::span<const Var>(pv), [pv](const Matrix& g) {
    Index at = 0;
    for (const Var& p : pv) {
      Tape& t = p.tape();
      if (t.requires_grad(p)) t.grad_buffer(p) += g.middleCols(at, p.cols());
      at += p.cols();
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) shape_fail("concat_rows", "no inputs");
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) shape_fail("concat_rows", both(parts[0], p));
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> pv(parts.begin(), parts.end());
  Tape& tp = parts[0].tape();
  return tp.record(std::move(out), std::span<const Var>(pv), [pv](const Matrix& g) {
    Index at = 0;
    for (const Var& p : pv) {
      Tape& t = p.tape();
      if (t.requires_grad(p)) t.grad_buffer(p) += g.middleRows(at, p.rows());
      at += p.rows();
    }
  });
}

namespace {

Var cross_entropy_impl(const Var& logits, std::span<const int> targets,
                       bool average, const char* op) {
  const Matrix& z = logits.value();
  if (static_cast<Index>(targets.size()) != z.rows()) {
    shape_fail(op, shape_string(z) + " vs " + std::to_string(targets.size()) +
                       " targets");
  }
  for (int t : targets) {
    if (t < 0 || t >= z.cols()) {
      throw DataError(std::string(op) + ": target id " + std::to_string(t) +
                      " out of range for " + std::to_string(z.cols()) + " classes");
    }
  }
  const Matrix logp = log_softmax_value(z);
  double total = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    total -= logp(static_cast<Index>(r), targets[r]);
  }
  const double denom = average ? static_cast<double>(targets.size()) : 1.0;
  std::vector<int> tv(targets.begin(), targets.end());
  return logits.tape().record(
      Matrix::Constant(1, 1, total / denom), {logits},
      [logits, tv, logp, denom](const Matrix& g) {
        Matrix d = logp.array().exp();
        for (std::size_t r = 0; r < tv.size(); ++r) d(static_cast<Index>(r), tv[r]) -= 1.0;
        acc(logits, d * (g(0, 0) / denom));
      });
}

}  // namespace

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  if (targets.empty()) shape_fail("cross_entropy", "no targets");
  return cross_entropy_impl(logits, targets, true, "cross_entropy");
}

Var cross_entropy_sum(const Var& logits, std::span<const int> targets) {
  return cross_entropy_impl(logits, targets, false, "cross_entropy_sum");
}

Var bce_with_logits(const Var& logits, const Matrix& targets) {
  const Matrix& z = logits.value();
  if (z.rows() != targets.rows() || z.cols() != targets.cols()) {
    shape_fail("bce_with_logits", shape_string(z) + " vs " + shape_string(targets));
  }
  const double n = static_cast<double>(z.size());
  const auto za = z.array();
  const double loss =
      (za.max(0.0) - za * targets.array() + (1.0 + (-za.abs()).exp()).log()).sum() / n;
  return logits.tape().record(
      Matrix::Constant(1, 1, loss), {logits}, [logits, targets, n](const Matrix& g) {
        const Matrix s = (1.0 + (-logits.value().array()).exp()).inverse();
        acc(logits, (s - targets) * (g(0, 0) / n));
      });
}

Var mse(const Var& pred, const Matrix& target) {
  const Matrix& p = pred.value();
  if (p.rows() != target.rows() || p.cols() != target.cols()) {
    shape_fail("mse", shape_string(p) + " vs " + shape_string(target));
  }
  const double n = static_cast<double>(p.size());
  const double loss = (p - target).squaredNorm() / n;
  return pred.tape().record(Matrix::Constant(1, 1, loss), {pred},
                            [pred, target, n](const Matrix& g) {
                              acc(pred, (pred.value() - target) * (2.0 * g(0, 0) / n));
                            });
}

Var affine(const Var& x, const Var& w, const Var& b) {
  return add_row(matmul(x, w), b);
}

}  // namespace ops

Var gru_cell(Tape& tape, const Var& x, const Var& h, const GruWeights& w) {
  using namespace ops;
  const Index hd = h.cols();
  if (w.input->value.cols() != 3 * hd || w.recurrent->value.rows() != hd) {
    throw ShapeError("gru_cell: shape mismatch hidden " + shape_string(h.value()) +
                     " vs recurrent " + shape_string(w.recurrent->value));
  }
  Var gx = affine(x, tape.param(*w.input), tape.param(*w.bias_input));
  Var gh = affine(h, tape.param(*w.recurrent), tape.param(*w.bias_recurrent));
  Var r = sigmoid(add(slice_cols(gx, 0, hd), slice_cols(gh, 0, hd)));
  Var u = sigmoid(add(slice_cols(gx, hd, hd), slice_cols(gh, hd, hd)));
  Var n = tanh(add(slice_cols(gx, 2 * hd, hd), mul(r, slice_cols(gh, 2 * hd, hd))));
  // (1 - u) * n + u * h == n + u * (h - n)
  return add(n, mul(u, sub(h, n)));
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  first_.reserve(params_.size());
  second_.reserve(params_.size());
  for (const Parameter* p : params_) {
    first_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    second_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  for (const Parameter* p : params_) {
    if (!p->grad.allFinite()) {
      throw NumericError("adam: non-finite gradient in parameter '" + p->name + "'");
    }
  }
  ++step_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    first_[i] = b1 * first_[i] + (1.0 - b1) * p.grad;
    second_[i] = b2 * second_[i] + (1.0 - b2) * p.grad.cwiseAbs2();
    p.value.array() -= config_.learning_rate * (first_[i].array() / c1) /
                       ((second_[i].array() / c2).sqrt() + config_.epsilon);
    p.grad.setZero();
  }
}

void xavier_uniform(Parameter& p, Rng& rng) {
  const double fan = static_cast<double>(p.value.rows() + p.value.cols());
  const double a = std::sqrt(6.0 / fan);
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = rng.uniform(-a, a);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'C', 'A', 'M', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_bytes(std::ostream& os, std::uint64_t v, int n) {
  char buf[8];
  for (int i = 0; i < n; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, n);
}

std::uint64_t get_bytes(std::istream& is, int n, const std::string& path) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), n);
  if (!is) throw DataError("checkpoint " + path + ": truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void save_tensors(const std::filesystem::path& path,
                  const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  put_bytes(os, kVersion, 4);
  put_bytes(os, tensors.size(), 8);
  for (const NamedTensor& t : tensors) {
    put_bytes(os, t.name.size(), 4);
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_bytes(os, t.shape.size(), 4);
    std::uint64_t count = 1;
    for (std::uint64_t d : t.shape) {
      put_bytes(os, d, 8);
      count *= d;
    }
    if (count != static_cast<std::uint64_t>(t.value.size())) {
      throw ShapeError("checkpoint: shape of '" + t.name + "' does not match payload");
    }
    for (Index i = 0; i < t.value.size(); ++i) {
      put_bytes(os, std::bit_cast<std::uint64_t>(t.value.data()[i]), 8);
    }
  }
  if (!os) throw DataError("write failed: " + path.string());
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + p);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("checkpoint " + p + ": bad magic");
  }
  const auto version = get_bytes(is, 4, p);
  if (version != kVersion) {
    throw DataError("checkpoint " + p + ": unsupported version " + std::to_string(version));
  }
  const auto count = get_bytes(is, 8, p);
  std::vector<NamedTensor> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedTensor t;
    const auto len = get_bytes(is, 4, p);
    t.name.resize(len);
    is.read(t.name.data(), static_cast<std::streamsize>(len));
    const auto rank = get_bytes(is, 4, p);
    if (rank > 2) {
      throw DataError("checkpoint " + p + ": rank " + std::to_string(rank) +
                      " tensors are not supported");
    }
    std::uint64_t n = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      t.shape.push_back(get_bytes(is, 8, p));
      n *= t.shape.back();
    }
    const Index rows = rank == 2 ? static_cast<Index>(t.shape[0]) : 1;
    const Index cols = rank == 2   ? static_cast<Index>(t.shape[1])
                       : rank == 1 ? static_cast<Index>(t.shape[0])
                                   : 1;
    t.value.resize(rows, cols);
    for (std::uint64_t i = 0; i < n; ++i) {
      t.value.data()[i] = std::bit_cast<double>(get_bytes(is, 8, p));
    }
    out.push_back(std::move(t));
  }
  return out;
}

void save_parameters(const std::filesystem::path& path, const ParameterSet& params) {
  std::vector<NamedTensor> tensors;
  for (const Parameter* p : params.all()) {
    tensors.push_back({p->name,
                       {static_cast<std::uint64_t>(p->value.rows()),
                        static_cast<std::uint64_t>(p->value.cols())},
                       p->value});
  }
  save_tensors(path, tensors);
}

void load_parameters(const std::filesystem::path& path, ParameterSet& params) {
  std::map<std::string, NamedTensor> by_name;
  for (auto& t : load_tensors(path)) by_name.emplace(t.name, std::move(t));
  for (Parameter* p : params.all()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      throw DataError("checkpoint " + path.string() + ": missing parameter '" + p->name + "'");
    }
    const Matrix& v = it->second.value;
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols()) {
      throw ShapeError("checkpoint " + path.string() + ": parameter '" + p->name + "' is " +
                       shape_string(v) + ", model expects " + shape_string(p->value));
    }
    p->value = v;
    p->grad.setZero();
  }
}

}  // namespace cam
