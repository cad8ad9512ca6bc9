#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "rallycast/tensor.hpp"

namespace rallycast::tensor {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
// lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records a forward computation in topological order and replays it in
// reverse to accumulate gradients. One backward pass per recording.
class Tape {
 public:
  // Receives the node's forward value and the gradient of the loss w.r.t. it.
  using BackwardFn =
      std::function<void(Tape&, const Tensor& out, std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input (parameters, probe points).
  Var leaf(Tensor value);
  // Non-differentiable input.
  Var constant(Tensor value);

  // Appends an operation result. The node requires a gradient iff any input
  // does. Non-finite outputs are rejected unless explicitly allowed.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs,
             BackwardFn backward, bool allow_infinite = false);
  Var record(const char* op, Tensor value, std::span<const Var> inputs,
             BackwardFn backward, bool allow_infinite = false);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  // Gradient accumulator for an input during backward; empty span when the
  // input does not require a gradient.
  std::span<double> grad_sink(const Var& v);

  // Reverse-mode sweep from a scalar loss.
  void backward(const Var& loss);

  // Gradient of the last backward pass; zeros for nodes not on a path to the
  // loss.
  Tensor grad(const Var& v) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Node node);
  void check_recording() const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Constant sparse matrix used for message passing over fixed graphs.
struct SparseMatrix {
  struct Entry {
    std::size_t row;
    std::size_t col;
    double weight;
  };
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Entry> entries;
};

// ---- linear algebra --------------------------------------------------------
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
// S * z with S constant.
Var spmm(const SparseMatrix& s, const Var& z);
Var reshape(const Var& a, Shape shape);

// ---- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
// s is 1x1; result is s * a.
Var scalar_mul(const Var& s, const Var& a);
// Adds a 1 x n row to every row of a.
Var add_row(const Var& a, const Var& row);
// Multiplies by a constant mask (dropout).
Var mul_constant(const Var& a, const Tensor& mask);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);

// ---- structure -------------------------------------------------------------
// Concatenates along the last axis; all other extents must agree.
Var concat(std::span<const Var> parts);
Var concat(const Var& a, const Var& b);
// Stacks 1 x n rows (or r_i x n blocks) vertically.
Var stack_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var row(const Var& a, std::size_t r);
// Repeats a 1 x n row `count` times.
Var repeat_row(const Var& a, std::size_t count);
// Columns `indices` of w as rows: out[r] = w[:, indices[r]].
Var gather_cols(const Var& w, std::span<const std::size_t> indices);
Var pick(const Var& a, std::size_t r, std::size_t c);
Var sum(const Var& a);

// ---- normalisation ---------------------------------------------------------
// Softmax along `axis` (0 = down columns, 1 = along rows) of a matrix.
Var softmax(const Var& a, std::size_t axis = 1);
// Row-wise log-softmax. Masked columns (mask[c] == true) are excluded from
// the normaliser and yield -inf.
Var log_softmax(const Var& a, std::span<const bool> mask = {});

// ---- sequence --------------------------------------------------------------
// Same-length 1D convolution over time. sequence: t x c_in (rows are time
// steps), weight: {K, c_out, c_in}, bias: 1 x c_out. Zero padding of
// (K-1)/2 on both ends.
Var conv1d_same(const Var& sequence, const Var& weight, const Var& bias);
void check_conv_config(std::size_t kernel_size, std::size_t length);

struct LstmWeights {
  Var w_ih;  // 4d x d_in, gate order input, forget, candidate, output
  Var w_hh;  // 4d x d
  Var bias;  // 1 x 4d
};
struct LstmState {
  Var h;
  Var c;
};
// One LSTM cell step on 1 x d rows.
LstmState lstm_step(const LstmState& state, const Var& x, const LstmWeights& w);
// Unrolls over the rows of `inputs` from zero states; returns t x d hidden
// states.
Var lstm_sequence(const Var& inputs, const LstmWeights& w);

// ---- losses ----------------------------------------------------------------
inline constexpr double kMinLogSigma = -6.907755278982137;  // log(1e-3)
inline constexpr double kMaxLogSigma = 6.907755278982137;   // log(1e3)
inline constexpr double kRhoScale = 0.999;

// Negative log-likelihood of (x, y) under the bivariate Gaussian whose raw
// head output is raw = [mu_x, mu_y, s_x, s_y, r] (1 x 5) with
// sigma = clamp(exp(s), 1e-3, 1e3) and rho = 0.999 tanh(r).
Var bivariate_nll(const Var& raw, double x, double y);

}  // namespace rallycast::tensor
