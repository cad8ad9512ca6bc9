#include "rallycast/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>

#include "rallycast/errors.hpp"

namespace rallycast::tensor {

const Tensor& Var::value() const {
  if (!tape_) throw StateError("use of an unbound Var");
  return tape_->value(id_);
}

// ---------------------------------------------------------------------------
// Tape

void Tape::check_recording() const {
  if (consumed_) throw StateError("tape already consumed by backward; record a new one");
}

Var Tape::push(Node node) {
  check_recording();
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs,
                 BackwardFn backward, bool allow_infinite) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward), allow_infinite);
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> inputs,
                 BackwardFn backward, bool allow_infinite) {
  for (double v : value.values()) {
    if (std::isnan(v) || (!allow_infinite && std::isinf(v))) {
      throw Error(std::string(op) + " produced a non-finite value");
    }
  }
  Node n;
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (in.tape() != this) throw ContractError(std::string(op) + ": operand from another tape");
    if (nodes_[in.id()].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

std::span<double> Tape::grad_sink(const Var& v) {
  auto& n = nodes_[v.id()];
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (consumed_) throw StateError("backward already run on this tape");
  if (loss.tape() != this) throw ContractError("loss belongs to another tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + loss.value().shape_string());
  }
  consumed_ = true;
  auto seed = grad_sink(loss);
  if (seed.empty()) return;
  seed[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.value, n.grad);
  }
}

Tensor Tape::grad(const Var& v) const {
  const auto& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(n.value.shape());
  return Tensor(n.value.shape(), n.grad);
}

// ---------------------------------------------------------------------------
// helpers

namespace {

[[noreturn]] void shape_mismatch(const char* op, const Var& a, const Var& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + a.value().shape_string() +
                       " and " + b.value().shape_string());
}

Shape matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

bool same_matrix(const Tensor& a, const Tensor& b) {
  return a.size() == b.size() && a.rows() == b.rows() && a.cols() == b.cols();
}

template <typename F, typename G>
Var unary(const char* op, const Var& a, F forward, G local_grad) {
  const auto& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = forward(x[i]);
  return a.tape()->record(op, std::move(out), {a},
                          [a, local_grad](Tape& t, const Tensor& y, std::span<const double> g) {
                            auto ga = t.grad_sink(a);
                            if (ga.empty()) return;
                            const auto& xv = a.value();
                            for (std::size_t i = 0; i < ga.size(); ++i) {
                              ga[i] += g[i] * local_grad(xv[i], y[i]);
                            }
                          });
}

}  // namespace

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(const Var& a, const Var& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  const auto m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k) shape_mismatch("matmul", a, b);
  Tensor out(matrix_shape(m, n));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &B.data()[p * n];
      double* orow = &out.data()[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return a.tape()->record(
      "matmul", std::move(out), {a, b},
      [a, b, m, k, n](Tape& t, const Tensor&, std::span<const double> g) {
        const auto& A = a.value();
        const auto& B = b.value();
        if (auto ga = t.grad_sink(a); !ga.empty()) {
          // dA = G * B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B[p * n + j];
              ga[i * k + p] += acc;
            }
        }
        if (auto gb = t.grad_sink(b); !gb.empty()) {
          // dB = A^T * G
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              if (aip == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
        }
      });
}

Var transpose(const Var& a) {
  const auto& A = a.value();
  const auto r = A.rows(), c = A.cols();
  Tensor out(matrix_shape(c, r));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  return a.tape()->record("transpose", std::move(out), {a},
                          [a, r, c](Tape& t, const Tensor&, std::span<const double> g) {
                            auto ga = t.grad_sink(a);
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
                          });
}

Var spmm(const SparseMatrix& s, const Var& z) {
  const auto& Z = z.value();
  if (Z.rows() != s.cols) {
    throw DimensionError("spmm: sparse matrix has " + std::to_string(s.cols) +
                         " columns, operand shape " + Z.shape_string());
  }
  const auto d = Z.cols();
  Tensor out(matrix_shape(s.rows, d));
  for (const auto& e : s.entries) {
    for (std::size_t j = 0; j < d; ++j) out[e.row * d + j] += e.weight * Z[e.col * d + j];
  }
  return z.tape()->record("spmm", std::move(out), {z},
                          [z, s, d](Tape& t, const Tensor&, std::span<const double> g) {
                            auto gz = t.grad_sink(z);
                            for (const auto& e : s.entries)
                              for (std::size_t j = 0; j < d; ++j)
                                gz[e.col * d + j] += e.weight * g[e.row * d + j];
                          });
}

Var reshape(const Var& a, Shape shape) {
  if (element_count(shape) != a.value().size()) {
    throw DimensionError("reshape: cannot view " + a.value().shape_string() + " as " +
                         shape_string(shape));
  }
  return a.tape()->record("reshape", a.value().reshaped(std::move(shape)), {a},
                          [a](Tape& t, const Tensor&, std::span<const double> g) {
                            auto ga = t.grad_sink(a);
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                          });
}

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (!same_matrix(A, B)) shape_mismatch("add", a, b);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
  return a.tape()->record("add", std::move(out), {a, b},
                          [a, b](Tape& t, const Tensor&, std::span<const double> g) {
                            if (auto ga = t.grad_sink(a); !ga.empty())
                              for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                            if (auto gb = t.grad_sink(b); !gb.empty())
                              for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
                          });
}

Var sub(const Var& a, const Var& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (!same_matrix(A, B)) shape_mismatch("sub", a, b);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] - B[i];
  return a.tape()->record("sub", std::move(out), {a, b},
                          [a, b](Tape& t, const Tensor&, std::span<const double> g) {
                            if (auto ga = t.grad_sink(a); !ga.empty())
                              for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                            if (auto gb = t.grad_sink(b); !gb.empty())
                              for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
                          });
}

Var mul(const Var& a, const Var& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (!same_matrix(A, B)) shape_mismatch("mul", a, b);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
  return a.tape()->record("mul", std::move(out), {a, b},
                          [a, b](Tape& t, const Tensor&, std::span<const double> g) {
                            const auto& A = a.value();
                            const auto& B = b.value();
                            if (auto ga = t.grad_sink(a); !ga.empty())
                              for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * B[i];
                            if (auto gb = t.grad_sink(b); !gb.empty())
                              for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * A[i];
                          });
}

Var scale(const Var& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var scalar_mul(const Var& s, const Var& a) {
  if (s.value().size() != 1) shape_mismatch("scalar_mul", s, a);
  const double k = s.value()[0];
  const auto& A = a.value();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = k * A[i];
  return a.tape()->record("scalar_mul", std::move(out), {s, a},
                          [s, a](Tape& t, const Tensor&, std::span<const double> g) {
                            const auto& A = a.value();
                            const double k = s.value()[0];
                            if (auto gs = t.grad_sink(s); !gs.empty()) {
                              double acc = 0.0;
                              for (std::size_t i = 0; i < A.size(); ++i) acc += g[i] * A[i];
                              gs[0] += acc;
                            }
                            if (auto ga = t.grad_sink(a); !ga.empty())
                              for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += k * g[i];
                          });
}

Var add_row(const Var& a, const Var& r) {
  const auto& A = a.value();
  const auto& R = r.value();
  if (R.rows() != 1 || R.cols() != A.cols()) shape_mismatch("add_row", a, r);
  const auto rows = A.rows(), cols = A.cols();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = A[i * cols + j] + R[j];
  return a.tape()->record("add_row", std::move(out), {a, r},
                          [a, r, rows, cols](Tape& t, const Tensor&, std::span<const double> g) {
                            if (auto ga = t.grad_sink(a); !ga.empty())
                              for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                            if (auto gr = t.grad_sink(r); !gr.empty())
                              for (std::size_t i = 0; i < rows; ++i)
                                for (std::size_t j = 0; j < cols; ++j) gr[j] += g[i * cols + j];
                          });
}

Var mul_constant(const Var& a, const Tensor& mask) {
  const auto& A = a.value();
  if (mask.size() != A.size()) {
    throw DimensionError("mul_constant: mask " + mask.shape_string() + " vs operand " +
                         A.shape_string());
  }
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * mask[i];
  return a.tape()->record("mul_constant", std::move(out), {a},
                          [a, mask](Tape& t, const Tensor&, std::span<const double> g) {
                            auto ga = t.grad_sink(a);
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * mask[i];
                          });
}

// relu'(0) is taken as 0.
Var relu(const Var& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// ---------------------------------------------------------------------------
// structure

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  const auto& first = parts.front().value();
  const auto rows = first.rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) shape_mismatch("concat", parts.front(), p);
    total += p.value().cols();
  }
  Tensor out(first.rank() <= 1 ? Shape{total} : Shape{rows, total});
  std::vector<std::size_t> offsets;
  offsets.reserve(parts.size());
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const auto c = v.cols();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * total + off + j] = v[i * c + j];
    offsets.push_back(off);
    off += c;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts.front().tape()->record(
      "concat", std::move(out), parts,
      [inputs, offsets, rows, total](Tape& t, const Tensor&, std::span<const double> g) {
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          auto gp = t.grad_sink(inputs[k]);
          if (gp.empty()) continue;
          const auto c = inputs[k].value().cols();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + offsets[k] + j];
        }
      });
}

Var concat(const Var& a, const Var& b) {
  const Var parts[] = {a, b};
  return concat(parts);
}

Var stack_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("stack_rows: no operands");
  const auto cols = parts.front().value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != cols) shape_mismatch("stack_rows", parts.front(), p);
    rows += p.value().rows();
  }
  Tensor out(matrix_shape(rows, cols));
  std::size_t at = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<long>(at));
    at += v.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts.front().tape()->record(
      "stack_rows", std::move(out), parts,
      [inputs](Tape& t, const Tensor&, std::span<const double> g) {
        std::size_t at = 0;
        for (const auto& p : inputs) {
          const auto n = p.value().size();
          if (auto gp = t.grad_sink(p); !gp.empty())
            for (std::size_t i = 0; i < n; ++i) gp[i] += g[at + i];
          at += n;
        }
      });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const auto& A = a.value();
  if (begin > end || end > A.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + A.shape_string());
  }
  const auto cols = A.cols();
  Tensor out(matrix_shape(end - begin, cols),
             std::vector<double>(A.data().begin() + static_cast<long>(begin * cols),
                                 A.data().begin() + static_cast<long>(end * cols)));
  return a.tape()->record("slice_rows", std::move(out), {a},
                          [a, begin, cols](Tape& t, const Tensor& y, std::span<const double> g) {
                            auto ga = t.grad_sink(a);
                            for (std::size_t i = 0; i < y.size(); ++i) ga[begin * cols + i] += g[i];
                          });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  const auto& A = a.value();
  const auto rows = A.rows(), cols = A.cols();
  if (begin > end || end > cols) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + A.shape_string());
  }
  const auto w = end - begin;
  Tensor out(matrix_shape(rows, w));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = A[i * cols + begin + j];
  return a.tape()->record("slice_cols", std::move(out), {a},
                          [a, begin, rows, cols, w](Tape& t, const Tensor&,
                                                    std::span<const double> g) {
                            auto ga = t.grad_sink(a);
                            for (std::size_t i = 0; i < rows; ++i)
                              for (std::size_t j = 0; j < w; ++j)
                                ga[i * cols + begin + j] += g[i * w + j];
                          });
}

Var row(const Var& a, std::size_t r) { return slice_rows(a, r, r + 1); }

Var repeat_row(const Var& a, std::size_t count) {
  const auto& A = a.value();
  if (A.rows() != 1) throw DimensionError("repeat_row needs a single row, got " + A.shape_string());
  const auto cols = A.cols();
  Tensor out(matrix_shape(count, cols));
  for (std::size_t i = 0; i < count; ++i)
    std::copy(A.data().begin(), A.data().end(), out.data().begin() + static_cast<long>(i * cols));
  return a.tape()->record("repeat_row", std::move(out), {a},
                          [a, count, cols](Tape& t, const Tensor&, std::span<const double> g) {
                            auto ga = t.grad_sink(a);
                            for (std::size_t i = 0; i < count; ++i)
                              for (std::size_t j = 0; j < cols; ++j) ga[j] += g[i * cols + j];
                          });
}

Var gather_cols(const Var& w, std::span<const std::size_t> indices) {
  const auto& W = w.value();
  const auto rows = W.rows(), cols = W.cols();
  const auto n = indices.size();
  Tensor out(matrix_shape(n, rows));
  for (std::size_t r = 0; r < n; ++r) {
    if (indices[r] >= cols) {
      throw DimensionError("gather_cols: index " + std::to_string(indices[r]) +
                           " out of range for " + W.shape_string());
    }
    for (std::size_t i = 0; i < rows; ++i) out[r * rows + i] = W[i * cols + indices[r]];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return w.tape()->record("gather_cols", std::move(out), {w},
                          [w, idx, rows, cols](Tape& t, const Tensor&, std::span<const double> g) {
                            auto gw = t.grad_sink(w);
                            for (std::size_t r = 0; r < idx.size(); ++r)
                              for (std::size_t i = 0; i < rows; ++i)
                                gw[i * cols + idx[r]] += g[r * rows + i];
                          });
}

Var pick(const Var& a, std::size_t r, std::size_t c) {
  const auto& A = a.value();
  if (r >= A.rows() || c >= A.cols()) {
    throw DimensionError("pick (" + std::to_string(r) + ", " + std::to_string(c) +
                         ") out of range for " + A.shape_string());
  }
  const auto at = r * A.cols() + c;
  return a.tape()->record(
      "pick", Tensor::scalar(A[at]), {a},
      [a, at](Tape& t, const Tensor&, std::span<const double> g) { t.grad_sink(a)[at] += g[0]; },
      true);
}

Var sum(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().values()) acc += v;
  return a.tape()->record("sum", Tensor::scalar(acc), {a},
                          [a](Tape& t, const Tensor&, std::span<const double> g) {
                            auto ga = t.grad_sink(a);
                            for (auto& v : ga) v += g[0];
                          });
}

// ---------------------------------------------------------------------------
// normalisation

Var softmax(const Var& a, std::size_t axis) {
  const auto& A = a.value();
  const auto rows = A.rows(), cols = A.cols();
  if (axis > 1) throw DimensionError("softmax: axis must be 0 or 1");
  const auto n = axis == 1 ? cols : rows;
  const auto lanes = axis == 1 ? rows : cols;
  if (n == 0) throw DimensionError("softmax over an empty axis of " + A.shape_string());
  // Element (lane, k) lives at index(lane, k).
  auto index = [=](std::size_t lane, std::size_t k) {
    return axis == 1 ? lane * cols + k : k * cols + lane;
  };
  Tensor out(A.shape());
  for (std::size_t l = 0; l < lanes; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, A[index(l, k)]);
    double z = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double e = std::exp(A[index(l, k)] - mx);
      out[index(l, k)] = e;
      z += e;
    }
    for (std::size_t k = 0; k < n; ++k) out[index(l, k)] /= z;
  }
  return a.tape()->record("softmax", std::move(out), {a},
                          [a, lanes, n, index](Tape& t, const Tensor& y, std::span<const double> g) {
                            auto ga = t.grad_sink(a);
                            for (std::size_t l = 0; l < lanes; ++l) {
                              double dot = 0.0;
                              for (std::size_t k = 0; k < n; ++k)
                                dot += g[index(l, k)] * y[index(l, k)];
                              for (std::size_t k = 0; k < n; ++k) {
                                const auto i = index(l, k);
                                ga[i] += y[i] * (g[i] - dot);
                              }
                            }
                          });
}

Var log_softmax(const Var& a, std::span<const bool> mask) {
  const auto& A = a.value();
  const auto rows = A.rows(), cols = A.cols();
  if (!mask.empty() && mask.size() != cols) {
    throw DimensionError("log_softmax: mask of " + std::to_string(mask.size()) + " for " +
                         A.shape_string());
  }
  std::vector<bool> masked(cols, false);
  for (std::size_t c = 0; c < mask.size(); ++c) masked[c] = mask[c];
  if (std::count(masked.begin(), masked.end(), false) == 0) {
    throw DimensionError("log_softmax: every class is masked");
  }
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = kNegInf;
    for (std::size_t c = 0; c < cols; ++c)
      if (!masked[c]) mx = std::max(mx, A[i * cols + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      if (!masked[c]) z += std::exp(A[i * cols + c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c)
      out[i * cols + c] = masked[c] ? kNegInf : A[i * cols + c] - lse;
  }
  return a.tape()->record(
      "log_softmax", std::move(out), {a},
      [a, masked, rows, cols](Tape& t, const Tensor& y, std::span<const double> g) {
        auto ga = t.grad_sink(a);
        for (std::size_t i = 0; i < rows; ++i) {
          double gsum = 0.0;
          for (std::size_t c = 0; c < cols; ++c)
            if (!masked[c]) gsum += g[i * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            if (masked[c]) continue;
            const auto k = i * cols + c;
            ga[k] += g[k] - std::exp(y[k]) * gsum;
          }
        }
      },
      true);
}

// ---------------------------------------------------------------------------
// sequence

void check_conv_config(std::size_t kernel_size, std::size_t length) {
  if (kernel_size % 2 == 0) {
    throw ConfigError("conv1d_same: kernel size must be odd, got " + std::to_string(kernel_size));
  }
  if (kernel_size > 2 * length + 1) {
    throw ConfigError("conv1d_same: kernel size " + std::to_string(kernel_size) +
                      " exceeds 2t+1 for sequence length " + std::to_string(length));
  }
}

Var conv1d_same(const Var& sequence, const Var& weight, const Var& bias) {
  const auto& X = sequence.value();
  const auto& W = weight.value();
  const auto& b = bias.value();
  if (W.rank() != 3) throw DimensionError("conv1d_same: weight must be {K, c_out, c_in}, got " +
                                          W.shape_string());
  const auto K = W.shape()[0], c_out = W.shape()[1], c_in = W.shape()[2];
  const auto t_len = X.rows();
  if (X.cols() != c_in) shape_mismatch("conv1d_same", sequence, weight);
  if (b.size() != c_out) shape_mismatch("conv1d_same", weight, bias);
  check_conv_config(K, t_len);
  const auto pad = static_cast<long>(K / 2);
  Tensor out(matrix_shape(t_len, c_out));
  for (std::size_t i = 0; i < t_len; ++i) {
    for (std::size_t o = 0; o < c_out; ++o) {
      double acc = b[o];
      for (std::size_t k = 0; k < K; ++k) {
        const long src = static_cast<long>(i + k) - pad;
        if (src < 0 || src >= static_cast<long>(t_len)) continue;
        const double* w = &W.data()[(k * c_out + o) * c_in];
        const double* x = &X.data()[static_cast<std::size_t>(src) * c_in];
        for (std::size_t c = 0; c < c_in; ++c) acc += w[c] * x[c];
      }
      out[i * c_out + o] = acc;
    }
  }
  return sequence.tape()->record(
      "conv1d_same", std::move(out), {sequence, weight, bias},
      [sequence, weight, bias, K, c_out, c_in, t_len, pad](Tape& t, const Tensor&,
                                                            std::span<const double> g) {
        const auto& X = sequence.value();
        const auto& W = weight.value();
        auto gx = t.grad_sink(sequence);
        auto gw = t.grad_sink(weight);
        auto gb = t.grad_sink(bias);
        for (std::size_t i = 0; i < t_len; ++i) {
          for (std::size_t o = 0; o < c_out; ++o) {
            const double go = g[i * c_out + o];
            if (!gb.empty()) gb[o] += go;
            for (std::size_t k = 0; k < K; ++k) {
              const long src = static_cast<long>(i + k) - pad;
              if (src < 0 || src >= static_cast<long>(t_len)) continue;
              const auto s = static_cast<std::size_t>(src);
              const auto wbase = (k * c_out + o) * c_in;
              for (std::size_t c = 0; c < c_in; ++c) {
                if (!gx.empty()) gx[s * c_in + c] += W[wbase + c] * go;
                if (!gw.empty()) gw[wbase + c] += X[s * c_in + c] * go;
              }
            }
          }
        }
      });
}

LstmState lstm_step(const LstmState& state, const Var& x, const LstmWeights& w) {
  const auto d = state.h.value().cols();
  if (state.c.value().cols() != d || w.w_hh.value().rows() != 4 * d ||
      w.w_hh.value().cols() != d || w.w_ih.value().rows() != 4 * d ||
      w.w_ih.value().cols() != x.value().cols() || w.bias.value().size() != 4 * d) {
    throw DimensionError("lstm_step: hidden " + state.h.value().shape_string() + ", input " +
                         x.value().shape_string() + ", W_ih " + w.w_ih.value().shape_string() +
                         ", W_hh " + w.w_hh.value().shape_string());
  }
  auto gates = add_row(add(matmul(x, transpose(w.w_ih)), matmul(state.h, transpose(w.w_hh))),
                       w.bias);
  auto i = sigmoid(slice_cols(gates, 0, d));
  auto f = sigmoid(slice_cols(gates, d, 2 * d));
  auto g = tanh(slice_cols(gates, 2 * d, 3 * d));
  auto o = sigmoid(slice_cols(gates, 3 * d, 4 * d));
  auto c = add(mul(f, state.c), mul(i, g));
  auto h = mul(o, tanh(c));
  return {h, c};
}

Var lstm_sequence(const Var& inputs, const LstmWeights& w) {
  auto* tape = inputs.tape();
  const auto steps = inputs.value().rows();
  const auto d = w.w_hh.value().cols();
  if (steps == 0) throw DimensionError("lstm_sequence: empty input sequence");
  if (w.w_ih.value().cols() != inputs.value().cols() || w.w_ih.value().rows() != 4 * d ||
      w.bias.value().size() != 4 * d) {
    throw DimensionError("lstm_sequence: input " + inputs.value().shape_string() + ", W_ih " +
                         w.w_ih.value().shape_string());
  }
  // Input projections for all steps at once; the recurrence only adds h W_hh^T.
  auto projected = add_row(matmul(inputs, transpose(w.w_ih)), w.bias);
  auto w_hh_t = transpose(w.w_hh);
  LstmState st{tape->constant(Tensor({1, d})), tape->constant(Tensor({1, d}))};
  std::vector<Var> hidden;
  hidden.reserve(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    auto gates = add(row(projected, s), matmul(st.h, w_hh_t));
    auto i = sigmoid(slice_cols(gates, 0, d));
    auto f = sigmoid(slice_cols(gates, d, 2 * d));
    auto g = tanh(slice_cols(gates, 2 * d, 3 * d));
    auto o = sigmoid(slice_cols(gates, 3 * d, 4 * d));
    st.c = add(mul(f, st.c), mul(i, g));
    st.h = mul(o, tanh(st.c));
    hidden.push_back(st.h);
  }
  return stack_rows(hidden);
}

// ---------------------------------------------------------------------------
// losses

Var bivariate_nll(const Var& raw, double x, double y) {
  const auto& r = raw.value();
  if (r.size() != 5) throw DimensionError("bivariate_nll: raw must have 5 entries, got " +
                                          r.shape_string());
  const double mx = r[0], my = r[1];
  const double lsx = std::clamp(r[2], kMinLogSigma, kMaxLogSigma);
  const double lsy = std::clamp(r[3], kMinLogSigma, kMaxLogSigma);
  const double th = std::tanh(r[4]);
  const double rho = kRhoScale * th;
  const double sx = std::exp(lsx), sy = std::exp(lsy);
  const double u = (x - mx) / sx, v = (y - my) / sy;
  const double omega = 1.0 - rho * rho;
  const double q = u * u + v * v - 2.0 * rho * u * v;
  const double nll = std::log(2.0 * std::numbers::pi) + lsx + lsy + 0.5 * std::log(omega) +
                     q / (2.0 * omega);
  return raw.tape()->record(
      "bivariate_nll", Tensor::scalar(nll), {raw},
      [raw, u, v, omega, q, rho, th, sx, sy](Tape& t, const Tensor&, std::span<const double> g) {
        const auto& r = raw.value();
        auto gr = t.grad_sink(raw);
        const double go = g[0];
        gr[0] += go * (-(u - rho * v) / (omega * sx));
        gr[1] += go * (-(v - rho * u) / (omega * sy));
        const bool free_x = r[2] > kMinLogSigma && r[2] < kMaxLogSigma;
        const bool free_y = r[3] > kMinLogSigma && r[3] < kMaxLogSigma;
        if (free_x) gr[2] += go * (1.0 - (u * u - rho * u * v) / omega);
        if (free_y) gr[3] += go * (1.0 - (v * v - rho * u * v) / omega);
        const double d_rho = -rho / omega - u * v / omega + q * rho / (omega * omega);
        gr[4] += go * d_rho * kRhoScale * (1.0 - th * th);
      });
}

}  // namespace rallycast::tensor
