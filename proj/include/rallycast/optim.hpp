#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rallycast/tensor.hpp"

namespace rallycast::tensor {

// Named tensors in insertion order. Names are unique.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  void add(std::string name, Tensor value);
  bool contains(std::string_view name) const;
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const;
  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  // Zero-filled set with the same names and shapes.
  ParameterSet zeros_like() const;
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  // this += other (names and shapes must match).
  void accumulate(const ParameterSet& other);

  friend bool operator==(const ParameterSet&, const ParameterSet&);

 private:
  std::vector<Entry> entries_;
};

bool operator==(const ParameterSet::Entry& a, const ParameterSet::Entry& b);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam. Moment buffers mirror the parameter set.
class Adam {
 public:
  Adam(const ParameterSet& params, AdamOptions options = {});

  void step(ParameterSet& params, const ParameterSet& grads);

  std::size_t step_count() const noexcept { return steps_; }
  const AdamOptions& options() const noexcept { return options_; }
  const ParameterSet& first_moment() const noexcept { return m_; }
  const ParameterSet& second_moment() const noexcept { return v_; }

 private:
  AdamOptions options_;
  ParameterSet m_;
  ParameterSet v_;
  std::size_t steps_ = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Scalar objective over a flat parameter vector. When `grad` is non-null the
// function also writes the analytic gradient into it.
using Objective = std::function<double(std::span<const double> x, std::vector<double>* grad)>;

// Central differences per coordinate; relative error
// |a - n| / (max(|a|, |n|) + 1e-12), worst coordinate reported.
GradCheckResult grad_check(const Objective& f, std::vector<double> x, double eps = 1e-5);

}  // namespace rallycast::tensor
