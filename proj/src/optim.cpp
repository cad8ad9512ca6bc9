#include "rallycast/optim.hpp"

#include <algorithm>
#include <cmath>

#include "rallycast/errors.hpp"

namespace rallycast::tensor {

void ParameterSet::add(std::string name, Tensor value) {
  if (contains(name)) throw ContractError("duplicate parameter '" + name + "'");
  entries_.push_back({std::move(name), std::move(value)});
}

bool ParameterSet::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.name == name; });
}

std::size_t ParameterSet::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  throw ContractError("unknown parameter '" + std::string(name) + "'");
}

Tensor& ParameterSet::at(std::string_view name) { return entries_[index_of(name)].value; }

const Tensor& ParameterSet::at(std::string_view name) const {
  return entries_[index_of(name)].value;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (const auto& e : entries_) out.add(e.name, Tensor(e.value.shape()));
  return out;
}

std::vector<double> ParameterSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(scalar_count());
  for (const auto& e : entries_) flat.insert(flat.end(), e.value.data().begin(), e.value.data().end());
  return flat;
}

void ParameterSet::assign(std::span<const double> flat) {
  if (flat.size() != scalar_count()) {
    throw DimensionError("assign: expected " + std::to_string(scalar_count()) + " values, got " +
                         std::to_string(flat.size()));
  }
  std::size_t at = 0;
  for (auto& e : entries_) {
    std::copy_n(flat.begin() + static_cast<long>(at), e.value.size(), e.value.data().begin());
    at += e.value.size();
  }
}

void ParameterSet::accumulate(const ParameterSet& other) {
  if (other.entries_.size() != entries_.size()) {
    throw DimensionError("accumulate: parameter sets differ in size");
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& dst = entries_[i].value;
    const auto& src = other.entries_[i].value;
    if (entries_[i].name != other.entries_[i].name || dst.shape() != src.shape()) {
      throw DimensionError("accumulate: mismatch at '" + entries_[i].name + "' " +
                           dst.shape_string() + " vs '" + other.entries_[i].name + "' " +
                           src.shape_string());
    }
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

bool operator==(const ParameterSet::Entry& a, const ParameterSet::Entry& b) {
  return a.name == b.name && a.value == b.value;
}

bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.entries_ == b.entries_; }

Adam::Adam(const ParameterSet& params, AdamOptions options)
    : options_(options), m_(params.zeros_like()), v_(params.zeros_like()) {}

void Adam::step(ParameterSet& params, const ParameterSet& grads) {
  auto& pe = params.entries();
  const auto& ge = grads.entries();
  if (pe.size() != m_.size() || ge.size() != m_.size()) {
    throw DimensionError("adam: parameter/gradient/state counts differ (" +
                         std::to_string(pe.size()) + ", " + std::to_string(ge.size()) + ", " +
                         std::to_string(m_.size()) + ")");
  }
  for (std::size_t i = 0; i < pe.size(); ++i) {
    const auto& shape = m_.entries()[i].value.shape();
    if (pe[i].value.shape() != shape || ge[i].value.shape() != shape) {
      throw DimensionError("adam: shape mismatch for '" + pe[i].name + "': param " +
                           pe[i].value.shape_string() + ", grad " + ge[i].value.shape_string() +
                           ", state " + shape_string(shape));
    }
  }
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < pe.size(); ++i) {
    auto& p = pe[i].value;
    const auto& g = ge[i].value;
    auto& m = m_.entries()[i].value;
    auto& v = v_.entries()[i].value;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= options_.learning_rate * mhat / (std::sqrt(vhat) + options_.epsilon);
    }
  }
}

GradCheckResult grad_check(const Objective& f, std::vector<double> x, double eps) {
  std::vector<double> analytic(x.size(), 0.0);
  f(x, &analytic);
  GradCheckResult worst;
  worst.max_relative_error = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double up = f(x, nullptr);
    x[i] = orig - eps;
    const double down = f(x, nullptr);
    x[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic.at(i);
    const double rel = std::abs(a - numeric) / (std::max(std::abs(a), std::abs(numeric)) + 1e-12);
    if (rel > worst.max_relative_error || i == 0) {
      worst = {rel, i, a, numeric};
    }
  }
  return worst;
}

}  // namespace rallycast::tensor
