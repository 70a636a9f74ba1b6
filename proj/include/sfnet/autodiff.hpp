// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tensor-level reverse-mode differentiation.
//
// A Tape records every operation in creation order together with its
// forward value and a closure that maps the output gradient onto the
// parents. backward() zeroes all gradient buffers, seeds the scalar loss
// with 1 and sweeps the tape once in reverse. Tapes are single-threaded;
// use one tape per batch item and merge gradients explicitly.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sfnet/tensor.hpp"

namespace sfnet::ad {

class Tape;

/// Handle to a node on a tape. Default-constructed handles are detached.
class Var {
 public:
  Var() = default;

  bool attached() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value()[0]; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value) { return push(std::move(value), {}, nullptr, true); }

  /// Input excluded from differentiation.
  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false); }

  /// Records an operation. The node requires a gradient iff any parent does;
  /// otherwise the backward closure is dropped.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
    std::vector<std::size_t> ids;
    bool needs = false;
    for (const Var& p : parents) {
      check_owned(p);
      ids.push_back(p.id_);
      needs = needs || nodes_[p.id_].requires_grad;
    }
    return push(std::move(value), std::move(ids), needs ? std::move(backward) : nullptr, needs);
  }

  /// Reverse sweep from a scalar loss.
  void backward(const Var& loss) {
    if (!loss.attached() || loss.tape_ != this) throw std::logic_error("backward on a value detached from this tape");
    if (loss.value().size() != 1) throw std::invalid_argument("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
    for (auto& n : nodes_) {
      n.grad = n.requires_grad ? Tensor(n.value.shape()) : Tensor();
      n.visits = 0;
    }
    if (!nodes_[loss.id_].requires_grad) return;
    nodes_[loss.id_].grad[0] = 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      ++n.visits;
      if (n.backward) n.backward(*this, n.grad);
    }
    ++backward_passes_;
  }

  /// Gradient accumulator for a parent inside a backward closure, or null
  /// when that parent does not need a gradient.
  Tensor* grad_target(const Var& v) {
    Node& n = nodes_[v.id_];
    return n.requires_grad ? &n.grad : nullptr;
  }

  const Tensor& value(const Var& v) const { return nodes_.at(v.id_).value; }
  const Tensor& grad(const Var& v) const {
    check_owned(v);
    const Node& n = nodes_[v.id_];
    if (n.grad.empty()) return zero_like(n.value);
    return n.grad;
  }
  bool requires_grad(const Var& v) const { return nodes_.at(v.id_).requires_grad; }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  /// Visit count of a node during the most recent backward pass.
  std::size_t visits(std::size_t id) const { return nodes_.at(id).visits; }

  void check_owned(const Var& v) const {
    if (!v.attached() || v.tape_ != this || v.id_ >= nodes_.size())
      throw std::logic_error("value is detached from this tape");
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    std::size_t visits = 0;
  };

  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(parents), std::move(fn), requires_grad, 0});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& zero_like(const Tensor& t) const {
    scratch_ = Tensor(t.shape());
    return scratch_;
  }

  std::deque<Node> nodes_;
  mutable Tensor scratch_;
  std::size_t backward_passes_ = 0;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("detached Var has no value");
  return tape_->value(*this);
}
inline const Tensor& Var::grad() const {
  if (!tape_) throw std::logic_error("detached Var has no gradient");
  return tape_->grad(*this);
}
inline bool Var::requires_grad() const { return tape_ && tape_->requires_grad(*this); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (!a.attached() || a.tape() != b.tape()) throw std::logic_error("operands live on different tapes");
  return *a.tape();
}

template <class F>
Var unary(const Var& a, F&& df, Tensor out) {
  Tape& t = *a.tape();
  return t.record(std::move(out), {a}, [a, df = std::forward<F>(df)](Tape& tape, const Tensor& g) {
    if (Tensor* ga = tape.grad_target(a)) {
      const Tensor& x = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * df(x[i]);
    }
  });
}

}  // namespace detail

/// Identity forward, zero backward.
inline Var stop_gradient(const Var& a) {
  a.tape()->check_owned(a);
  return a.tape()->constant(a.value());
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  a.value().require_same_shape(b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (Tensor* ga = tape.grad_target(a)) *ga += g;
    if (Tensor* gb = tape.grad_target(b)) *gb += g;
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  a.value().require_same_shape(b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (Tensor* ga = tape.grad_target(a)) *ga += g;
    if (Tensor* gb = tape.grad_target(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  a.value().require_same_shape(b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (Tensor* ga = tape.grad_target(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    if (Tensor* gb = tape.grad_target(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return detail::unary(a, [s](double) { return s; }, std::move(out));
}

inline Var square(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= v;
  return detail::unary(a, [](double x) { return 2.0 * x; }, std::move(out));
}

/// |x| with subgradient sign(0) = 0.
inline Var abs(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::abs(v);
  return detail::unary(a, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }, std::move(out));
}

/// max(x, 0). The derivative at exactly 0 is taken as 1, so a residual
/// branch whose pre-activation starts at zero still receives gradient.
inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::max(v, 0.0);
  return detail::unary(a, [](double x) { return x >= 0.0 ? 1.0 : 0.0; }, std::move(out));
}

inline Var sum(const Var& a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record(Tensor(Shape{1}, s), {a}, [a](Tape& tape, const Tensor& g) {
    if (Tensor* ga = tape.grad_target(a))
      for (double& v : ga->data()) v += g[0];
  });
}

/// Weighted sum of scalars.
inline Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.empty() || terms.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  Var acc = scale(terms[0], weights[0]);
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, scale(terms[i], weights[i]));
  return acc;
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Relative error floor: |a - n| / max(|a|, |n|, floor).
  double floor = 1e-8;
};

struct CoordinateError {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool finite = true;
};

struct ParamReport {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  CoordinateError worst;
  std::vector<CoordinateError> failures;
};

struct GradCheckReport {
  double step = 0.0;
  double tolerance = 0.0;
  std::vector<ParamReport> params;

  bool passed() const {
    for (const auto& p : params)
      if (!p.failures.empty()) return false;
    return true;
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& p : params) m = std::max(m, p.max_rel_error);
    return m;
  }
  const CoordinateError* worst() const {
    const CoordinateError* w = nullptr;
    for (const auto& p : params)
      if (p.coordinates && (!w || p.worst.rel_error > w->rel_error)) w = &p.worst;
    return w;
  }
};

inline nlohmann::json coordinate_json(const CoordinateError& e) {
  return {{"param", e.param}, {"index", e.index},     {"analytic", e.analytic},
          {"numeric", e.numeric}, {"rel_error", e.rel_error}, {"finite", e.finite}};
}

inline nlohmann::json to_json(const GradCheckReport& r) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : r.params) {
    nlohmann::json failing = nlohmann::json::array();
    for (const auto& f : p.failures) failing.push_back(coordinate_json(f));
    params.push_back({{"name", p.name},
                      {"coordinates", p.coordinates},
                      {"max_rel_error", p.max_rel_error},
                      {"mean_rel_error", p.mean_rel_error},
                      {"worst", coordinate_json(p.worst)},
                      {"failing", failing}});
  }
  nlohmann::json out{{"step", r.step},
                     {"tolerance", r.tolerance},
                     {"passed", r.passed()},
                     {"max_rel_error", r.max_rel_error()},
                     {"params", params}};
  if (const auto* w = r.worst()) out["worst"] = coordinate_json(*w);
  return out;
}

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Builds a scalar on a fresh tape from leaves holding the given inputs.
using ScalarBuilder = std::function<Var(Tape&, std::span<const Var>)>;

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of `f` against central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h at every coordinate of every input.
inline GradCheckReport grad_check(const ScalarBuilder& f, const std::vector<NamedTensor>& inputs,
                                  const GradCheckOptions& options = {}) {
  if (!(options.step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  auto evaluate = [&](const std::vector<NamedTensor>& at) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& in : at) leaves.push_back(tape.leaf(in.value));
    return f(tape, leaves).item();
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in.value));
    Var out = f(tape, leaves);
    tape.backward(out);
    for (const Var& l : leaves) analytic.push_back(l.grad());
  }

  GradCheckReport report{options.step, options.tolerance, {}};
  std::vector<NamedTensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    ParamReport pr;
    pr.name = inputs[k].name;
    double total = 0.0;
    for (std::size_t i = 0; i < inputs[k].value.size(); ++i) {
      const double x0 = inputs[k].value[i];
      probe[k].value[i] = x0 + options.step;
      const double fp = evaluate(probe);
      probe[k].value[i] = x0 - options.step;
      const double fm = evaluate(probe);
      probe[k].value[i] = x0;

      CoordinateError e;
      e.param = pr.name;
      e.index = i;
      e.analytic = analytic[k][i];
      e.numeric = (fp - fm) / (2.0 * options.step);
      e.finite = std::isfinite(fp) && std::isfinite(fm) && std::isfinite(e.analytic);
      e.rel_error = e.finite ? relative_error(e.analytic, e.numeric, options.floor)
                             : std::numeric_limits<double>::infinity();
      ++pr.coordinates;
      if (e.finite) total += e.rel_error;
      if (pr.coordinates == 1 || e.rel_error > pr.worst.rel_error) pr.worst = e;
      pr.max_rel_error = std::max(pr.max_rel_error, e.rel_error);
      if (!e.finite || e.rel_error >= options.tolerance) pr.failures.push_back(e);
    }
    pr.mean_rel_error = pr.coordinates ? total / static_cast<double>(pr.coordinates) : 0.0;
    report.params.push_back(std::move(pr));
  }
  return report;
}

}  // namespace sfnet::ad
