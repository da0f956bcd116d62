#include "ellipse/autodiff.hpp"

#include <cmath>

#include "ellipse/numerics.hpp"

namespace ellipse::ad {

double Var::value() const { return tape_->value(*this); }

Var Tape::leaf(double value) {
  nodes_.push_back({value, -1, -1, 0.0, 0.0});
  return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

Var Tape::record(double value, Var a, double da) {
  nodes_.push_back({value, a.index_, -1, da, 0.0});
  return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

Var Tape::record(double value, Var a, double da, Var b, double db) {
  nodes_.push_back({value, a.index_, b.index_, da, db});
  return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

std::vector<double> Tape::gradient(Var output) const {
  std::vector<double> adj(nodes_.size(), 0.0);
  adj[static_cast<std::size_t>(output.index_)] = 1.0;
  for (std::size_t i = static_cast<std::size_t>(output.index_) + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    const double g = adj[i];
    if (g == 0.0) continue;
    if (n.lhs >= 0) adj[static_cast<std::size_t>(n.lhs)] += g * n.dlhs;
    if (n.rhs >= 0) adj[static_cast<std::size_t>(n.rhs)] += g * n.drhs;
  }
  return adj;
}

Var operator+(Var a, Var b) { return a.tape()->record(a.value() + b.value(), a, 1.0, b, 1.0); }
Var operator-(Var a, Var b) { return a.tape()->record(a.value() - b.value(), a, 1.0, b, -1.0); }
Var operator*(Var a, Var b) {
  return a.tape()->record(a.value() * b.value(), a, b.value(), b, a.value());
}
Var operator/(Var a, Var b) {
  const double bv = b.value();
  const double q = a.value() / bv;
  return a.tape()->record(q, a, 1.0 / bv, b, -q / bv);
}
Var operator+(Var a, double b) { return a.tape()->record(a.value() + b, a, 1.0); }
Var operator+(double a, Var b) { return b + a; }
Var operator-(Var a, double b) { return a.tape()->record(a.value() - b, a, 1.0); }
Var operator-(double a, Var b) { return b.tape()->record(a - b.value(), b, -1.0); }
Var operator*(Var a, double b) { return a.tape()->record(a.value() * b, a, b); }
Var operator*(double a, Var b) { return b * a; }
Var operator/(Var a, double b) { return a.tape()->record(a.value() / b, a, 1.0 / b); }
Var operator-(Var a) { return a.tape()->record(-a.value(), a, -1.0); }

Var log(Var a) { return a.tape()->record(std::log(a.value()), a, 1.0 / a.value()); }
Var log1p(Var a) { return a.tape()->record(std::log1p(a.value()), a, 1.0 / (1.0 + a.value())); }
Var exp(Var a) {
  const double e = std::exp(a.value());
  return a.tape()->record(e, a, e);
}
Var abs(Var a) {
  const double v = a.value();
  return a.tape()->record(std::abs(v), a, v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
}
Var softplus(Var a) {
  const double x = a.value();
  const double value = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  const double sigmoid = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  return a.tape()->record(value, a, sigmoid);
}
Var lgamma(Var a) { return a.tape()->record(log_gamma(a.value()), a, digamma(a.value())); }

}  // namespace ellipse::ad
