#pragma once

// Minimal scalar reverse-mode tape. Each node stores its value and the local
// partials towards at most two parents; a single reverse sweep yields the
// adjoint of every recorded node.

#include <cstdint>
#include <vector>

namespace ellipse::ad {

class Tape;

class Var {
 public:
  Var() = default;
  double value() const;
  std::int32_t index() const noexcept { return index_; }
  Tape* tape() const noexcept { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::int32_t index) : tape_(tape), index_(index) {}
  Tape* tape_ = nullptr;
  std::int32_t index_ = -1;
};

class Tape {
 public:
  Var leaf(double value);
  Var record(double value, Var a, double da);
  Var record(double value, Var a, double da, Var b, double db);

  double value(Var v) const { return nodes_[static_cast<std::size_t>(v.index_)].value; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adjoints d(output)/d(node) for every node recorded so far.
  std::vector<double> gradient(Var output) const;

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    double value;
    std::int32_t lhs;
    std::int32_t rhs;
    double dlhs;
    double drhs;
  };
  std::vector<Node> nodes_;
};

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator+(Var a, double b);
Var operator+(double a, Var b);
Var operator-(Var a, double b);
Var operator-(double a, Var b);
Var operator*(Var a, double b);
Var operator*(double a, Var b);
Var operator/(Var a, double b);
Var operator-(Var a);

Var log(Var a);
Var log1p(Var a);
Var exp(Var a);
Var abs(Var a);
Var softplus(Var a);
Var lgamma(Var a);

}  // namespace ellipse::ad
