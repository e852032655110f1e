#pragma once

// Define-by-run reverse-mode automatic differentiation over dense tensors.
//
// Every operation returns a new graph node; graphs are acyclic by
// construction and are consumed by a single call to backward().

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "icnn/tensor.hpp"

namespace icnn {

/// Trainable weight. Non-negative parameters must satisfy value >= 0
/// entrywise before any forward pass.
struct Parameter {
  std::string name;
  Tensor value;
  bool non_negative = false;

  /// Clamp every entry into [0, inf) when the parameter is constrained.
  void project();
  bool satisfies_constraint() const;
};

class Node;
using Var = std::shared_ptr<Node>;
using Adjoint = std::function<void(Node&)>;

class Node {
 public:
  std::string op;
  std::vector<Var> inputs;
  Tensor value;
  Adjoint adjoint;
  std::string name;  // non-empty for named leaves (parameters, differentiable inputs)
  bool requires_grad = false;
  bool consumed = false;

  /// Gradient buffer, zero-initialised on first access.
  Tensor& grad();
  bool has_grad() const { return grad_.size() != 0; }
  const Tensor& grad_value() const { return grad_; }

 private:
  Tensor grad_;
};

Var constant(Tensor value);
/// Differentiable leaf; its gradient is reported under `name`.
Var leaf(Tensor value, std::string name);
Var param(const Parameter& p);
/// Same value, no gradient flow.
Var detach(const Var& a);

/// Registers an arbitrary node. The node requires a gradient when any input
/// does; backward() then fails if `adjoint` is empty.
Var make_node(std::string op, std::vector<Var> inputs, Tensor value, Adjoint adjoint);

enum class ElementwiseOp { Add, Sub, Mul, Div, Relu, Exp, Neg, Scale, AddScalar, Sigmoid, Tanh, Sqrt };

/// Binary ops accept `b` with a's shape or any shape that broadcasts to it
/// (right-aligned, size-1 or matching dimensions). Unary ops ignore `b`;
/// Scale and AddScalar use `c`.
Var elementwise(ElementwiseOp op, const Var& a, const Var& b = nullptr, double c = 0.0);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var relu(const Var& a);
Var exp(const Var& a);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var sqrt(const Var& a);

enum class ReduceOp { Sum, Mean, Max };

/// Reduction along one axis. Max routes the gradient to the first maximal
/// entry (lowest index).
Var reduce(ReduceOp op, const Var& a, std::size_t axis, bool keepdims = false);
Var sum_all(const Var& a);
Var mean_all(const Var& a);

/// [m,k]x[k,n], [B,m,k]x[k,n] (shared right operand) or [B,m,k]x[B,k,n].
Var matmul(const Var& a, const Var& b);
/// Swaps the last two axes.
Var transpose(const Var& a);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length);
Var reshape(const Var& a, Shape shape);

using Gradients = std::map<std::string, Tensor>;

/// Reverse sweep from a scalar output. Returns the gradient of every named
/// leaf reachable from `output`; leaves sharing a name are summed. The graph
/// cannot be differentiated again afterwards.
Gradients backward(const Var& output);

/// Max over entries of |analytic - central| / max(1, |central|), where the
/// analytic gradient of the scalar function f comes from backward().
double finite_diff_check(const std::function<Var(const Var&)>& f, const Tensor& x,
                         double h = 1e-5);

}  // namespace icnn
