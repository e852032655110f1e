#include "icnn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include <Eigen/Core>
#include <fmt/format.h>

namespace icnn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

bool any_requires_grad(const std::vector<Var>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Var& v) { return v && v->requires_grad; });
}

void require(const Var& v, const char* what) {
  if (!v) throw ContractError(std::string(what) + ": null operand");
}

// How the elements of b map onto the (larger or equal) shape of a.
struct Broadcast {
  enum class Kind { Same, Scalar, Suffix, LastAxisOne, General } kind;
  std::size_t period = 1;          // Suffix: b.size(); LastAxisOne: a.shape.back()
  std::vector<std::size_t> index;  // General: b index per a element

  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Kind::Same: return i;
      case Kind::Scalar: return 0;
      case Kind::Suffix: return i % period;
      case Kind::LastAxisOne: return i / period;
      case Kind::General: return index[i];
    }
    return 0;
  }
};

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return {Broadcast::Kind::Same, 1, {}};
  if (shape_size(b) == 1) return {Broadcast::Kind::Scalar, 1, {}};
  auto fail = [&] {
    throw DimensionError(fmt::format("{}: cannot broadcast {} to {}", op, shape_str(b),
                                     shape_str(a)));
  };
  if (b.size() > a.size()) fail();
  const std::size_t off = a.size() - b.size();
  bool suffix = true;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] != a[off + i]) suffix = false;
    if (b[i] != a[off + i] && b[i] != 1) fail();
  }
  if (suffix) return {Broadcast::Kind::Suffix, shape_size(b), {}};
  if (b.size() == a.size() && b.back() == 1 &&
      std::equal(a.begin(), a.end() - 1, b.begin()))
    return {Broadcast::Kind::LastAxisOne, a.back(), {}};

  Broadcast out{Broadcast::Kind::General, 1, {}};
  std::vector<std::size_t> bstride(a.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = b.size(); i-- > 0;) {
    bstride[off + i] = b[i] == 1 ? 0 : s;
    s *= b[i];
  }
  const std::size_t n = shape_size(a);
  out.index.resize(n);
  std::vector<std::size_t> counter(a.size(), 0);
  std::size_t bi = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out.index[i] = bi;
    for (std::size_t ax = a.size(); ax-- > 0;) {
      ++counter[ax];
      bi += bstride[ax];
      if (counter[ax] < a[ax]) break;
      bi -= bstride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return out;
}

const char* op_name(ElementwiseOp op) {
  switch (op) {
    case ElementwiseOp::Add: return "add";
    case ElementwiseOp::Sub: return "sub";
    case ElementwiseOp::Mul: return "mul";
    case ElementwiseOp::Div: return "div";
    case ElementwiseOp::Relu: return "relu";
    case ElementwiseOp::Exp: return "exp";
    case ElementwiseOp::Neg: return "neg";
    case ElementwiseOp::Scale: return "scale";
    case ElementwiseOp::AddScalar: return "add_scalar";
    case ElementwiseOp::Sigmoid: return "sigmoid";
    case ElementwiseOp::Tanh: return "tanh";
    case ElementwiseOp::Sqrt: return "sqrt";
  }
  return "?";
}

bool is_binary(ElementwiseOp op) {
  return op == ElementwiseOp::Add || op == ElementwiseOp::Sub || op == ElementwiseOp::Mul ||
         op == ElementwiseOp::Div;
}

Var binary(ElementwiseOp op, const Var& a, const Var& b) {
  require(b, op_name(op));
  const auto& av = a->value;
  const auto& bv = b->value;
  auto bc = make_broadcast(av.shape(), bv.shape(), op_name(op));
  Tensor out(av.shape());
  const std::size_t n = av.size();
  switch (op) {
    case ElementwiseOp::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[bc(i)];
      break;
    case ElementwiseOp::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[bc(i)];
      break;
    case ElementwiseOp::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[bc(i)];
      break;
    case ElementwiseOp::Div:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] / bv[bc(i)];
      break;
    default: break;
  }
  Adjoint adj = [op, bc = std::move(bc)](Node& self) {
    const auto& g = self.grad_value();
    const Var& a = self.inputs[0];
    const Var& b = self.inputs[1];
    const std::size_t n = g.size();
    if (a->requires_grad) {
      auto& ga = a->grad();
      switch (op) {
        case ElementwiseOp::Add:
        case ElementwiseOp::Sub:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
          break;
        case ElementwiseOp::Mul:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b->value[bc(i)];
          break;
        case ElementwiseOp::Div:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / b->value[bc(i)];
          break;
        default: break;
      }
    }
    if (b->requires_grad) {
      auto& gb = b->grad();
      switch (op) {
        case ElementwiseOp::Add:
          for (std::size_t i = 0; i < n; ++i) gb[bc(i)] += g[i];
          break;
        case ElementwiseOp::Sub:
          for (std::size_t i = 0; i < n; ++i) gb[bc(i)] -= g[i];
          break;
        case ElementwiseOp::Mul:
          for (std::size_t i = 0; i < n; ++i) gb[bc(i)] += g[i] * a->value[i];
          break;
        case ElementwiseOp::Div:
          for (std::size_t i = 0; i < n; ++i) {
            const double bi = b->value[bc(i)];
            gb[bc(i)] -= g[i] * a->value[i] / (bi * bi);
          }
          break;
        default: break;
      }
    }
  };
  return make_node(op_name(op), {a, b}, std::move(out), std::move(adj));
}

Var unary(ElementwiseOp op, const Var& a, double c) {
  const auto& av = a->value;
  Tensor out(av.shape());
  const std::size_t n = av.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[i];
    switch (op) {
      case ElementwiseOp::Relu: out[i] = x > 0.0 || std::isnan(x) ? x : 0.0; break;
      case ElementwiseOp::Exp: out[i] = std::exp(x); break;
      case ElementwiseOp::Neg: out[i] = -x; break;
      case ElementwiseOp::Scale: out[i] = c * x; break;
      case ElementwiseOp::AddScalar: out[i] = x + c; break;
      case ElementwiseOp::Sigmoid: out[i] = 1.0 / (1.0 + std::exp(-x)); break;
      case ElementwiseOp::Tanh: out[i] = std::tanh(x); break;
      case ElementwiseOp::Sqrt: out[i] = std::sqrt(x); break;
      default: break;
    }
  }
  Adjoint adj = [op, c](Node& self) {
    const Var& a = self.inputs[0];
    if (!a->requires_grad) return;
    const auto& g = self.grad_value();
    const auto& y = self.value;
    const auto& x = a->value;
    auto& ga = a->grad();
    const std::size_t n = g.size();
    for (std::size_t i = 0; i < n; ++i) {
      switch (op) {
        // subgradient 0 at the kink
        case ElementwiseOp::Relu: ga[i] += x[i] > 0.0 ? g[i] : 0.0; break;
        case ElementwiseOp::Exp: ga[i] += g[i] * y[i]; break;
        case ElementwiseOp::Neg: ga[i] -= g[i]; break;
        case ElementwiseOp::Scale: ga[i] += c * g[i]; break;
        case ElementwiseOp::AddScalar: ga[i] += g[i]; break;
        case ElementwiseOp::Sigmoid: ga[i] += g[i] * y[i] * (1.0 - y[i]); break;
        case ElementwiseOp::Tanh: ga[i] += g[i] * (1.0 - y[i] * y[i]); break;
        case ElementwiseOp::Sqrt: ga[i] += g[i] / (2.0 * y[i]); break;
        default: break;
      }
    }
  };
  return make_node(op_name(op), {a}, std::move(out), std::move(adj));
}

// Splits a shape around `axis` into outer x len x inner.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit out;
  for (std::size_t i = 0; i < axis; ++i) out.outer *= s[i];
  out.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

void Parameter::project() {
  if (!non_negative) return;
  for (double& v : value.vec())
    if (!(v >= 0.0)) v = 0.0;
}

bool Parameter::satisfies_constraint() const {
  if (!non_negative) return true;
  return std::all_of(value.vec().begin(), value.vec().end(), [](double v) { return v >= 0.0; });
}

Tensor& Node::grad() {
  if (grad_.size() == 0) grad_ = Tensor(value.shape(), 0.0);
  return grad_;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->op = "constant";
  n->value = std::move(value);
  return n;
}

Var leaf(Tensor value, std::string name) {
  auto n = std::make_shared<Node>();
  n->op = "leaf";
  n->value = std::move(value);
  n->name = std::move(name);
  n->requires_grad = true;
  return n;
}

Var param(const Parameter& p) { return leaf(p.value, p.name); }

Var detach(const Var& a) {
  require(a, "detach");
  return constant(a->value);
}

Var make_node(std::string op, std::vector<Var> inputs, Tensor value, Adjoint adjoint) {
  auto n = std::make_shared<Node>();
  n->op = std::move(op);
  n->requires_grad = any_requires_grad(inputs);
  n->inputs = std::move(inputs);
  n->value = std::move(value);
  if (n->requires_grad) n->adjoint = std::move(adjoint);
  return n;
}

Var elementwise(ElementwiseOp op, const Var& a, const Var& b, double c) {
  require(a, op_name(op));
  return is_binary(op) ? binary(op, a, b) : unary(op, a, c);
}

Var add(const Var& a, const Var& b) { return elementwise(ElementwiseOp::Add, a, b); }
Var sub(const Var& a, const Var& b) { return elementwise(ElementwiseOp::Sub, a, b); }
Var mul(const Var& a, const Var& b) { return elementwise(ElementwiseOp::Mul, a, b); }
Var div(const Var& a, const Var& b) { return elementwise(ElementwiseOp::Div, a, b); }
Var relu(const Var& a) { return elementwise(ElementwiseOp::Relu, a); }
Var exp(const Var& a) { return elementwise(ElementwiseOp::Exp, a); }
Var neg(const Var& a) { return elementwise(ElementwiseOp::Neg, a); }
Var scale(const Var& a, double c) { return elementwise(ElementwiseOp::Scale, a, nullptr, c); }
Var add_scalar(const Var& a, double c) {
  return elementwise(ElementwiseOp::AddScalar, a, nullptr, c);
}
Var sigmoid(const Var& a) { return elementwise(ElementwiseOp::Sigmoid, a); }
Var tanh(const Var& a) { return elementwise(ElementwiseOp::Tanh, a); }
Var sqrt(const Var& a) { return elementwise(ElementwiseOp::Sqrt, a); }

Var reduce(ReduceOp op, const Var& a, std::size_t axis, bool keepdims) {
  require(a, "reduce");
  const auto& s = a->value.shape();
  if (axis >= s.size())
    throw DimensionError(fmt::format("reduce: axis {} out of range for {}", axis, shape_str(s)));
  const auto sp = split_at(s, axis);
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
    else if (keepdims) out_shape.push_back(1);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape, 0.0);
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::Max) argmax.resize(out.size());
  const auto& x = a->value;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t dst = o * sp.inner + in;
      const std::size_t base = o * sp.len * sp.inner + in;
      if (op == ReduceOp::Max) {
        std::size_t best = 0;
        double bv = x[base];
        for (std::size_t l = 1; l < sp.len; ++l) {
          const double v = x[base + l * sp.inner];
          if (v > bv) {
            bv = v;
            best = l;
          }
        }
        out[dst] = bv;
        argmax[dst] = best;
      } else {
        double acc = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) acc += x[base + l * sp.inner];
        out[dst] = op == ReduceOp::Mean ? acc / static_cast<double>(sp.len) : acc;
      }
    }
  }
  const char* tag = op == ReduceOp::Sum ? "sum" : op == ReduceOp::Mean ? "mean" : "max";
  Adjoint adj = [op, sp, argmax = std::move(argmax)](Node& self) {
    const Var& a = self.inputs[0];
    const auto& g = self.grad_value();
    auto& ga = a->grad();
    const double w = op == ReduceOp::Mean ? 1.0 / static_cast<double>(sp.len) : 1.0;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t dst = o * sp.inner + in;
        const std::size_t base = o * sp.len * sp.inner + in;
        if (op == ReduceOp::Max) {
          ga[base + argmax[dst] * sp.inner] += g[dst];
        } else {
          for (std::size_t l = 0; l < sp.len; ++l) ga[base + l * sp.inner] += w * g[dst];
        }
      }
    }
  };
  return make_node(tag, {a}, std::move(out), std::move(adj));
}

Var sum_all(const Var& a) {
  require(a, "sum_all");
  return reduce(ReduceOp::Sum, reshape(a, Shape{a->value.size()}), 0);
}

Var mean_all(const Var& a) {
  require(a, "mean_all");
  return reduce(ReduceOp::Mean, reshape(a, Shape{a->value.size()}), 0);
}

Var matmul(const Var& a, const Var& b) {
  require(a, "matmul");
  require(b, "matmul");
  const auto& as = a->value.shape();
  const auto& bs = b->value.shape();
  auto mismatch = [&] {
    return DimensionError(
        fmt::format("matmul: incompatible shapes {} and {}", shape_str(as), shape_str(bs)));
  };
  if (as.size() < 2 || as.size() > 3 || bs.size() < 2 || bs.size() > 3) throw mismatch();
  if (bs.size() == 3 && as.size() != 3) throw mismatch();
  const std::size_t k = as.back();
  const std::size_t kb = bs[bs.size() - 2];
  if (k != kb) throw mismatch();
  const std::size_t n = bs.back();
  const bool batched_b = bs.size() == 3;
  if (batched_b && as[0] != bs[0]) throw mismatch();

  Shape out_shape = as;
  out_shape.back() = n;
  Tensor out(out_shape, 0.0);
  if (!batched_b) {
    // Shared right operand: fold the batch into the row dimension.
    const std::size_t m = a->value.size() / k;
    MatMap(out.data().data(), m, n).noalias() =
        ConstMatMap(a->value.data().data(), m, k) * ConstMatMap(b->value.data().data(), k, n);
  } else {
    const std::size_t batch = as[0], m = as[1];
    for (std::size_t i = 0; i < batch; ++i) {
      MatMap(out.data().data() + i * m * n, m, n).noalias() =
          ConstMatMap(a->value.data().data() + i * m * k, m, k) *
          ConstMatMap(b->value.data().data() + i * k * n, k, n);
    }
  }
  Adjoint adj = [k, n, batched_b](Node& self) {
    const Var& a = self.inputs[0];
    const Var& b = self.inputs[1];
    const auto& g = self.grad_value();
    if (!batched_b) {
      const std::size_t m = a->value.size() / k;
      ConstMatMap G(g.data().data(), m, n);
      if (a->requires_grad)
        MatMap(a->grad().data().data(), m, k).noalias() +=
            G * ConstMatMap(b->value.data().data(), k, n).transpose();
      if (b->requires_grad)
        MatMap(b->grad().data().data(), k, n).noalias() +=
            ConstMatMap(a->value.data().data(), m, k).transpose() * G;
    } else {
      const std::size_t batch = a->value.dim(0), m = a->value.dim(1);
      for (std::size_t i = 0; i < batch; ++i) {
        ConstMatMap G(g.data().data() + i * m * n, m, n);
        if (a->requires_grad)
          MatMap(a->grad().data().data() + i * m * k, m, k).noalias() +=
              G * ConstMatMap(b->value.data().data() + i * k * n, k, n).transpose();
        if (b->requires_grad)
          MatMap(b->grad().data().data() + i * k * n, k, n).noalias() +=
              ConstMatMap(a->value.data().data() + i * m * k, m, k).transpose() * G;
      }
    }
  };
  return make_node("matmul", {a, b}, std::move(out), std::move(adj));
}

Var transpose(const Var& a) {
  require(a, "transpose");
  const auto& s = a->value.shape();
  if (s.size() < 2 || s.size() > 3)
    throw DimensionError("transpose: expected rank 2 or 3, got " + shape_str(s));
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t m = s[s.size() - 2], n = s.back();
  Shape out_shape = s;
  std::swap(out_shape[out_shape.size() - 2], out_shape.back());
  Tensor out(out_shape);
  for (std::size_t b = 0; b < batch; ++b)
    MatMap(out.data().data() + b * m * n, n, m) =
        ConstMatMap(a->value.data().data() + b * m * n, m, n).transpose();
  Adjoint adj = [batch, m, n](Node& self) {
    const Var& a = self.inputs[0];
    auto& ga = a->grad();
    const auto& g = self.grad_value();
    for (std::size_t b = 0; b < batch; ++b)
      MatMap(ga.data().data() + b * m * n, m, n) +=
          ConstMatMap(g.data().data() + b * m * n, n, m).transpose();
  };
  return make_node("transpose", {a}, std::move(out), std::move(adj));
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no operands");
  for (const auto& p : parts) require(p, "concat");
  const Shape& first = parts[0]->value.shape();
  if (axis >= first.size())
    throw DimensionError(fmt::format("concat: axis {} out of range for {}", axis,
                                     shape_str(first)));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p->value.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) ok = false;
    if (!ok)
      throw DimensionError(fmt::format("concat: {} incompatible with {} along axis {}",
                                       shape_str(s), shape_str(first), axis));
    out_shape[axis] += s[axis];
  }
  const auto osp = split_at(out_shape, axis);
  Tensor out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto sp = split_at(p->value.shape(), axis);
    const std::size_t chunk = sp.len * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(p->value.data().begin() + o * chunk, chunk,
                  out.data().begin() + o * osp.len * osp.inner + off * osp.inner);
    off += sp.len;
  }
  Adjoint adj = [axis, osp, offsets = std::move(offsets)](Node& self) {
    const auto& g = self.grad_value();
    for (std::size_t pi = 0; pi < self.inputs.size(); ++pi) {
      const Var& p = self.inputs[pi];
      if (!p->requires_grad) continue;
      const auto sp = split_at(p->value.shape(), axis);
      const std::size_t chunk = sp.len * sp.inner;
      auto& gp = p->grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const std::size_t src = o * osp.len * osp.inner + offsets[pi] * osp.inner;
        for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[src + i];
      }
    }
  };
  return make_node("concat", parts, std::move(out), std::move(adj));
}

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length) {
  require(a, "slice");
  const Shape& s = a->value.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis])
    throw DimensionError(fmt::format("slice: [{}, {}) on axis {} out of range for {}", start,
                                     start + length, axis, shape_str(s)));
  const auto sp = split_at(s, axis);
  Shape out_shape = s;
  out_shape[axis] = length;
  Tensor out(out_shape);
  const std::size_t chunk = length * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(a->value.data().begin() + o * sp.len * sp.inner + start * sp.inner, chunk,
                out.data().begin() + o * chunk);
  Adjoint adj = [sp, start, chunk](Node& self) {
    const auto& g = self.grad_value();
    auto& ga = self.inputs[0]->grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const std::size_t dst = o * sp.len * sp.inner + start * sp.inner;
      for (std::size_t i = 0; i < chunk; ++i) ga[dst + i] += g[o * chunk + i];
    }
  };
  return make_node("slice", {a}, std::move(out), std::move(adj));
}

Var reshape(const Var& a, Shape shape) {
  require(a, "reshape");
  Tensor out = a->value.reshaped(std::move(shape));
  Adjoint adj = [](Node& self) {
    auto& ga = self.inputs[0]->grad();
    const auto& g = self.grad_value();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  };
  return make_node("reshape", {a}, std::move(out), std::move(adj));
}

Gradients backward(const Var& output) {
  require(output, "backward");
  if (output->value.size() != 1)
    throw ContractError("backward: output must be scalar, got shape " +
                        shape_str(output->value.shape()));
  Gradients result;
  if (!output->requires_grad) return result;

  // Iterative post-order DFS over nodes that carry gradients.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{output.get(), 0}};
  seen.insert(output.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->consumed)
      throw ContractError("backward: graph already differentiated (node '" + n->op + "')");
    if (!n->inputs.empty() && !n->adjoint)
      throw ContractError("backward: no adjoint registered for op '" + n->op + "'");
  }

  output->grad()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    n->consumed = true;
    if (n->inputs.empty()) {
      if (!n->name.empty()) {
        auto [pos, inserted] = result.try_emplace(n->name, n->grad());
        if (!inserted) {
          const auto& g = n->grad();
          for (std::size_t i = 0; i < g.size(); ++i) pos->second[i] += g[i];
        }
      }
      continue;
    }
    n->grad();  // nodes reached only through zero paths still get a buffer
    n->adjoint(*n);
    n->adjoint = nullptr;
  }
  return result;
}

double finite_diff_check(const std::function<Var(const Var&)>& f, const Tensor& x, double h) {
  auto x_leaf = leaf(x, "x");
  auto y = f(x_leaf);
  if (!y->value.all_finite()) throw NumericError("finite_diff_check: f(x) is not finite");
  auto grads = backward(y);
  Tensor analytic = grads.count("x") ? grads.at("x") : Tensor(x.shape(), 0.0);

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(constant(probe))->value.item();
    probe[i] = x[i] - h;
    const double fm = f(constant(probe))->value.item();
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError(fmt::format("finite_diff_check: f not finite near entry {}", i));
    const double central = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - central) / std::max(1.0, std::abs(central)));
  }
  return worst;
}

}  // namespace icnn
