#include "safe/nn/autograd.hpp"

#include <algorithm>

#include "safe/error.hpp"

namespace safe::nn {

Tape::Node& Tape::node(Var v) {
  require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), "invalid tape variable");
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), "invalid tape variable");
  return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::constant(Tensor value) {
  Node n;
  n.own = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::input(Tensor value) {
  Node n;
  n.own = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(const Tensor& value, Tensor* grad_sink) {
  Node n;
  n.ref = &value;
  n.sink = grad_sink;
  n.needs_grad = grad_sink != nullptr;
  if (grad_sink) {
    require(grad_sink->shape() == value.shape(), "gradient sink shape mismatch",
            ErrorKind::ShapeMismatch);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  Node n;
  n.own = std::move(value);
  n.needs_grad = std::any_of(parents.begin(), parents.end(),
                             [&](Var p) { return needs_grad(p); });
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const {
  const Node& n = node(v);
  return n.ref ? *n.ref : n.own;
}

bool Tape::needs_grad(Var v) const { return node(v).needs_grad; }

Tensor& Tape::grad(Var v) {
  Node& n = node(v);
  if (n.grad.size() != value(v).size() || n.grad.shape() != value(v).shape()) {
    n.grad = Tensor(value(v).shape());
  }
  return n.grad;
}

const Tensor& Tape::grad_or_empty(Var v) const { return node(v).grad; }

void Tape::backward(Var out, const Tensor& seed) {
  require(seed.shape() == value(out).shape(), "backward seed shape mismatch",
          ErrorKind::ShapeMismatch);
  if (!needs_grad(out)) return;
  Tensor& g = grad(out);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];

  for (int id = out.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) {
      // The closure may touch other nodes' grads; keep our grad alive by value.
      Tensor g_out = std::move(n.grad);
      n.grad = Tensor();
      n.backward(*this, g_out);
      n.grad = std::move(g_out);
    }
    if (n.sink) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*n.sink)[i] += n.grad[i];
    }
  }
}

void Tape::backward(Var out) {
  require(value(out).size() == 1, "backward() without seed needs a scalar output");
  backward(out, Tensor(value(out).shape(), 1.0));
}

}  // namespace safe::nn
