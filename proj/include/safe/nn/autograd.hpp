#pragma once

#include <functional>
#include <vector>

#include "safe/tensor.hpp"

namespace safe::nn {

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape;
using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking
/// the node list backwards is a valid topological order. Nodes whose
/// parents all lack gradients store no closure, so running a model on a
/// tape built only from constants/params without sinks is plain inference.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Differentiable leaf owning its value (e.g. an input image under test).
  Var input(Tensor value);
  /// Leaf referencing external storage. If `grad_sink` is non-null the
  /// gradient is added into it during backward(); `value` must outlive the tape.
  Var param(const Tensor& value, Tensor* grad_sink = nullptr);

  Var record(Tensor value, std::vector<Var> parents, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const;
  /// Gradient buffer of `v` (zero-filled on first use).
  Tensor& grad(Var v);
  const Tensor& grad_or_empty(Var v) const;

  /// Seeds d(out) = seed and propagates to every differentiable node.
  void backward(Var out, const Tensor& seed);
  /// Seeds with ones (out must be a single element).
  void backward(Var out);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor own;
    const Tensor* ref = nullptr;
    Tensor grad;
    Tensor* sink = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

}  // namespace safe::nn
