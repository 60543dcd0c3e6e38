#pragma once

#include <cstddef>
#include <deque>
#include <functional>

#include "nocsfit/diffcore/tensor.hpp"

namespace nf {

class Tape;

// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor2& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records primitives in execution order; backward() walks the record once in reverse.
class Tape {
 public:
  // Receives the node's output and its adjoint; pushes contributions to the operands.
  using BackwardFn = std::function<void(Tape&, const Tensor2& out, const Tensor2& out_grad)>;

  Var constant(Tensor2 value);
  Var parameter(Parameter& p);
  Var record(Tensor2 value, std::initializer_list<Var> operands, BackwardFn backward);

  // Accumulates d(loss)/d(param) into every reachable Parameter::grad.
  // Throws NonScalarLoss unless loss is 1x1.
  void backward(const Var& loss);

  const Tensor2& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }
  void accumulate(const Var& v, const Tensor2& g);
  // Direct access for backward kernels that scatter; allocates on first touch.
  Tensor2& grad_buffer(const Var& v);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor2 value;
    Tensor2 grad;
    bool needs_grad = false;
    bool has_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;  // stable addresses for Var::value() references
};

}  // namespace nf
