#include "nocsfit/diffcore/tape.hpp"

#include "nocsfit/error.hpp"

namespace nf {

const Tensor2& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor2 value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(Parameter& p) {
  Node node;
  node.value = p.value;
  node.needs_grad = true;
  node.param = &p;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor2 value, std::initializer_list<Var> operands, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (const auto& v : operands) {
    if (&v.tape() != this) throw Error(ErrorCode::ShapeMismatch, "operands recorded on different tapes");
    node.needs_grad = node.needs_grad || nodes_[v.id()].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Tensor2& Tape::grad_buffer(const Var& v) {
  Node& n = nodes_[v.id()];
  if (!n.has_grad) {
    n.grad = Tensor2(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(const Var& v, const Tensor2& g) {
  if (!nodes_[v.id()].needs_grad) return;
  Tensor2& buf = grad_buffer(v);
  if (!buf.same_shape(g)) throw Error(ErrorCode::ShapeMismatch, "adjoint shape differs from node shape");
  buf.map() += g.map();
}

void Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw Error(ErrorCode::ShapeMismatch, "loss recorded on a different tape");
  const Tensor2& lv = nodes_[loss.id()].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw Error(ErrorCode::NonScalarLoss,
                "loss is " + std::to_string(lv.rows()) + "x" + std::to_string(lv.cols()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor2();
  }
  grad_buffer(loss)(0, 0) = 1.0;

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.needs_grad) continue;
    if (n.param != nullptr) {
      n.param->grad.map() += n.grad.map();
    } else if (n.backward) {
      n.backward(*this, n.value, n.grad);
    }
  }
}

}  // namespace nf
