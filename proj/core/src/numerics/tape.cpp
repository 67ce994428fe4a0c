#include "vqmir/numerics/tape.hpp"

#include "vqmir/error.hpp"

namespace vqmir {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite constant recorded on tape");
  Node node;
  node.op = "constant";
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  if (auto it = param_leaves_.find(&p); it != param_leaves_.end()) return Var{this, it->second};
  if (!p.value().all_finite()) throw NumericError("parameter '" + p.name() + "' holds non-finite values");
  Node node;
  node.op = "param:" + p.name();
  node.value = p.value();
  node.requires_grad = true;
  node.param = &p;
  nodes_.push_back(std::move(node));
  param_leaves_[&p] = nodes_.size() - 1;
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(std::string op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError("op '" + op + "' produced a non-finite value");
  Node node;
  node.op = std::move(op);
  node.value = std::move(value);
  for (std::size_t id : inputs) {
    if (id >= nodes_.size()) throw Error("op '" + node.op + "' references an unknown tape node");
    node.requires_grad = node.requires_grad || nodes_[id].requires_grad;
  }
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_.at(id);
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape());
    node.has_grad = true;
  }
  return node.grad;
}

const Tensor* Tape::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  return node.has_grad ? &node.grad : nullptr;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw Error("backward called with a value from another tape");
  if (backward_done_) throw Error("backward already ran on this tape; build a new tape for the next step");
  const Node& root = nodes_.at(loss.id);
  if (root.value.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(root.value.shape()));
  }
  backward_done_ = true;

  // Refuse silent accumulation before touching anything.
  for (const auto& [p, id] : param_leaves_) {
    (void)id;
    if (p->has_grad()) {
      throw Error("parameter '" + p->name() + "' still holds a gradient; call zero_grad() between steps");
    }
  }

  grad_buffer(loss.id).fill(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.requires_grad) continue;
    backward_order_.push_back(i);
    // Closures only write into inputs, which precede node i, so node.grad is
    // never aliased. nodes_ does not grow during backward.
    if (node.backward) node.backward(*this, node.grad);
  }

  for (const auto& [p, id] : param_leaves_) {
    Node& node = nodes_[id];
    p->grad_ = node.has_grad ? node.grad : Tensor(p->value().shape());
    p->has_grad_ = true;
  }
}

}  // namespace vqmir
