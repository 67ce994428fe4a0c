#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vqmir/numerics/tensor.hpp"

namespace vqmir {

class Tape;

// A trainable tensor. Gradients land in grad() after Tape::backward and must
// be cleared with zero_grad() before the next backward pass touches it.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor init) : name_(std::move(name)), value_(std::move(init)) {}

  const std::string& name() const { return name_; }
  Tensor& value() { return value_; }
  const Tensor& value() const { return value_; }
  const Tensor& grad() const { return grad_; }
  Tensor& mutable_grad() { return grad_; }
  bool has_grad() const { return has_grad_; }
  void zero_grad() {
    grad_ = Tensor();
    has_grad_ = false;
  }

 private:
  friend class Tape;
  std::string name_;
  Tensor value_;
  Tensor grad_;
  bool has_grad_ = false;
};

// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Records for ops with non-differentiable loci (Huber kink, ReLU at 0,
// nearest-code switches). Gradient checking uses them to exclude coordinates
// whose finite-difference stencil would straddle a kink.
struct KinkRecord {
  std::string op;
  std::vector<double> distance;  // signed distance of each element to the kink
  std::vector<int> state;        // discrete branch taken by each element
  double band = 0.0;
};

// Ordered record of differentiable ops. Backward visits nodes in exact reverse
// order of recording; each node pushes its gradient into its inputs once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf bound to a parameter; a parameter used several times maps to one leaf.
  Var param(Parameter& p);

  // Appends an op result. `inputs` are the node ids the backward closure may
  // write gradients into. Throws NumericError on non-finite output.
  Var record(std::string op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  void record_kink(KinkRecord record) { kinks_.push_back(std::move(record)); }
  const std::vector<KinkRecord>& kinks() const { return kinks_; }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of node `id`, zero-initialized on first access.
  Tensor& grad_buffer(std::size_t id);
  // Gradient of the loss w.r.t. a recorded value, or nullptr when none flowed.
  const Tensor* grad(Var v) const;

  // Reverse-mode pass from a one-element loss. Parameter leaves receive their
  // gradients; a second call on the same tape is an error.
  void backward(Var loss);
  bool backward_done() const { return backward_done_; }
  // Node ids in the order backward visited them.
  const std::vector<std::size_t>& backward_order() const { return backward_order_; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_leaves_;
  std::vector<KinkRecord> kinks_;
  std::vector<std::size_t> backward_order_;
  bool backward_done_ = false;
};

}  // namespace vqmir
