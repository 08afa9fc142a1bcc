#include "todsynth/numerics/tape.hpp"

#include <algorithm>

#include "todsynth/errors.hpp"

namespace todsynth {

const Tensor& Var::value() const { return tape_->value(*this); }
bool Var::needs_grad() const { return tape_->needs_grad(*this); }

Var Tape::push(Node node) {
  if (backward_done_) throw ContractError("cannot record on a tape after backward()");
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::variable(Tensor& t) {
  Node n;
  n.ref = &t;
  n.needs_grad = t.requires_grad();
  n.sink = n.needs_grad ? &t : nullptr;
  return push(std::move(n));
}

Var Tape::param(const Tensor& t) {
  if (auto it = param_nodes_.find(&t); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.ref = &t;
  n.needs_grad = param_mode_ == ParamGrads::Track && t.requires_grad();
  Var v = push(std::move(n));
  param_nodes_.emplace(&t, v.id());
  return v;
}

Var Tape::constant(Tensor t) {
  Node n;
  n.owned = std::move(t);
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw ContractError("operands recorded on different tapes");
    n.needs_grad = n.needs_grad || nodes_[in.id()].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_[v.id_];
  return n.ref ? *n.ref : n.owned;
}

std::span<float> Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id_];
  if (n.grad.empty()) n.grad.assign(value(v).numel(), 0.0f);
  return n.grad;
}

std::span<const float> Tape::grad(Var v) const { return nodes_[v.id_].grad; }

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("loss was recorded on a different tape");
  if (value(loss).numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(value(loss).shape()));
  }
  if (backward_done_) throw ContractError("backward() already ran on this tape");
  backward_done_ = true;
  if (!nodes_[loss.id_].needs_grad) return;
  grad_buffer(loss)[0] = 1.0f;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    // The closure may allocate grad buffers of earlier nodes; `n.grad` stays put
    // because nodes_ is not resized during backward.
    n.backward(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.sink && !n.grad.empty()) n.sink->accumulate_grad(n.grad);
  }
}

void Tape::accumulate_param_grads(ParameterSet& params) const {
  for (auto& t : params.tensors()) {
    auto it = param_nodes_.find(&t);
    if (it == param_nodes_.end()) continue;
    const Node& n = nodes_[it->second];
    if (!n.grad.empty()) t.accumulate_grad(n.grad);
  }
}

}  // namespace todsynth
