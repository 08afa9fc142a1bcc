#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "todsynth/numerics/tensor.hpp"

namespace todsynth {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// tape that produced it is alive.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  bool needs_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

// Define-by-run reverse-mode tape. Build one per forward pass; confined to a
// single thread. Operations are replayed in exact reverse recording order and
// gradients accumulate additively across fan-out.
class Tape {
 public:
  // Whether model parameters bound through param() receive gradients.
  enum class ParamGrads { Track, Ignore };
  // Receives d(loss)/d(output) for the node being replayed.
  using BackwardFn = std::function<void(Tape&, std::span<const float> out_grad)>;

  explicit Tape(ParamGrads mode = ParamGrads::Track) : param_mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf bound by reference; tracked iff t.requires_grad(). backward() writes
  // d(loss)/d(t) into t.grad().
  Var variable(Tensor& t);
  // Model parameter bound by reference. Tracked iff the tape tracks params and
  // t.requires_grad(); gradients are exported with accumulate_param_grads().
  // Repeated binds of the same tensor return the same node.
  Var param(const Tensor& t);
  // Owned, untracked value.
  Var constant(Tensor t);

  // Records an op result. `fn` is only kept when some input needs a gradient.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const { return nodes_[v.id_].needs_grad; }
  // Zero-initialised on first access during backward.
  std::span<float> grad_buffer(Var v);
  // Gradient of the last backward() loss w.r.t. v; empty if v did not receive one.
  std::span<const float> grad(Var v) const;

  void backward(Var loss);
  void accumulate_param_grads(ParameterSet& params) const;

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor* sink = nullptr;
    bool needs_grad = false;
    std::vector<float> grad;
    BackwardFn backward;
  };
  Var push(Node node);

  ParamGrads param_mode_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::uint32_t> param_nodes_;
  bool backward_done_ = false;
};

}  // namespace todsynth
