#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "morphpool/tensor.hpp"

MORPHPOOL_BEGIN_NAMESPACE

namespace ag {

using NodeId = std::size_t;

class Tape;

/// Handle to a node on a tape. Cheap to copy; the tape owns the value.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Handed to a node's backward rule. Gradient buffers for inputs are
/// allocated lazily and zero-initialised; inputs that do not need a
/// gradient yield nullptr.
class GradSink {
 public:
  Tensor* grad(std::size_t input_slot);
  std::size_t inputs() const { return inputs_.size(); }

 private:
  friend class Tape;
  GradSink(const Tape& tape, std::span<const NodeId> inputs, std::vector<std::optional<Tensor>>& grads)
      : tape_(tape), inputs_(inputs), grads_(grads) {}

  const Tape& tape_;
  std::span<const NodeId> inputs_;
  std::vector<std::optional<Tensor>>& grads_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

/// Gradients produced by one backward pass, indexed by node.
class Gradients {
 public:
  /// nullptr when the node received no gradient.
  const Tensor* find(Var v) const;
  /// Gradient of a node; zeros when it received none.
  Tensor at(Var v) const;

 private:
  friend class Tape;
  std::vector<std::optional<Tensor>> grads_;
  std::vector<Shape> shapes_;
};

/// Reverse-mode record. Nodes are appended in evaluation order, so every
/// node's inputs precede it. backward() does not mutate the tape and may be
/// run repeatedly with identical results.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false, std::string name = {});
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an op node. The backward rule is dropped when no input needs
  /// a gradient.
  Var record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Mixes the discrete choices an op made (argmax offsets, relu masks) into
  /// a signature used to detect kinks during finite-difference checks.
  void note_selection(std::span<const std::uint8_t> bytes);
  std::uint64_t selection_signature() const { return selection_hash_; }
  void set_track_selections(bool on) { track_selections_ = on; }
  bool tracks_selections() const { return track_selections_; }

  Gradients backward(Var loss) const;

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::string_view op_name(Var v) const { return nodes_.at(v.id).op; }
  std::span<const NodeId> inputs(Var v) const { return nodes_.at(v.id).inputs; }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class GradSink;

  struct Node {
    std::string op;
    Tensor value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::uint64_t selection_hash_ = 14695981039346656037ull;
  bool track_selections_ = false;
};

// Generic differentiable ops. Op families with their own modules (morph,
// nn) declare their differentiable wrappers next to their kernels.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Scalar factor);
Var sum(Var a);
Var mean(Var a);
/// sum(a * weights) with a constant weight tensor.
Var weighted_sum(Var a, const Tensor& weights);
/// Max over the spatial axes of every (n, c) plane; first maximum wins.
Var max_reduce(Var a);

}  // namespace ag

MORPHPOOL_END_NAMESPACE
