#include "morphpool/autograd.hpp"

#include <cstring>
#include <utility>

MORPHPOOL_BEGIN_NAMESPACE

namespace ag {

const Tensor& Var::value() const { return tape->value(*this); }

Tensor* GradSink::grad(std::size_t input_slot) {
  const NodeId id = inputs_[input_slot];
  const auto& node = tape_.nodes_[id];
  if (!node.requires_grad) return nullptr;
  auto& slot = grads_[id];
  if (!slot) slot.emplace(node.value.shape(), Scalar{0});
  return &*slot;
}

const Tensor* Gradients::find(Var v) const {
  if (v.id >= grads_.size() || !grads_[v.id]) return nullptr;
  return &*grads_[v.id];
}

Tensor Gradients::at(Var v) const {
  if (const Tensor* g = find(v)) return *g;
  return Tensor::zeros(shapes_.at(v.id));
}

Var Tape::leaf(Tensor value, bool requires_grad, std::string name) {
  nodes_.push_back(Node{name.empty() ? std::string("leaf") : std::move(name), std::move(value), {},
                        nullptr, requires_grad});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node{std::string(op), std::move(value), {}, nullptr, false};
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.tape != this || in.id >= nodes_.size()) {
      throw Error(ErrorCode::InvalidShape, "input of " + node.op + " belongs to another tape");
    }
    node.inputs.push_back(in.id);
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

void Tape::note_selection(std::span<const std::uint8_t> bytes) {
  // FNV-1a
  for (std::uint8_t b : bytes) {
    selection_hash_ ^= b;
    selection_hash_ *= 1099511628211ull;
  }
}

Gradients Tape::backward(Var loss) const {
  if (loss.tape != this) throw Error(ErrorCode::InvalidShape, "loss belongs to another tape");
  const Tensor& loss_value = nodes_.at(loss.id).value;
  if (loss_value.shape() != Shape{}) {
    throw Error(ErrorCode::NonScalarLoss, "loss has shape " + loss_value.shape().str());
  }
  Gradients result;
  result.grads_.resize(nodes_.size());
  result.shapes_.reserve(nodes_.size());
  for (const Node& n : nodes_) result.shapes_.push_back(n.value.shape());
  if (!nodes_[loss.id].requires_grad) return result;

  result.grads_[loss.id].emplace(Shape{}, Scalar{1});
  for (NodeId id = loss.id + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!node.backward || !result.grads_[id]) continue;
    GradSink sink(*this, node.inputs, result.grads_);
    node.backward(*result.grads_[id], sink);
  }
  return result;
}

namespace {

void require_same(const Var& a, const Var& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(op) + ": " + a.shape().str() + " vs " + b.shape().str());
  }
}

}  // namespace

Var add(Var a, Var b) {
  require_same(a, b, "add");
  return a.tape->record("add", elementwise(a.value(), b.value(), BinaryOp::add), {a, b},
                        [](const Tensor& g, GradSink& sink) {
                          if (Tensor* ga = sink.grad(0)) *ga += g;
                          if (Tensor* gb = sink.grad(1)) *gb += g;
                        });
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  return a.tape->record("sub", elementwise(a.value(), b.value(), BinaryOp::sub), {a, b},
                        [](const Tensor& g, GradSink& sink) {
                          if (Tensor* ga = sink.grad(0)) *ga += g;
                          if (Tensor* gb = sink.grad(1)) *gb += negate(g);
                        });
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  Tape* tape = a.tape;
  return tape->record("mul", elementwise(a.value(), b.value(), BinaryOp::mul), {a, b},
                      [a, b](const Tensor& g, GradSink& sink) {
                        if (Tensor* ga = sink.grad(0)) {
                          *ga += elementwise(g, b.value(), BinaryOp::mul);
                        }
                        if (Tensor* gb = sink.grad(1)) {
                          *gb += elementwise(g, a.value(), BinaryOp::mul);
                        }
                      });
}

Var scale(Var a, Scalar factor) {
  Tensor out = a.value();
  out *= factor;
  return a.tape->record("scale", std::move(out), {a}, [factor](const Tensor& g, GradSink& sink) {
    if (Tensor* ga = sink.grad(0)) {
      Tensor scaled = g;
      scaled *= factor;
      *ga += scaled;
    }
  });
}

Var sum(Var a) {
  return a.tape->record("sum", Tensor::scalar(a.value().sum()), {a},
                        [](const Tensor& g, GradSink& sink) {
                          if (Tensor* ga = sink.grad(0)) {
                            const Scalar v = g.item();
                            for (Scalar& x : ga->data()) x += v;
                          }
                        });
}

Var mean(Var a) {
  const auto count = static_cast<Scalar>(a.value().size());
  return a.tape->record("mean", Tensor::scalar(a.value().sum() / count), {a},
                        [count](const Tensor& g, GradSink& sink) {
                          if (Tensor* ga = sink.grad(0)) {
                            const Scalar v = g.item() / count;
                            for (Scalar& x : ga->data()) x += v;
                          }
                        });
}

Var weighted_sum(Var a, const Tensor& weights) {
  if (a.shape() != weights.shape()) {
    throw Error(ErrorCode::ShapeMismatch,
                "weighted_sum: " + a.shape().str() + " vs " + weights.shape().str());
  }
  const auto& x = a.value();
  Scalar acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * weights[i];
  return a.tape->record("weighted_sum", Tensor::scalar(acc), {a},
                        [weights](const Tensor& g, GradSink& sink) {
                          if (Tensor* ga = sink.grad(0)) {
                            const Scalar v = g.item();
                            for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += v * weights[i];
                          }
                        });
}

Var max_reduce(Var a) {
  const Tensor& x = a.value();
  const Shape& s = x.shape();
  Tensor out(Shape{s.n, s.c, 1, 1});
  std::vector<std::size_t> winners(static_cast<std::size_t>(s.n) * s.c);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      auto plane = x.plane(n, c);
      std::size_t best = 0;
      for (std::size_t i = 1; i < plane.size(); ++i) {
        if (plane[i] > plane[best]) best = i;
      }
      out(n, c, 0, 0) = plane[best];
      winners[static_cast<std::size_t>(n) * s.c + c] = x.offset(n, c, 0, 0) + best;
    }
  }
  if (a.tape->tracks_selections()) {
    std::vector<std::uint8_t> sig(winners.size() * sizeof(std::size_t));
    std::memcpy(sig.data(), winners.data(), sig.size());
    a.tape->note_selection(sig);
  }
  return a.tape->record("max_reduce", std::move(out), {a},
                        [winners = std::move(winners)](const Tensor& g, GradSink& sink) {
                          if (Tensor* ga = sink.grad(0)) {
                            for (std::size_t i = 0; i < winners.size(); ++i) {
                              (*ga)[winners[i]] += g[i];
                            }
                          }
                        });
}

}  // namespace ag

MORPHPOOL_END_NAMESPACE
