#include "morphpool/morph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

MORPHPOOL_BEGIN_NAMESPACE

namespace morph {

const char* to_string(SEKind kind) {
  switch (kind) {
    case SEKind::flat: return "flat";
    case SEKind::parabolic: return "parabolic";
    case SEKind::general: return "general";
  }
  return "?";
}

int pool_padding(int size, int stride) { return size > stride ? (size - stride + 1) / 2 : 0; }

namespace {

void check_size(int size) {
  if (size < 1 || size > kMaxWindow) {
    throw Error(ErrorCode::InvalidKernel, "window size " + std::to_string(size) + " outside [1, " +
                                              std::to_string(kMaxWindow) + "]");
  }
}

void check_weights(const Tensor& f, const Tensor& weights, int size) {
  const Shape& ws = weights.shape();
  if (ws.h != size || ws.w != size || ws.c != 1) {
    throw Error(ErrorCode::ShapeMismatch,
                "weights " + ws.str() + " do not describe a " + std::to_string(size) + "x" +
                    std::to_string(size) + " element");
  }
  if (ws.n != 1 && ws.n != f.shape().c) {
    throw Error(ErrorCode::ShapeMismatch,
                "weights cover " + std::to_string(ws.n) + " channels, input has " + std::to_string(f.shape().c));
  }
}

int out_dim(int dim, const Window& w) {
  return (dim + 2 * w.padding - w.size) / w.stride + 1;
}

// Shared max/min scan. For erosion the caller passes reflected weights and
// Less = true, computing min f - h'.
template <bool kErode>
MorphResult scan(const Tensor& f, const Tensor& weights, Window window) {
  check_size(window.size);
  if (window.stride < 1 || window.padding < 0) {
    throw Error(ErrorCode::InvalidKernel, "stride must be >= 1 and padding >= 0");
  }
  check_weights(f, weights, window.size);
  const Shape& in = f.shape();
  const int K = window.size;
  const int s = window.stride;
  const int p = window.padding;
  if (in.h + 2 * p < K || in.w + 2 * p < K) {
    throw Error(ErrorCode::InvalidShape, "window " + std::to_string(K) + " larger than padded input " + in.str());
  }
  const int oh = out_dim(in.h, window);
  const int ow = out_dim(in.w, window);
  Shape out_shape{in.n, in.c, oh, ow};

  MorphResult result{Tensor(out_shape),
                     ProvenanceMap{out_shape, K, s, p, in.h, in.w, std::vector<std::uint8_t>(out_shape.numel())}};
  Scalar* out = result.values.data().data();
  std::uint8_t* prov = result.provenance.index.data();
  const bool shared = weights.shape().n == 1;

  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      const Scalar* src = f.plane(n, c).data();
      const Scalar* h = weights.plane(shared ? 0 : c, 0).data();
      for (int oy = 0; oy < oh; ++oy) {
        const int y0 = oy * s - p;
        const int dy_lo = std::max(0, -y0);
        const int dy_hi = std::min(K, in.h - y0);
        for (int ox = 0; ox < ow; ++ox) {
          const int x0 = ox * s - p;
          const int dx_lo = std::max(0, -x0);
          const int dx_hi = std::min(K, in.w - x0);
          Scalar best = kErode ? kInf : kNegInf;
          int best_offset = 0;
          for (int dy = dy_lo; dy < dy_hi; ++dy) {
            const Scalar* row = src + static_cast<std::ptrdiff_t>(y0 + dy) * in.w + x0;
            const Scalar* hrow = h + dy * K;
            for (int dx = dx_lo; dx < dx_hi; ++dx) {
              if constexpr (kErode) {
                const Scalar v = row[dx] - hrow[dx];
                if (v < best) {
                  best = v;
                  best_offset = dy * K + dx;
                }
              } else {
                const Scalar v = row[dx] + hrow[dx];
                if (v > best) {
                  best = v;
                  best_offset = dy * K + dx;
                }
              }
            }
          }
          *out++ = best;
          *prov++ = static_cast<std::uint8_t>(best_offset);
        }
      }
    }
  }
  return result;
}

struct Placement {
  Tensor values;
  std::vector<std::int64_t> owner;  // pooled element index per output slot, -1 if empty
};

Placement place(const Tensor& g, const ProvenanceMap& prov, Scalar background) {
  if (g.shape() != prov.shape) {
    throw Error(ErrorCode::ShapeMismatch, "values " + g.shape().str() + " vs provenance " + prov.shape.str());
  }
  if (prov.index.size() != prov.shape.numel()) {
    throw Error(ErrorCode::CorruptProvenance, "provenance length does not match its shape");
  }
  const Shape& gs = g.shape();
  Shape out_shape{gs.n, gs.c, gs.h * prov.stride, gs.w * prov.stride};
  Placement result{Tensor(out_shape, background), std::vector<std::int64_t>(out_shape.numel(), -1)};
  const int K = prov.window;
  std::size_t i = 0;
  for (int n = 0; n < gs.n; ++n) {
    for (int c = 0; c < gs.c; ++c) {
      for (int oy = 0; oy < gs.h; ++oy) {
        for (int ox = 0; ox < gs.w; ++ox, ++i) {
          const std::uint8_t e = prov.index[i];
          if (e >= K * K) throw Error(ErrorCode::CorruptProvenance, "offset " + std::to_string(e) + " outside window");
          const auto [y, x] = prov.source(oy, ox, e);
          if (y < 0 || y >= out_shape.h || x < 0 || x >= out_shape.w) {
            throw Error(ErrorCode::CorruptProvenance,
                        "source (" + std::to_string(y) + "," + std::to_string(x) + ") outside " + out_shape.str());
          }
          const std::size_t dst = result.values.offset(n, c, y, x);
          std::int64_t& owner = result.owner[dst];
          if (owner < 0 || g[i] > result.values[dst]) {
            owner = static_cast<std::int64_t>(i);
            result.values[dst] = g[i];
          }
        }
      }
    }
  }
  return result;
}

}  // namespace

StructuringElement::StructuringElement(SEKind kind, int size, int origin, int channels, std::optional<Tensor> params)
    : kind_(kind), size_(size), origin_(origin), channels_(channels), params_(std::move(params)) {}

StructuringElement StructuringElement::flat(int size) {
  if (size < 1) throw Error(ErrorCode::InvalidKernel, "size must be >= 1");
  check_size(size);
  return StructuringElement(SEKind::flat, size, (size - 1) / 2, 1, std::nullopt);
}

StructuringElement StructuringElement::parabolic(int size, int origin, Scalar sigma, int channels) {
  if (size < 1) throw Error(ErrorCode::InvalidKernel, "size must be >= 1");
  check_size(size);
  if (!(sigma > 0)) throw Error(ErrorCode::InvalidScale, "sigma must be > 0");
  if (channels < 1) throw Error(ErrorCode::InvalidShape, "channels must be >= 1");
  if (origin < 0 || origin >= size) throw Error(ErrorCode::InvalidKernel, "origin outside window");
  return StructuringElement(SEKind::parabolic, size, origin, channels, Tensor(Shape{channels, 1, 1, 1}, sigma));
}

StructuringElement StructuringElement::general(int size, int channels, GeneralInit init, std::mt19937_64& rng) {
  if (size < 1) throw Error(ErrorCode::InvalidKernel, "size must be >= 1");
  check_size(size);
  if (channels < 1) throw Error(ErrorCode::InvalidShape, "channels must be >= 1");
  Shape shape{channels, 1, size, size};
  Tensor grid = init == GeneralInit::zeros ? Tensor::zeros(shape) : random_uniform(shape, rng, Scalar(-0.01), 0);
  return StructuringElement(SEKind::general, size, (size - 1) / 2, channels, std::move(grid));
}

Tensor StructuringElement::weights() const {
  switch (kind_) {
    case SEKind::flat: return Tensor::zeros(Shape{1, 1, size_, size_});
    case SEKind::parabolic: return parabolic_weights(*params_, size_, origin_);
    case SEKind::general: return *params_;
  }
  return Tensor::zeros(Shape{1, 1, size_, size_});
}

std::size_t StructuringElement::parameter_count() const { return params_ ? params_->size() : 0; }

void StructuringElement::project() {
  if (kind_ != SEKind::parabolic) return;
  for (Scalar& sigma : params_->data()) sigma = std::max(sigma, kMinSigma);
}

StructuringElement se_flat(int size) { return StructuringElement::flat(size); }

StructuringElement se_parabolic(int size, Scalar sigma, int channels) {
  if (size < 1 || size % 2 == 0) {
    throw Error(ErrorCode::InvalidKernel, "centred parabolic element needs odd size, got " + std::to_string(size));
  }
  return StructuringElement::parabolic(size, (size - 1) / 2, sigma, channels);
}

StructuringElement se_parabolic_pool(int size, int stride, Scalar sigma, int channels) {
  if (size < stride) throw Error(ErrorCode::WindowGap, "pool window smaller than stride");
  return StructuringElement::parabolic(size, pool_padding(size, stride), sigma, channels);
}

StructuringElement se_general(int size, int channels, GeneralInit init, std::mt19937_64& rng) {
  return StructuringElement::general(size, channels, init, rng);
}

StructuringElement se_general(int size, int channels) {
  std::mt19937_64 unused;
  return StructuringElement::general(size, channels, GeneralInit::zeros, unused);
}

Tensor parabolic_weights(const Tensor& sigma, int size, int origin) {
  const int channels = sigma.shape().n * sigma.shape().c * sigma.shape().h * sigma.shape().w;
  Tensor out(Shape{channels, 1, size, size});
  for (int c = 0; c < channels; ++c) {
    const Scalar s = sigma[c];
    const Scalar denom = 2 * s * s;
    for (int dy = 0; dy < size; ++dy) {
      for (int dx = 0; dx < size; ++dx) {
        const auto r2 = static_cast<Scalar>((dy - origin) * (dy - origin) + (dx - origin) * (dx - origin));
        out(c, 0, dy, dx) = -r2 / denom;
      }
    }
  }
  return out;
}

Tensor parabolic_sigma_grad(const Tensor& grad_weights, const Tensor& sigma, int size, int origin) {
  Tensor out(sigma.shape());
  for (std::size_t c = 0; c < sigma.size(); ++c) {
    const Scalar s = sigma[c];
    const Scalar s3 = s * s * s;
    Scalar acc = 0;
    for (int dy = 0; dy < size; ++dy) {
      for (int dx = 0; dx < size; ++dx) {
        const auto r2 = static_cast<Scalar>((dy - origin) * (dy - origin) + (dx - origin) * (dx - origin));
        acc += grad_weights(static_cast<int>(c), 0, dy, dx) * r2 / s3;
      }
    }
    out[c] = acc;
  }
  return out;
}

Tensor reflect(const Tensor& weights) {
  const Shape& s = weights.shape();
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) out(n, c, y, x) = weights(n, c, s.h - 1 - y, s.w - 1 - x);
      }
    }
  }
  return out;
}

MorphResult dilate2d(const Tensor& f, const Tensor& weights, Window window) {
  return scan<false>(f, weights, window);
}

MorphResult dilate2d(const Tensor& f, const StructuringElement& h, int stride, int padding) {
  return scan<false>(f, h.weights(), Window{h.size(), stride, padding});
}

MorphResult erode2d(const Tensor& f, const Tensor& weights, Window window) {
  return scan<true>(f, reflect(weights), window);
}

MorphResult erode2d(const Tensor& f, const StructuringElement& h, int stride, int padding) {
  return erode2d(f, h.weights(), Window{h.size(), stride, padding});
}

MorphResult morph_pool(const Tensor& f, const Tensor& weights, int size, int stride) {
  if (stride < 1) throw Error(ErrorCode::InvalidKernel, "stride must be >= 1");
  if (size < stride) {
    throw Error(ErrorCode::WindowGap, "window " + std::to_string(size) + " < stride " + std::to_string(stride) +
                                          " leaves inputs unreachable");
  }
  const Shape& in = f.shape();
  const int oh = in.h / stride;
  const int ow = in.w / stride;
  if (oh < 1 || ow < 1) throw Error(ErrorCode::InvalidShape, "input " + in.str() + " smaller than stride");
  MorphResult result;
  if (oh * stride == in.h && ow * stride == in.w) {
    result = scan<false>(f, weights, Window{size, stride, pool_padding(size, stride)});
  } else {
    Tensor cropped(Shape{in.n, in.c, oh * stride, ow * stride});
    for (int n = 0; n < in.n; ++n) {
      for (int c = 0; c < in.c; ++c) {
        for (int y = 0; y < oh * stride; ++y) {
          for (int x = 0; x < ow * stride; ++x) cropped(n, c, y, x) = f(n, c, y, x);
        }
      }
    }
    result = scan<false>(cropped, weights, Window{size, stride, pool_padding(size, stride)});
  }
  if (result.values.shape().h != oh || result.values.shape().w != ow) {
    throw Error(ErrorCode::InvalidKernel, "window " + std::to_string(size) + " cannot tile stride " +
                                              std::to_string(stride) + " on " + in.str());
  }
  return result;
}

MorphResult morph_pool(const Tensor& f, const StructuringElement& h, int stride) {
  return morph_pool(f, h.weights(), h.size(), stride);
}

Tensor provenance_unpool(const Tensor& g, const ProvenanceMap& prov, Scalar background) {
  return place(g, prov, background).values;
}

Tensor provenance_unpool_backward(const Tensor& grad_out, const Tensor& g, const ProvenanceMap& prov) {
  Placement placed = place(g, prov, kNegInf);
  if (grad_out.shape() != placed.values.shape()) {
    throw Error(ErrorCode::ShapeMismatch, "gradient " + grad_out.shape().str() + " vs " + placed.values.shape().str());
  }
  Tensor grad(g.shape());
  for (std::size_t dst = 0; dst < placed.owner.size(); ++dst) {
    if (placed.owner[dst] >= 0) grad[static_cast<std::size_t>(placed.owner[dst])] += grad_out[dst];
  }
  return grad;
}

Tensor morph_unpool(const Tensor& g, const ProvenanceMap& prov, const Tensor& up_weights) {
  const int K = up_weights.shape().h;
  if (K % 2 == 0) throw Error(ErrorCode::InvalidKernel, "unpool element needs odd size, got " + std::to_string(K));
  Tensor placed = provenance_unpool(g, prov, kNegInf);
  MorphResult filled = dilate2d(placed, up_weights, Window{K, 1, (K - 1) / 2});
  for (Scalar v : filled.values.data()) {
    if (v == kNegInf) {
      throw Error(ErrorCode::IncompleteFill, "unpool window " + std::to_string(K) + " leaves gaps at stride " +
                                                 std::to_string(prov.stride));
    }
  }
  return std::move(filled.values);
}

Tensor morph_unpool(const Tensor& g, const ProvenanceMap& prov, const StructuringElement& h_up) {
  return morph_unpool(g, prov, h_up.weights());
}

DilationGrads dilate2d_backward(const Tensor& grad_out, const ProvenanceMap& prov, const Shape& input_shape,
                                const Shape& weights_shape) {
  if (grad_out.shape() != prov.shape) {
    throw Error(ErrorCode::ShapeMismatch, "gradient " + grad_out.shape().str() + " vs " + prov.shape.str());
  }
  DilationGrads grads{Tensor(input_shape), Tensor(weights_shape)};
  const Shape& os = prov.shape;
  const int K = prov.window;
  const bool shared = weights_shape.n == 1;
  std::size_t i = 0;
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      Scalar* gin = grads.input.plane(n, c).data();
      Scalar* gh = grads.weights.plane(shared ? 0 : c, 0).data();
      for (int oy = 0; oy < os.h; ++oy) {
        for (int ox = 0; ox < os.w; ++ox, ++i) {
          const Scalar g = grad_out[i];
          const std::uint8_t e = prov.index[i];
          const auto [y, x] = prov.source(oy, ox, e);
          // A window made only of padding has no winner to receive gradient.
          if (y < 0 || y >= input_shape.h || x < 0 || x >= input_shape.w) continue;
          gin[static_cast<std::ptrdiff_t>(y) * input_shape.w + x] += g;
          gh[e / K * K + e % K] += g;
        }
      }
    }
  }
  return grads;
}

std::optional<Tensor> se_param_grad(const StructuringElement& h, const Tensor& grad_weights) {
  switch (h.kind()) {
    case SEKind::flat: return std::nullopt;
    case SEKind::parabolic: return parabolic_sigma_grad(grad_weights, *h.params(), h.size(), h.origin());
    case SEKind::general: return grad_weights;
  }
  return std::nullopt;
}

}  // namespace morph

namespace ag {

namespace {

void note(Tape& tape, const morph::ProvenanceMap& prov) {
  if (tape.tracks_selections()) tape.note_selection(prov.index);
}

}  // namespace

Var parabolic_weights(Var sigma, int size, int origin) {
  Tensor w = morph::parabolic_weights(sigma.value(), size, origin);
  return sigma.tape->record("parabolic_weights", std::move(w), {sigma},
                            [sigma, size, origin](const Tensor& g, GradSink& sink) {
                              if (Tensor* gs = sink.grad(0)) {
                                *gs += morph::parabolic_sigma_grad(g, sigma.value(), size, origin);
                              }
                            });
}

Var se_weights(Tape& tape, const morph::StructuringElement& h, std::optional<Var> param) {
  switch (h.kind()) {
    case morph::SEKind::flat: return tape.constant(h.weights());
    case morph::SEKind::parabolic:
      return parabolic_weights(param ? *param : tape.constant(*h.params()), h.size(), h.origin());
    case morph::SEKind::general: return param ? *param : tape.constant(*h.params());
  }
  return tape.constant(h.weights());
}

Var dilate2d(Var f, Var weights, morph::Window window) {
  morph::MorphResult r = morph::dilate2d(f.value(), weights.value(), window);
  note(*f.tape, r.provenance);
  const Shape in_shape = f.shape();
  const Shape w_shape = weights.shape();
  return f.tape->record("dilate2d", std::move(r.values), {f, weights},
                        [prov = std::move(r.provenance), in_shape, w_shape](const Tensor& g, GradSink& sink) {
                          morph::DilationGrads grads = morph::dilate2d_backward(g, prov, in_shape, w_shape);
                          if (Tensor* gf = sink.grad(0)) *gf += grads.input;
                          if (Tensor* gw = sink.grad(1)) *gw += grads.weights;
                        });
}

Var erode2d(Var f, Var weights, morph::Window window) {
  morph::MorphResult r = morph::erode2d(f.value(), weights.value(), window);
  note(*f.tape, r.provenance);
  const Shape in_shape = f.shape();
  const Shape w_shape = weights.shape();
  return f.tape->record("erode2d", std::move(r.values), {f, weights},
                        [prov = std::move(r.provenance), in_shape, w_shape](const Tensor& g, GradSink& sink) {
                          // out = f[src] - h[K-1-e]: input gets +g, the reflected weight -g.
                          morph::DilationGrads grads = morph::dilate2d_backward(g, prov, in_shape, w_shape);
                          if (Tensor* gf = sink.grad(0)) *gf += grads.input;
                          if (Tensor* gw = sink.grad(1)) *gw += negate(morph::reflect(grads.weights));
                        });
}

PoolOutput morph_pool(Var f, Var weights, int size, int stride) {
  morph::MorphResult r = morph::morph_pool(f.value(), weights.value(), size, stride);
  note(*f.tape, r.provenance);
  const Shape in_shape = f.shape();
  const Shape w_shape = weights.shape();
  morph::ProvenanceMap prov = r.provenance;
  Var out = f.tape->record("morph_pool", std::move(r.values), {f, weights},
                           [prov = std::move(r.provenance), in_shape, w_shape](const Tensor& g, GradSink& sink) {
                             // Cropped trailing rows/cols simply receive no gradient.
                             morph::DilationGrads grads = morph::dilate2d_backward(g, prov, in_shape, w_shape);
                             if (Tensor* gf = sink.grad(0)) *gf += grads.input;
                             if (Tensor* gw = sink.grad(1)) *gw += grads.weights;
                           });
  return PoolOutput{out, std::move(prov)};
}

Var provenance_unpool(Var g, const morph::ProvenanceMap& prov, Scalar background) {
  Tensor placed = morph::provenance_unpool(g.value(), prov, background);
  return g.tape->record("provenance_unpool", std::move(placed), {g},
                        [g, prov](const Tensor& grad_out, GradSink& sink) {
                          if (Tensor* gg = sink.grad(0)) {
                            *gg += morph::provenance_unpool_backward(grad_out, g.value(), prov);
                          }
                        });
}

Var morph_unpool(Var g, const morph::ProvenanceMap& prov, Var up_weights) {
  const int K = up_weights.shape().h;
  if (K % 2 == 0) throw Error(ErrorCode::InvalidKernel, "unpool element needs odd size, got " + std::to_string(K));
  Var placed = provenance_unpool(g, prov, kNegInf);
  Var filled = dilate2d(placed, up_weights, morph::Window{K, 1, (K - 1) / 2});
  for (Scalar v : filled.value().data()) {
    if (v == kNegInf) {
      throw Error(ErrorCode::IncompleteFill, "unpool window " + std::to_string(K) + " leaves gaps at stride " +
                                                 std::to_string(prov.stride));
    }
  }
  return filled;
}

}  // namespace ag

MORPHPOOL_END_NAMESPACE
