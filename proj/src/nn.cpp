#include "morphpool/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

MORPHPOOL_BEGIN_NAMESPACE

namespace nn {

namespace {

using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

struct Geometry {
  int channels, h, w, kernel, stride, padding, oh, ow;

  std::size_t rows() const { return static_cast<std::size_t>(channels) * kernel * kernel; }
  std::size_t cols() const { return static_cast<std::size_t>(oh) * ow; }
};

// cols[(c*K + ky)*K + kx][oy*ow + ox] = src[c][oy*s - p + ky][ox*s - p + kx], zero outside.
void im2col(const Scalar* src, const Geometry& g, Scalar* cols) {
  for (int c = 0; c < g.channels; ++c) {
    const Scalar* plane = src + static_cast<std::ptrdiff_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        Scalar* row = cols + ((static_cast<std::ptrdiff_t>(c) * g.kernel + ky) * g.kernel + kx) * g.cols();
        for (int oy = 0; oy < g.oh; ++oy) {
          const int y = oy * g.stride - g.padding + ky;
          Scalar* dst = row + static_cast<std::ptrdiff_t>(oy) * g.ow;
          if (y < 0 || y >= g.h) {
            std::fill(dst, dst + g.ow, Scalar{0});
            continue;
          }
          const Scalar* line = plane + static_cast<std::ptrdiff_t>(y) * g.w;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int x = ox * g.stride - g.padding + kx;
            dst[ox] = (x >= 0 && x < g.w) ? line[x] : Scalar{0};
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into the image.
void col2im(const Scalar* cols, const Geometry& g, Scalar* dst) {
  for (int c = 0; c < g.channels; ++c) {
    Scalar* plane = dst + static_cast<std::ptrdiff_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const Scalar* row = cols + ((static_cast<std::ptrdiff_t>(c) * g.kernel + ky) * g.kernel + kx) * g.cols();
        for (int oy = 0; oy < g.oh; ++oy) {
          const int y = oy * g.stride - g.padding + ky;
          if (y < 0 || y >= g.h) continue;
          Scalar* line = plane + static_cast<std::ptrdiff_t>(y) * g.w;
          const Scalar* src = row + static_cast<std::ptrdiff_t>(oy) * g.ow;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int x = ox * g.stride - g.padding + kx;
            if (x >= 0 && x < g.w) line[x] += src[ox];
          }
        }
      }
    }
  }
}

void check_conv(const Tensor& f, const ConvParams& p, int in_channels, const char* op) {
  const Shape& ws = p.weight.shape();
  if (ws.h != ws.w) throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": non-square kernel " + ws.str());
  if (f.shape().c != in_channels) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": input " + f.shape().str() + " vs weight " + ws.str());
  }
  if (p.stride < 1 || p.padding < 0) throw Error(ErrorCode::InvalidShape, std::string(op) + ": bad stride/padding");
}

Geometry conv_geometry(const Shape& in, const ConvParams& p) {
  const int K = p.weight.shape().h;
  Geometry g{in.c, in.h, in.w, K, p.stride, p.padding, conv_out_dim(in.h, K, p.stride, p.padding),
             conv_out_dim(in.w, K, p.stride, p.padding)};
  if (g.oh < 1 || g.ow < 1) throw Error(ErrorCode::InvalidShape, "convolution output empty for input " + in.str());
  return g;
}

void add_bias(Tensor& out, const std::optional<Tensor>& bias) {
  if (!bias) return;
  const Shape& s = out.shape();
  if (bias->size() != static_cast<std::size_t>(s.c)) {
    throw Error(ErrorCode::ShapeMismatch, "bias " + bias->shape().str() + " for " + std::to_string(s.c) + " channels");
  }
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const Scalar b = (*bias)[c];
      for (Scalar& v : out.plane(n, c)) v += b;
    }
  }
}

Tensor bias_grad(const Tensor& grad_out) {
  const Shape& s = grad_out.shape();
  Tensor gb(Shape{s.c, 1, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      Scalar acc = 0;
      for (Scalar v : grad_out.plane(n, c)) acc += v;
      gb[c] += acc;
    }
  }
  return gb;
}

}  // namespace

int conv_out_dim(int dim, int kernel, int stride, int padding) {
  const int span = dim + 2 * padding - kernel;
  return span < 0 ? 0 : span / stride + 1;
}

ConvParams make_conv(int c_in, int c_out, int kernel, int stride, int padding, bool bias, std::mt19937_64& rng) {
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(c_in * kernel * kernel));
  ConvParams p{random_uniform(Shape{c_out, c_in, kernel, kernel}, rng, -bound, bound), std::nullopt, stride, padding};
  if (bias) p.bias = Tensor::zeros(Shape{c_out, 1, 1, 1});
  return p;
}

Tensor conv2d(const Tensor& f, const ConvParams& p) {
  const Shape& ws = p.weight.shape();
  check_conv(f, p, ws.c, "conv2d");
  const Geometry g = conv_geometry(f.shape(), p);
  Tensor out(Shape{f.shape().n, ws.n, g.oh, g.ow});
  std::vector<Scalar> cols(g.rows() * g.cols());
  ConstMatrixMap weight(p.weight.data().data(), ws.n, static_cast<Eigen::Index>(g.rows()));
  ConstMatrixMap col_mat(cols.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
  for (int n = 0; n < f.shape().n; ++n) {
    im2col(f.plane(n, 0).data(), g, cols.data());
    MatrixMap dst(out.plane(n, 0).data(), ws.n, static_cast<Eigen::Index>(g.cols()));
    dst.noalias() = weight * col_mat;
  }
  add_bias(out, p.bias);
  return out;
}

Tensor transposed_conv2d(const Tensor& f, const ConvParams& p, int output_padding) {
  const Shape& ws = p.weight.shape();
  check_conv(f, p, ws.n, "transposed_conv2d");
  if (output_padding < 0 || output_padding >= p.stride) {
    throw Error(ErrorCode::InvalidShape, "output_padding must be in [0, stride)");
  }
  const int K = ws.h;
  const int oh = (f.shape().h - 1) * p.stride - 2 * p.padding + K + output_padding;
  const int ow = (f.shape().w - 1) * p.stride - 2 * p.padding + K + output_padding;
  if (oh < 1 || ow < 1) throw Error(ErrorCode::InvalidShape, "transposed convolution output empty");
  // Geometry of the forward conv this op is the adjoint of.
  Geometry g{ws.c, oh, ow, K, p.stride, p.padding, f.shape().h, f.shape().w};
  if (conv_out_dim(oh, K, p.stride, p.padding) != g.oh || conv_out_dim(ow, K, p.stride, p.padding) != g.ow) {
    throw Error(ErrorCode::InvalidShape, "output_padding inconsistent with stride");
  }
  Tensor out(Shape{f.shape().n, ws.c, oh, ow});
  std::vector<Scalar> cols(g.rows() * g.cols());
  ConstMatrixMap weight(p.weight.data().data(), ws.n, static_cast<Eigen::Index>(g.rows()));
  MatrixMap col_mat(cols.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
  for (int n = 0; n < f.shape().n; ++n) {
    ConstMatrixMap src(f.plane(n, 0).data(), ws.n, static_cast<Eigen::Index>(g.cols()));
    col_mat.noalias() = weight.transpose() * src;
    col2im(cols.data(), g, out.plane(n, 0).data());
  }
  add_bias(out, p.bias);
  return out;
}

Tensor depthwise_conv2d(const Tensor& f, const ConvParams& p) {
  const Shape& ws = p.weight.shape();
  if (ws.c != 1 || ws.n != f.shape().c || ws.h != ws.w) {
    throw Error(ErrorCode::ShapeMismatch, "depthwise weight " + ws.str() + " for input " + f.shape().str());
  }
  const Shape& in = f.shape();
  const int K = ws.h;
  const int oh = conv_out_dim(in.h, K, p.stride, p.padding);
  const int ow = conv_out_dim(in.w, K, p.stride, p.padding);
  if (oh < 1 || ow < 1) throw Error(ErrorCode::InvalidShape, "depthwise output empty for " + in.str());
  Tensor out(Shape{in.n, in.c, oh, ow});
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      const Scalar* src = f.plane(n, c).data();
      const Scalar* w = p.weight.plane(c, 0).data();
      Scalar* dst = out.plane(n, c).data();
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          Scalar acc = 0;
          for (int ky = 0; ky < K; ++ky) {
            const int y = oy * p.stride - p.padding + ky;
            if (y < 0 || y >= in.h) continue;
            for (int kx = 0; kx < K; ++kx) {
              const int x = ox * p.stride - p.padding + kx;
              if (x >= 0 && x < in.w) acc += w[ky * K + kx] * src[y * in.w + x];
            }
          }
          dst[oy * ow + ox] = acc;
        }
      }
    }
  }
  add_bias(out, p.bias);
  return out;
}

morph::MorphResult max_pool_classic(const Tensor& f) {
  const Shape& in = f.shape();
  const int oh = in.h / 2;
  const int ow = in.w / 2;
  if (oh < 1 || ow < 1) throw Error(ErrorCode::InvalidShape, "max pool needs at least 2x2 input, got " + in.str());
  Shape out_shape{in.n, in.c, oh, ow};
  morph::MorphResult r{Tensor(out_shape),
                       morph::ProvenanceMap{out_shape, 2, 2, 0, in.h, in.w, std::vector<std::uint8_t>(out_shape.numel())}};
  std::size_t i = 0;
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++i) {
          Scalar best = f(n, c, 2 * oy, 2 * ox);
          std::uint8_t arg = 0;
          for (std::uint8_t e = 1; e < 4; ++e) {
            const Scalar v = f(n, c, 2 * oy + e / 2, 2 * ox + e % 2);
            if (v > best) {
              best = v;
              arg = e;
            }
          }
          r.values[i] = best;
          r.provenance.index[i] = arg;
        }
      }
    }
  }
  return r;
}

Tensor zero_unpool(const Tensor& g, const morph::ProvenanceMap& prov) {
  return morph::provenance_unpool(g, prov, Scalar{0});
}

namespace {

struct Tap {
  int i0, i1;
  Scalar w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(int in, int factor) {
  std::vector<Tap> taps(static_cast<std::size_t>(in) * factor);
  for (int o = 0; o < in * factor; ++o) {
    Scalar src = (static_cast<Scalar>(o) + Scalar(0.5)) / static_cast<Scalar>(factor) - Scalar(0.5);
    if (src < 0) src = 0;
    const int i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = Tap{i0, i1, src - static_cast<Scalar>(i0)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& f, int factor) {
  if (factor < 1) throw Error(ErrorCode::InvalidShape, "upsampling factor must be >= 1");
  const Shape& in = f.shape();
  Tensor out(Shape{in.n, in.c, in.h * factor, in.w * factor});
  const auto ty = bilinear_taps(in.h, factor);
  const auto tx = bilinear_taps(in.w, factor);
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      const Scalar* src = f.plane(n, c).data();
      Scalar* dst = out.plane(n, c).data();
      for (std::size_t oy = 0; oy < ty.size(); ++oy) {
        const Tap& a = ty[oy];
        const Scalar* r0 = src + static_cast<std::ptrdiff_t>(a.i0) * in.w;
        const Scalar* r1 = src + static_cast<std::ptrdiff_t>(a.i1) * in.w;
        for (std::size_t ox = 0; ox < tx.size(); ++ox) {
          const Tap& b = tx[ox];
          const Scalar top = r0[b.i0] + b.w1 * (r0[b.i1] - r0[b.i0]);
          const Scalar bottom = r1[b.i0] + b.w1 * (r1[b.i1] - r1[b.i0]);
          dst[oy * tx.size() + ox] = top + a.w1 * (bottom - top);
        }
      }
    }
  }
  return out;
}

namespace {

Tensor bilinear_upsample_backward(const Tensor& grad_out, const Shape& in, int factor) {
  Tensor grad(in);
  const auto ty = bilinear_taps(in.h, factor);
  const auto tx = bilinear_taps(in.w, factor);
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      const Scalar* g = grad_out.plane(n, c).data();
      Scalar* dst = grad.plane(n, c).data();
      for (std::size_t oy = 0; oy < ty.size(); ++oy) {
        const Tap& a = ty[oy];
        for (std::size_t ox = 0; ox < tx.size(); ++ox) {
          const Tap& b = tx[ox];
          const Scalar v = g[oy * tx.size() + ox];
          const Scalar top = v * (1 - a.w1);
          const Scalar bottom = v * a.w1;
          dst[a.i0 * in.w + b.i0] += top * (1 - b.w1);
          dst[a.i0 * in.w + b.i1] += top * b.w1;
          dst[a.i1 * in.w + b.i0] += bottom * (1 - b.w1);
          dst[a.i1 * in.w + b.i1] += bottom * b.w1;
        }
      }
    }
  }
  return grad;
}

}  // namespace

BatchNormState::BatchNormState(int channels)
    : gamma(Shape{channels, 1, 1, 1}, 1),
      beta(Shape{channels, 1, 1, 1}, 0),
      running_mean(Shape{channels, 1, 1, 1}, 0),
      running_var(Shape{channels, 1, 1, 1}, 1) {}

namespace {

struct BatchStats {
  std::vector<Scalar> mean;
  std::vector<Scalar> inv_std;
};

void check_bn(const Tensor& f, const BatchNormState& state) {
  if (f.shape().c != state.channels()) {
    throw Error(ErrorCode::ShapeMismatch,
                "batchnorm over " + std::to_string(state.channels()) + " channels, input " + f.shape().str());
  }
}

// Normalises with either batch statistics (updating the running ones) or the
// running statistics, writing gamma * xhat + beta into out.
BatchStats batchnorm_forward(const Tensor& f, BatchNormState& state, Mode mode, const Tensor& gamma,
                             const Tensor& beta, Tensor& out) {
  check_bn(f, state);
  const Shape& s = f.shape();
  const auto count = static_cast<double>(s.n) * s.plane();
  BatchStats stats{std::vector<Scalar>(s.c), std::vector<Scalar>(s.c)};
  for (int c = 0; c < s.c; ++c) {
    double mean;
    double var;
    if (mode == Mode::train) {
      double acc = 0;
      for (int n = 0; n < s.n; ++n) {
        for (Scalar v : f.plane(n, c)) acc += v;
      }
      mean = acc / count;
      double sq = 0;
      for (int n = 0; n < s.n; ++n) {
        for (Scalar v : f.plane(n, c)) sq += (v - mean) * (v - mean);
      }
      var = sq / count;
      const double unbiased = count > 1 ? sq / (count - 1) : var;
      state.running_mean[c] = static_cast<Scalar>((1 - state.momentum) * state.running_mean[c] + state.momentum * mean);
      state.running_var[c] = static_cast<Scalar>((1 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    stats.mean[c] = static_cast<Scalar>(mean);
    stats.inv_std[c] = static_cast<Scalar>(1.0 / std::sqrt(var + state.epsilon));
    const Scalar scale = gamma[c] * stats.inv_std[c];
    const Scalar shift = beta[c] - stats.mean[c] * scale;
    for (int n = 0; n < s.n; ++n) {
      auto src = f.plane(n, c);
      auto dst = out.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * scale + shift;
    }
  }
  return stats;
}

}  // namespace

Tensor batchnorm(const Tensor& f, BatchNormState& state, Mode mode) {
  Tensor out(f.shape());
  batchnorm_forward(f, state, mode, state.gamma, state.beta, out);
  return out;
}

Tensor relu(const Tensor& f) {
  Tensor out(f.shape());
  auto src = f.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0 ? src[i] : Scalar{0};
  return out;
}

namespace {

struct CrossEntropyTerms {
  Scalar loss;
  std::size_t valid;
};

void check_labels(const Tensor& logits, const Tensor& labels) {
  const Shape& ls = logits.shape();
  const Shape& ts = labels.shape();
  if (ts.n != ls.n || ts.c != 1 || ts.h != ls.h || ts.w != ls.w) {
    throw Error(ErrorCode::ShapeMismatch, "labels " + ts.str() + " for logits " + ls.str());
  }
}

int label_at(const Tensor& labels, int n, int y, int x, int classes, int ignore_index) {
  const auto label = static_cast<int>(labels(n, 0, y, x));
  if (label != ignore_index && (label < 0 || label >= classes)) {
    throw Error(ErrorCode::ShapeMismatch, "label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
  }
  return label;
}

// Visits every valid pixel with its softmax probabilities; returns the summed
// negative log-likelihood and the valid-pixel count.
template <typename Visit>
CrossEntropyTerms cross_entropy_scan(const Tensor& logits, const Tensor& labels, int ignore_index, Visit&& visit) {
  check_labels(logits, labels);
  const Shape& s = logits.shape();
  std::vector<double> prob(s.c);
  double total = 0;
  std::size_t valid = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const int label = label_at(labels, n, y, x, s.c, ignore_index);
        if (label == ignore_index) continue;
        double peak = -INFINITY;
        for (int c = 0; c < s.c; ++c) peak = std::max(peak, static_cast<double>(logits(n, c, y, x)));
        double z = 0;
        for (int c = 0; c < s.c; ++c) {
          prob[c] = std::exp(static_cast<double>(logits(n, c, y, x)) - peak);
          z += prob[c];
        }
        for (int c = 0; c < s.c; ++c) prob[c] /= z;
        total += -(static_cast<double>(logits(n, label, y, x)) - peak - std::log(z));
        ++valid;
        visit(n, y, x, label, prob);
      }
    }
  }
  if (valid == 0) throw Error(ErrorCode::EmptyTarget, "no labelled pixels");
  return {static_cast<Scalar>(total / static_cast<double>(valid)), valid};
}

bool depth_valid(const Tensor& target, const Tensor* mask, std::size_t i) {
  if (mask) return (*mask)[i] != 0;
  return std::isfinite(target[i]) && target[i] > 0;
}

}  // namespace

Scalar cross_entropy(const Tensor& logits, const Tensor& labels, int ignore_index) {
  return cross_entropy_scan(logits, labels, ignore_index, [](int, int, int, int, const std::vector<double>&) {}).loss;
}

Scalar masked_l2(const Tensor& pred, const Tensor& target, const Tensor* mask) {
  if (pred.shape() != target.shape() || (mask && mask->shape() != target.shape())) {
    throw Error(ErrorCode::ShapeMismatch, "masked_l2: " + pred.shape().str() + " vs " + target.shape().str());
  }
  double acc = 0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!depth_valid(target, mask, i)) continue;
    const double d = static_cast<double>(pred[i]) - target[i];
    acc += d * d;
    ++valid;
  }
  if (valid == 0) throw Error(ErrorCode::EmptyTarget, "no valid depth pixels");
  return static_cast<Scalar>(acc / static_cast<double>(valid));
}

void sgd_nesterov_step(Tensor& param, const Tensor& grad, Tensor& velocity, Scalar lr, Scalar momentum) {
  if (param.shape() != grad.shape() || param.shape() != velocity.shape()) {
    throw Error(ErrorCode::ShapeMismatch, "optimizer step on " + param.shape().str() + " with grad " + grad.shape().str());
  }
  auto p = param.data();
  auto g = grad.data();
  auto v = velocity.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = momentum * v[i] + g[i];
    p[i] -= lr * (g[i] + momentum * v[i]);
  }
}

double LrSchedule::gamma() const {
  if (epochs < 1) throw Error(ErrorCode::InvalidSpec, "epochs must be >= 1");
  return std::pow(final_fraction, 1.0 / epochs);
}

double LrSchedule::at(int epoch) const { return initial * std::pow(gamma(), epoch); }

}  // namespace nn

namespace ag {

namespace {

nn::ConvParams params_of(Var weight, const std::optional<Var>& bias, int stride, int padding) {
  nn::ConvParams p{weight.value(), std::nullopt, stride, padding};
  if (bias) p.bias = bias->value();
  return p;
}

}  // namespace


Var conv2d(Var f, Var weight, std::optional<Var> bias, int stride, int padding) {
  Tensor out = nn::conv2d(f.value(), params_of(weight, bias, stride, padding));
  std::vector<Var> inputs{f, weight};
  if (bias) inputs.push_back(*bias);
  return f.tape->record(
      "conv2d", std::move(out), std::move(inputs), [f, weight, stride, padding](const Tensor& g, GradSink& sink) {
        const Tensor& x = f.value();
        const Tensor& w = weight.value();
        const Shape& ws = w.shape();
        const nn::Geometry geo{x.shape().c, x.shape().h, x.shape().w, ws.h, stride, padding, g.shape().h, g.shape().w};
        Tensor* gx = sink.grad(0);
        Tensor* gw = sink.grad(1);
        std::vector<Scalar> cols(geo.rows() * geo.cols());
        nn::MatrixMap col_mat(cols.data(), static_cast<Eigen::Index>(geo.rows()), static_cast<Eigen::Index>(geo.cols()));
        nn::ConstMatrixMap wmat(w.data().data(), ws.n, static_cast<Eigen::Index>(geo.rows()));
        for (int n = 0; n < x.shape().n; ++n) {
          nn::ConstMatrixMap gout(g.plane(n, 0).data(), ws.n, static_cast<Eigen::Index>(geo.cols()));
          if (gw) {
            nn::im2col(x.plane(n, 0).data(), geo, cols.data());
            nn::MatrixMap gwmat(gw->data().data(), ws.n, static_cast<Eigen::Index>(geo.rows()));
            gwmat.noalias() += gout * col_mat.transpose();
          }
          if (gx) {
            col_mat.noalias() = wmat.transpose() * gout;
            nn::col2im(cols.data(), geo, gx->plane(n, 0).data());
          }
        }
        if (sink.inputs() > 2) {
          if (Tensor* gb = sink.grad(2)) *gb += nn::bias_grad(g);
        }
      });
}

Var transposed_conv2d(Var f, Var weight, std::optional<Var> bias, int stride, int padding, int output_padding) {
  Tensor out = nn::transposed_conv2d(f.value(), params_of(weight, bias, stride, padding), output_padding);
  std::vector<Var> inputs{f, weight};
  if (bias) inputs.push_back(*bias);
  return f.tape->record(
      "transposed_conv2d", std::move(out), std::move(inputs),
      [f, weight, stride, padding](const Tensor& g, GradSink& sink) {
        const Tensor& x = f.value();
        const Tensor& w = weight.value();
        const Shape& ws = w.shape();
        // The forward conv this op is the adjoint of maps g's grid onto x's.
        const nn::Geometry geo{ws.c, g.shape().h, g.shape().w, ws.h, stride, padding, x.shape().h, x.shape().w};
        Tensor* gx = sink.grad(0);
        Tensor* gw = sink.grad(1);
        std::vector<Scalar> cols(geo.rows() * geo.cols());
        nn::ConstMatrixMap col_mat(cols.data(), static_cast<Eigen::Index>(geo.rows()),
                                   static_cast<Eigen::Index>(geo.cols()));
        nn::ConstMatrixMap wmat(w.data().data(), ws.n, static_cast<Eigen::Index>(geo.rows()));
        for (int n = 0; n < x.shape().n; ++n) {
          nn::im2col(g.plane(n, 0).data(), geo, cols.data());
          if (gx) {
            nn::MatrixMap gxmat(gx->plane(n, 0).data(), ws.n, static_cast<Eigen::Index>(geo.cols()));
            gxmat.noalias() += wmat * col_mat;
          }
          if (gw) {
            nn::ConstMatrixMap xmat(x.plane(n, 0).data(), ws.n, static_cast<Eigen::Index>(geo.cols()));
            nn::MatrixMap gwmat(gw->data().data(), ws.n, static_cast<Eigen::Index>(geo.rows()));
            gwmat.noalias() += xmat * col_mat.transpose();
          }
        }
        if (sink.inputs() > 2) {
          if (Tensor* gb = sink.grad(2)) *gb += nn::bias_grad(g);
        }
      });
}

Var depthwise_conv2d(Var f, Var weight, std::optional<Var> bias, int stride, int padding) {
  Tensor out = nn::depthwise_conv2d(f.value(), params_of(weight, bias, stride, padding));
  std::vector<Var> inputs{f, weight};
  if (bias) inputs.push_back(*bias);
  return f.tape->record(
      "depthwise_conv2d", std::move(out), std::move(inputs),
      [f, weight, stride, padding](const Tensor& g, GradSink& sink) {
        const Tensor& x = f.value();
        const Tensor& w = weight.value();
        const Shape& in = x.shape();
        const int K = w.shape().h;
        const int oh = g.shape().h;
        const int ow = g.shape().w;
        Tensor* gx = sink.grad(0);
        Tensor* gw = sink.grad(1);
        for (int n = 0; n < in.n; ++n) {
          for (int c = 0; c < in.c; ++c) {
            const Scalar* src = x.plane(n, c).data();
            const Scalar* wc = w.plane(c, 0).data();
            const Scalar* go = g.plane(n, c).data();
            Scalar* gxc = gx ? gx->plane(n, c).data() : nullptr;
            Scalar* gwc = gw ? gw->plane(c, 0).data() : nullptr;
            for (int oy = 0; oy < oh; ++oy) {
              for (int ox = 0; ox < ow; ++ox) {
                const Scalar v = go[oy * ow + ox];
                for (int ky = 0; ky < K; ++ky) {
                  const int y = oy * stride - padding + ky;
                  if (y < 0 || y >= in.h) continue;
                  for (int kx = 0; kx < K; ++kx) {
                    const int xx = ox * stride - padding + kx;
                    if (xx < 0 || xx >= in.w) continue;
                    if (gxc) gxc[y * in.w + xx] += v * wc[ky * K + kx];
                    if (gwc) gwc[ky * K + kx] += v * src[y * in.w + xx];
                  }
                }
              }
            }
          }
        }
        if (sink.inputs() > 2) {
          if (Tensor* gb = sink.grad(2)) *gb += nn::bias_grad(g);
        }
      });
}

PoolOutput max_pool_classic(Var f) {
  morph::MorphResult r = nn::max_pool_classic(f.value());
  if (f.tape->tracks_selections()) f.tape->note_selection(r.provenance.index);
  const Shape in_shape = f.shape();
  morph::ProvenanceMap prov = r.provenance;
  Var out = f.tape->record("max_pool_classic", std::move(r.values), {f},
                           [prov = std::move(r.provenance), in_shape](const Tensor& g, GradSink& sink) {
                             if (Tensor* gf = sink.grad(0)) {
                               *gf += morph::dilate2d_backward(g, prov, in_shape, Shape{1, 1, 2, 2}).input;
                             }
                           });
  return PoolOutput{out, std::move(prov)};
}

Var zero_unpool(Var g, const morph::ProvenanceMap& prov) { return provenance_unpool(g, prov, Scalar{0}); }

Var bilinear_upsample(Var f, int factor) {
  const Shape in_shape = f.shape();
  return f.tape->record("bilinear_upsample", nn::bilinear_upsample(f.value(), factor), {f},
                        [in_shape, factor](const Tensor& g, GradSink& sink) {
                          if (Tensor* gf = sink.grad(0)) *gf += nn::bilinear_upsample_backward(g, in_shape, factor);
                        });
}

Var batchnorm(Var f, Var gamma, Var beta, nn::BatchNormState& state, nn::Mode mode) {
  Tensor out(f.shape());
  nn::BatchStats stats = nn::batchnorm_forward(f.value(), state, mode, gamma.value(), beta.value(), out);
  return f.tape->record(
      "batchnorm", std::move(out), {f, gamma, beta},
      [f, gamma, mode, stats = std::move(stats)](const Tensor& g, GradSink& sink) {
        const Tensor& x = f.value();
        const Shape& s = x.shape();
        const auto count = static_cast<Scalar>(static_cast<double>(s.n) * s.plane());
        Tensor* gx = sink.grad(0);
        Tensor* gg = sink.grad(1);
        Tensor* gb = sink.grad(2);
        for (int c = 0; c < s.c; ++c) {
          const Scalar mean = stats.mean[c];
          const Scalar inv_std = stats.inv_std[c];
          double sum_g = 0;
          double sum_g_xhat = 0;
          for (int n = 0; n < s.n; ++n) {
            auto xs = x.plane(n, c);
            auto gs = g.plane(n, c);
            for (std::size_t i = 0; i < xs.size(); ++i) {
              sum_g += gs[i];
              sum_g_xhat += gs[i] * (xs[i] - mean) * inv_std;
            }
          }
          if (gg) (*gg)[c] += static_cast<Scalar>(sum_g_xhat);
          if (gb) (*gb)[c] += static_cast<Scalar>(sum_g);
          if (!gx) continue;
          const Scalar gamma_c = gamma.value()[c];
          for (int n = 0; n < s.n; ++n) {
            auto xs = x.plane(n, c);
            auto gs = g.plane(n, c);
            auto dst = gx->plane(n, c);
            for (std::size_t i = 0; i < xs.size(); ++i) {
              if (mode == nn::Mode::eval) {
                dst[i] += gs[i] * gamma_c * inv_std;
              } else {
                const Scalar xhat = (xs[i] - mean) * inv_std;
                dst[i] += gamma_c * inv_std / count *
                          (count * gs[i] - static_cast<Scalar>(sum_g) - xhat * static_cast<Scalar>(sum_g_xhat));
              }
            }
          }
        }
      });
}

Var relu(Var f) {
  Tensor out = nn::relu(f.value());
  if (f.tape->tracks_selections()) {
    std::vector<std::uint8_t> mask(out.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = f.value()[i] > 0;
    f.tape->note_selection(mask);
  }
  return f.tape->record("relu", std::move(out), {f}, [f](const Tensor& g, GradSink& sink) {
    if (Tensor* gf = sink.grad(0)) {
      const Tensor& x = f.value();
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > 0) (*gf)[i] += g[i];
      }
    }
  });
}

Var cross_entropy(Var logits, const Tensor& labels, int ignore_index) {
  const Scalar loss = nn::cross_entropy(logits.value(), labels, ignore_index);
  return logits.tape->record(
      "cross_entropy", Tensor::scalar(loss), {logits}, [logits, labels, ignore_index](const Tensor& g, GradSink& sink) {
        Tensor* gl = sink.grad(0);
        if (!gl) return;
        Tensor grad(logits.shape());
        const auto terms = nn::cross_entropy_scan(
            logits.value(), labels, ignore_index,
            [&grad](int n, int y, int x, int label, const std::vector<double>& prob) {
              for (std::size_t c = 0; c < prob.size(); ++c) {
                grad(n, static_cast<int>(c), y, x) = static_cast<Scalar>(prob[c] - (static_cast<int>(c) == label));
              }
            });
        grad *= g.item() / static_cast<Scalar>(terms.valid);
        *gl += grad;
      });
}

Var masked_l2(Var pred, const Tensor& target, const Tensor* mask) {
  const Scalar loss = nn::masked_l2(pred.value(), target, mask);
  std::optional<Tensor> mask_copy;
  if (mask) mask_copy = *mask;
  return pred.tape->record(
      "masked_l2", Tensor::scalar(loss), {pred}, [pred, target, mask_copy](const Tensor& g, GradSink& sink) {
        Tensor* gp = sink.grad(0);
        if (!gp) return;
        const Tensor* m = mask_copy ? &*mask_copy : nullptr;
        std::size_t valid = 0;
        for (std::size_t i = 0; i < target.size(); ++i) valid += nn::depth_valid(target, m, i);
        const Scalar factor = 2 * g.item() / static_cast<Scalar>(valid);
        const Tensor& p = pred.value();
        for (std::size_t i = 0; i < target.size(); ++i) {
          if (nn::depth_valid(target, m, i)) (*gp)[i] += factor * (p[i] - target[i]);
        }
      });
}

}  // namespace ag

MORPHPOOL_END_NAMESPACE
