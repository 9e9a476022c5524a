#pragma once

// Linear counterparts and baselines for the morphological sampling layers.
// "Convolution" means cross-correlation throughout.

#include <optional>
#include <random>

#include "morphpool/autograd.hpp"
#include "morphpool/morph.hpp"
#include "morphpool/tensor.hpp"

MORPHPOOL_BEGIN_NAMESPACE

namespace nn {

struct ConvParams {
  Tensor weight;               // (c_out, c_in, K, K)
  std::optional<Tensor> bias;  // (c_out, 1, 1, 1)
  int stride = 1;
  int padding = 0;

  std::size_t parameter_count() const { return weight.size() + (bias ? bias->size() : 0); }
};

/// Uniform fan-in initialisation in +-1/sqrt(c_in*K*K); bias zeros.
ConvParams make_conv(int c_in, int c_out, int kernel, int stride, int padding, bool bias, std::mt19937_64& rng);

int conv_out_dim(int dim, int kernel, int stride, int padding);

Tensor conv2d(const Tensor& f, const ConvParams& p);

/// Adjoint of the strided conv2d with the same weight: maps weight.n
/// channels to weight.c channels. Output size (H-1)*s - 2p + K + output_padding.
Tensor transposed_conv2d(const Tensor& f, const ConvParams& p, int output_padding = 0);

/// Per-channel spatial convolution, weight (C, 1, K, K).
Tensor depthwise_conv2d(const Tensor& f, const ConvParams& p);

/// Non-overlapping 2x2 patch maximum; first maximum in row-major order wins.
morph::MorphResult max_pool_classic(const Tensor& f);

/// Provenance placement with zeros for the unknown elements.
Tensor zero_unpool(const Tensor& g, const morph::ProvenanceMap& prov);

/// Bilinear interpolation, half-pixel centres (align_corners = false).
Tensor bilinear_upsample(const Tensor& f, int factor);

enum class Mode { train, eval };

struct BatchNormState {
  Tensor gamma;  // (C,1,1,1)
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  Scalar momentum = Scalar(0.1);
  Scalar epsilon = Scalar(1e-5);

  explicit BatchNormState(int channels);
  int channels() const { return gamma.shape().n; }
};

/// Train mode normalises with batch statistics and updates the running
/// estimates (unbiased variance); eval mode uses the running estimates only.
Tensor batchnorm(const Tensor& f, BatchNormState& state, Mode mode);

Tensor relu(const Tensor& f);

inline constexpr int kIgnoreIndex = 255;

/// Mean per-pixel cross-entropy over pixels whose label != ignore_index.
/// labels: (n, 1, h, w) holding integer class ids.
Scalar cross_entropy(const Tensor& logits, const Tensor& labels, int ignore_index = kIgnoreIndex);

/// Mean squared error over valid pixels: mask != 0 when a mask is given,
/// otherwise finite target > 0.
Scalar masked_l2(const Tensor& pred, const Tensor& target, const Tensor* mask = nullptr);

/// Nesterov momentum in the form v <- mu*v + g; p <- p - lr*(g + mu*v).
void sgd_nesterov_step(Tensor& param, const Tensor& grad, Tensor& velocity, Scalar lr, Scalar momentum);

/// Exponential decay that ends at `final_fraction` of the initial rate
/// after `epochs` epochs.
struct LrSchedule {
  double initial = 5e-3;
  int epochs = 100;
  double final_fraction = 0.02;

  double gamma() const;
  double at(int epoch) const;
};

}  // namespace nn

namespace ag {

Var conv2d(Var f, Var weight, std::optional<Var> bias, int stride, int padding);
Var transposed_conv2d(Var f, Var weight, std::optional<Var> bias, int stride, int padding, int output_padding = 0);
Var depthwise_conv2d(Var f, Var weight, std::optional<Var> bias, int stride, int padding);
PoolOutput max_pool_classic(Var f);
Var zero_unpool(Var g, const morph::ProvenanceMap& prov);
Var bilinear_upsample(Var f, int factor);
Var batchnorm(Var f, Var gamma, Var beta, nn::BatchNormState& state, nn::Mode mode);
Var relu(Var f);
Var cross_entropy(Var logits, const Tensor& labels, int ignore_index = nn::kIgnoreIndex);
Var masked_l2(Var pred, const Tensor& target, const Tensor* mask = nullptr);

}  // namespace ag

MORPHPOOL_END_NAMESPACE
