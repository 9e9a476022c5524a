#pragma once

// Dilation, erosion, pooling and unpooling on the {max, +} semiring.
//
// All kernels act per (batch, channel) plane; structuring elements are
// purely spatial. A window of size K placed at output location (oy, ox)
// covers input rows stride*oy - padding + [0, K) and the matching columns.
// Offsets inside a window are encoded row-major as dy*K + dx.

#include <cstdint>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "morphpool/autograd.hpp"
#include "morphpool/tensor.hpp"

MORPHPOOL_BEGIN_NAMESPACE

namespace morph {

inline constexpr int kMaxWindow = 15;

enum class SEKind { flat, parabolic, general };
enum class GeneralInit { zeros, small_uniform };

const char* to_string(SEKind kind);

struct Window {
  int size = 1;
  int stride = 1;
  int padding = 0;
};

/// Padding that makes a size-K, stride-s pooling window produce exactly
/// dim/s outputs for dim divisible by s. Zero when K == s.
int pool_padding(int size, int stride);

/// Spatial kernel h[z]. Flat elements are shared by all channels; parabolic
/// elements carry one scale per channel, general elements one K×K grid per
/// channel. `origin` is the window offset treated as z = 0 by the parabolic
/// profile.
class StructuringElement {
 public:
  static StructuringElement flat(int size);
  static StructuringElement parabolic(int size, int origin, Scalar sigma, int channels);
  static StructuringElement general(int size, int channels, GeneralInit init, std::mt19937_64& rng);

  SEKind kind() const { return kind_; }
  int size() const { return size_; }
  int origin() const { return origin_; }
  /// Number of channels the materialised weights cover (1 for flat).
  int channels() const { return channels_; }

  /// Trainable parameters: sigma (C,1,1,1) for parabolic, grid (C,1,K,K)
  /// for general, nothing for flat.
  const std::optional<Tensor>& params() const { return params_; }
  std::optional<Tensor>& params() { return params_; }

  /// h[z] materialised as (channels, 1, K, K).
  Tensor weights() const;
  std::size_t parameter_count() const;
  /// Keeps parabolic scales away from the singularity at sigma = 0.
  void project();

 private:
  StructuringElement(SEKind kind, int size, int origin, int channels, std::optional<Tensor> params);

  SEKind kind_;
  int size_;
  int origin_;
  int channels_;
  std::optional<Tensor> params_;
};

inline constexpr Scalar kMinSigma = Scalar(1e-3);

StructuringElement se_flat(int size);
/// Centred parabolic element h[z] = -|z|^2 / (2 sigma^2); size must be odd.
StructuringElement se_parabolic(int size, Scalar sigma, int channels);
/// Parabolic element for pooling at `stride`, centred on the pooling anchor.
StructuringElement se_parabolic_pool(int size, int stride, Scalar sigma, int channels);
StructuringElement se_general(int size, int channels, GeneralInit init, std::mt19937_64& rng);
StructuringElement se_general(int size, int channels);

/// -|z - origin|^2 / (2 sigma_c^2) for every channel c.
Tensor parabolic_weights(const Tensor& sigma, int size, int origin);
/// Chain rule through parabolic_weights: sum_z g[c,z] * |z|^2 / sigma_c^3.
Tensor parabolic_sigma_grad(const Tensor& grad_weights, const Tensor& sigma, int size, int origin);

/// h[z] -> h[K-1-z] in both spatial axes.
Tensor reflect(const Tensor& weights);

/// Winning window offset per output element (the pooling "switches").
struct ProvenanceMap {
  Shape shape;  // shape of the output the offsets belong to
  int window = 1;
  int stride = 1;
  int padding = 0;
  int input_h = 1;
  int input_w = 1;
  std::vector<std::uint8_t> index;

  std::pair<int, int> source(int oy, int ox, std::uint8_t offset) const {
    return {stride * oy - padding + offset / window, stride * ox - padding + offset % window};
  }
  std::uint8_t at(int n, int c, int oy, int ox) const {
    return index[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + oy) * shape.w + ox];
  }
};

struct MorphResult {
  Tensor values;
  ProvenanceMap provenance;
};

/// out[x] = max_z f[s*x - p + z] + h[z], padding with -inf. Ties keep the
/// smallest offset. `weights` is (1 or C, 1, K, K).
MorphResult dilate2d(const Tensor& f, const Tensor& weights, Window window);
MorphResult dilate2d(const Tensor& f, const StructuringElement& h, int stride, int padding);

/// out[x] = min_z f[s*x - p + z] - h[K-1-z], padding with +inf; the dual
/// -dilate2d(-f, reflect(h)). Provenance records the arg-min offset.
MorphResult erode2d(const Tensor& f, const Tensor& weights, Window window);
MorphResult erode2d(const Tensor& f, const StructuringElement& h, int stride, int padding);

/// Strided dilation anchored at stride*x. Trailing rows/cols that do not
/// fill a whole stride are cropped. With a flat 2x2 element at stride 2 this
/// is max pooling.
MorphResult morph_pool(const Tensor& f, const StructuringElement& h, int stride);
MorphResult morph_pool(const Tensor& f, const Tensor& weights, int size, int stride);

/// Places g[x] at its recorded source position on a grid of stride times
/// the pooled size; everything else is `background` (-inf by default).
/// Colliding placements keep the larger value.
Tensor provenance_unpool(const Tensor& g, const ProvenanceMap& prov, Scalar background = kNegInf);

/// Provenance placement followed by a same-size dilation with h_up, which
/// must have odd support. Throws IncompleteFill if any -inf survives.
Tensor morph_unpool(const Tensor& g, const ProvenanceMap& prov, const StructuringElement& h_up);
Tensor morph_unpool(const Tensor& g, const ProvenanceMap& prov, const Tensor& up_weights);

struct DilationGrads {
  Tensor input;
  Tensor weights;  // same shape as the forward weights
};

/// Scatters grad_out to the recorded winners: into the input at the source
/// position and into h at the winning offset.
DilationGrads dilate2d_backward(const Tensor& grad_out, const ProvenanceMap& prov, const Shape& input_shape,
                                const Shape& weights_shape);

/// Gradient w.r.t. the element's trainable parameters (empty for flat).
std::optional<Tensor> se_param_grad(const StructuringElement& h, const Tensor& grad_weights);

/// Maps pooled-resolution gradients back through provenance placement.
Tensor provenance_unpool_backward(const Tensor& grad_out, const Tensor& g, const ProvenanceMap& prov);

}  // namespace morph

namespace ag {

struct PoolOutput {
  Var values;
  morph::ProvenanceMap provenance;
};

/// Differentiable h[z] from a (C,1,1,1) sigma leaf.
Var parabolic_weights(Var sigma, int size, int origin);
/// Weights of h as a tape node; `param` is the trainable leaf for
/// parabolic/general elements and ignored for flat ones.
Var se_weights(Tape& tape, const morph::StructuringElement& h, std::optional<Var> param);

Var dilate2d(Var f, Var weights, morph::Window window);
Var erode2d(Var f, Var weights, morph::Window window);
PoolOutput morph_pool(Var f, Var weights, int size, int stride);
Var provenance_unpool(Var g, const morph::ProvenanceMap& prov, Scalar background = kNegInf);
Var morph_unpool(Var g, const morph::ProvenanceMap& prov, Var up_weights);

}  // namespace ag

MORPHPOOL_END_NAMESPACE
