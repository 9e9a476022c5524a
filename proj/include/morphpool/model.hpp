#pragma once

// DownUpNet: a symmetric encoder-decoder whose only varying part is the
// down/up-sampling scheme. Encoder pools hand their provenance maps to the
// matching decoder unpools; no features are concatenated across.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "morphpool/autograd.hpp"
#include "morphpool/morph.hpp"
#include "morphpool/nn.hpp"

MORPHPOOL_BEGIN_NAMESPACE

namespace model {

enum class Scheme { linear, pool_unpool, morph_flat, morph_parabolic, morph_general, linear_depthwise };
enum class Task { segmentation, depth_autoencode };

const char* to_string(Scheme scheme);
const char* to_string(Task task);
Scheme parse_scheme(const std::string& name);
Task parse_task(const std::string& name);
bool is_morphological(Scheme scheme);
std::vector<Scheme> all_schemes();

inline constexpr int kSamplingStride = 2;

struct ModelSpec {
  int depth = 3;
  int base_channels = 8;
  int channel_cap = 8;  // widths double per stage up to channel_cap * base_channels
  int convs_per_block = 1;
  int in_channels = 1;
  Scheme scheme = Scheme::morph_general;
  Task task = Task::segmentation;
  int classes = 4;
  int k_pool = 2;
  int k_up = 3;

  std::vector<int> channel_schedule() const;
  int out_channels() const { return task == Task::segmentation ? classes : 1; }
  /// Throws InvalidSpec on violated invariants.
  void validate() const;

  std::map<std::string, std::string> to_map() const;
  static ModelSpec from_map(const std::map<std::string, std::string>& values);

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class ParamCategory { conv, bn, se };

struct Parameter {
  std::string name;
  ParamCategory category;
  bool sampling;  // belongs to a down/up-sampling layer
  Tensor value;
  Tensor velocity;
};

struct LayerCount {
  std::string layer;
  std::size_t params;
};

struct ParamBreakdown {
  std::size_t conv = 0;
  std::size_t bn = 0;
  std::size_t se = 0;
  std::size_t sampling = 0;
  std::size_t total = 0;
  std::vector<LayerCount> per_layer;
};

struct ForwardPass {
  ag::Var output;
  std::vector<ag::Var> params;  // one leaf per Model::parameters() entry
};

class Model {
 public:
  static Model build(const ModelSpec& spec, std::mt19937_64& rng);

  const ModelSpec& spec() const { return spec_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  /// Records the network on `tape`. Train mode updates batch-norm running
  /// statistics; input dims must be divisible by 2^depth.
  ForwardPass forward(ag::Tape& tape, const Tensor& input, nn::Mode mode, bool requires_grad = false);
  /// Eval-mode forward without gradients.
  Tensor predict(const Tensor& input);

  /// Nesterov SGD on every parameter followed by the sigma projection.
  void sgd_step(const ForwardPass& pass, const ag::Gradients& grads, Scalar lr, Scalar momentum);

  ParamBreakdown count_params() const;

  /// Named non-trainable state (batch-norm running statistics).
  std::vector<std::pair<std::string, Tensor*>> buffers();
  std::vector<std::pair<std::string, const Tensor*>> buffers() const;

 private:
  struct ConvLayer {
    std::size_t weight;
    std::optional<std::size_t> bias;
    int stride;
    int padding;
    bool depthwise;
  };
  struct BnLayer {
    std::string name;
    std::size_t gamma;
    std::size_t beta;
    nn::BatchNormState state;
  };
  struct Block {
    std::vector<ConvLayer> convs;
    std::vector<BnLayer> norms;
  };
  struct SeLayer {
    morph::SEKind kind;
    int size;
    int origin;
    std::optional<std::size_t> param;
    std::size_t flat_channels;
  };
  struct Sampler {
    std::optional<ConvLayer> conv;
    std::optional<SeLayer> se;
  };

  std::size_t add_param(std::string name, ParamCategory category, bool sampling, Tensor value);
  ConvLayer add_conv(const std::string& name, int c_in, int c_out, int kernel, int stride, int padding, bool bias,
                     bool depthwise, bool sampling, std::mt19937_64& rng);
  Block add_block(const std::string& name, int c_in, int c_out, std::mt19937_64& rng);
  SeLayer add_se(const std::string& name, const morph::StructuringElement& se);

  ag::Var apply_conv(const ConvLayer& layer, ag::Var x, const std::vector<ag::Var>& leaves) const;
  ag::Var apply_block(Block& block, ag::Var x, const std::vector<ag::Var>& leaves, nn::Mode mode);
  ag::Var se_weights(ag::Tape& tape, const SeLayer& se, const std::vector<ag::Var>& leaves) const;

  ModelSpec spec_;
  std::vector<Parameter> params_;
  std::vector<Block> encoder_;
  std::vector<Sampler> down_;
  std::vector<Sampler> up_;
  std::vector<Block> decoder_;
  ConvLayer head_{};
};

/// Segmentation: cross-entropy against integer labels (255 = void).
/// Depth auto-encoding: masked L2 against the depth target.
ag::Var task_loss(const ModelSpec& spec, ag::Var output, const Tensor& target);

/// MPC1 container: magic, version, the model spec as key=value text, a
/// manifest of (name, dims, dtype, offset, length) records, then one MPT1
/// blob per record.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace model

MORPHPOOL_END_NAMESPACE
