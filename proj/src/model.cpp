#include "morphpool/model.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

MORPHPOOL_BEGIN_NAMESPACE

namespace model {

namespace {

constexpr std::array<std::pair<Scheme, const char*>, 6> kSchemeNames{{
    {Scheme::linear, "linear"},
    {Scheme::pool_unpool, "pool_unpool"},
    {Scheme::morph_flat, "morph_flat"},
    {Scheme::morph_parabolic, "morph_parabolic"},
    {Scheme::morph_general, "morph_general"},
    {Scheme::linear_depthwise, "linear_depthwise"},
}};

void spec_error(const std::string& what) { throw Error(ErrorCode::InvalidSpec, what); }

}  // namespace

const char* to_string(Scheme scheme) {
  for (const auto& [s, name] : kSchemeNames) {
    if (s == scheme) return name;
  }
  return "?";
}

const char* to_string(Task task) { return task == Task::segmentation ? "segmentation" : "depth_autoencode"; }

Scheme parse_scheme(const std::string& name) {
  for (const auto& [s, n] : kSchemeNames) {
    if (name == n) return s;
  }
  throw Error(ErrorCode::InvalidSpec, "unknown scheme '" + name + "'");
}

Task parse_task(const std::string& name) {
  if (name == "segmentation") return Task::segmentation;
  if (name == "depth_autoencode") return Task::depth_autoencode;
  throw Error(ErrorCode::InvalidSpec, "unknown task '" + name + "'");
}

bool is_morphological(Scheme scheme) {
  return scheme == Scheme::morph_flat || scheme == Scheme::morph_parabolic || scheme == Scheme::morph_general;
}

std::vector<Scheme> all_schemes() {
  std::vector<Scheme> out;
  for (const auto& entry : kSchemeNames) out.push_back(entry.first);
  return out;
}

std::vector<int> ModelSpec::channel_schedule() const {
  std::vector<int> widths;
  int width = base_channels;
  for (int i = 0; i < depth; ++i) {
    widths.push_back(std::min(width, base_channels * channel_cap));
    width *= 2;
  }
  return widths;
}

void ModelSpec::validate() const {
  if (depth < 1 || depth > 5) spec_error("depth must be in [1, 5]");
  if (base_channels < 1 || channel_cap < 1 || in_channels < 1) spec_error("channel counts must be >= 1");
  if (convs_per_block < 1) spec_error("convs_per_block must be >= 1");
  if (task == Task::segmentation && classes < 2) spec_error("segmentation needs at least 2 classes");
  if (k_up < 1 || k_up % 2 == 0 || k_up > morph::kMaxWindow) spec_error("k_up must be odd and <= 15");
  if (k_pool < 1 || k_pool > morph::kMaxWindow) spec_error("k_pool must be in [1, 15]");
  const bool strided = scheme == Scheme::linear || scheme == Scheme::linear_depthwise || is_morphological(scheme);
  if (strided && k_pool < kSamplingStride) spec_error("k_pool smaller than the sampling stride leaves gaps");
  if (is_morphological(scheme) && k_up < 2 * kSamplingStride - 1) {
    spec_error("k_up = " + std::to_string(k_up) + " cannot fill unpooled maps at stride " +
               std::to_string(kSamplingStride) + " (need >= " + std::to_string(2 * kSamplingStride - 1) + ")");
  }
}

std::map<std::string, std::string> ModelSpec::to_map() const {
  return {
      {"depth", std::to_string(depth)},
      {"base_channels", std::to_string(base_channels)},
      {"channel_cap", std::to_string(channel_cap)},
      {"convs_per_block", std::to_string(convs_per_block)},
      {"in_channels", std::to_string(in_channels)},
      {"scheme", to_string(scheme)},
      {"task", to_string(task)},
      {"classes", std::to_string(classes)},
      {"k_pool", std::to_string(k_pool)},
      {"k_up", std::to_string(k_up)},
  };
}

ModelSpec ModelSpec::from_map(const std::map<std::string, std::string>& values) {
  ModelSpec spec;
  auto integer = [&](const char* key, int& field) {
    auto it = values.find(key);
    if (it == values.end()) return;
    try {
      std::size_t used = 0;
      field = std::stoi(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      spec_error(std::string("bad integer for ") + key + ": '" + it->second + "'");
    }
  };
  integer("depth", spec.depth);
  integer("base_channels", spec.base_channels);
  integer("channel_cap", spec.channel_cap);
  integer("convs_per_block", spec.convs_per_block);
  integer("in_channels", spec.in_channels);
  integer("classes", spec.classes);
  integer("k_pool", spec.k_pool);
  integer("k_up", spec.k_up);
  if (auto it = values.find("scheme"); it != values.end()) spec.scheme = parse_scheme(it->second);
  if (auto it = values.find("task"); it != values.end()) spec.task = parse_task(it->second);
  return spec;
}

std::size_t Model::add_param(std::string name, ParamCategory category, bool sampling, Tensor value) {
  Tensor velocity(value.shape());
  params_.push_back(Parameter{std::move(name), category, sampling, std::move(value), std::move(velocity)});
  return params_.size() - 1;
}

Model::ConvLayer Model::add_conv(const std::string& name, int c_in, int c_out, int kernel, int stride, int padding,
                                 bool bias, bool depthwise, bool sampling, std::mt19937_64& rng) {
  nn::ConvParams p = nn::make_conv(depthwise ? 1 : c_in, c_out, kernel, stride, padding, bias, rng);
  ConvLayer layer{add_param(name + ".weight", ParamCategory::conv, sampling, std::move(p.weight)), std::nullopt,
                  stride, padding, depthwise};
  if (p.bias) layer.bias = add_param(name + ".bias", ParamCategory::conv, sampling, std::move(*p.bias));
  return layer;
}

Model::Block Model::add_block(const std::string& name, int c_in, int c_out, std::mt19937_64& rng) {
  Block block;
  for (int j = 0; j < spec_.convs_per_block; ++j) {
    const std::string conv = name + ".conv" + std::to_string(j);
    const std::string bn = name + ".bn" + std::to_string(j);
    block.convs.push_back(add_conv(conv, j == 0 ? c_in : c_out, c_out, 3, 1, 1, true, false, false, rng));
    nn::BatchNormState state(c_out);
    const std::size_t gamma = add_param(bn + ".gamma", ParamCategory::bn, false, state.gamma);
    const std::size_t beta = add_param(bn + ".beta", ParamCategory::bn, false, state.beta);
    block.norms.push_back(BnLayer{bn, gamma, beta, std::move(state)});
  }
  return block;
}

Model::SeLayer Model::add_se(const std::string& name, const morph::StructuringElement& se) {
  SeLayer layer{se.kind(), se.size(), se.origin(), std::nullopt, static_cast<std::size_t>(se.channels())};
  if (se.params()) layer.param = add_param(name + ".se", ParamCategory::se, true, *se.params());
  return layer;
}

Model Model::build(const ModelSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  const std::vector<int> widths = spec.channel_schedule();
  const int s = kSamplingStride;
  const int pool_pad = morph::pool_padding(spec.k_pool, s);
  const int up_pad = (spec.k_up - 1) / 2;

  for (int i = 0; i < spec.depth; ++i) {
    const std::string stage = std::to_string(i);
    const int c = widths[i];
    m.encoder_.push_back(m.add_block("enc" + stage, i == 0 ? spec.in_channels : widths[i - 1], c, rng));

    Sampler down;
    Sampler up;
    switch (spec.scheme) {
      case Scheme::linear:
        down.conv = m.add_conv("down" + stage + ".conv", c, c, spec.k_pool, s, pool_pad, true, false, true, rng);
        up.conv = m.add_conv("up" + stage + ".conv", c, c, spec.k_up, 1, up_pad, true, false, true, rng);
        break;
      case Scheme::linear_depthwise:
        down.conv = m.add_conv("down" + stage + ".conv", c, c, spec.k_pool, s, pool_pad, false, true, true, rng);
        up.conv = m.add_conv("up" + stage + ".conv", c, c, spec.k_up, 1, up_pad, false, true, true, rng);
        break;
      case Scheme::pool_unpool:
        up.conv = m.add_conv("up" + stage + ".conv", c, c, spec.k_up, 1, up_pad, true, false, true, rng);
        break;
      case Scheme::morph_flat:
        down.se = m.add_se("down" + stage, morph::se_flat(spec.k_pool));
        up.se = m.add_se("up" + stage, morph::se_flat(spec.k_up));
        break;
      case Scheme::morph_parabolic:
        down.se = m.add_se("down" + stage, morph::se_parabolic_pool(spec.k_pool, s, 1, c));
        up.se = m.add_se("up" + stage, morph::se_parabolic(spec.k_up, 1, c));
        break;
      case Scheme::morph_general:
        down.se = m.add_se("down" + stage, morph::se_general(spec.k_pool, c));
        up.se = m.add_se("up" + stage, morph::se_general(spec.k_up, c));
        break;
    }
    m.down_.push_back(std::move(down));
    m.up_.push_back(std::move(up));
  }
  for (int i = 0; i < spec.depth; ++i) {
    const int c_out = i == 0 ? widths[0] : widths[i - 1];
    m.decoder_.push_back(m.add_block("dec" + std::to_string(i), widths[i], c_out, rng));
  }
  m.head_ = m.add_conv("head", widths[0], spec.out_channels(), 1, 1, 0, true, false, false, rng);
  return m;
}

ag::Var Model::apply_conv(const ConvLayer& layer, ag::Var x, const std::vector<ag::Var>& leaves) const {
  std::optional<ag::Var> bias;
  if (layer.bias) bias = leaves[*layer.bias];
  if (layer.depthwise) return ag::depthwise_conv2d(x, leaves[layer.weight], bias, layer.stride, layer.padding);
  return ag::conv2d(x, leaves[layer.weight], bias, layer.stride, layer.padding);
}

ag::Var Model::apply_block(Block& block, ag::Var x, const std::vector<ag::Var>& leaves, nn::Mode mode) {
  for (std::size_t j = 0; j < block.convs.size(); ++j) {
    x = apply_conv(block.convs[j], x, leaves);
    BnLayer& bn = block.norms[j];
    x = ag::batchnorm(x, leaves[bn.gamma], leaves[bn.beta], bn.state, mode);
    x = ag::relu(x);
  }
  return x;
}

ag::Var Model::se_weights(ag::Tape& tape, const SeLayer& se, const std::vector<ag::Var>& leaves) const {
  switch (se.kind) {
    case morph::SEKind::flat: return tape.constant(Tensor::zeros(Shape{1, 1, se.size, se.size}));
    case morph::SEKind::parabolic: return ag::parabolic_weights(leaves[*se.param], se.size, se.origin);
    case morph::SEKind::general: return leaves[*se.param];
  }
  return tape.constant(Tensor::zeros(Shape{1, 1, se.size, se.size}));
}

ForwardPass Model::forward(ag::Tape& tape, const Tensor& input, nn::Mode mode, bool requires_grad) {
  const Shape& in = input.shape();
  const int factor = 1 << spec_.depth;
  if (in.h % factor != 0 || in.w % factor != 0) {
    throw Error(ErrorCode::InvalidShape, "input " + in.str() + " not divisible by 2^" + std::to_string(spec_.depth));
  }
  if (in.c != spec_.in_channels) {
    throw Error(ErrorCode::ShapeMismatch, "model expects " + std::to_string(spec_.in_channels) + " input channels");
  }
  ForwardPass pass;
  pass.params.reserve(params_.size());
  for (const Parameter& p : params_) pass.params.push_back(tape.leaf(p.value, requires_grad, p.name));
  const auto& leaves = pass.params;

  ag::Var x = tape.constant(input);
  std::vector<morph::ProvenanceMap> provenance(spec_.depth);
  for (int i = 0; i < spec_.depth; ++i) {
    x = apply_block(encoder_[i], x, leaves, mode);
    const Sampler& down = down_[i];
    switch (spec_.scheme) {
      case Scheme::linear:
      case Scheme::linear_depthwise: x = apply_conv(*down.conv, x, leaves); break;
      case Scheme::pool_unpool: {
        ag::PoolOutput pooled = ag::max_pool_classic(x);
        x = pooled.values;
        provenance[i] = std::move(pooled.provenance);
        break;
      }
      default: {
        ag::PoolOutput pooled = ag::morph_pool(x, se_weights(tape, *down.se, leaves), down.se->size, kSamplingStride);
        x = pooled.values;
        provenance[i] = std::move(pooled.provenance);
        break;
      }
    }
  }
  for (int i = spec_.depth - 1; i >= 0; --i) {
    const Sampler& up = up_[i];
    switch (spec_.scheme) {
      case Scheme::linear:
      case Scheme::linear_depthwise:
        x = apply_conv(*up.conv, ag::bilinear_upsample(x, kSamplingStride), leaves);
        break;
      case Scheme::pool_unpool: x = apply_conv(*up.conv, ag::zero_unpool(x, provenance[i]), leaves); break;
      default: x = ag::morph_unpool(x, provenance[i], se_weights(tape, *up.se, leaves)); break;
    }
    x = apply_block(decoder_[i], x, leaves, mode);
  }
  pass.output = apply_conv(head_, x, leaves);
  return pass;
}

Tensor Model::predict(const Tensor& input) {
  ag::Tape tape;
  return forward(tape, input, nn::Mode::eval, false).output.value();
}

void Model::sgd_step(const ForwardPass& pass, const ag::Gradients& grads, Scalar lr, Scalar momentum) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = params_[i];
    const Tensor* g = grads.find(pass.params[i]);
    if (g) {
      nn::sgd_nesterov_step(p.value, *g, p.velocity, lr, momentum);
    } else {
      nn::sgd_nesterov_step(p.value, Tensor::zeros(p.value.shape()), p.velocity, lr, momentum);
    }
  }
  for (auto* samplers : {&down_, &up_}) {
    for (const Sampler& s : *samplers) {
      if (s.se && s.se->kind == morph::SEKind::parabolic) {
        for (Scalar& sigma : params_[*s.se->param].value.data()) sigma = std::max(sigma, morph::kMinSigma);
      }
    }
  }
}

ParamBreakdown Model::count_params() const {
  ParamBreakdown out;
  for (const Parameter& p : params_) {
    const std::size_t n = p.value.size();
    out.total += n;
    if (p.sampling) out.sampling += n;
    switch (p.category) {
      case ParamCategory::conv: out.conv += n; break;
      case ParamCategory::bn: out.bn += n; break;
      case ParamCategory::se: out.se += n; break;
    }
    const std::string layer = p.name.substr(0, p.name.rfind('.'));
    if (out.per_layer.empty() || out.per_layer.back().layer != layer) {
      out.per_layer.push_back(LayerCount{layer, 0});
    }
    out.per_layer.back().params += n;
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Model::buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto* blocks : {&encoder_, &decoder_}) {
    for (Block& b : *blocks) {
      for (BnLayer& bn : b.norms) {
        out.emplace_back(bn.name + ".running_mean", &bn.state.running_mean);
        out.emplace_back(bn.name + ".running_var", &bn.state.running_var);
      }
    }
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::buffers() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<Model*>(this)->buffers()) out.emplace_back(name, t);
  return out;
}

ag::Var task_loss(const ModelSpec& spec, ag::Var output, const Tensor& target) {
  if (spec.task == Task::segmentation) return ag::cross_entropy(output, target, nn::kIgnoreIndex);
  return ag::masked_l2(output, target);
}

// ---- checkpoint -------------------------------------------------------------

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'M', 'P', 'C', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

[[noreturn]] void corrupt(const std::string& what) { throw Error(ErrorCode::CorruptCheckpoint, what); }

template <typename U>
void put(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return value;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) corrupt("truncated checkpoint");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

struct Record {
  std::string name;
  std::string blob;
};

std::vector<Record> collect(const Model& m) {
  std::vector<Record> records;
  auto add = [&records](const std::string& name, const Tensor& t) {
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    records.push_back(Record{name, os.str()});
  };
  for (const Parameter& p : m.parameters()) add(p.name, p.value);
  for (const auto& [name, t] : m.buffers()) add(name, *t);
  return records;
}

}  // namespace

void save_checkpoint(const Model& m, const std::filesystem::path& path) {
  std::string spec_text;
  for (const auto& [key, value] : m.spec().to_map()) spec_text += key + "=" + value + "\n";
  const std::vector<Record> records = collect(m);

  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(spec_text.size()));
  out += spec_text;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  std::uint64_t offset = 0;
  for (const Record& r : records) {
    Reader header(r.blob);
    header.take(6);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    out += r.name;
    for (int axis = 0; axis < 4; ++axis) put<std::uint32_t>(out, header.get<std::uint32_t>());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(r.blob[4]));
    put<std::uint64_t>(out, offset);
    put<std::uint64_t>(out, r.blob.size());
    offset += r.blob.size();
  }
  for (const Record& r : records) out += r.blob;

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw Error(ErrorCode::IoError, "checkpoint write failed");
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  Reader in(bytes);
  if (in.take(4) != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end())) corrupt("bad magic");
  if (const auto version = in.get<std::uint32_t>(); version != kCheckpointVersion) {
    corrupt("unsupported version " + std::to_string(version));
  }
  std::map<std::string, std::string> spec_values;
  {
    std::istringstream lines(in.take(in.get<std::uint32_t>()));
    for (std::string line; std::getline(lines, line);) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) corrupt("malformed spec line '" + line + "'");
      spec_values[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  ModelSpec spec;
  try {
    spec = ModelSpec::from_map(spec_values);
  } catch (const Error& e) {
    corrupt(e.what());
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::uint8_t dtype;
    std::uint64_t offset;
    std::uint64_t length;
  };
  std::vector<Entry> entries(in.get<std::uint32_t>());
  if (entries.size() > 100000) corrupt("implausible record count");
  for (Entry& e : entries) {
    e.name = in.take(in.get<std::uint16_t>());
    std::array<std::uint32_t, 4> dims{};
    for (auto& d : dims) d = in.get<std::uint32_t>();
    for (auto d : dims) {
      if (d == 0 || d > (1u << 24)) corrupt("bad dims for " + e.name);
    }
    e.shape = Shape{static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
                    static_cast<int>(dims[3])};
    e.dtype = in.get<std::uint8_t>();
    e.offset = in.get<std::uint64_t>();
    e.length = in.get<std::uint64_t>();
  }
  const std::size_t blob_start = in.pos();
  const std::size_t blob_size = bytes.size() - blob_start;

  std::mt19937_64 rng(0);
  Model m = [&] {
    try {
      return Model::build(spec, rng);
    } catch (const Error& e) {
      corrupt(e.what());
    }
  }();
  std::map<std::string, Tensor*> targets;
  for (Parameter& p : m.parameters()) targets[p.name] = &p.value;
  for (auto& [name, t] : m.buffers()) targets[name] = t;
  if (targets.size() != entries.size()) corrupt("record count does not match the model");

  std::set<std::string> seen;
  for (const Entry& e : entries) {
    const std::size_t element = e.dtype == 1 ? 8 : e.dtype == 0 ? 4 : 0;
    if (element == 0) corrupt("unknown dtype in " + e.name);
    if (e.length != 22 + e.shape.numel() * element) corrupt("length field of " + e.name + " is inconsistent");
    if (e.offset > blob_size || e.length > blob_size - e.offset) corrupt("record " + e.name + " overruns the file");
    auto it = targets.find(e.name);
    if (it == targets.end() || !seen.insert(e.name).second) corrupt("unexpected record " + e.name);
    if (it->second->shape() != e.shape) corrupt("shape mismatch for " + e.name);
    std::istringstream blob(bytes.substr(blob_start + e.offset, e.length), std::ios::binary);
    try {
      Tensor t = read_tensor(blob);
      if (t.shape() != e.shape) corrupt("manifest and blob disagree for " + e.name);
      *it->second = std::move(t);
    } catch (const Error& err) {
      if (err.code() == ErrorCode::CorruptCheckpoint) throw;
      corrupt(err.what());
    }
  }
  if (blob_start + blob_size != bytes.size()) corrupt("trailing bytes");
  return m;
}

}  // namespace model

MORPHPOOL_END_NAMESPACE
