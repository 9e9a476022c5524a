#include "morphpool/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

MORPHPOOL_BEGIN_NAMESPACE

int Shape::operator[](int axis) const {
  switch (axis) {
    case 0: return n;
    case 1: return c;
    case 2: return h;
    case 3: return w;
    default: throw Error(ErrorCode::InvalidAxis, "axis " + std::to_string(axis));
  }
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, Scalar fill) : shape_(shape) {
  if (!shape.valid()) throw Error(ErrorCode::InvalidShape, "dims must be >= 1, got " + shape.str());
  data_.assign(shape.numel(), fill);
}

Tensor::Tensor(Shape shape, std::vector<Scalar> values) : shape_(shape), data_(std::move(values)) {
  if (!shape.valid()) throw Error(ErrorCode::InvalidShape, "dims must be >= 1, got " + shape.str());
  if (data_.size() != shape.numel()) {
    throw Error(ErrorCode::InvalidShape, "data length " + std::to_string(data_.size()) +
                                             " does not match " + shape.str());
  }
}

Scalar Tensor::sum() const {
  Scalar acc = 0;
  for (Scalar v : data_) acc += v;
  return acc;
}

Scalar Tensor::max() const {
  Scalar best = kNegInf;
  for (Scalar v : data_) best = std::max(best, v);
  return best;
}

Scalar Tensor::item() const {
  if (data_.size() != 1) throw Error(ErrorCode::InvalidShape, "item() on " + shape_.str());
  return data_[0];
}

void Tensor::fill(Scalar value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw Error(ErrorCode::ShapeMismatch, shape_.str() + " += " + other.shape_.str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(Scalar factor) {
  for (Scalar& v : data_) v *= factor;
  return *this;
}

Tensor elementwise(const Tensor& a, const Tensor& b, BinaryOp op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, a.shape().str() + " vs " + b.shape().str());
  }
  Tensor out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto o = out.data();
  switch (op) {
    case BinaryOp::add:
      for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = (x[i] == kNegInf || y[i] == kNegInf) ? kNegInf : x[i] + y[i];
      }
      break;
    case BinaryOp::sub:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
      break;
    case BinaryOp::mul:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
      break;
    case BinaryOp::max:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::max(x[i], y[i]);
      break;
  }
  return out;
}

Tensor reduce(const Tensor& a, ReduceOp op, std::span<const int> axes) {
  std::array<bool, 4> reduced{};
  for (int axis : axes) {
    if (axis < 0 || axis > 3) throw Error(ErrorCode::InvalidAxis, "axis " + std::to_string(axis));
    reduced[axis] = true;
  }
  const Shape& in = a.shape();
  Shape out_shape{reduced[0] ? 1 : in.n, reduced[1] ? 1 : in.c, reduced[2] ? 1 : in.h,
                  reduced[3] ? 1 : in.w};
  Tensor out(out_shape, op == ReduceOp::max ? kNegInf : Scalar{0});
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      for (int y = 0; y < in.h; ++y) {
        for (int x = 0; x < in.w; ++x) {
          Scalar& dst = out(reduced[0] ? 0 : n, reduced[1] ? 0 : c, reduced[2] ? 0 : y,
                            reduced[3] ? 0 : x);
          Scalar v = a(n, c, y, x);
          dst = op == ReduceOp::max ? std::max(dst, v) : dst + v;
        }
      }
    }
  }
  if (op == ReduceOp::mean) {
    out *= static_cast<Scalar>(out.size()) / static_cast<Scalar>(a.size());
  }
  return out;
}

Tensor reduce(const Tensor& a, ReduceOp op, std::initializer_list<int> axes) {
  return reduce(a, op, std::span<const int>(axes.begin(), axes.size()));
}

Tensor negate(const Tensor& a) {
  Tensor out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = -src[i];
  return out;
}

namespace {

constexpr std::array<char, 4> kMagic{'M', 'P', 'T', '1'};

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  }
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(const unsigned char* p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(p[i]) << (8 * i);
  return value;
}

template <typename F, typename U>
void write_elements(std::ostream& out, std::span<const Scalar> data) {
  std::vector<char> buffer(data.size() * sizeof(U));
  for (std::size_t i = 0; i < data.size(); ++i) {
    U bits = std::bit_cast<U>(static_cast<F>(data[i]));
    for (std::size_t b = 0; b < sizeof(U); ++b) {
      buffer[i * sizeof(U) + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
  }
  out.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
}

template <typename F, typename U>
void read_elements(std::istream& in, std::span<Scalar> data) {
  std::vector<unsigned char> buffer(data.size() * sizeof(U));
  in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(buffer.size()));
  if (static_cast<std::size_t>(in.gcount()) != buffer.size()) {
    throw Error(ErrorCode::CorruptFile, "truncated tensor data");
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    F value = std::bit_cast<F>(get_le<U>(buffer.data() + i * sizeof(U)));
    if (std::isnan(value)) throw Error(ErrorCode::CorruptFile, "NaN element in tensor data");
    data[i] = static_cast<Scalar>(value);
  }
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint8_t>(out, kDtypeCode);
  put_le<std::uint8_t>(out, 4);
  const Shape& s = t.shape();
  for (int axis = 0; axis < 4; ++axis) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s[axis]));
  if constexpr (sizeof(Scalar) == 8) {
    write_elements<double, std::uint64_t>(out, t.data());
  } else {
    write_elements<float, std::uint32_t>(out, t.data());
  }
  if (!out) throw Error(ErrorCode::IoError, "tensor write failed");
}

Tensor read_tensor(std::istream& in) {
  std::array<unsigned char, 22> header{};
  in.read(reinterpret_cast<char*>(header.data()), header.size());
  if (in.gcount() != static_cast<std::streamsize>(header.size())) {
    throw Error(ErrorCode::CorruptFile, "truncated tensor header");
  }
  if (std::memcmp(header.data(), kMagic.data(), kMagic.size()) != 0) {
    throw Error(ErrorCode::CorruptFile, "bad magic");
  }
  const std::uint8_t dtype = header[4];
  const std::uint8_t rank = header[5];
  if (dtype > 1) throw Error(ErrorCode::CorruptFile, "unknown dtype code " + std::to_string(dtype));
  if (rank != 4) throw Error(ErrorCode::CorruptFile, "rank must be 4, got " + std::to_string(rank));
  std::array<std::uint32_t, 4> dims{};
  for (int axis = 0; axis < 4; ++axis) {
    dims[axis] = get_le<std::uint32_t>(header.data() + 6 + 4 * axis);
    if (dims[axis] == 0 || dims[axis] > (1u << 24)) {
      throw Error(ErrorCode::CorruptFile, "implausible dimension " + std::to_string(dims[axis]));
    }
  }
  Shape shape{static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
              static_cast<int>(dims[3])};
  if (shape.numel() > (std::size_t{1} << 31)) throw Error(ErrorCode::CorruptFile, "tensor too large");
  Tensor t(shape);
  if (dtype == 1) {
    read_elements<double, std::uint64_t>(in, t.data());
  } else {
    read_elements<float, std::uint32_t>(in, t.data());
  }
  return t;
}

void save(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return read_tensor(in);
}

Tensor random_uniform(Shape shape, std::mt19937_64& rng, Scalar lo, Scalar hi) {
  Tensor t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (Scalar& v : t.data()) v = static_cast<Scalar>(dist(rng));
  return t;
}

Tensor random_normal(Shape shape, std::mt19937_64& rng, Scalar mean, Scalar stddev) {
  Tensor t(shape);
  std::normal_distribution<double> dist(mean, stddev);
  for (Scalar& v : t.data()) v = static_cast<Scalar>(dist(rng));
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, a.shape().str() + " . " + b.shape().str());
  }
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

MORPHPOOL_END_NAMESPACE
