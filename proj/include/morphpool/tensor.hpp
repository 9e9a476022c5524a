#pragma once

#include <cstddef>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "morphpool/config.hpp"
#include "morphpool/error.hpp"

MORPHPOOL_BEGIN_NAMESPACE

inline constexpr Scalar kInf = std::numeric_limits<Scalar>::infinity();
inline constexpr Scalar kNegInf = -std::numeric_limits<Scalar>::infinity();

/// Extents of a rank-4 (batch, channel, row, col) tensor.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  int operator[](int axis) const;
  bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Dense row-major NCHW tensor. The column index varies fastest.
class Tensor {
 public:
  Tensor() : Tensor(Shape{}, 0) {}
  explicit Tensor(Shape shape, Scalar fill = 0);
  Tensor(Shape shape, std::vector<Scalar> values);

  static Tensor zeros(Shape shape) { return Tensor(shape, 0); }
  static Tensor full(Shape shape, Scalar value) { return Tensor(shape, value); }
  static Tensor scalar(Scalar value) { return Tensor(Shape{}, value); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  Scalar& operator()(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  Scalar operator()(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

  /// Contiguous h×w slice for one (batch, channel) pair.
  std::span<Scalar> plane(int n, int c) {
    return std::span<Scalar>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }
  std::span<const Scalar> plane(int n, int c) const {
    return std::span<const Scalar>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }

  Scalar sum() const;
  Scalar max() const;
  Scalar item() const;

  void fill(Scalar value);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(Scalar factor);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

enum class BinaryOp { add, sub, mul, max };
enum class ReduceOp { sum, max, mean };

/// out[i] = op(a[i], b[i]). Addition treats -inf as absorbing.
Tensor elementwise(const Tensor& a, const Tensor& b, BinaryOp op);

/// Reduces over the listed axes; reduced axes keep extent 1.
Tensor reduce(const Tensor& a, ReduceOp op, std::span<const int> axes);
Tensor reduce(const Tensor& a, ReduceOp op, std::initializer_list<int> axes);

Tensor negate(const Tensor& a);

// MPT1 file format: "MPT1", u8 dtype, u8 rank (4), 4 x u32 dims, raw LE data.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save(const Tensor& t, const std::filesystem::path& path);
Tensor load(const std::filesystem::path& path);

Tensor random_uniform(Shape shape, std::mt19937_64& rng, Scalar lo, Scalar hi);
Tensor random_normal(Shape shape, std::mt19937_64& rng, Scalar mean, Scalar stddev);

/// Inner product of the flattened data, accumulated in double.
double dot(const Tensor& a, const Tensor& b);

MORPHPOOL_END_NAMESPACE
