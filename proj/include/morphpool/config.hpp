#pragma once

// Element precision is fixed per build of the library. Both variants can be
// linked into one executable: every precision-dependent symbol lives in an
// inline namespace named after the precision.

#include <cstdint>

#if defined(MORPHPOOL_F64)
#define MORPHPOOL_PRECISION_NS f64
#else
#define MORPHPOOL_PRECISION_NS f32
#endif

#define MORPHPOOL_BEGIN_NAMESPACE \
  namespace mp {                  \
  inline namespace MORPHPOOL_PRECISION_NS {
#define MORPHPOOL_END_NAMESPACE \
  }                             \
  }

MORPHPOOL_BEGIN_NAMESPACE

#if defined(MORPHPOOL_F64)
using Scalar = double;
inline constexpr std::uint8_t kDtypeCode = 1;
#else
using Scalar = float;
inline constexpr std::uint8_t kDtypeCode = 0;
#endif

inline constexpr const char* kPrecisionName = sizeof(Scalar) == 8 ? "f64" : "f32";

MORPHPOOL_END_NAMESPACE
