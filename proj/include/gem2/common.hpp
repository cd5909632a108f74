#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gem2 {

// Axis lengths of a dense row-major tensor. Rank 0 means scalar.
using Shape = std::vector<int64_t>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mismatched or invalid tensor dimensions.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf produced by a primitive, or an ill-posed numeric request.
struct NumericError : Error {
  using Error::Error;
};

// A reduction slice with nothing left to reduce (fully masked softmax/pool).
struct DegenerateSliceError : NumericError {
  using NumericError::NumericError;
};

struct ConfigError : Error {
  using Error::Error;
};

struct InputError : Error {
  using Error::Error;
};

// Out-of-range categorical value in a molecule record.
struct FeatureError : InputError {
  using InputError::InputError;
};

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 0);
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (size_t i = 0; i < nd; ++i) {
    const int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Per-axis strides for reading 'from' as if it had shape 'to' (right-aligned,
// zero stride on broadcast axes).
inline std::vector<int64_t> broadcast_strides(const Shape& from, const Shape& to) {
  if (from.size() > to.size()) {
    throw ShapeError("cannot broadcast " + shape_str(from) + " to " + shape_str(to));
  }
  const auto fs = contiguous_strides(from);
  std::vector<int64_t> out(to.size(), 0);
  const size_t off = to.size() - from.size();
  for (size_t i = 0; i < from.size(); ++i) {
    if (from[i] == to[off + i]) {
      out[off + i] = fs[i];
    } else if (from[i] == 1) {
      out[off + i] = 0;
    } else {
      throw ShapeError("cannot broadcast " + shape_str(from) + " to " + shape_str(to));
    }
  }
  return out;
}

// Walks 'shape' in row-major order maintaining offsets into two strided
// arrays. f(linear_index, off0, off1) is called once per element.
template <class F>
void walk2(const Shape& shape, const int64_t* s0, const int64_t* s1, F&& f) {
  const size_t nd = shape.size();
  if (nd == 0) {
    f(int64_t{0}, int64_t{0}, int64_t{0});
    return;
  }
  const int64_t inner = shape[nd - 1];
  const int64_t is0 = s0[nd - 1], is1 = s1[nd - 1];
  const int64_t total = numel(shape);
  if (total == 0) return;
  const int64_t outer = total / inner;
  std::vector<int64_t> ctr(nd > 1 ? nd - 1 : 0, 0);
  int64_t off0 = 0, off1 = 0, lin = 0;
  for (int64_t u = 0; u < outer; ++u) {
    int64_t o0 = off0, o1 = off1;
    for (int64_t j = 0; j < inner; ++j) {
      f(lin++, o0, o1);
      o0 += is0;
      o1 += is1;
    }
    for (int ax = static_cast<int>(nd) - 2; ax >= 0; --ax) {
      const size_t a = static_cast<size_t>(ax);
      off0 += s0[a];
      off1 += s1[a];
      if (++ctr[a] < shape[a]) break;
      off0 -= s0[a] * shape[a];
      off1 -= s1[a] * shape[a];
      ctr[a] = 0;
    }
  }
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

// Uniform double in [0, 1) from a 64-bit generator, bit-exact across stdlibs.
template <class Engine>
double uniform01(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

}  // namespace gem2
