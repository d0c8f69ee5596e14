#pragma once

// Dense row-major n-d array. Shape is listed slowest axis first, so a volume
// is {Z, Y, X} and a 2D image {Y, X}; spacing vectors follow the same order.

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "cinema/common.hpp"

namespace cinema {

template <class T>
struct NdArray {
  std::vector<int64_t> shape;
  std::vector<T> v;

  NdArray() = default;
  explicit NdArray(std::vector<int64_t> s, T fill = T{}) : shape(std::move(s)) {
    v.assign(size_t(count(shape)), fill);
  }

  static int64_t count(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      require(d >= 0, errc::invalid_argument, "NdArray: negative extent");
      n *= d;
    }
    return n;
  }

  int64_t size() const { return int64_t(v.size()); }
  int rank() const { return int(shape.size()); }
  bool empty() const { return v.empty(); }

  T& at2(int64_t i, int64_t j) { return v[size_t(i * shape[1] + j)]; }
  const T& at2(int64_t i, int64_t j) const { return v[size_t(i * shape[1] + j)]; }
  T& at3(int64_t i, int64_t j, int64_t k) { return v[size_t((i * shape[1] + j) * shape[2] + k)]; }
  const T& at3(int64_t i, int64_t j, int64_t k) const {
    return v[size_t((i * shape[1] + j) * shape[2] + k)];
  }
  T& at4(int64_t i, int64_t j, int64_t k, int64_t l) {
    return v[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }
  const T& at4(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return v[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }

  bool same_shape(const NdArray& o) const { return shape == o.shape; }

  template <class U>
  NdArray<U> cast() const {
    NdArray<U> out(shape);
    for (int64_t i = 0; i < size(); ++i) out.v[size_t(i)] = U(v[size_t(i)]);
    return out;
  }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

}  // namespace cinema
