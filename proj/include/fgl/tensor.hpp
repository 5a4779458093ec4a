#pragma once
// Dense row-major f64 tensors of rank 1..3. All numeric state in the project
// lives in these; no float anywhere.
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <string>
#include <vector>

#include "fgl/rng.hpp"

namespace fgl {

// Every buffer lives in one alignment class so SIMD kernels always split a
// reduction at the same element; results then depend on values alone, never
// on where the allocator happened to place the data.
template <class T, std::size_t Align>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(Align)); }
  bool operator==(const AlignedAllocator&) const noexcept { return true; }
  bool operator!=(const AlignedAllocator&) const noexcept { return false; }
};

using AlignedVec = std::vector<double, AlignedAllocator<double, 64>>;

struct Shape {
  int rank = 0;
  int d[3] = {1, 1, 1};

  Shape() = default;
  Shape(std::initializer_list<int> dims);

  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank; i++) n *= d[i];
    return n;
  }
  // collapse to 2-D view: all leading dims x last dim
  int64_t rows() const {
    int64_t r = 1;
    for (int i = 0; i + 1 < rank; i++) r *= d[i];
    return rank >= 1 ? r : 1;
  }
  int64_t cols() const { return rank >= 1 ? d[rank - 1] : 1; }

  bool operator==(const Shape& o) const;
  bool operator!=(const Shape& o) const { return !(*this == o); }
  std::string str() const;
};

struct Tensor {
  Shape shape;
  AlignedVec data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(s), data(size_t(s.numel()), 0.0) {}

  static Tensor zeros(Shape s) { return Tensor(s); }
  static Tensor full(Shape s, double v);
  static Tensor scalar(double v);
  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0);

  int64_t numel() const { return shape.numel(); }
  double& at(int i) { return data[size_t(i)]; }
  double at(int i) const { return data[size_t(i)]; }
  double& at(int i, int j) { return data[size_t(i) * shape.cols() + j]; }
  double at(int i, int j) const { return data[size_t(i) * shape.cols() + j]; }
  double value() const;  // numel()==1 only

  Tensor& operator+=(const Tensor& o);
  Tensor& operator*=(double c);
};

}  // namespace fgl
