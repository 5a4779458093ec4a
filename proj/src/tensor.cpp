#include "fgl/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace fgl {

Shape::Shape(std::initializer_list<int> dims) {
  if (dims.size() < 1 || dims.size() > 3) throw std::invalid_argument("tensor rank must be 1..3");
  for (int v : dims) {
    if (v <= 0) throw std::invalid_argument("tensor dims must be positive");
    d[rank++] = v;
  }
}

bool Shape::operator==(const Shape& o) const {
  if (rank != o.rank) return false;
  for (int i = 0; i < rank; i++)
    if (d[i] != o.d[i]) return false;
  return true;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << "(";
  for (int i = 0; i < rank; i++) os << (i ? "x" : "") << d[i];
  os << ")";
  return os.str();
}

Tensor Tensor::full(Shape s, double v) {
  Tensor t(s);
  for (auto& x : t.data) x = v;
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t(Shape{1});
  t.data[0] = v;
  return t;
}

Tensor Tensor::randn(Shape s, Rng& rng, double stddev) {
  Tensor t(s);
  for (auto& x : t.data) x = rng.normal() * stddev;
  return t;
}

double Tensor::value() const {
  if (numel() != 1) throw std::invalid_argument("value() on non-scalar tensor " + shape.str());
  return data[0];
}

Tensor& Tensor::operator+=(const Tensor& o) {
  if (shape != o.shape) throw std::invalid_argument("shape mismatch in += : " + shape.str() + " vs " + o.shape.str());
  for (size_t i = 0; i < data.size(); i++) data[i] += o.data[i];
  return *this;
}

Tensor& Tensor::operator*=(double c) {
  for (auto& x : data) x *= c;
  return *this;
}

}  // namespace fgl
