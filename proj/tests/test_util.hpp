#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <random>
#include <vector>

#include "mmnet/layers.hpp"
#include "mmnet/tensor.hpp"

namespace mmnet::testing {

template <class T = double>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>(shape, std::move(v), requires_grad);
}

template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(T)) == 0;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

/// Every non-buffer tensor a block owns, in visit order.
template <class Block>
auto trainable(Block& block) {
  std::vector<Tensor<double>> out;
  block.visit("", [&](const std::string&, Tensor<double>& t, ParamKind kind) {
    if (kind != ParamKind::buffer) out.push_back(t);
  });
  return out;
}

}  // namespace mmnet::testing
