#pragma once

// Parameterised building blocks shared by the encoder, PAF, GFU and decoder.
//
// Every block exposes visit(prefix, fn) which calls fn(name, tensor, kind) for
// each tensor it owns. Optimizers, checkpoints and parameter counts all go
// through this one enumeration, so names are stable and ordered.

#include <cmath>
#include <optional>
#include <random>
#include <string>

#include "mmnet/ops.hpp"
#include "mmnet/tensor.hpp"

namespace mmnet {

enum class ParamKind {
  weight,  // decayed, base learning rate
  bias,    // not decayed, doubled learning rate
  norm,    // batchnorm affine terms: not decayed, base learning rate
  buffer,  // running statistics: not trained
};

inline const char* kind_name(ParamKind k) {
  switch (k) {
    case ParamKind::weight: return "weight";
    case ParamKind::bias: return "bias";
    case ParamKind::norm: return "norm";
    case ParamKind::buffer: return "buffer";
  }
  return "?";
}

inline std::optional<ParamKind> parse_kind(const std::string& s) {
  for (auto k : {ParamKind::weight, ParamKind::bias, ParamKind::norm, ParamKind::buffer}) {
    if (s == kind_name(k)) return k;
  }
  return std::nullopt;
}

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

/// He-normal initialisation for a kernel with the given fan-in.
template <class T>
Tensor<T> kaiming_tensor(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
struct Conv2d {
  Tensor<T> kernel;
  std::optional<Tensor<T>> bias;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, bool with_bias, std::mt19937_64& rng)
      : kernel(kaiming_tensor<T>({out, in, k, k}, in * k * k, rng)), stride(stride_), pad(k / 2) {
    if (with_bias) bias = Tensor<T>::zeros({out}, true);
  }

  std::size_t in_channels() const { return kernel.dim(1); }
  std::size_t out_channels() const { return kernel.dim(0); }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, kernel, bias, stride, pad); }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(join_name(prefix, "weight"), kernel, ParamKind::weight);
    if (bias) fn(join_name(prefix, "bias"), *bias, ParamKind::bias);
  }
};

template <class T>
struct BatchNorm {
  Tensor<T> gamma, beta, running_mean, running_var;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t c)
      : gamma(Tensor<T>::ones({c}, true)),
        beta(Tensor<T>::zeros({c}, true)),
        running_mean(Tensor<T>::zeros({c})),
        running_var(Tensor<T>::ones({c})) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, mode);
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(join_name(prefix, "gamma"), gamma, ParamKind::norm);
    fn(join_name(prefix, "beta"), beta, ParamKind::norm);
    fn(join_name(prefix, "running_mean"), running_mean, ParamKind::buffer);
    fn(join_name(prefix, "running_var"), running_var, ParamKind::buffer);
  }
};

/// conv (no bias) -> batchnorm -> optional relu.
template <class T>
struct ConvBn {
  Conv2d<T> conv;
  BatchNorm<T> bn;
  bool relu_after = true;

  ConvBn() = default;
  ConvBn(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, bool relu_, std::mt19937_64& rng)
      : conv(in, out, k, stride, false, rng), bn(out), relu_after(relu_) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    auto y = bn(conv(x), mode);
    return relu_after ? relu(y) : y;
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    conv.visit(join_name(prefix, "conv"), fn);
    bn.visit(join_name(prefix, "bn"), fn);
  }
};

}  // namespace mmnet
