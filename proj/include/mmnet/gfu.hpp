#pragma once

#include <random>
#include <stdexcept>
#include <string>

#include "mmnet/layers.hpp"
#include "mmnet/ops.hpp"

namespace mmnet {

// gated:  G = bn(conv1x1(F)); R = bn(conv1x1(G)); out = s(G) X_q + (1 - s(G)) R
// sum:    out = X_q + bn(conv1x1(F))
// concat: out = relu(bn(conv1x1(X_q | F)))
enum class FusionKind { gated, sum, concat };

inline const char* fusion_name(FusionKind k) {
  switch (k) {
    case FusionKind::gated: return "gated";
    case FusionKind::sum: return "sum";
    case FusionKind::concat: return "concat";
  }
  return "?";
}

inline FusionKind parse_fusion(const std::string& s) {
  if (s == "gated") return FusionKind::gated;
  if (s == "sum") return FusionKind::sum;
  if (s == "concat") return FusionKind::concat;
  throw std::invalid_argument("unknown fusion kind '" + s + "' (expected gated, sum or concat)");
}

template <class T>
struct GfuParams {
  FusionKind kind = FusionKind::gated;
  std::size_t u = 0, q = 0;
  ConvBn<T> theta_s;  // u -> q (gated, sum) or q+u -> q (concat)
  ConvBn<T> theta_r;  // q -> q, gated only

  GfuParams() = default;
  GfuParams(std::size_t u_, std::size_t q_, FusionKind k, std::mt19937_64& rng) : kind(k), u(u_), q(q_) {
    switch (kind) {
      case FusionKind::gated:
        theta_s = ConvBn<T>(u, q, 1, 1, false, rng);
        theta_r = ConvBn<T>(q, q, 1, 1, false, rng);
        break;
      case FusionKind::sum:
        theta_s = ConvBn<T>(u, q, 1, 1, false, rng);
        break;
      case FusionKind::concat:
        theta_s = ConvBn<T>(q + u, q, 1, 1, true, rng);
        break;
    }
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    theta_s.visit(join_name(prefix, "theta_s"), fn);
    if (kind == FusionKind::gated) theta_r.visit(join_name(prefix, "theta_r"), fn);
  }
};

template <class T>
struct GfuOutput {
  Tensor<T> out;
  Tensor<T> gate;  // s(G); undefined for the non-gated variants
};

template <class T>
GfuOutput<T> gfu_forward(const Tensor<T>& f, const Tensor<T>& xq, GfuParams<T>& params, Mode mode) {
  if (f.ndim() != 4 || xq.ndim() != 4 || f.dim(0) != xq.dim(0)) {
    throw ShapeError("gfu: expected F [N,u,h,w] and X_q [N,q,h,w], got " + shape_str(f.shape()) + " and " +
                     shape_str(xq.shape()));
  }
  if (f.dim(1) != params.u || xq.dim(1) != params.q) {
    throw ShapeError("gfu: channel counts F=" + std::to_string(f.dim(1)) + ", X_q=" + std::to_string(xq.dim(1)) +
                     " do not match the unit's u=" + std::to_string(params.u) + ", q=" + std::to_string(params.q));
  }
  const Tensor<T> aligned =
      (f.dim(2) == xq.dim(2) && f.dim(3) == xq.dim(3)) ? f : bilinear_resize(f, xq.dim(2), xq.dim(3));

  switch (params.kind) {
    case FusionKind::sum:
      return {add(xq, params.theta_s(aligned, mode)), {}};
    case FusionKind::concat:
      return {params.theta_s(concat<T>({xq, aligned}, 1), mode), {}};
    case FusionKind::gated:
      break;
  }
  auto g = params.theta_s(aligned, mode);
  auto r = params.theta_r(g, mode);
  auto gate = sigmoid(g);
  return {add(mul(gate, xq), mul(one_minus(gate), r)), gate};
}

}  // namespace mmnet
