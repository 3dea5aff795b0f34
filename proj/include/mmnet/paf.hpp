#pragma once

// Pyramid attention fusion.
//
//   encode_pyramid   X_q, X_z, X_k  ->  Q, Z, K^(1..v)       (conv-bn each, signed)
//   build_attention  A = rownorm( sum_i w_i relu( Q^ (tanh(Z^T Z^) + I_a) K^_i^T ) )
//   attention_pass   H = relu(bn( A X^_k W ))               reshaped to (h4, w4)
//   fuse             F = psi( Q | up(Z) | up(K^(1)) | ... ) + H
//
// Hatted symbols are [N, rows, c] row views of [N, c, h, w] maps. Attention is
// batched per item: A has shape [N, h4*w4, h*w].

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmnet/layers.hpp"
#include "mmnet/ops.hpp"
#include "mmnet/views.hpp"

namespace mmnet {

inline constexpr double kRowNormEps = 1e-8;

struct PafConfig {
  std::size_t d4 = 16, d2 = 32, d = 64;  // input widths of X_q, X_z, X_k
  std::size_t latent = 6;                 // c
  std::size_t output = 24;                // u
  int views = 3;                          // 1..3; ablations use 1
};

template <class T>
struct PyramidFeatures {
  Tensor<T> xq, xz, xk;
};

template <class T>
struct LatentPyramid {
  Tensor<T> q, z;
  std::vector<Tensor<T>> k;  // one per view, already reverted
};

template <class T>
struct PafParams {
  PafConfig cfg;
  ConvBn<T> phi_q, phi_z, phi_k;
  std::vector<Tensor<T>> view_weights;  // each [1], init 1
  Tensor<T> channel_bias;               // I_a, [c, c], init identity
  Tensor<T> w;                          // [d, u]
  BatchNorm<T> delta_bn;
  ConvBn<T> psi;

  PafParams() = default;
  PafParams(const PafConfig& config, std::mt19937_64& rng) : cfg(config) {
    if (cfg.latent == 0 || cfg.output == 0) throw std::invalid_argument("paf: latent and output widths must be >= 1");
    if (cfg.views < 1 || cfg.views > 3) throw std::invalid_argument("paf: views must be 1..3");
    const auto c = cfg.latent, u = cfg.output;
    phi_q = ConvBn<T>(cfg.d4, c, 3, 1, false, rng);
    phi_z = ConvBn<T>(cfg.d2, c, 3, 1, false, rng);
    phi_k = ConvBn<T>(cfg.d, c, 3, 1, false, rng);
    for (int i = 0; i < cfg.views; ++i) view_weights.push_back(Tensor<T>::ones({1}, true));
    channel_bias = Tensor<T>::zeros({c, c}, true);
    for (std::size_t i = 0; i < c; ++i) channel_bias.at(i, i) = T(1);
    w = kaiming_tensor<T>({cfg.d, u}, cfg.d, rng);
    delta_bn = BatchNorm<T>(u);
    psi = ConvBn<T>((2 + cfg.views) * c, u, 3, 1, true, rng);
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    phi_q.visit(join_name(prefix, "phi_q"), fn);
    phi_z.visit(join_name(prefix, "phi_z"), fn);
    phi_k.visit(join_name(prefix, "phi_k"), fn);
    for (std::size_t i = 0; i < view_weights.size(); ++i) {
      fn(join_name(prefix, "view_weight" + std::to_string(i + 1)), view_weights[i], ParamKind::weight);
    }
    fn(join_name(prefix, "channel_bias"), channel_bias, ParamKind::bias);
    fn(join_name(prefix, "w"), w, ParamKind::weight);
    delta_bn.visit(join_name(prefix, "delta_bn"), fn);
    psi.visit(join_name(prefix, "psi"), fn);
  }
};

template <class T>
void check_pyramid(const PyramidFeatures<T>& p) {
  for (const Tensor<T>* t : {&p.xq, &p.xz, &p.xk}) {
    if (t->ndim() != 4) throw ShapeError("paf: pyramid maps must be [N,C,H,W], got " + shape_str(t->shape()));
  }
  const auto h = p.xk.dim(2), w = p.xk.dim(3);
  const bool ok = p.xq.dim(0) == p.xk.dim(0) && p.xz.dim(0) == p.xk.dim(0) && p.xz.dim(2) == 2 * h &&
                  p.xz.dim(3) == 2 * w && p.xq.dim(2) == 4 * h && p.xq.dim(3) == 4 * w;
  if (!ok) {
    throw ShapeError("paf: pyramid must satisfy h4 = 2 h2 = 4 h (and likewise for w), got X_q " +
                     shape_str(p.xq.shape()) + ", X_z " + shape_str(p.xz.shape()) + ", X_k " +
                     shape_str(p.xk.shape()));
  }
}

template <class T>
LatentPyramid<T> encode_pyramid(const PyramidFeatures<T>& p, PafParams<T>& params, Mode mode) {
  check_pyramid(p);
  LatentPyramid<T> lat;
  lat.q = params.phi_q(p.xq, mode);
  lat.z = params.phi_z(p.xz, mode);
  for (int i = 1; i <= params.cfg.views; ++i) {
    lat.k.push_back(revert_view(params.phi_k(make_view(p.xk, i), mode), i));
  }
  return lat;
}

template <class T>
Tensor<T> build_attention(const LatentPyramid<T>& lat, const PafParams<T>& params) {
  const auto c = lat.q.dim(1);
  if (lat.z.dim(1) != c) throw ShapeError("build_attention: latent width mismatch between Q and Z");
  if (lat.k.size() != params.view_weights.size()) throw ShapeError("build_attention: view count mismatch");
  for (const auto& k : lat.k) {
    if (k.dim(1) != c) throw ShapeError("build_attention: latent width mismatch between Q and K");
  }
  if (params.channel_bias.dim(0) != c) throw ShapeError("build_attention: I_a does not match latent width");

  const auto n = lat.q.dim(0);
  auto q_rows = spatial_to_rows(lat.q);
  auto z_rows = spatial_to_rows(lat.z);
  auto mix = add(tanh(bmm(transpose(z_rows), z_rows)), expand_batch(params.channel_bias, n));
  auto qm = bmm(q_rows, mix);

  Tensor<T> total;
  for (std::size_t i = 0; i < lat.k.size(); ++i) {
    auto term = scale_by(relu(bmm(qm, transpose(spatial_to_rows(lat.k[i])))), params.view_weights[i]);
    total = total.defined() ? add(total, term) : term;
  }
  return row_normalize(total, static_cast<T>(kRowNormEps));
}

/// A X^_k W reshaped to [N, u, out_h, out_w]; the message before batchnorm
/// and relu. X_k is projected through W first, which keeps the product small.
template <class T>
Tensor<T> pass_messages(const Tensor<T>& a, const Tensor<T>& xk, const Tensor<T>& w, std::size_t out_h,
                        std::size_t out_w) {
  if (xk.ndim() != 4 || a.ndim() != 3) throw ShapeError("attention_pass: expected A [N,R,S] and X_k [N,d,h,w]");
  const auto n = xk.dim(0), d = xk.dim(1), hw = xk.dim(2) * xk.dim(3);
  if (a.dim(0) != n || a.dim(2) != hw || a.dim(1) != out_h * out_w) {
    throw ShapeError("attention_pass: A " + shape_str(a.shape()) + " incompatible with X_k " +
                     shape_str(xk.shape()) + " and output " + std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  if (w.dim(0) != d) {
    throw ShapeError("attention_pass: W expects " + std::to_string(w.dim(0)) + " input channels, X_k has " +
                     std::to_string(d));
  }
  const auto u = w.dim(1);
  auto projected = reshape(matmul(reshape(spatial_to_rows(xk), {n * hw, d}), w), {n, hw, u});
  return rows_to_spatial(bmm(a, projected), out_h, out_w);
}

template <class T>
Tensor<T> attention_pass(const Tensor<T>& a, const Tensor<T>& xk, PafParams<T>& params, Mode mode,
                         std::size_t out_h, std::size_t out_w) {
  return relu(params.delta_bn(pass_messages(a, xk, params.w, out_h, out_w), mode));
}

template <class T>
Tensor<T> fuse(const LatentPyramid<T>& lat, const Tensor<T>& h, PafParams<T>& params, Mode mode) {
  const auto h4 = lat.q.dim(2), w4 = lat.q.dim(3);
  std::vector<Tensor<T>> parts{lat.q, bilinear_resize(lat.z, h4, w4)};
  for (const auto& k : lat.k) parts.push_back(bilinear_resize(k, h4, w4));
  return add(params.psi(concat(parts, 1), mode), h);
}

template <class T>
struct PafOutput {
  Tensor<T> f;
  Tensor<T> attention;
};

template <class T>
PafOutput<T> paf_forward(const PyramidFeatures<T>& p, PafParams<T>& params, Mode mode) {
  auto lat = encode_pyramid(p, params, mode);
  auto a = build_attention(lat, params);
  auto h = attention_pass(a, p.xk, params, mode, p.xq.dim(2), p.xq.dim(3));
  return {fuse(lat, h, params, mode), a};
}

}  // namespace mmnet
