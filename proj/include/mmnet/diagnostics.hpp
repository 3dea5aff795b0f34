#pragma once

// Finite-difference gradient audits over every differentiable op and the
// PAF / GFU / full-model composites (double precision, 32x32 instances).

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mmnet/gfu.hpp"
#include "mmnet/gradcheck.hpp"
#include "mmnet/model.hpp"
#include "mmnet/paf.hpp"
#include "mmnet/train.hpp"

namespace mmnet {

struct GradReport {
  std::string name;
  double max_rel_error = 0;
  std::size_t checked = 0, kink_skipped = 0;
};

namespace detail {

inline Tensor<double> uniform_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(shape, std::move(v));
}

template <class Block>
std::vector<Tensor<double>> trainable_of(Block& b) {
  std::vector<Tensor<double>> out;
  b.visit("", [&](const std::string&, Tensor<double>& t, ParamKind k) {
    if (k != ParamKind::buffer) out.push_back(t);
  });
  return out;
}

inline GradReport to_report(std::string name, const GradCheckResult& r) {
  return {std::move(name), r.max_rel_error, r.checked, r.kink_skipped};
}

}  // namespace detail

/// Each op on `instances` random inputs; the report keeps the worst instance.
inline std::vector<GradReport> gradcheck_ops(int instances = 20, std::uint64_t seed = 83) {
  std::mt19937_64 rng(seed);
  using Fn = std::function<Tensor<double>(std::vector<Tensor<double>>&)>;
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    Fn fn;
    double lo = -1.0;
  };
  Tensor<double> rm({3}), rv = Tensor<double>::ones({3});
  std::vector<std::int32_t> labels(18);
  std::vector<std::uint8_t> valid(18);
  for (std::size_t i = 0; i < 18; ++i) {
    labels[i] = static_cast<std::int32_t>(i * 7 % 4);
    valid[i] = i % 5 != 0;
  }
  const std::vector<Case> cases{
      {"conv2d", {{2, 3, 5, 5}, {4, 3, 3, 3}, {4}}, [](auto& in) { return conv2d(in[0], in[1], in[2], 1, 1); }},
      {"conv2d_stride2", {{1, 2, 7, 6}, {3, 2, 3, 3}}, [](auto& in) { return conv2d(in[0], in[1], std::nullopt, 2, 1); }},
      {"conv2d_1x1", {{2, 3, 3, 4}, {2, 3, 1, 1}}, [](auto& in) { return conv2d(in[0], in[1], std::nullopt, 1, 0); }},
      {"bilinear_resize_up", {{1, 2, 3, 2}}, [](auto& in) { return bilinear_resize(in[0], 7, 5); }},
      {"bilinear_resize_down", {{1, 2, 6, 5}}, [](auto& in) { return bilinear_resize(in[0], 3, 2); }},
      {"matmul", {{4, 3}, {3, 5}}, [](auto& in) { return matmul(in[0], in[1]); }},
      {"bmm", {{2, 4, 3}, {2, 3, 5}}, [](auto& in) { return bmm(in[0], in[1]); }},
      {"relu", {{20}}, [](auto& in) { return relu(in[0]); }},
      {"tanh", {{20}}, [](auto& in) { return tanh(in[0]); }},
      {"sigmoid", {{20}}, [](auto& in) { return sigmoid(in[0]); }},
      {"one_minus", {{20}}, [](auto& in) { return one_minus(in[0]); }},
      {"scale", {{20}}, [](auto& in) { return scale(in[0], -1.7); }},
      {"scale_by", {{20}, {1}}, [](auto& in) { return scale_by(in[0], in[1]); }},
      {"add", {{6}, {6}}, [](auto& in) { return add(in[0], in[1]); }},
      {"sub", {{6}, {6}}, [](auto& in) { return sub(in[0], in[1]); }},
      {"mul", {{6}, {6}}, [](auto& in) { return mul(in[0], in[1]); }},
      {"row_normalize", {{3, 4}}, [](auto& in) { return row_normalize(in[0], 1e-8); }, 0.1},
      {"batchnorm2d", {{2, 3, 2, 3}, {3}, {3}},
       [&](auto& in) { return batchnorm2d(in[0], in[1], in[2], rm, rv, Mode::train); }},
      {"reshape", {{2, 6}}, [](auto& in) { return reshape(in[0], {3, 4}); }},
      {"permute", {{2, 3, 4}}, [](auto& in) { return permute(in[0], {2, 0, 1}); }},
      {"transpose", {{2, 3, 4}}, [](auto& in) { return transpose(in[0]); }},
      {"flip", {{2, 3, 4}}, [](auto& in) { return flip(in[0], 1); }},
      {"concat", {{2, 3}, {2, 2}}, [](auto& in) { return concat<double>({in[0], in[1]}, 1); }},
      {"expand_batch", {{2, 3}}, [](auto& in) { return expand_batch(in[0], 3); }},
      {"spatial_to_rows", {{2, 3, 2, 2}}, [](auto& in) { return spatial_to_rows(in[0]); }},
      {"rows_to_spatial", {{2, 4, 3}}, [](auto& in) { return rows_to_spatial(in[0], 2, 2); }},
      {"sum", {{5}}, [](auto& in) { return sum(in[0]); }},
      {"mean", {{5}}, [](auto& in) { return mean(in[0]); }},
      {"weighted_ce_loss", {{2, 4, 3, 3}},
       [&](auto& in) { return weighted_ce_loss(in[0], labels, {1.0, 0.3, 2.0, 1.1}, valid); }},
  };
  std::vector<GradReport> out;
  for (const auto& c : cases) {
    GradReport worst{c.name, 0, 0, 0};
    for (int i = 0; i < instances; ++i) {
      std::vector<Tensor<double>> inputs;
      for (const auto& s : c.shapes) inputs.push_back(detail::uniform_tensor(s, rng, c.lo, 1.0));
      for (auto& t : inputs) t.set_requires_grad(true);
      const auto seed_i = rng();
      const auto r = grad_check([&] { return project(c.fn(inputs), seed_i, 1.0); }, inputs);
      worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
      worst.checked += r.checked;
      worst.kink_skipped += r.kink_skipped;
    }
    out.push_back(worst);
  }
  return out;
}

/// PAF on a pyramid from a 32x32 input: X_q 8x8, X_z 4x4, X_k 2x2, or the
/// full-resolution variant with X_q itself 32x32 when `full_res` is set.
inline GradReport gradcheck_paf(bool full_res = true, std::uint64_t seed = 17) {
  std::mt19937_64 rng(seed);
  PafConfig cfg{2, 3, 3, 2, 3, 3};
  PafParams<double> params(cfg, rng);
  const std::size_t q = full_res ? 32 : 8;
  PyramidFeatures<double> p{detail::uniform_tensor({2, cfg.d4, q, q}, rng, -1, 1),
                            detail::uniform_tensor({2, cfg.d2, q / 2, q / 2}, rng, -1, 1),
                            detail::uniform_tensor({2, cfg.d, q / 4, q / 4}, rng, -1, 1)};
  auto inputs = detail::trainable_of(params);
  for (auto* t : {&p.xq, &p.xz, &p.xk}) {
    t->set_requires_grad(true);
    inputs.push_back(*t);
  }
  GradCheckOptions opts;
  opts.max_elements_per_input = 16;
  opts.seed = seed;
  const auto r = grad_check([&] { return project(paf_forward(p, params, Mode::train).f, 99); }, inputs, opts);
  return detail::to_report("paf", r);
}

inline std::vector<GradReport> gradcheck_gfu(std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  std::vector<GradReport> out;
  for (auto kind : {FusionKind::gated, FusionKind::sum, FusionKind::concat}) {
    GfuParams<double> p(3, 2, kind, rng);
    auto f = detail::uniform_tensor({2, 3, 32, 32}, rng, -1, 1);
    auto xq = detail::uniform_tensor({2, 2, 32, 32}, rng, -1, 1);
    f.set_requires_grad(true);
    xq.set_requires_grad(true);
    auto inputs = detail::trainable_of(p);
    inputs.push_back(f);
    inputs.push_back(xq);
    GradCheckOptions opts;
    opts.max_elements_per_input = 32;
    const auto r = grad_check([&] { return project(gfu_forward(f, xq, p, Mode::train).out, 5); }, inputs, opts);
    out.push_back(detail::to_report(std::string("gfu_") + fusion_name(kind), r));
  }
  return out;
}

/// Tiny bimodal PAGNet on a 32x32 batch of two, parameters and inputs probed.
inline GradReport gradcheck_model(std::uint64_t seed = 11) {
  ModelConfig cfg;
  cfg.num_classes = 3;
  for (auto [name, ch] : {std::pair{"rgb", std::size_t{3}}, std::pair{"dsm", std::size_t{1}}}) {
    ModalityConfig m;
    m.name = name;
    m.encoder = {ch, 3, 3, 4, 4};
    m.latent = 2;
    m.output = 3;
    cfg.modalities.push_back(m);
  }
  MultiModNet<double> model(cfg);
  std::mt19937_64 rng(seed);
  std::vector<Tensor<double>> xs, probe;
  for (const auto& m : cfg.modalities) xs.push_back(detail::uniform_tensor({2, m.encoder.in_channels, 32, 32}, rng, 0, 1));
  model.visit([&](const std::string&, Tensor<double>& t, ParamKind k) {
    if (k != ParamKind::buffer) probe.push_back(t);
  });
  for (auto& x : xs) {
    x.set_requires_grad(true);
    probe.push_back(x);
  }
  GradCheckOptions opts;
  opts.max_elements_per_input = 6;
  opts.seed = seed;
  const auto r = grad_check([&] { return project(model.forward(xs, Mode::train).logits, 13); }, probe, opts);
  return detail::to_report("pagnet_bimodal", r);
}

/// module: ops | paf | gfu | model | all.
inline std::vector<GradReport> run_gradchecks(const std::string& module) {
  if (module != "ops" && module != "paf" && module != "gfu" && module != "model" && module != "all") {
    throw std::invalid_argument("unknown gradcheck module '" + module + "' (expected ops|paf|gfu|model|all)");
  }
  std::vector<GradReport> out;
  const bool all = module == "all";
  if (all || module == "ops") {
    auto ops = gradcheck_ops();
    out.insert(out.end(), ops.begin(), ops.end());
  }
  if (all || module == "paf") out.push_back(gradcheck_paf());
  if (all || module == "gfu") {
    auto g = gradcheck_gfu();
    out.insert(out.end(), g.begin(), g.end());
  }
  if (all || module == "model") out.push_back(gradcheck_model());
  return out;
}

}  // namespace mmnet
