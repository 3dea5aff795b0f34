#pragma once

// Central-difference verification of analytic gradients.
//
// The relative error of one element is
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
// and the check reports the maximum over the probed elements. A probe whose
// +eps or -eps evaluation flips any relu on/off pattern measures a secant
// across a kink rather than the derivative; such probes are counted and
// excluded from the maximum.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mmnet/ops.hpp"
#include "mmnet/tensor.hpp"

namespace mmnet {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Probe at most this many elements per input tensor (0 = all), chosen
  /// uniformly at random with `seed`.
  std::size_t max_elements_per_input = 0;
  std::uint64_t seed = 0;
  bool exclude_kinks = true;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kink_skipped = 0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// `f` rebuilds a scalar from the current values of `inputs` each call.
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& opts = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tensor<double> root = f();
    if (root.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued");
    root.backward();
  }

  auto evaluate = [&](std::uint64_t& signature) {
    NoGradGuard guard;
    detail::KinkMonitor::active = true;
    detail::KinkMonitor::signature = 0;
    const double v = f().item();
    signature = detail::KinkMonitor::signature;
    detail::KinkMonitor::active = false;
    return v;
  };

  std::uint64_t base_sig = 0;
  evaluate(base_sig);

  GradCheckResult result;
  std::mt19937_64 rng(opts.seed);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& in = inputs[t];
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());

    std::vector<std::size_t> probe(in.numel());
    std::iota(probe.begin(), probe.end(), std::size_t{0});
    if (opts.max_elements_per_input > 0 && probe.size() > opts.max_elements_per_input) {
      std::shuffle(probe.begin(), probe.end(), rng);
      probe.resize(opts.max_elements_per_input);
      std::sort(probe.begin(), probe.end());
    }

    for (std::size_t idx : probe) {
      const double saved = in[idx];
      std::uint64_t sig_plus = 0, sig_minus = 0;
      in[idx] = saved + opts.eps;
      const double fp = evaluate(sig_plus);
      in[idx] = saved - opts.eps;
      const double fm = evaluate(sig_minus);
      in[idx] = saved;
      if (opts.exclude_kinks && (sig_plus != base_sig || sig_minus != base_sig)) {
        ++result.kink_skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opts.eps);
      const double err = relative_error(analytic[idx], numeric);
      ++result.checked;
      if (result.checked == 1 || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = t;
        result.worst_element = idx;
        result.worst_analytic = analytic[idx];
        result.worst_numeric = numeric;
      }
    }
  }
  for (auto& in : inputs) in.zero_grad();
  return result;
}

/// Single-input form: max relative error of d f(x) / dx.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                         double eps = 1e-5) {
  GradCheckOptions opts;
  opts.eps = eps;
  return grad_check([&] { return f(x); }, {x}, opts).max_rel_error;
}

/// Fixed random projection used to turn a tensor-valued output into a
/// well-conditioned scalar: sum(out * weights) with weights of magnitude
/// `scale`. Plain sums are degenerate after batch normalization (their
/// gradient is identically zero).
inline Tensor<double> random_projection(const Shape& shape, std::uint64_t seed, double scale = 1e-3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(numel(shape));
  for (auto& v : w) v = scale * u(rng);
  return Tensor<double>(shape, std::move(w));
}

inline Tensor<double> project(const Tensor<double>& out, std::uint64_t seed, double scale = 1e-3) {
  return sum(mul(out, random_projection(out.shape(), seed, scale)));
}

}  // namespace mmnet
