#pragma once

// Confusion bookkeeping, metrics, flip TTA, sliding-window stitching and the
// test-time corruption harness.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmnet/data.hpp"
#include "mmnet/model.hpp"
#include "mmnet/ops.hpp"

namespace mmnet {

// ------------------------------------------------------------------ confusion

/// Rows are the training target, columns the prediction. tp/fp/fn follow the
/// set rule: a prediction inside the pixel's label set is a TP for every label
/// in the set; otherwise it is an FP for the prediction and an FN for each
/// label. For single-element sets this is the ordinary confusion tally.
struct Confusion {
  std::size_t num_classes = 0;
  std::vector<std::uint64_t> matrix;
  std::vector<std::uint64_t> tp, fp, fn;
  std::uint64_t correct = 0, total = 0;

  Confusion() = default;
  explicit Confusion(std::size_t k) : num_classes(k), matrix(k * k, 0), tp(k, 0), fp(k, 0), fn(k, 0) {}

  void add(std::int32_t pred, std::int32_t target, std::uint32_t label_set) {
    const auto p = static_cast<std::size_t>(pred);
    if (p >= num_classes || static_cast<std::size_t>(target) >= num_classes) {
      throw std::out_of_range("confusion: class id out of range");
    }
    ++matrix[static_cast<std::size_t>(target) * num_classes + p];
    ++total;
    if (label_set & (1u << p)) {
      ++correct;
      for (std::size_t c = 0; c < num_classes; ++c)
        if (label_set & (1u << c)) ++tp[c];
    } else {
      ++fp[p];
      for (std::size_t c = 0; c < num_classes; ++c)
        if (label_set & (1u << c)) ++fn[c];
    }
  }

  Confusion& operator+=(const Confusion& o) {
    if (o.num_classes != num_classes) throw std::invalid_argument("confusion: class count mismatch");
    for (std::size_t i = 0; i < matrix.size(); ++i) matrix[i] += o.matrix[i];
    for (std::size_t c = 0; c < num_classes; ++c) {
      tp[c] += o.tp[c];
      fp[c] += o.fp[c];
      fn[c] += o.fn[c];
    }
    correct += o.correct;
    total += o.total;
    return *this;
  }
};

/// Tallies one prediction map against a sample's labels over its valid pixels.
inline void accumulate(Confusion& c, const std::vector<std::int32_t>& pred, const Sample& s) {
  if (pred.size() != s.pixels() || s.labels.size() != s.pixels() || s.valid.size() != s.pixels()) {
    throw ShapeError("confusion: prediction has " + std::to_string(pred.size()) + " pixels, labels have " +
                     std::to_string(s.pixels()));
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (s.valid[i]) c.add(pred[i], s.labels[i], s.label_set(i));
  }
}

inline Confusion confusion(const std::vector<std::int32_t>& pred, const Sample& s, std::size_t num_classes) {
  Confusion c(num_classes);
  accumulate(c, pred, s);
  return c;
}

// ------------------------------------------------------------------ metrics

struct Metrics {
  double oa = 0, mf1 = 0, miou = 0;
  std::vector<double> f1, iou;        // NaN for excluded classes
  std::vector<std::size_t> excluded;  // classes with zero support
};

inline Metrics compute_metrics(const Confusion& c, std::ostream* log = nullptr) {
  if (c.total == 0) throw std::invalid_argument("metrics: empty confusion");
  Metrics m;
  const auto k = c.num_classes;
  m.f1.assign(k, std::numeric_limits<double>::quiet_NaN());
  m.iou = m.f1;
  m.oa = static_cast<double>(c.correct) / static_cast<double>(c.total);
  std::size_t counted = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double tp = static_cast<double>(c.tp[i]), fp = static_cast<double>(c.fp[i]), fn = static_cast<double>(c.fn[i]);
    if (tp + fn == 0) {
      m.excluded.push_back(i);
      if (log) *log << "metrics: class " << i << " has no support and is excluded from the means\n";
      continue;
    }
    m.f1[i] = 2 * tp / (2 * tp + fp + fn);
    m.iou[i] = tp / (tp + fp + fn);
    m.mf1 += m.f1[i];
    m.miou += m.iou[i];
    ++counted;
  }
  if (counted) {
    m.mf1 /= static_cast<double>(counted);
    m.miou /= static_cast<double>(counted);
  }
  return m;
}

inline std::string metrics_table(const Metrics& m, const std::vector<std::string>& class_names = {}) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "class        F1      IoU\n";
  for (std::size_t c = 0; c < m.f1.size(); ++c) {
    const auto name = c < class_names.size() ? class_names[c] : "class" + std::to_string(c);
    os << std::left << std::setw(10) << name << std::right;
    if (std::isnan(m.f1[c])) {
      os << "       -        -   (no support)\n";
    } else {
      os << std::setw(8) << m.f1[c] << " " << std::setw(8) << m.iou[c] << "\n";
    }
  }
  os << "OA " << m.oa << "  mF1 " << m.mf1 << "  mIoU " << m.miou << "\n";
  return os.str();
}

inline void write_metrics_csv(const Metrics& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17) << "metric,class,value\n";
  out << "OA,all," << m.oa << "\nmF1,all," << m.mf1 << "\nmIoU,all," << m.miou << "\n";
  for (std::size_t c = 0; c < m.f1.size(); ++c) {
    if (std::isnan(m.f1[c])) continue;
    out << "F1," << c << "," << m.f1[c] << "\nIoU," << c << "," << m.iou[c] << "\n";
  }
}

// ------------------------------------------------------------------ prediction

/// Maps a list of co-registered [N,C,H,W] inputs to [N,K,H,W] logits.
using Predictor = std::function<Tensor<float>(const std::vector<Tensor<float>>&)>;

inline Predictor model_predictor(MultiModNet<float>& model) {
  return [&model](const std::vector<Tensor<float>>& inputs) {
    NoGradGuard guard;
    return model.forward(inputs, Mode::eval).logits;
  };
}

/// Channel softmax of [N,K,H,W] logits, computed in double.
inline Tensor<float> softmax_channels(const Tensor<float>& logits) {
  detail::require_rank(logits.shape(), 4, "softmax", "logits");
  const auto n = logits.dim(0), k = logits.dim(1), px = logits.dim(2) * logits.dim(3);
  Tensor<float> out(logits.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < px; ++i) {
      const auto base = b * k * px + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, static_cast<double>(logits[base + c * px]));
      double z = 0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(logits[base + c * px] - mx);
      for (std::size_t c = 0; c < k; ++c) out[base + c * px] = static_cast<float>(std::exp(logits[base + c * px] - mx) / z);
    }
  return out;
}

/// Per-pixel argmax over channels of one [1,K,H,W] (or [K,H,W]) map; ties go to the lower id.
inline std::vector<std::int32_t> argmax_map(const Tensor<float>& scores) {
  const std::size_t off = scores.ndim() == 4 ? 1 : 0;
  if (scores.ndim() == 4 && scores.dim(0) != 1) throw ShapeError("argmax_map: expected a single map");
  const auto k = scores.dim(off), px = scores.dim(off + 1) * scores.dim(off + 2);
  std::vector<std::int32_t> out(px, 0);
  for (std::size_t i = 0; i < px; ++i)
    for (std::size_t c = 1; c < k; ++c)
      if (scores[c * px + i] > scores[static_cast<std::size_t>(out[i]) * px + i]) out[i] = static_cast<std::int32_t>(c);
  return out;
}

/// Softmax probabilities averaged over identity, hflip, vflip and both flips,
/// each mapped back to the original frame before averaging.
inline Tensor<float> tta_predict(const Predictor& predict, const std::vector<Tensor<float>>& inputs) {
  NoGradGuard guard;
  auto flip_all = [](std::vector<Tensor<float>> xs, bool h, bool v) {
    for (auto& x : xs) {
      if (h) x = flip(x, 3);
      if (v) x = flip(x, 2);
    }
    return xs;
  };
  std::vector<double> acc;
  Shape shape;
  for (int t = 0; t < 4; ++t) {
    const bool h = t & 1, v = t & 2;
    auto probs = softmax_channels(predict(flip_all(inputs, h, v)));
    if (v) probs = flip(probs, 2);
    if (h) probs = flip(probs, 3);
    if (acc.empty()) {
      acc.assign(probs.numel(), 0.0);
      shape = probs.shape();
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += probs[i];
  }
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / 4.0);
  return Tensor<float>(shape, std::move(out));
}

inline std::vector<std::size_t> window_starts(std::size_t size, std::size_t window, std::size_t stride) {
  if (window == 0 || window > size) throw std::invalid_argument("sliding window: window must be in [1, image size]");
  if (stride == 0) throw std::invalid_argument("sliding window: stride must be >= 1");
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + window < size; s += stride) starts.push_back(s);
  starts.push_back(size - window);  // clamped final window
  std::sort(starts.begin(), starts.end());
  starts.erase(std::unique(starts.begin(), starts.end()), starts.end());
  return starts;
}

/// Square windows tiled with the given stride; per-window probabilities are
/// summed per pixel and divided by the cover count. `window_probs` turns a
/// cropped input list into [N,K,h,w] probabilities (plain softmax or TTA).
inline Tensor<float> sliding_window_predict(
    const std::function<Tensor<float>(const std::vector<Tensor<float>>&)>& window_probs,
    const std::vector<Tensor<float>>& inputs, std::size_t window, std::size_t stride) {
  const auto n = inputs.at(0).dim(0), h = inputs[0].dim(2), w = inputs[0].dim(3);
  const auto ys = window_starts(h, window, stride), xs = window_starts(w, window, stride);
  std::vector<double> sum;
  std::vector<std::uint32_t> count(h * w, 0);
  std::size_t k = 0;
  for (auto y0 : ys)
    for (auto x0 : xs) {
      std::vector<Tensor<float>> crops;
      for (const auto& x : inputs) {
        const auto c = x.dim(1);
        Tensor<float> crop({n, c, window, window});
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < window; ++y)
              for (std::size_t xx = 0; xx < window; ++xx)
                crop[((b * c + ch) * window + y) * window + xx] = x[((b * c + ch) * h + y0 + y) * w + x0 + xx];
        crops.push_back(crop);
      }
      const auto p = window_probs(crops);
      if (sum.empty()) {
        k = p.dim(1);
        sum.assign(n * k * h * w, 0.0);
      }
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < k; ++c)
          for (std::size_t y = 0; y < window; ++y)
            for (std::size_t xx = 0; xx < window; ++xx)
              sum[((b * k + c) * h + y0 + y) * w + x0 + xx] += p[((b * k + c) * window + y) * window + xx];
      for (std::size_t y = 0; y < window; ++y)
        for (std::size_t xx = 0; xx < window; ++xx) ++count[(y0 + y) * w + x0 + xx];
    }
  std::vector<float> out(sum.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t i = 0; i < h * w; ++i) {
        const auto idx = (b * k + c) * h * w + i;
        out[idx] = static_cast<float>(sum[idx] / count[i]);
      }
  return Tensor<float>({n, k, h, w}, std::move(out));
}

struct PredictOptions {
  bool tta = false;
  std::size_t window = 0;  // 0 = whole image
  std::size_t stride = 0;
};

/// Class probabilities [N,K,H,W] under the chosen TTA / tiling options.
inline Tensor<float> predict_probs(const Predictor& predict, const std::vector<Tensor<float>>& inputs,
                                   const PredictOptions& opt = {}) {
  auto whole = [&](const std::vector<Tensor<float>>& xs) {
    if (opt.tta) return tta_predict(predict, xs);
    NoGradGuard guard;
    return softmax_channels(predict(xs));
  };
  if (opt.window == 0) return whole(inputs);
  return sliding_window_predict(whole, inputs, opt.window, opt.stride ? opt.stride : opt.window);
}

/// One sample's rasters as a batch of one.
inline std::vector<Tensor<float>> sample_inputs(const Sample& s) {
  std::vector<Tensor<float>> xs;
  for (const auto& r : s.rasters) xs.emplace_back(Shape{1, r.dim(0), r.dim(1), r.dim(2)}, r.values());
  return xs;
}

// ------------------------------------------------------------------ corruption

enum class CorruptionKind { none, missing_zero, white_noise, interfered_max };

inline CorruptionKind parse_corruption(const std::string& s) {
  if (s == "none") return CorruptionKind::none;
  if (s == "missing" || s == "missing_zero") return CorruptionKind::missing_zero;
  if (s == "noise" || s == "white_noise") return CorruptionKind::white_noise;
  if (s == "interfered" || s == "interfered_max") return CorruptionKind::interfered_max;
  throw std::invalid_argument("unknown corruption '" + s + "' (expected none|missing|noise|interfered)");
}

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::none: return "none";
    case CorruptionKind::missing_zero: return "missing_zero";
    case CorruptionKind::white_noise: return "white_noise";
    case CorruptionKind::interfered_max: return "interfered_max";
  }
  return "?";
}

struct Corruption {
  CorruptionKind kind = CorruptionKind::none;
  std::size_t modality = 1;
  std::uint64_t seed = 0;  // white noise stream
};

/// Returns a corrupted copy; the sample itself is not modified.
inline Sample corrupt(const Sample& s, const Corruption& c, std::uint64_t sample_index = 0) {
  Sample out = s;
  if (c.kind == CorruptionKind::none) return out;
  if (c.modality >= out.rasters.size()) throw std::invalid_argument("corruption: modality index out of range");
  auto& r = out.rasters[c.modality];
  std::vector<float> v(r.numel());
  if (c.kind == CorruptionKind::white_noise) {
    std::mt19937_64 rng(c.seed * 0x9E3779B97F4A7C15ull + sample_index);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& x : v) x = u(rng);
  } else if (c.kind == CorruptionKind::interfered_max) {
    std::fill(v.begin(), v.end(), 1.0f);
  }
  r = Tensor<float>(r.shape(), std::move(v));
  return out;
}

// ------------------------------------------------------------------ evaluation

struct EvalResult {
  Confusion confusion;
  Metrics metrics;
};

inline EvalResult evaluate(const Predictor& predict, const std::vector<Sample>& samples, std::size_t num_classes,
                           const PredictOptions& opt = {}, const Corruption& corruption = {},
                           std::ostream* log = nullptr) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  EvalResult r{Confusion(num_classes), {}};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto s = corrupt(samples[i], corruption, i);
    accumulate(r.confusion, argmax_map(predict_probs(predict, sample_inputs(s), opt)), s);
  }
  r.metrics = compute_metrics(r.confusion, log);
  return r;
}

/// Evaluation with one modality replaced at test time. Corrupting the primary
/// modality is allowed but reported on `warn`.
inline EvalResult robustness_eval(const Predictor& predict, const std::vector<Sample>& samples,
                                  std::size_t num_classes, const Corruption& corruption,
                                  std::ostream& warn = std::cerr, const PredictOptions& opt = {}) {
  if (corruption.kind != CorruptionKind::none && corruption.modality == 0) {
    warn << "warning: corrupting the primary modality is outside the intended protocol\n";
  }
  return evaluate(predict, samples, num_classes, opt, corruption);
}

// ------------------------------------------------------------------ prediction maps

inline Image8 class_map_pgm(const std::vector<std::int32_t>& pred, std::size_t h, std::size_t w) {
  Image8 img{w, h, 1, {}};
  for (auto p : pred) img.pixels.push_back(static_cast<std::uint8_t>(p));
  return img;
}

inline Image8 class_map_ppm(const std::vector<std::int32_t>& pred, std::size_t h, std::size_t w) {
  Image8 img{w, h, 3, {}};
  for (auto p : pred) {
    const auto& c = detail::kGroupColours[static_cast<std::size_t>(p) % detail::kGroupColours.size()];
    for (float v : c) img.pixels.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  }
  return img;
}

}  // namespace mmnet
