#pragma once

// Loss, learning-rate schedules, the Adam-then-SGD optimiser and the training
// loop.
//
// Train config schema (flat key=value, all optional):
//   batch_size=8  crop=0 (0 = whole image)  epochs=20  iterations=0 (0 = epochs * batches per epoch)
//   adam_iters=10000  base_lr=1e-3  bias_lr_multiplier=2  weight_decay=2e-5
//   schedule=poly        # any '*'-joined subset of poly, step, cosine; or constant
//   poly_power=0.9  poly_max_iter=0 (0 = iterations)
//   step_factor=0.75  step_every=5
//   cosine_max_epoch=0 (0 = epochs)
//   momentum=0.9  beta1=0.9  beta2=0.999  adam_eps=1e-8
//   class_weights=median_frequency   # or uniform
//   augment=true  seed=1

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmnet/config.hpp"
#include "mmnet/data.hpp"
#include "mmnet/eval.hpp"
#include "mmnet/model.hpp"

namespace mmnet {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t crop = 0;
  std::size_t epochs = 20;
  std::size_t iterations = 0;
  std::size_t adam_iters = 10000;
  double base_lr = 1e-3;
  double bias_lr_multiplier = 2.0;
  double weight_decay = 2e-5;
  std::string schedule = "poly";
  double poly_power = 0.9;
  std::size_t poly_max_iter = 0;
  double step_factor = 0.75;
  std::size_t step_every = 5;
  std::size_t cosine_max_epoch = 0;
  double momentum = 0.9, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::string class_weights = "median_frequency";
  bool augment = true;
  std::uint64_t seed = 1;

  static TrainConfig from(const KeyValues& kv) {
    TrainConfig c;
    c.batch_size = kv.number<std::size_t>("batch_size", c.batch_size);
    c.crop = kv.number<std::size_t>("crop", c.crop);
    c.epochs = kv.number<std::size_t>("epochs", c.epochs);
    c.iterations = kv.number<std::size_t>("iterations", c.iterations);
    c.adam_iters = kv.number<std::size_t>("adam_iters", c.adam_iters);
    c.base_lr = kv.number<double>("base_lr", c.base_lr);
    c.bias_lr_multiplier = kv.number<double>("bias_lr_multiplier", c.bias_lr_multiplier);
    c.weight_decay = kv.number<double>("weight_decay", c.weight_decay);
    c.schedule = kv.str("schedule", c.schedule);
    c.poly_power = kv.number<double>("poly_power", c.poly_power);
    c.poly_max_iter = kv.number<std::size_t>("poly_max_iter", c.poly_max_iter);
    c.step_factor = kv.number<double>("step_factor", c.step_factor);
    c.step_every = kv.number<std::size_t>("step_every", c.step_every);
    c.cosine_max_epoch = kv.number<std::size_t>("cosine_max_epoch", c.cosine_max_epoch);
    c.momentum = kv.number<double>("momentum", c.momentum);
    c.beta1 = kv.number<double>("beta1", c.beta1);
    c.beta2 = kv.number<double>("beta2", c.beta2);
    c.adam_eps = kv.number<double>("adam_eps", c.adam_eps);
    c.class_weights = kv.str("class_weights", c.class_weights);
    c.augment = kv.flag("augment", c.augment);
    c.seed = kv.number<std::uint64_t>("seed", c.seed);
    return c;
  }

  std::string to_string() const {
    std::ostringstream os;
    os.precision(17);
    os << "batch_size=" << batch_size << "\ncrop=" << crop << "\nepochs=" << epochs << "\niterations=" << iterations
       << "\nadam_iters=" << adam_iters << "\nbase_lr=" << base_lr << "\nbias_lr_multiplier=" << bias_lr_multiplier
       << "\nweight_decay=" << weight_decay << "\nschedule=" << schedule << "\npoly_power=" << poly_power
       << "\npoly_max_iter=" << poly_max_iter << "\nstep_factor=" << step_factor << "\nstep_every=" << step_every
       << "\ncosine_max_epoch=" << cosine_max_epoch << "\nmomentum=" << momentum << "\nbeta1=" << beta1
       << "\nbeta2=" << beta2 << "\nadam_eps=" << adam_eps << "\nclass_weights=" << class_weights
       << "\naugment=" << (augment ? "true" : "false") << "\nseed=" << seed << "\n";
    return os.str();
  }

  std::vector<std::string> schedule_parts() const {
    auto parts = split(schedule, '*');
    for (const auto& p : parts) {
      if (p != "poly" && p != "step" && p != "cosine" && p != "constant") {
        throw ConfigError("schedule: unknown component '" + p + "' (expected poly, step, cosine or constant)");
      }
    }
    return parts;
  }

  std::size_t batches_per_epoch(std::size_t train_size) const { return (train_size + batch_size - 1) / batch_size; }
  std::size_t total_iterations(std::size_t train_size) const {
    return iterations ? iterations : epochs * batches_per_epoch(train_size);
  }

  void validate(std::size_t train_size) const {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (train_size == 0) throw ConfigError("training split is empty");
    if (adam_iters > total_iterations(train_size)) {
      throw ConfigError("adam_iters (" + std::to_string(adam_iters) + ") exceeds the total iterations (" +
                        std::to_string(total_iterations(train_size)) + ")");
    }
    if (class_weights != "median_frequency" && class_weights != "uniform") {
      throw ConfigError("class_weights must be median_frequency or uniform");
    }
    if (step_every == 0) throw ConfigError("step_every must be >= 1");
    if (crop % 16) throw ConfigError("crop must be a multiple of 16");
    schedule_parts();
  }
};

// ------------------------------------------------------------------ schedule

/// Product of the configured factors. `max_iter` and `max_epoch` fall back to
/// the run length when their keys are 0.
inline double lr_at(const TrainConfig& cfg, std::size_t iter, std::size_t epoch, std::size_t total_iters = 0,
                    std::size_t total_epochs = 0) {
  double lr = cfg.base_lr;
  for (const auto& part : cfg.schedule_parts()) {
    if (part == "poly") {
      const double max_iter = static_cast<double>(cfg.poly_max_iter ? cfg.poly_max_iter : total_iters);
      if (max_iter <= 0) throw ConfigError("poly schedule needs poly_max_iter or a run length");
      lr *= std::pow(std::max(0.0, 1.0 - static_cast<double>(iter) / max_iter), cfg.poly_power);
    } else if (part == "step") {
      lr *= std::pow(cfg.step_factor, static_cast<double>(epoch / cfg.step_every));
    } else if (part == "cosine") {
      const double max_epoch = static_cast<double>(cfg.cosine_max_epoch ? cfg.cosine_max_epoch : total_epochs);
      if (max_epoch <= 0) throw ConfigError("cosine schedule needs cosine_max_epoch or a run length");
      lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, epoch / max_epoch)));
    }
  }
  return lr;
}

// ------------------------------------------------------------------ loss

/// Median-frequency balancing: freq_c = pixels of c / pixels of the images
/// containing c; weight_c = median(freq) / freq_c. Classes never seen get 1.
inline std::vector<double> median_frequency_weights(const std::vector<Sample>& samples, std::size_t k) {
  std::vector<double> count(k, 0.0), exposure(k, 0.0);
  for (const auto& s : samples) {
    std::vector<double> here(k, 0.0);
    double valid = 0;
    for (std::size_t i = 0; i < s.pixels(); ++i) {
      if (!s.valid[i]) continue;
      here[static_cast<std::size_t>(s.labels[i])] += 1;
      valid += 1;
    }
    for (std::size_t c = 0; c < k; ++c) {
      count[c] += here[c];
      if (here[c] > 0) exposure[c] += valid;
    }
  }
  std::vector<double> freq;
  for (std::size_t c = 0; c < k; ++c)
    if (count[c] > 0) freq.push_back(count[c] / exposure[c]);
  if (freq.empty()) return std::vector<double>(k, 1.0);
  std::sort(freq.begin(), freq.end());
  const auto n = freq.size();
  const double median = n % 2 ? freq[n / 2] : 0.5 * (freq[n / 2 - 1] + freq[n / 2]);
  std::vector<double> w(k, 1.0);
  for (std::size_t c = 0; c < k; ++c)
    if (count[c] > 0) w[c] = median / (count[c] / exposure[c]);
  return w;
}

/// Mean over valid pixels of w_y * -log softmax(logits)_y, for [N,K,H,W] logits.
template <class T>
Tensor<T> weighted_ce_loss(const Tensor<T>& logits, const std::vector<std::int32_t>& labels,
                           const std::vector<double>& weights, const std::vector<std::uint8_t>& valid) {
  detail::require_rank(logits.shape(), 4, "weighted_ce_loss", "logits");
  const auto n = logits.dim(0), k = logits.dim(1), px = logits.dim(2) * logits.dim(3);
  if (labels.size() != n * px || valid.size() != n * px) {
    throw ShapeError("weighted_ce_loss: labels/mask have " + std::to_string(labels.size()) + " entries, logits " +
                     shape_str(logits.shape()));
  }
  if (weights.size() != k) throw ShapeError("weighted_ce_loss: class_weights length must equal num_classes");
  const auto count = static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  if (count == 0) throw std::invalid_argument("weighted_ce_loss: no valid pixels");

  // Softmax is kept for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(n * k * px);
  const auto& x = logits.values();
  double total = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < px; ++i) {
      const auto base = b * k * px + i;
      double mx = -INFINITY;
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, static_cast<double>(x[base + c * px]));
      double z = 0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(x[base + c * px] - mx);
      for (std::size_t c = 0; c < k; ++c) (*probs)[base + c * px] = std::exp(x[base + c * px] - mx) / z;
      const auto p = b * px + i;
      if (!valid[p]) continue;
      const auto y = static_cast<std::size_t>(labels[p]);
      if (y >= k) throw std::out_of_range("weighted_ce_loss: label out of range");
      total += weights[y] * -(x[base + y * px] - mx - std::log(z));
    }
  const double inv = 1.0 / static_cast<double>(count);
  return detail::make_result<T>(
      {1}, {static_cast<T>(total * inv)}, {logits}, "weighted_ce_loss",
      [probs, labels, weights, valid, n, k, px, inv](detail::Node<T>& out) {
        auto& p = *out.parents[0];
        if (!p.requires_grad) return;
        T* g = p.grad_buffer();
        const double go = out.grad[0] * inv;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < px; ++i) {
            const auto q = b * px + i;
            if (!valid[q]) continue;
            const auto y = static_cast<std::size_t>(labels[q]);
            const double wy = weights[y] * go;
            for (std::size_t c = 0; c < k; ++c) {
              const auto idx = b * k * px + c * px + i;
              g[idx] += static_cast<T>(wy * ((*probs)[idx] - (c == y ? 1.0 : 0.0)));
            }
          }
      });
}

// ------------------------------------------------------------------ optimiser

struct ParamSlot {
  std::string name;
  Tensor<float> tensor;
  ParamKind kind;
};

template <class Model>
std::vector<ParamSlot> trainable_slots(Model& model) {
  std::vector<ParamSlot> out;
  model.visit([&](const std::string& name, Tensor<float>& t, ParamKind kind) {
    if (kind != ParamKind::buffer) out.push_back({name, t, kind});
  });
  return out;
}

struct OptimizerState {
  std::vector<std::vector<float>> adam_m, adam_v, momentum;
  std::uint64_t adam_steps = 0;

  void init(const std::vector<ParamSlot>& slots) {
    adam_m.clear();
    adam_v.clear();
    momentum.clear();
    for (const auto& s : slots) {
      adam_m.emplace_back(s.tensor.numel(), 0.0f);
      adam_v.emplace_back(s.tensor.numel(), 0.0f);
      momentum.emplace_back(s.tensor.numel(), 0.0f);
    }
    adam_steps = 0;
  }
};

/// One update of every slot. Weight decay (added to the gradient) touches
/// `weight` slots only; `bias` slots use bias_lr_multiplier * lr. Adam runs
/// while iter < adam_iters, SGD with momentum afterwards; the momentum buffer
/// starts at zero at the switch. Gradients are cleared afterwards.
inline void optimizer_step(std::vector<ParamSlot>& slots, OptimizerState& st, const TrainConfig& cfg,
                           std::size_t iter, double lr) {
  if (st.adam_m.size() != slots.size()) throw std::logic_error("optimizer state does not match the parameters");
  const bool adam = iter < cfg.adam_iters;
  if (adam) ++st.adam_steps;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.adam_steps));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.adam_steps));
  for (std::size_t s = 0; s < slots.size(); ++s) {
    auto& slot = slots[s];
    auto w = slot.tensor.data();
    const auto grad = slot.tensor.grad();
    const bool has = !grad.empty();
    const double step_lr = slot.kind == ParamKind::bias ? lr * cfg.bias_lr_multiplier : lr;
    const double decay = slot.kind == ParamKind::weight ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = (has ? static_cast<double>(grad[i]) : 0.0) + decay * w[i];
      if (adam) {
        const double m = cfg.beta1 * st.adam_m[s][i] + (1 - cfg.beta1) * g;
        const double v = cfg.beta2 * st.adam_v[s][i] + (1 - cfg.beta2) * g * g;
        st.adam_m[s][i] = static_cast<float>(m);
        st.adam_v[s][i] = static_cast<float>(v);
        w[i] = static_cast<float>(w[i] - step_lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps));
      } else {
        const double buf = cfg.momentum * st.momentum[s][i] + g;
        st.momentum[s][i] = static_cast<float>(buf);
        w[i] = static_cast<float>(w[i] - step_lr * buf);
      }
    }
    slot.tensor.zero_grad();
  }
}

inline void save_optimizer(const OptimizerState& st, const std::vector<ParamSlot>& slots,
                           const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t s = 0; s < slots.size(); ++s) {
    const Shape shape{slots[s].tensor.numel()};
    char base[32];
    std::snprintf(base, sizeof(base), "%04zu", s);
    detail::write_bytes(dir / (std::string("m") + base + ".ten"), encode_ten<float>(shape, st.adam_m[s]));
    detail::write_bytes(dir / (std::string("v") + base + ".ten"), encode_ten<float>(shape, st.adam_v[s]));
    detail::write_bytes(dir / (std::string("b") + base + ".ten"), encode_ten<float>(shape, st.momentum[s]));
  }
  std::ofstream(dir / "state.txt", std::ios::trunc) << "adam_steps=" << st.adam_steps << "\nslots=" << slots.size()
                                                    << "\n";
}

inline OptimizerState load_optimizer(const std::vector<ParamSlot>& slots, const std::filesystem::path& dir) {
  OptimizerState st;
  auto kv = KeyValues::load(dir / "state.txt");
  if (kv.number<std::size_t>("slots") != slots.size()) throw std::runtime_error("optimizer state: slot count mismatch");
  st.adam_steps = kv.number<std::uint64_t>("adam_steps");
  for (std::size_t s = 0; s < slots.size(); ++s) {
    char base[32];
    std::snprintf(base, sizeof(base), "%04zu", s);
    auto read = [&](const char* prefix) {
      auto t = load_ten<float>(dir / (std::string(prefix) + base + ".ten"));
      if (t.numel() != slots[s].tensor.numel()) throw std::runtime_error("optimizer state: size mismatch");
      return t.values();
    };
    st.adam_m.push_back(read("m"));
    st.adam_v.push_back(read("v"));
    st.momentum.push_back(read("b"));
  }
  return st;
}

// ------------------------------------------------------------------ modality selection

/// Position of each model modality in the dataset's raster list.
inline std::vector<std::size_t> modality_indices(const ModelConfig& model, const DatasetMeta& meta) {
  std::vector<std::size_t> idx;
  for (const auto& m : model.modalities) {
    auto it = std::find(meta.modality_names.begin(), meta.modality_names.end(), m.name);
    if (it == meta.modality_names.end()) throw ConfigError("dataset has no modality '" + m.name + "'");
    const auto i = static_cast<std::size_t>(it - meta.modality_names.begin());
    if (meta.modality_channels[i] != m.encoder.in_channels) {
      throw ConfigError("modality '" + m.name + "' has " + std::to_string(meta.modality_channels[i]) +
                        " channels in the dataset, model expects " + std::to_string(m.encoder.in_channels));
    }
    idx.push_back(i);
  }
  return idx;
}

/// Samples whose raster list is reordered to the model's modalities (storage is shared).
inline std::vector<Sample> select_modalities(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx) {
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    Sample t = s;
    t.rasters.clear();
    for (auto i : idx) t.rasters.push_back(s.rasters.at(i));
    out.push_back(std::move(t));
  }
  return out;
}

// ------------------------------------------------------------------ training loop

struct TrainOptions {
  std::filesystem::path out_dir;
  std::filesystem::path resume_from;  // a previous run's out_dir/last
  std::size_t stop_after = 0;         // stop (saving state) once this many iterations are done; 0 = run to the end
  std::ostream* progress = nullptr;
};

struct TrainResult {
  std::vector<double> losses;  // per iteration, this invocation only
  std::vector<double> epoch_loss;
  std::vector<double> val_miou, val_mf1;
  double best_miou = -1;
  std::size_t best_epoch = 0;
  std::size_t iterations_done = 0;
};

namespace detail {

inline Sample random_crop(const Sample& s, std::size_t crop, std::mt19937_64& rng) {
  if (crop == 0 || (crop == s.height && crop == s.width)) return s;
  if (crop > s.height || crop > s.width) throw ConfigError("crop is larger than the training images");
  const auto y0 = static_cast<std::size_t>(rng() % (s.height - crop + 1));
  const auto x0 = static_cast<std::size_t>(rng() % (s.width - crop + 1));
  Sample t = s;
  t.height = t.width = crop;
  for (auto& r : t.rasters) {
    const auto c = r.dim(0);
    Tensor<float> out({c, crop, crop});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < crop; ++y)
        for (std::size_t x = 0; x < crop; ++x) out[(ch * crop + y) * crop + x] = r[(ch * s.height + y0 + y) * s.width + x0 + x];
    r = out;
  }
  auto cut = [&](auto& v) {
    if (v.empty()) return;
    auto src = v;
    v.resize(crop * crop);
    for (std::size_t y = 0; y < crop; ++y)
      for (std::size_t x = 0; x < crop; ++x) v[y * crop + x] = src[(y0 + y) * s.width + x0 + x];
  };
  cut(t.labels);
  cut(t.label_sets);
  cut(t.valid);
  return t;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void dump_batch(const std::vector<Sample>& batch, const ModelConfig& mc, std::size_t num_classes,
                       const std::filesystem::path& dir) {
  DatasetMeta meta;
  meta.num_classes = num_classes;
  meta.modality_names.clear();
  meta.modality_channels.clear();
  meta.confounded_pairs = 0;
  for (const auto& m : mc.modalities) {
    meta.modality_names.push_back(m.name);
    meta.modality_channels.push_back(m.encoder.in_channels);
  }
  save_meta(meta, dir);
  save_split(batch, meta, dir, "batch");
}

}  // namespace detail

/// Trains on `train_set` (rasters already in the model's modality order) and
/// validates on `val_set` after every epoch. Writes <out>/log.csv,
/// <out>/best (highest validation mIoU) and <out>/last (model, optimiser and
/// loop state for resuming).
inline TrainResult train(const TrainConfig& cfg, const ModelConfig& model_cfg, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set, const TrainOptions& opt) {
  namespace fs = std::filesystem;
  cfg.validate(train_set.size());
  if (val_set.empty()) throw ConfigError("validation split is empty");
  if (opt.out_dir.empty()) throw ConfigError("train: output directory required");
  fs::create_directories(opt.out_dir);

  const auto k = model_cfg.num_classes;
  const auto per_epoch = cfg.batches_per_epoch(train_set.size());
  const auto total = cfg.total_iterations(train_set.size());
  const auto total_epochs = (total + per_epoch - 1) / per_epoch;
  const auto weights =
      cfg.class_weights == "uniform" ? std::vector<double>(k, 1.0) : median_frequency_weights(train_set, k);

  MultiModNet<float> model(model_cfg);
  auto slots = trainable_slots(model);
  OptimizerState state;
  state.init(slots);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::size_t iter = 0;
  double epoch_sum = 0;  // running loss of the current epoch
  std::size_t epoch_n = 0;
  TrainResult result;

  const auto log_path = opt.out_dir / "log.csv";
  if (!opt.resume_from.empty()) {
    model = load_checkpoint<float>(opt.resume_from);
    slots = trainable_slots(model);
    state = load_optimizer(slots, opt.resume_from / "optimizer");
    auto kv = KeyValues::load(opt.resume_from / "loop.txt");
    iter = kv.number<std::size_t>("iter");
    epoch_sum = kv.number<double>("epoch_sum");
    epoch_n = kv.number<std::size_t>("epoch_n");
    result.best_miou = kv.number<double>("best_miou");
    result.best_epoch = kv.number<std::size_t>("best_epoch");
    std::istringstream(kv.str("rng")) >> rng;
    std::istringstream ord(kv.str("order"));
    for (auto& o : order) ord >> o;
    if (fs::absolute(opt.resume_from.parent_path()) != fs::absolute(opt.out_dir)) {
      fs::copy_file(opt.resume_from.parent_path() / "log.csv", log_path, fs::copy_options::overwrite_existing);
    }
  } else {
    std::ofstream(log_path, std::ios::trunc) << "iter,epoch,lr,loss,val_mIoU,val_mF1\n";
  }
  std::ofstream log(log_path, std::ios::app);
  std::ofstream(opt.out_dir / "train.cfg", std::ios::trunc) << cfg.to_string();
  std::ofstream(opt.out_dir / "model.cfg", std::ios::trunc) << model_cfg.to_string();

  auto save_last = [&] {
    const auto dir = opt.out_dir / "last";
    save_checkpoint(model, dir);
    save_optimizer(state, slots, dir / "optimizer");
    std::ostringstream rs, os;
    rs << rng;
    for (auto o : order) os << o << " ";
    std::ofstream(dir / "loop.txt", std::ios::trunc)
        << "iter=" << iter << "\nbest_miou=" << detail::format_double(result.best_miou)
        << "\nbest_epoch=" << result.best_epoch << "\nepoch_sum=" << detail::format_double(epoch_sum)
        << "\nepoch_n=" << epoch_n << "\nrng=" << rs.str() << "\norder=" << os.str() << "\n";
  };

  const AugmentConfig aug;
  const std::size_t end = opt.stop_after ? std::min(total, opt.stop_after) : total;
  while (iter < end) {
    const auto epoch = iter / per_epoch, pos = iter % per_epoch;
    if (pos == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<Sample> batch;
    std::vector<std::size_t> idx;
    for (std::size_t j = pos * cfg.batch_size; j < std::min(train_set.size(), (pos + 1) * cfg.batch_size); ++j) {
      Sample s = train_set[order[j]];
      if (cfg.augment) s = augment(std::move(s), rng, aug);
      batch.push_back(detail::random_crop(s, cfg.crop, rng));
      idx.push_back(idx.size());
    }
    const auto b = make_batch(batch, idx);
    const double lr = lr_at(cfg, iter, epoch, total, total_epochs);

    auto abort_non_finite = [&](const std::string& what) {
      const auto dump = opt.out_dir / "nan_dump";
      detail::dump_batch(batch, model_cfg, k, dump);
      throw TrainingError(what + " at iteration " + std::to_string(iter) + " (epoch " + std::to_string(epoch) +
                          "); offending batch written to " + dump.string());
    };
    Tensor<float> loss;
    try {
      loss = weighted_ce_loss(model.forward(b.inputs, Mode::train).logits, b.labels, weights, b.valid);
    } catch (const std::runtime_error& e) {
      // Debug builds reject non-finite op outputs before the loss exists.
      if (std::string(e.what()).find("non-finite") == std::string::npos) throw;
      abort_non_finite(e.what());
    }
    const double lv = loss.item();
    if (!std::isfinite(lv)) abort_non_finite("non-finite loss");
    loss.backward();
    optimizer_step(slots, state, cfg, iter, lr);
    result.losses.push_back(lv);
    epoch_sum += lv;
    ++epoch_n;
    ++iter;

    std::string val_cols = ",";
    if (iter % per_epoch == 0 || iter == total) {
      const auto r = evaluate(model_predictor(model), val_set, k);
      result.val_miou.push_back(r.metrics.miou);
      result.val_mf1.push_back(r.metrics.mf1);
      result.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_n));
      epoch_sum = 0;
      epoch_n = 0;
      val_cols = detail::format_double(r.metrics.miou) + "," + detail::format_double(r.metrics.mf1);
      if (r.metrics.miou > result.best_miou) {
        result.best_miou = r.metrics.miou;
        result.best_epoch = epoch;
        save_checkpoint(model, opt.out_dir / "best");
      }
      if (opt.progress) {
        *opt.progress << "epoch " << epoch << " loss " << result.epoch_loss.back() << " val mIoU " << r.metrics.miou
                      << " mF1 " << r.metrics.mf1 << "\n";
      }
    }
    log << iter - 1 << "," << epoch << "," << detail::format_double(lr) << "," << detail::format_double(lv) << ","
        << val_cols << "\n";
  }
  log.flush();
  save_last();
  result.iterations_done = iter;
  return result;
}

}  // namespace mmnet
