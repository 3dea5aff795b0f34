#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "mmnet/eval.hpp"
#include "test_util.hpp"

using namespace mmnet;

namespace {

Sample label_only(std::size_t h, std::size_t w, std::vector<std::int32_t> labels,
                  std::vector<std::uint32_t> sets = {}) {
  Sample s;
  s.height = h;
  s.width = w;
  s.labels = std::move(labels);
  s.label_sets = std::move(sets);
  s.valid.assign(h * w, 1);
  return s;
}

// Independent recount: per class, walk every pixel and classify it directly.
struct Recount {
  std::vector<double> f1, iou;
  double oa = 0, mf1 = 0, miou = 0;
};

Recount recount(const std::vector<std::int32_t>& pred, const Sample& s, std::size_t k) {
  Recount r;
  double correct = 0, total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!s.valid[i]) continue;
    total += 1;
    correct += (s.label_set(i) >> pred[i]) & 1u;
  }
  r.oa = correct / total;
  int counted = 0;
  for (std::size_t c = 0; c < k; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (!s.valid[i]) continue;
      const bool in_set = (s.label_set(i) >> c) & 1u;
      const bool pred_ok = (s.label_set(i) >> pred[i]) & 1u;
      if (in_set && pred_ok) tp += 1;
      if (!pred_ok && pred[i] == static_cast<std::int32_t>(c)) fp += 1;
      if (in_set && !pred_ok) fn += 1;
    }
    if (tp + fn == 0) {
      r.f1.push_back(NAN);
      r.iou.push_back(NAN);
      continue;
    }
    r.f1.push_back(2 * tp / (2 * tp + fp + fn));
    r.iou.push_back(tp / (tp + fp + fn));
    r.mf1 += r.f1.back();
    r.miou += r.iou.back();
    ++counted;
  }
  r.mf1 /= counted;
  r.miou /= counted;
  return r;
}

// Logits [N,K,H,W] that depend only on position: class 0 gets `peak` at (0,0).
Predictor corner_model(float peak) {
  return [peak](const std::vector<Tensor<float>>& xs) {
    const auto n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
    Tensor<float> out({n, 2, h, w});
    for (std::size_t b = 0; b < n; ++b) {
      out[(b * 2) * h * w] = peak;
      for (std::size_t i = 0; i < h * w; ++i) out[(b * 2 + 1) * h * w + i] = 1.0f;
    }
    return out;
  };
}

Predictor constant_model(std::vector<float> logits) {
  return [logits](const std::vector<Tensor<float>>& xs) {
    const auto n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3), k = logits.size();
    Tensor<float> out({n, k, h, w});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t i = 0; i < h * w; ++i) out[(b * k + c) * h * w + i] = logits[c];
    return out;
  };
}

// Per-pixel model: logits are linear in the first channel of the first input.
Predictor pixel_model() {
  return [](const std::vector<Tensor<float>>& xs) {
    const auto n = xs[0].dim(0), c = xs[0].dim(1), h = xs[0].dim(2), w = xs[0].dim(3);
    Tensor<float> out({n, 3, h, w});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < h * w; ++i) {
        const float v = xs[0][b * c * h * w + i];
        out[(b * 3 + 0) * h * w + i] = 3 * v;
        out[(b * 3 + 1) * h * w + i] = 1 - v;
        out[(b * 3 + 2) * h * w + i] = v * v;
      }
    return out;
  };
}

// Position-dependent model: logit = row/col index mixed with the input.
Predictor position_model() {
  return [](const std::vector<Tensor<float>>& xs) {
    const auto n = xs[0].dim(0), c = xs[0].dim(1), h = xs[0].dim(2), w = xs[0].dim(3);
    Tensor<float> out({n, 2, h, w});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const auto i = y * w + x;
          out[(b * 2) * h * w + i] = 0.3f * static_cast<float>(y) + xs[0][b * c * h * w + i];
          out[(b * 2 + 1) * h * w + i] = 0.2f * static_cast<float>(x);
        }
    return out;
  };
}

std::vector<Tensor<float>> random_inputs(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {mmnet::testing::random_tensor<float>({1, 3, h, w}, rng, 0, 1),
          mmnet::testing::random_tensor<float>({1, 1, h, w}, rng, 0, 1)};
}

}  // namespace

// ------------------------------------------------------------------ confusion

TEST(Confusion, MultiLabelHitCountsEveryLabel) {
  auto s = label_only(1, 1, {1}, {0b011});
  auto c = confusion({0}, s, 3);
  EXPECT_EQ(c.tp, (std::vector<std::uint64_t>{1, 1, 0}));
  EXPECT_EQ(c.fp, (std::vector<std::uint64_t>{0, 0, 0}));
  EXPECT_EQ(c.fn, (std::vector<std::uint64_t>{0, 0, 0}));
  EXPECT_EQ(c.correct, 1u);
}

TEST(Confusion, MissIsFpForPredAndFnForEachLabel) {
  auto single = confusion({1}, label_only(1, 1, {0}), 3);
  EXPECT_EQ(single.fp, (std::vector<std::uint64_t>{0, 1, 0}));
  EXPECT_EQ(single.fn, (std::vector<std::uint64_t>{1, 0, 0}));
  EXPECT_EQ(single.matrix[0 * 3 + 1], 1u);
  auto multi = confusion({2}, label_only(1, 1, {1}, {0b011}), 3);
  EXPECT_EQ(multi.fp, (std::vector<std::uint64_t>{0, 0, 1}));
  EXPECT_EQ(multi.fn, (std::vector<std::uint64_t>{1, 1, 0}));
}

TEST(Confusion, PerfectMapIsDiagonal) {
  auto s = label_only(2, 3, {0, 1, 2, 2, 1, 0});
  auto c = confusion(s.labels, s, 3);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t q = 0; q < 3; ++q) EXPECT_EQ(c.matrix[r * 3 + q], r == q ? 2u : 0u);
  const auto m = compute_metrics(c);
  EXPECT_EQ(m.oa, 1.0);
  for (double f : m.f1) EXPECT_EQ(f, 1.0);
}

TEST(Confusion, ValidMaskAndErrors) {
  auto s = label_only(1, 3, {0, 1, 1});
  s.valid = {1, 0, 1};
  auto c = confusion({0, 0, 0}, s, 2);
  EXPECT_EQ(c.total, 2u);
  EXPECT_THROW(confusion({0, 0}, s, 2), ShapeError);
  EXPECT_THROW(confusion({0, 5, 0}, label_only(1, 3, {0, 1, 1}), 2), std::out_of_range);
}

// ------------------------------------------------------------------ metrics

TEST(Metrics, FormulaExample) {
  Confusion c(2);
  c.tp = {1, 5};
  c.fp = {1, 0};
  c.fn = {1, 0};
  c.total = 8;
  c.correct = 6;
  const auto m = compute_metrics(c);
  EXPECT_DOUBLE_EQ(m.f1[0], 0.5);
  EXPECT_DOUBLE_EQ(m.iou[0], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.oa, 0.75);
}

TEST(Metrics, ZeroSupportIsExcludedAndLogged) {
  auto s = label_only(1, 4, {0, 0, 1, 1});
  std::ostringstream log;
  const auto m = compute_metrics(confusion({0, 2, 1, 1}, s, 3), &log);
  EXPECT_EQ(m.excluded, (std::vector<std::size_t>{2}));
  EXPECT_TRUE(std::isnan(m.f1[2]));
  EXPECT_NE(log.str().find("class 2"), std::string::npos);
  EXPECT_DOUBLE_EQ(m.mf1, (m.f1[0] + m.f1[1]) / 2);
  EXPECT_THROW(compute_metrics(Confusion(3)), std::invalid_argument);
}

TEST(Metrics, MatchesBruteForceRecount) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 1 + rng() % 16, w = 1 + rng() % 16, k = 2 + rng() % 5;
    const bool multi = trial % 2;
    std::vector<std::int32_t> labels(h * w), pred(h * w);
    std::vector<std::uint32_t> sets;
    for (auto& l : labels) l = static_cast<std::int32_t>(rng() % k);
    if (multi) {
      sets.resize(h * w);
      for (std::size_t i = 0; i < h * w; ++i) sets[i] = (1u << labels[i]) | (rng() % 3 == 0 ? 1u << (rng() % k) : 0u);
    }
    for (auto& p : pred) p = static_cast<std::int32_t>(rng() % k);
    auto s = label_only(h, w, labels, sets);
    for (auto& v : s.valid) v = rng() % 5 != 0;
    if (std::count(s.valid.begin(), s.valid.end(), 1) == 0) s.valid[0] = 1;
    const auto m = compute_metrics(confusion(pred, s, k));
    const auto o = recount(pred, s, k);
    EXPECT_NEAR(m.oa, o.oa, 1e-12);
    EXPECT_NEAR(m.mf1, o.mf1, 1e-12);
    EXPECT_NEAR(m.miou, o.miou, 1e-12);
    for (std::size_t c = 0; c < k; ++c) {
      if (std::isnan(o.f1[c])) {
        EXPECT_TRUE(std::isnan(m.f1[c]));
      } else {
        EXPECT_NEAR(m.f1[c], o.f1[c], 1e-12);
        EXPECT_NEAR(m.iou[c], o.iou[c], 1e-12);
      }
    }
  }
}

TEST(Metrics, ReportsRender) {
  auto s = label_only(1, 2, {0, 1});
  const auto m = compute_metrics(confusion({0, 0}, s, 3));
  const auto table = metrics_table(m, {"low", "high"});
  EXPECT_NE(table.find("low"), std::string::npos);
  EXPECT_NE(table.find("no support"), std::string::npos);
  const auto path = std::filesystem::temp_directory_path() / "mmnet_eval_metrics.csv";
  write_metrics_csv(m, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "metric,class,value");
}

// ------------------------------------------------------------------ TTA

TEST(Tta, ConstantModelEqualsSinglePass) {
  const auto xs = random_inputs(6, 5, 1);
  const auto model = constant_model({0.3f, -1.2f, 2.0f});
  EXPECT_TRUE(mmnet::testing::bitwise_equal(tta_predict(model, xs), softmax_channels(model(xs))));
}

TEST(Tta, EquivariantModelEqualsSinglePass) {
  const auto xs = random_inputs(7, 4, 2);
  const auto model = pixel_model();
  EXPECT_LT(mmnet::testing::max_abs_diff(tta_predict(model, xs), softmax_channels(model(xs))), 1e-7);
}

TEST(Tta, AveragesProbabilitiesNotLogits) {
  // At (0,0) only the identity view sees the peak: logits (10,1) once and
  // (0,1) three times. Probability averaging picks class 1, logit averaging
  // would pick class 0.
  const auto xs = random_inputs(3, 3, 3);
  const auto p = tta_predict(corner_model(10.0f), xs);
  const double s9 = 1 / (1 + std::exp(-9.0)), sm1 = 1 / (1 + std::exp(1.0));
  const double expect0 = (s9 + 3 * sm1) / 4;
  EXPECT_NEAR(p[0], expect0, 1e-6);
  EXPECT_NEAR(p[9], 1 - expect0, 1e-6);
  EXPECT_EQ(argmax_map(p)[0], 1);
  const double logit_avg0 = 10.0 / 4, logit_avg1 = 1.0;
  EXPECT_GT(logit_avg0, logit_avg1);
}

TEST(Tta, MapsViewsBackToTheOriginalFrame) {
  // Each view puts the peak at its own (0,0); mapped back, every image corner
  // receives it exactly once and interior pixels never do. Without the inverse
  // mapping all four peaks would pile up on (0,0).
  const auto xs = random_inputs(3, 4, 4);
  const auto p = tta_predict(corner_model(10.0f), xs);
  const double s9 = 1 / (1 + std::exp(-9.0)), sm1 = 1 / (1 + std::exp(1.0));
  for (std::size_t corner : {0, 3, 8, 11}) EXPECT_NEAR(p[corner], (s9 + 3 * sm1) / 4, 1e-6) << corner;
  for (std::size_t mid : {1, 2, 4, 5, 6, 7, 9, 10}) EXPECT_NEAR(p[mid], sm1, 1e-6) << mid;
}

// ------------------------------------------------------------------ sliding window

TEST(Sliding, StartsClampLastWindow) {
  EXPECT_EQ(window_starts(10, 4, 3), (std::vector<std::size_t>{0, 3, 6}));
  EXPECT_EQ(window_starts(10, 4, 4), (std::vector<std::size_t>{0, 4, 6}));
  EXPECT_EQ(window_starts(8, 4, 4), (std::vector<std::size_t>{0, 4}));
  EXPECT_EQ(window_starts(5, 5, 2), (std::vector<std::size_t>{0}));
  EXPECT_THROW(window_starts(5, 6, 1), std::invalid_argument);
  EXPECT_THROW(window_starts(5, 2, 0), std::invalid_argument);
}

TEST(Sliding, WholeImageWindowIsDirectPrediction) {
  const auto xs = random_inputs(9, 9, 5);
  const auto model = position_model();
  const auto direct = predict_probs(model, xs);
  EXPECT_TRUE(mmnet::testing::bitwise_equal(predict_probs(model, xs, {false, 9, 3}), direct));
  const auto direct_tta = predict_probs(model, xs, {true, 0, 0});
  EXPECT_TRUE(mmnet::testing::bitwise_equal(predict_probs(model, xs, {true, 9, 9}), direct_tta));
}

TEST(Sliding, ConstantModelGivesConstantMap) {
  const auto xs = random_inputs(11, 13, 6);
  const auto model = constant_model({0.5f, 1.5f});
  const auto ref = softmax_channels(model(xs));
  for (std::size_t stride : {1, 2, 3, 5}) {
    EXPECT_TRUE(mmnet::testing::bitwise_equal(predict_probs(model, xs, {false, 5, stride}), ref)) << stride;
  }
}

TEST(Sliding, MatchesCoverAverageOracle) {
  const auto xs = random_inputs(10, 7, 7);
  const auto model = position_model();
  const std::size_t win = 4, stride = 3;
  const auto got = predict_probs(model, xs, {false, win, stride});
  // Oracle: explicit coverage loops with per-window softmax.
  std::vector<double> sum(2 * 70, 0.0), cnt(70, 0.0);
  for (std::size_t y0 : {0, 3, 6})
    for (std::size_t x0 : {0, 3}) {
      std::vector<Tensor<float>> crops;
      for (const auto& x : xs) {
        const auto c = x.dim(1);
        Tensor<float> crop({1, c, win, win});
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < win; ++y)
            for (std::size_t q = 0; q < win; ++q) crop.at(0, ch, y, q) = x.at(0, ch, y0 + y, x0 + q);
        crops.push_back(crop);
      }
      const auto logits = model(crops);
      for (std::size_t y = 0; y < win; ++y)
        for (std::size_t q = 0; q < win; ++q) {
          const double a = logits.at(0, 0, y, q), b = logits.at(0, 1, y, q);
          const double pa = 1 / (1 + std::exp(b - a));
          sum[(y0 + y) * 7 + x0 + q] += pa;
          sum[70 + (y0 + y) * 7 + x0 + q] += 1 - pa;
          cnt[(y0 + y) * 7 + x0 + q] += 1;
        }
    }
  for (std::size_t i = 0; i < 70; ++i) {
    ASSERT_GE(cnt[i], 1.0);
    EXPECT_NEAR(got[i], sum[i] / cnt[i], 1e-6);
    EXPECT_NEAR(got[70 + i], sum[70 + i] / cnt[i], 1e-6);
  }
}

TEST(Sliding, NonOverlappingTilingCountsOnce) {
  // With stride = window on a divisible image every pixel has one cover, so
  // the result equals per-tile prediction pasted together.
  const auto xs = random_inputs(8, 8, 8);
  const auto model = position_model();
  const auto got = predict_probs(model, xs, {false, 4, 4});
  for (std::size_t ty = 0; ty < 2; ++ty)
    for (std::size_t tx = 0; tx < 2; ++tx) {
      std::vector<Tensor<float>> crops;
      for (const auto& x : xs) {
        Tensor<float> crop({1, x.dim(1), 4, 4});
        for (std::size_t ch = 0; ch < x.dim(1); ++ch)
          for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t q = 0; q < 4; ++q) crop.at(0, ch, y, q) = x.at(0, ch, ty * 4 + y, tx * 4 + q);
        crops.push_back(crop);
      }
      const auto p = softmax_channels(model(crops));
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 4; ++y)
          for (std::size_t q = 0; q < 4; ++q) EXPECT_EQ(got.at(0, c, ty * 4 + y, tx * 4 + q), p.at(0, c, y, q));
    }
}

// ------------------------------------------------------------------ corruption / evaluation

TEST(Corruption, KindsReplaceOnlyTheTarget) {
  auto spec = SynthSpec{};
  spec.size = 16;
  const auto s = synth_split(spec, 1, 1, "x").front();
  const auto before = s.rasters[1].values();
  const auto missing = corrupt(s, {CorruptionKind::missing_zero, 1, 0});
  for (float v : missing.rasters[1].values()) EXPECT_EQ(v, 0.0f);
  EXPECT_TRUE(mmnet::testing::bitwise_equal(missing.rasters[0], s.rasters[0]));
  const auto noisy = corrupt(s, {CorruptionKind::white_noise, 1, 9}, 3);
  for (float v : noisy.rasters[1].values()) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
  EXPECT_TRUE(mmnet::testing::bitwise_equal(noisy.rasters[1], corrupt(s, {CorruptionKind::white_noise, 1, 9}, 3).rasters[1]));
  EXPECT_FALSE(mmnet::testing::bitwise_equal(noisy.rasters[1], corrupt(s, {CorruptionKind::white_noise, 1, 9}, 4).rasters[1]));
  const auto hot = corrupt(s, {CorruptionKind::interfered_max, 1, 0});
  for (float v : hot.rasters[1].values()) EXPECT_EQ(v, 1.0f);
  EXPECT_EQ(s.rasters[1].values(), before);
  EXPECT_THROW(corrupt(s, {CorruptionKind::missing_zero, 2, 0}), std::invalid_argument);
  EXPECT_EQ(parse_corruption("noise"), CorruptionKind::white_noise);
  EXPECT_THROW(parse_corruption("blur"), std::invalid_argument);
}

TEST(Corruption, NoneEqualsPlainEvaluationAndPrimaryWarns) {
  auto spec = SynthSpec{};
  spec.size = 16;
  const auto samples = synth_split(spec, 3, 2, "x");
  const auto model = pixel_model();
  const auto plain = evaluate(model, samples, 4);
  std::ostringstream warn;
  const auto none = robustness_eval(model, samples, 4, {CorruptionKind::none, 1, 0}, warn);
  EXPECT_EQ(none.confusion.matrix, plain.confusion.matrix);
  EXPECT_EQ(none.metrics.mf1, plain.metrics.mf1);
  EXPECT_TRUE(warn.str().empty());
  robustness_eval(model, samples, 4, {CorruptionKind::missing_zero, 0, 0}, warn);
  EXPECT_NE(warn.str().find("primary"), std::string::npos);
}

TEST(Evaluate, RealModelWindowEqualsWholeImage) {
  ModelConfig cfg;
  for (auto [name, ch] : {std::pair{"rgb", 3}, std::pair{"dsm", 1}}) {
    ModalityConfig m;
    m.name = name;
    m.encoder = {static_cast<std::size_t>(ch), 8, 8, 8, 8};
    m.latent = 4;
    m.output = 8;
    cfg.modalities.push_back(m);
  }
  MultiModNet<float> net(cfg);
  auto spec = SynthSpec{};
  spec.size = 32;
  const auto samples = synth_split(spec, 2, 2, "x");
  const auto whole = evaluate(model_predictor(net), samples, 4);
  const auto windowed = evaluate(model_predictor(net), samples, 4, {false, 32, 8});
  EXPECT_EQ(whole.confusion.matrix, windowed.confusion.matrix);
}

TEST(Maps, PgmAndPpm) {
  const std::vector<std::int32_t> pred{0, 1, 3, 2};
  const auto g = class_map_pgm(pred, 2, 2);
  EXPECT_EQ(g.pixels, (std::vector<std::uint8_t>{0, 1, 3, 2}));
  const auto c = class_map_ppm(pred, 2, 2);
  EXPECT_EQ(c.pixels.size(), 12u);
  EXPECT_EQ(c.channels, 3u);
}
