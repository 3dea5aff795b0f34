#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "mmnet/gradcheck.hpp"
#include "mmnet/model.hpp"
#include "test_util.hpp"

using namespace mmnet;
using mmnet::testing::bitwise_equal;
using mmnet::testing::random_tensor;
using mmnet::testing::trainable;

namespace {

ModalityConfig modality(const std::string& name, std::size_t channels, EncoderSpec enc, std::size_t c, std::size_t u,
                        int views = 3) {
  enc.in_channels = channels;
  return {name, enc, c, u, views};
}

ModelConfig toy_config(std::size_t modalities) {
  ModelConfig cfg;
  cfg.num_classes = 4;
  const char* names[] = {"rgb", "dsm", "nir"};
  const std::size_t channels[] = {3, 1, 1};
  for (std::size_t k = 0; k < modalities; ++k) {
    cfg.modalities.push_back(modality(names[k], channels[k], {0, 16, 16, 32, 64}, 6, 24));
  }
  return cfg;
}

ModelConfig tiny_config(std::size_t modalities) {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.modalities.push_back(modality("a", 2, {0, 3, 3, 4, 4}, 2, 3));
  if (modalities > 1) cfg.modalities.push_back(modality("b", 1, {0, 2, 2, 3, 3}, 2, 2));
  return cfg;
}

std::vector<Tensor<double>> random_inputs(const ModelConfig& cfg, std::size_t n, std::size_t hw,
                                          std::mt19937_64& rng) {
  std::vector<Tensor<double>> out;
  for (const auto& m : cfg.modalities) out.push_back(random_tensor({n, m.encoder.in_channels, hw, hw}, rng, 0, 1));
  return out;
}

}  // namespace

TEST(Encoder, PyramidAtStridesFourEightSixteen) {
  std::mt19937_64 rng(1);
  Encoder<float> enc({3, 16, 16, 32, 64}, rng);
  auto pyr = enc.forward(random_tensor<float>({1, 3, 64, 64}, rng), Mode::eval);
  EXPECT_EQ(pyr.xq.shape(), (Shape{1, 16, 16, 16}));
  EXPECT_EQ(pyr.xz.shape(), (Shape{1, 32, 8, 8}));
  EXPECT_EQ(pyr.xk.shape(), (Shape{1, 64, 4, 4}));
  check_pyramid(pyr);
}

TEST(Encoder, RejectsSizesNotDivisibleBySixteen) {
  std::mt19937_64 rng(2);
  Encoder<double> enc({1, 2, 2, 2, 2}, rng);
  EXPECT_THROW(enc.forward(random_tensor({1, 1, 40, 32}, rng), Mode::eval), ShapeError);
  EXPECT_THROW(enc.forward(random_tensor({1, 2, 32, 32}, rng), Mode::eval), ShapeError);
}

TEST(Encoder, GradientAt32x32) {
  std::mt19937_64 rng(3);
  Encoder<double> enc({2, 3, 3, 4, 4}, rng);
  auto x = random_tensor({2, 2, 32, 32}, rng, 0, 1);
  auto inputs = trainable(enc);
  inputs.push_back(x);
  GradCheckOptions opts;
  opts.max_elements_per_input = 12;
  auto res = grad_check(
      [&] {
        auto p = enc.forward(x, Mode::train);
        return add(project(p.xk, 1), add(project(p.xz, 2), project(p.xq, 3)));
      },
      inputs, opts);
  EXPECT_LT(res.max_rel_error, 1e-4);
  EXPECT_LT(res.kink_skipped * 10, res.checked);
}

TEST(DecodeHead, ZeroWeightsGiveZeroLogits) {
  std::mt19937_64 rng(4);
  Conv2d<double> head(5, 3, 3, 1, true, rng);
  head.kernel = Tensor<double>::zeros(head.kernel.shape(), true);
  auto logits = decode_head(random_tensor({2, 5, 4, 4}, rng), head, 16, 12);
  EXPECT_EQ(logits.shape(), (Shape{2, 3, 16, 12}));
  for (double v : logits.values()) EXPECT_EQ(v, 0.0);
}

TEST(DecodeHead, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  Conv2d<double> head(4, 3, 3, 1, true, rng);
  auto f = random_tensor({1, 4, 3, 3}, rng);
  auto inputs = trainable(head);
  inputs.push_back(f);
  auto res = grad_check([&] { return project(decode_head(f, head, 12, 12), 7, 1.0); }, inputs);
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(MultiModNet, SingleModalityIsStagesInSequence) {
  auto cfg = tiny_config(1);
  MultiModNet<double> model(cfg);
  std::mt19937_64 rng(6);
  auto inputs = random_inputs(cfg, 2, 32, rng);
  for (Mode mode : {Mode::train, Mode::eval}) {
    auto logits = model.forward(inputs, mode).logits;
    auto pyr = model.encoders[0].forward(inputs[0], mode);
    auto f = paf_forward(pyr, model.pafs[0], mode).f;
    EXPECT_TRUE(bitwise_equal(logits, decode_head(f, model.head, 32, 32)));
  }
}

TEST(MultiModNet, BimodalLogitShape) {
  auto cfg = toy_config(2);
  MultiModNet<float> model(cfg);
  std::mt19937_64 rng(7);
  auto out = model.forward({random_tensor<float>({2, 3, 64, 64}, rng, 0, 1),
                            random_tensor<float>({2, 1, 64, 64}, rng, 0, 1)},
                           Mode::train);
  EXPECT_EQ(out.logits.shape(), (Shape{2, 4, 64, 64}));
  ASSERT_EQ(out.gates.size(), 1u);
  EXPECT_EQ(out.gates[0].shape(), (Shape{2, 16, 16, 16}));
}

TEST(MultiModNet, ThreeModalityChainIsFinite) {
  auto cfg = toy_config(3);
  MultiModNet<float> model(cfg);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 3; ++trial) {
    auto out = model.forward({random_tensor<float>({1, 3, 32, 32}, rng, 0, 1),
                              random_tensor<float>({1, 1, 32, 32}, rng, 0, 1),
                              random_tensor<float>({1, 1, 32, 32}, rng, 0, 1)},
                             Mode::eval);
    EXPECT_EQ(out.gates.size(), 2u);
    for (float v : out.logits.values()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(MultiModNet, RejectsMisregisteredInputs) {
  auto cfg = tiny_config(2);
  MultiModNet<double> model(cfg);
  std::mt19937_64 rng(9);
  EXPECT_THROW(model.forward({random_tensor({1, 2, 32, 32}, rng), random_tensor({1, 1, 16, 32}, rng)}, Mode::eval),
               ShapeError);
  EXPECT_THROW(model.forward({random_tensor({1, 2, 32, 32}, rng)}, Mode::eval), ShapeError);
}

TEST(MultiModNet, ParameterCountDifferenceIsAuditable) {
  auto one = toy_config(1);
  auto two = toy_config(2);
  MultiModNet<float> pafnet(one), pagnet(two);
  std::mt19937_64 rng(10);
  Encoder<float> enc(two.modalities[1].encoder, rng);
  PafParams<float> paf(two.modalities[1].paf(), rng);
  GfuParams<float> gfu(24, 16, FusionKind::gated, rng);
  auto count = [](auto& block) {
    std::size_t n = 0;
    block.visit("", [&](const std::string&, Tensor<float>& t, ParamKind k) {
      if (k != ParamKind::buffer) n += t.numel();
    });
    return n;
  };
  // The decoder conv also widens: its input grows by the second PAF's u.
  const std::size_t head_growth = 24 * 4 * 3 * 3;
  EXPECT_EQ(pagnet.parameter_count() - pafnet.parameter_count(), count(enc) + count(paf) + count(gfu) + head_growth);
}

TEST(MultiModNet, BimodalGradientAt32x32) {
  auto cfg = tiny_config(2);
  MultiModNet<double> model(cfg);
  std::mt19937_64 rng(11);
  auto inputs = random_inputs(cfg, 2, 32, rng);
  std::vector<Tensor<double>> probe;
  model.visit([&](const std::string&, Tensor<double>& t, ParamKind k) {
    if (k != ParamKind::buffer) probe.push_back(t);
  });
  for (auto& x : inputs) probe.push_back(x);
  GradCheckOptions opts;
  opts.max_elements_per_input = 6;
  auto res = grad_check([&] { return project(model.forward(inputs, Mode::train).logits, 13); }, probe, opts);
  EXPECT_LT(res.max_rel_error, 1e-4) << "worst input " << res.worst_input << " analytic " << res.worst_analytic
                                     << " numeric " << res.worst_numeric;
  EXPECT_LT(res.kink_skipped * 10, res.checked);
}

// ------------------------------------------------------------------ config and checkpoints

TEST(ModelConfig, ParsesFlatKeyValues) {
  auto kv = KeyValues::parse(R"(
    # two modalities
    num_classes = 5
    fusion = concat
    modalities = rgb, dsm
    modality.rgb.channels = 3
    modality.dsm.channels = 1
    modality.dsm.widths = 8,16,24
    modality.dsm.views = 1
  )");
  auto cfg = ModelConfig::from(kv);
  EXPECT_TRUE(kv.unused().empty());
  EXPECT_EQ(cfg.num_classes, 5u);
  EXPECT_EQ(cfg.fusion, FusionKind::concat);
  ASSERT_EQ(cfg.modalities.size(), 2u);
  EXPECT_EQ(cfg.modalities[1].encoder.d2, 16u);
  EXPECT_EQ(cfg.modalities[1].views, 1);
  EXPECT_EQ(cfg.modalities[0].encoder.d, 64u);
  EXPECT_EQ(ModelConfig::from(KeyValues::parse(cfg.to_string())).to_string(), cfg.to_string());
}

TEST(ModelConfig, RejectsBadValues) {
  EXPECT_THROW(ModelConfig::from(KeyValues::parse("num_classes=4\nmodalities=a\n")), ConfigError);
  EXPECT_THROW(ModelConfig::from(KeyValues::parse("num_classes=x\nmodalities=a\nmodality.a.channels=1\n")),
               ConfigError);
  EXPECT_THROW(ModelConfig::from(KeyValues::parse("num_classes=4\nmodalities=a\nmodality.a.channels=1\n"
                                                  "modality.a.views=4\n")),
               ConfigError);
  EXPECT_THROW(KeyValues::parse("a=1\na=2\n"), ConfigError);
  EXPECT_THROW(KeyValues::parse("no equals sign\n"), ConfigError);
}

TEST(Checkpoint, RoundTripRestoresEveryTensor) {
  const auto dir = std::filesystem::temp_directory_path() / "mmnet_ckpt_test";
  std::filesystem::remove_all(dir);
  auto cfg = toy_config(2);
  cfg.init_seed = 5;
  MultiModNet<float> model(cfg);
  std::mt19937_64 rng(12);
  // Perturb buffers so the roundtrip covers running statistics too.
  model.forward({random_tensor<float>({2, 3, 32, 32}, rng), random_tensor<float>({2, 1, 32, 32}, rng)}, Mode::train);
  save_checkpoint(model, dir);
  auto loaded = load_checkpoint<float>(dir);
  std::vector<Tensor<float>> a, b;
  model.visit([&](const std::string&, Tensor<float>& t, ParamKind) { a.push_back(t); });
  loaded.visit([&](const std::string&, Tensor<float>& t, ParamKind) { b.push_back(t); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(a[i], b[i])) << i;

  auto manifest = read_manifest(dir);
  EXPECT_EQ(manifest.size(), a.size());
  EXPECT_EQ(manifest.front().name, "rgb.enc.stem.conv.weight");
  EXPECT_EQ(manifest.front().shape, "16x3x3x3");
  EXPECT_EQ(manifest.back().name, "dec.bias");
  EXPECT_EQ(manifest.back().kind, "bias");

  std::filesystem::remove(dir / manifest[3].file);
  EXPECT_THROW(load_checkpoint<float>(dir), std::runtime_error);
  std::filesystem::remove_all(dir);
}
