#pragma once

// Stand-in pyramid encoder, decoder head and the multi-modal chain.
//
// Modality 1 runs encoder -> PAF -> F_1. Every later modality k runs its
// encoder up to the stride-4 map X_q, replaces X_q with GFU(F_{k-1}, X_q),
// continues to X_z and X_k, and runs its own PAF to get F_k. The decoder sees
// F_1 | ... | F_M.
//
// Config schema (flat key=value):
//   num_classes=4
//   fusion=gated                      # gated | sum | concat
//   modalities=rgb,dsm                # primary first
//   modality.<name>.channels=3
//   modality.<name>.stem=16           # stem conv width
//   modality.<name>.widths=16,32,64   # d4, d2, d
//   modality.<name>.latent=6          # c
//   modality.<name>.output=24         # u
//   modality.<name>.views=3
//   init_seed=1

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mmnet/config.hpp"
#include "mmnet/gfu.hpp"
#include "mmnet/layers.hpp"
#include "mmnet/paf.hpp"
#include "mmnet/tensor_io.hpp"

namespace mmnet {

struct EncoderSpec {
  std::size_t in_channels = 3;
  std::size_t stem = 16;
  std::size_t d4 = 16, d2 = 32, d = 64;
};

struct ModalityConfig {
  std::string name;
  EncoderSpec encoder;
  std::size_t latent = 6;
  std::size_t output = 24;
  int views = 3;

  PafConfig paf() const { return {encoder.d4, encoder.d2, encoder.d, latent, output, views}; }
};

struct ModelConfig {
  std::vector<ModalityConfig> modalities;
  FusionKind fusion = FusionKind::gated;
  std::size_t num_classes = 4;
  std::uint64_t init_seed = 1;

  std::size_t decoder_channels() const {
    std::size_t s = 0;
    for (const auto& m : modalities) s += m.output;
    return s;
  }

  static ModelConfig from(const KeyValues& kv) {
    ModelConfig cfg;
    cfg.num_classes = kv.number<std::size_t>("num_classes");
    cfg.fusion = parse_fusion(kv.str("fusion", "gated"));
    cfg.init_seed = kv.number<std::uint64_t>("init_seed", 1);
    for (const auto& name : split(kv.str("modalities"), ',')) {
      if (name.empty()) throw ConfigError("modalities: empty modality name");
      for (const auto& m : cfg.modalities) {
        if (m.name == name) throw ConfigError("modalities: duplicate name '" + name + "'");
      }
      const std::string p = "modality." + name + ".";
      ModalityConfig m;
      m.name = name;
      m.encoder.in_channels = kv.number<std::size_t>(p + "channels");
      m.encoder.stem = kv.number<std::size_t>(p + "stem", 16);
      const auto widths = split(kv.str(p + "widths", "16,32,64"), ',');
      if (widths.size() != 3) throw ConfigError(p + "widths: expected three comma-separated widths");
      std::size_t* dst[3] = {&m.encoder.d4, &m.encoder.d2, &m.encoder.d};
      for (int i = 0; i < 3; ++i) {
        KeyValues one;
        one.set("w", widths[static_cast<std::size_t>(i)]);
        *dst[i] = one.number<std::size_t>("w");
      }
      m.latent = kv.number<std::size_t>(p + "latent", 6);
      m.output = kv.number<std::size_t>(p + "output", 24);
      m.views = kv.number<int>(p + "views", 3);
      cfg.modalities.push_back(m);
    }
    cfg.validate();
    return cfg;
  }

  void validate() const {
    if (modalities.empty()) throw ConfigError("model config needs at least one modality");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    for (const auto& m : modalities) {
      const auto& e = m.encoder;
      if (!e.in_channels || !e.stem || !e.d4 || !e.d2 || !e.d || !m.latent || !m.output) {
        throw ConfigError("modality '" + m.name + "': widths must be positive");
      }
      if (m.views < 1 || m.views > 3) throw ConfigError("modality '" + m.name + "': views must be 1, 2 or 3");
    }
  }

  std::string to_string() const {
    std::ostringstream os;
    os << "num_classes=" << num_classes << "\n";
    os << "fusion=" << fusion_name(fusion) << "\n";
    os << "init_seed=" << init_seed << "\n";
    os << "modalities=";
    for (std::size_t i = 0; i < modalities.size(); ++i) os << (i ? "," : "") << modalities[i].name;
    os << "\n";
    for (const auto& m : modalities) {
      const std::string p = "modality." + m.name + ".";
      os << p << "channels=" << m.encoder.in_channels << "\n";
      os << p << "stem=" << m.encoder.stem << "\n";
      os << p << "widths=" << m.encoder.d4 << "," << m.encoder.d2 << "," << m.encoder.d << "\n";
      os << p << "latent=" << m.latent << "\n";
      os << p << "output=" << m.output << "\n";
      os << p << "views=" << m.views << "\n";
    }
    return os.str();
  }
};

template <class T>
struct Encoder {
  EncoderSpec spec;
  ConvBn<T> stem, s1a, s1b, s2a, s2b, s3a, s3b;

  Encoder() = default;
  Encoder(const EncoderSpec& s, std::mt19937_64& rng)
      : spec(s),
        stem(s.in_channels, s.stem, 3, 2, true, rng),
        s1a(s.stem, s.d4, 3, 2, true, rng),
        s1b(s.d4, s.d4, 3, 1, true, rng),
        s2a(s.d4, s.d2, 3, 2, true, rng),
        s2b(s.d2, s.d2, 3, 1, true, rng),
        s3a(s.d2, s.d, 3, 2, true, rng),
        s3b(s.d, s.d, 3, 1, true, rng) {}

  /// Stem and first stage: the stride-4 map X_q.
  Tensor<T> encode_low(const Tensor<T>& image, Mode mode) {
    if (image.ndim() != 4 || image.dim(1) != spec.in_channels) {
      throw ShapeError("encoder: expected [N," + std::to_string(spec.in_channels) + ",H,W], got " +
                       shape_str(image.shape()));
    }
    if (image.dim(2) % 16 || image.dim(3) % 16) {
      throw ShapeError("encoder: input height and width must be divisible by 16, got " + shape_str(image.shape()));
    }
    return s1b(s1a(stem(image, mode), mode), mode);
  }

  /// Remaining stages from a (possibly gated) X_q: returns {X_z, X_k}.
  std::pair<Tensor<T>, Tensor<T>> encode_high(const Tensor<T>& xq, Mode mode) {
    auto xz = s2b(s2a(xq, mode), mode);
    auto xk = s3b(s3a(xz, mode), mode);
    return {xz, xk};
  }

  PyramidFeatures<T> forward(const Tensor<T>& image, Mode mode) {
    auto xq = encode_low(image, mode);
    auto [xz, xk] = encode_high(xq, mode);
    return {xq, xz, xk};
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    stem.visit(join_name(prefix, "stem"), fn);
    s1a.visit(join_name(prefix, "s1a"), fn);
    s1b.visit(join_name(prefix, "s1b"), fn);
    s2a.visit(join_name(prefix, "s2a"), fn);
    s2b.visit(join_name(prefix, "s2b"), fn);
    s3a.visit(join_name(prefix, "s3a"), fn);
    s3b.visit(join_name(prefix, "s3b"), fn);
  }
};

/// One 3x3 conv (with bias) then bilinear resize to the requested size.
template <class T>
Tensor<T> decode_head(const Tensor<T>& f_cat, const Conv2d<T>& head, std::size_t out_h, std::size_t out_w) {
  return bilinear_resize(head(f_cat), out_h, out_w);
}

template <class T>
struct ModelOutput {
  Tensor<T> logits;
  std::vector<Tensor<T>> fused;  // F_k per modality
  std::vector<Tensor<T>> gates;  // sigmoid(G) per GFU (gated fusion only)
};

template <class T>
struct MultiModNet {
  ModelConfig cfg;
  std::vector<Encoder<T>> encoders;
  std::vector<PafParams<T>> pafs;
  std::vector<GfuParams<T>> gfus;  // gfus[k-1] feeds modality k
  Conv2d<T> head;

  MultiModNet() = default;
  explicit MultiModNet(const ModelConfig& config) : cfg(config) {
    cfg.validate();
    std::mt19937_64 rng(cfg.init_seed);
    for (std::size_t k = 0; k < cfg.modalities.size(); ++k) {
      const auto& m = cfg.modalities[k];
      encoders.emplace_back(m.encoder, rng);
      pafs.emplace_back(m.paf(), rng);
      if (k > 0) gfus.emplace_back(cfg.modalities[k - 1].output, m.encoder.d4, cfg.fusion, rng);
    }
    head = Conv2d<T>(cfg.decoder_channels(), cfg.num_classes, 3, 1, true, rng);
  }

  ModelOutput<T> forward(const std::vector<Tensor<T>>& inputs, Mode mode) {
    if (inputs.size() != cfg.modalities.size()) {
      throw ShapeError("model expects " + std::to_string(cfg.modalities.size()) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
    const auto& ref = inputs.front();
    for (const auto& x : inputs) {
      if (x.ndim() != 4 || x.dim(0) != ref.dim(0) || x.dim(2) != ref.dim(2) || x.dim(3) != ref.dim(3)) {
        throw ShapeError("model inputs are not co-registered: " + shape_str(ref.shape()) + " vs " +
                         shape_str(x.shape()));
      }
    }
    ModelOutput<T> out;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      PyramidFeatures<T> pyr;
      pyr.xq = encoders[k].encode_low(inputs[k], mode);
      if (k > 0) {
        auto g = gfu_forward(out.fused.back(), pyr.xq, gfus[k - 1], mode);
        pyr.xq = g.out;
        if (g.gate.defined()) out.gates.push_back(g.gate);
      }
      std::tie(pyr.xz, pyr.xk) = encoders[k].encode_high(pyr.xq, mode);
      out.fused.push_back(paf_forward(pyr, pafs[k], mode).f);
    }
    auto f_cat = out.fused.size() == 1 ? out.fused.front() : concat(out.fused, 1);
    out.logits = decode_head(f_cat, head, ref.dim(2), ref.dim(3));
    return out;
  }

  template <class Fn>
  void visit(Fn&& fn) {
    for (std::size_t k = 0; k < encoders.size(); ++k) {
      const auto& name = cfg.modalities[k].name;
      encoders[k].visit(name + ".enc", fn);
      pafs[k].visit(name + ".paf", fn);
      if (k > 0) gfus[k - 1].visit(name + ".gfu", fn);
    }
    head.visit("dec", fn);
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Tensor<T>& t, ParamKind kind) {
      if (kind != ParamKind::buffer) n += t.numel();
    });
    return n;
  }
};

// ------------------------------------------------------------------ checkpoints
//
// <dir>/model.cfg     the model config
// <dir>/manifest.txt  one line per tensor: name file shape kind
// <dir>/<file>.ten    float32 payloads

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

template <class T>
void save_checkpoint(MultiModNet<T>& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
  std::size_t index = 0;
  model.visit([&](const std::string& name, Tensor<T>& t, ParamKind kind) {
    char file[32];
    std::snprintf(file, sizeof(file), "t%04zu.ten", index++);
    std::vector<float> v(t.values().begin(), t.values().end());
    detail::write_bytes(dir / file, encode_ten<float>(t.shape(), v));
    manifest << name << " " << file << " " << shape_token(t.shape()) << " " << kind_name(kind) << "\n";
  });
  std::ofstream(dir / "model.cfg", std::ios::trunc) << model.cfg.to_string();
}

struct ManifestEntry {
  std::string name, file, shape, kind;
};

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw std::runtime_error("checkpoint " + dir.string() + " has no manifest.txt");
  std::vector<ManifestEntry> out;
  ManifestEntry e;
  while (in >> e.name >> e.file >> e.shape >> e.kind) out.push_back(e);
  return out;
}

template <class T>
MultiModNet<T> load_checkpoint(const std::filesystem::path& dir) {
  MultiModNet<T> model(ModelConfig::from(KeyValues::load(dir / "model.cfg")));
  std::map<std::string, ManifestEntry> entries;
  for (auto& e : read_manifest(dir)) entries[e.name] = e;
  model.visit([&](const std::string& name, Tensor<T>& t, ParamKind) {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
    auto loaded = load_ten<T>(dir / it->second.file);
    if (loaded.shape() != t.shape()) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + shape_str(loaded.shape()) +
                               ", model expects " + shape_str(t.shape()));
    }
    std::copy(loaded.values().begin(), loaded.values().end(), t.data().begin());
    entries.erase(it);
  });
  if (!entries.empty()) throw std::runtime_error("checkpoint has unknown tensor '" + entries.begin()->first + "'");
  return model;
}

}  // namespace mmnet
